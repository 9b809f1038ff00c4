"""Reverse-time integration of the residual probability-flow ODE.

Starting from pure Gaussian noise at the top of the sigma grid, each step
takes a Heun (trapezoidal) update using the denoiser-derived slope
d = (r - D(r; sigma)) / sigma; the optional stochastic variant first inflates
the noise level of the current state ("churn") before stepping. Volumes can
be integrated whole or as independently evolved patches stitched once at the
end. All randomness flows through a hierarchical seed split
(run -> ensemble member -> patch), so results are reproducible and
concurrency-order independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .diffusion import NoiseSchedule, discretize_sigmas
from .errors import ConfigError, DimensionError, DomainError, NumericError, SpecError
from .volumes import (
    DOMAIN_NORMALIZED,
    PatchRegion,
    ResidualVolume,
    TilingPlan,
    Volume3D,
    stitch,
)

MODE_DETERMINISTIC = "deterministic"
MODE_STOCHASTIC = "stochastic"

# Per-step noise-inflation cap: t_hat = t*(1+gamma) never exceeds sqrt(2)*t.
GAMMA_CAP = math.sqrt(2.0) - 1.0

DEFAULT_S_CHURN = 40.0
DEFAULT_S_NOISE = 1.003


@dataclass(frozen=True)
class SamplerConfig:
    """Step count, stochasticity knobs, and the run seed.

    ``s_t_min``/``s_t_max`` bound the noise levels where churn applies; None
    means the middle 80 percent of the grid by index. Deterministic mode and
    s_churn = 0 imply each other.
    """

    n_steps: int = 100
    s_churn: float = 0.0
    s_noise: float = DEFAULT_S_NOISE
    s_t_min: Optional[float] = None
    s_t_max: Optional[float] = None
    mode: str = MODE_DETERMINISTIC
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 2:
            raise SpecError(f"need at least 2 steps, got {self.n_steps}")
        if self.mode not in (MODE_DETERMINISTIC, MODE_STOCHASTIC):
            raise SpecError(f"unknown sampler mode {self.mode!r}")
        if self.s_churn < 0:
            raise SpecError(f"s_churn must be >= 0, got {self.s_churn}")
        if (self.mode == MODE_DETERMINISTIC) != (self.s_churn == 0):
            raise SpecError(
                f"mode {self.mode!r} inconsistent with s_churn = {self.s_churn}; "
                "deterministic mode means exactly s_churn = 0"
            )
        if self.s_noise <= 0:
            raise SpecError(f"s_noise must be > 0, got {self.s_noise}")
        if self.s_t_min is not None and self.s_t_max is not None and self.s_t_min > self.s_t_max:
            raise SpecError(f"s_t_min {self.s_t_min} > s_t_max {self.s_t_max}")

    @classmethod
    def stochastic(cls, n_steps: int = 100, s_churn: float = DEFAULT_S_CHURN,
                   s_noise: float = DEFAULT_S_NOISE, s_t_min: float | None = None,
                   s_t_max: float | None = None, seed: int = 0) -> "SamplerConfig":
        return cls(n_steps=n_steps, s_churn=s_churn, s_noise=s_noise, s_t_min=s_t_min,
                   s_t_max=s_t_max, mode=MODE_STOCHASTIC, seed=seed)


@dataclass(eq=False)
class DenoiseResult:
    """Sampled residual, the denoised volume it implies, and run bookkeeping.

    ``nfe_used`` counts denoiser evaluations along one voxel's trajectory:
    two per step except the final Euler-only step into sigma = 0.
    ``per_patch_seams`` is the largest voxelwise gap between any single
    patch's residual and the stitched field (0 in whole-volume mode).
    """

    residual: ResidualVolume
    denoised: Volume3D
    nfe_used: int
    per_patch_seams: float = 0.0
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        recomputed = self.residual.paired_low.data.astype(np.float64) - self.residual.data
        if not np.array_equal(recomputed, self.denoised.data):
            raise NumericError("denoised volume is not exactly low - residual")
        if self.nfe_used < 1:
            raise NumericError(f"nfe_used must be >= 1, got {self.nfe_used}")


def _eval_denoiser(denoiser: Callable, r, t: float, context: str):
    out = denoiser(r, t)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"denoiser returned non-finite values {context}")
    return out


def heun_step(r, t_cur: float, t_next: float, denoiser: Callable,
              gamma: float = 0.0, s_noise: float = 1.0,
              rng: np.random.Generator | None = None):
    """One integration step from t_cur down to t_next.

    Returns (state, evals). With gamma > 0 the state is first re-noised to
    t_hat = t_cur*(1+gamma); the trapezoidal correction is skipped when
    stepping into t_next = 0 (final Euler step).
    """
    if not t_cur > t_next or t_next < 0:
        raise DomainError(f"need t_cur > t_next >= 0, got {t_cur}, {t_next}")
    if gamma < 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    if gamma > 0:
        if rng is None:
            raise DomainError("churned step needs a random stream")
        t_hat = t_cur * (1.0 + gamma)
        r_hat = r + math.sqrt(t_hat**2 - t_cur**2) * s_noise * rng.standard_normal(np.shape(r))
    else:
        t_hat = t_cur
        r_hat = r
    ctx = f"at step t={t_cur:g} -> {t_next:g}"
    d_cur = (r_hat - _eval_denoiser(denoiser, r_hat, t_hat, ctx)) / t_hat
    r_euler = r_hat + (t_next - t_hat) * d_cur
    if t_next == 0:
        return r_euler, 1
    d_next = (r_euler - _eval_denoiser(denoiser, r_euler, t_next, ctx)) / t_next
    r_next = r_hat + (t_next - t_hat) * 0.5 * (d_cur + d_next)
    return r_next, 2


def churn_bounds(cfg: SamplerConfig, sigmas: np.ndarray) -> tuple[float, float]:
    """Effective [lo, hi] noise-level window where churn applies."""
    nodes = sigmas[:-1]  # drop the terminal 0
    n = len(nodes)
    lo = cfg.s_t_min if cfg.s_t_min is not None else float(nodes[int(round(0.9 * (n - 1)))])
    hi = cfg.s_t_max if cfg.s_t_max is not None else float(nodes[int(round(0.1 * (n - 1)))])
    return lo, hi


def integrate(r0, sigmas: np.ndarray, denoiser: Callable, cfg: SamplerConfig,
              rng: np.random.Generator | None = None):
    """Run the full reverse trajectory over a decreasing sigma grid.

    Works on arrays of any shape; the denoiser is called as
    denoiser(state, sigma). Returns (final state, total evaluations).
    """
    if len(sigmas) < 2 or sigmas[-1] != 0:
        raise DomainError("sigma grid must end at the terminal 0")
    r = np.asarray(r0, dtype=np.float64)
    lo, hi = churn_bounds(cfg, sigmas)
    gamma_base = min(cfg.s_churn / cfg.n_steps, GAMMA_CAP)
    nfe = 0
    for t_cur, t_next in zip(sigmas[:-1], sigmas[1:]):
        active = cfg.s_churn > 0 and lo <= t_cur <= hi
        gamma = gamma_base if active else 0.0
        r, evals = heun_step(r, float(t_cur), float(t_next), denoiser,
                             gamma=gamma, s_noise=cfg.s_noise, rng=rng)
        nfe += evals
    return r, nfe


def _model_denoiser(model, low, mr, coords) -> Callable:
    cond = (low, mr, coords)

    def denoiser(r, sigma):
        return np.asarray(model.denoise(r, sigma, cond), dtype=np.float64)

    return denoiser


def _init_rng(seed: int, member: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, member, 0]))


def _patch_rng(seed: int, member: int, patch_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, member, 1 + patch_index]))


# Deterministic patch trajectories share no noise, so they can ride through the
# model in fixed-size batches without changing any individual result.
_PATCH_CHUNK = 64


def _sample_patches(model, plan: TilingPlan, low: np.ndarray, mr: np.ndarray | None,
                    sigmas: np.ndarray, cfg: SamplerConfig,
                    member: int) -> tuple[list[tuple[PatchRegion, np.ndarray]], int]:
    """Integrate every plan region on its own (seed, member, patch) stream.

    Each patch draws its initial field, and any churn noise, from its private
    stream, so overlapping regions carry independent realizations and blending
    averages them down. Stochastic trajectories run one at a time to keep each
    stream's draw order fixed; deterministic ones never touch a generator and
    are batched in chunks of ``_PATCH_CHUNK``. Returns the (region, residual)
    pairs plus the per-trajectory evaluation count.
    """
    t0 = float(sigmas[0])
    regions = plan.regions
    outputs: list[tuple[PatchRegion, np.ndarray]] = []
    if cfg.s_churn > 0:
        for p_idx, region in enumerate(regions):
            gen = _patch_rng(cfg.seed, member, p_idx)
            init = gen.standard_normal(region.size) * t0
            denoiser = _model_denoiser(
                model,
                low[region.slices],
                mr[region.slices] if mr is not None else None,
                region.coord_channels,
            )
            y_patch, nfe = integrate(init, sigmas, denoiser, cfg, rng=gen)
            outputs.append((region, y_patch))
        return outputs, nfe
    for start in range(0, len(regions), _PATCH_CHUNK):
        chunk = regions[start:start + _PATCH_CHUNK]
        init = np.stack([
            _patch_rng(cfg.seed, member, start + k).standard_normal(region.size)
            for k, region in enumerate(chunk)
        ]) * t0
        low_b = np.stack([low[region.slices] for region in chunk])
        mr_b = np.stack([mr[region.slices] for region in chunk]) if mr is not None else None
        coords_b = np.stack([region.coord_channels for region in chunk])
        denoiser = _model_denoiser(model, low_b, mr_b, coords_b)
        y_b, nfe = integrate(init, sigmas, denoiser, cfg)
        outputs.extend((region, y_b[k]) for k, region in enumerate(chunk))
    return outputs, nfe


def sample_residual(model, x_low: Volume3D, x_mr: Volume3D | None = None,
                    plan: TilingPlan | None = None, cfg: SamplerConfig = SamplerConfig(),
                    sched: NoiseSchedule | None = None, residual_scale: float = 1.0,
                    member: int = 0) -> DenoiseResult:
    """Draw one residual field for a low-dose volume and denoise it.

    ``plan = None`` integrates the whole volume in one trajectory; otherwise
    each plan region evolves an independent realization on its own
    (seed, member, patch) noise stream and the final residuals are
    blend-stitched, so overlap averaging damps the per-trajectory sampling
    dispersion. A plan whose single region spans the volume takes the
    whole-volume path, so the two modes agree bitwise in that degenerate
    case. The sampled field lives in the standardized-residual space the
    model was trained in; ``residual_scale`` maps it back to normalized
    intensity units (r = sampled / residual_scale).
    """
    if sched is None:
        sched = getattr(model, "schedule", None) or NoiseSchedule()
    if x_low.domain != DOMAIN_NORMALIZED:
        raise DomainError(f"sampling requires a normalized volume, got domain {x_low.domain!r}")
    use_mr = bool(getattr(getattr(model, "config", None), "use_mr", x_mr is not None))
    if use_mr and x_mr is None:
        raise ConfigError("model conditions on MR but no MR volume was given")
    if not use_mr and x_mr is not None:
        raise ConfigError("model does not condition on MR but an MR volume was given")
    if x_mr is not None and x_mr.shape != x_low.shape:
        raise DimensionError(f"MR shape {x_mr.shape} != low-dose shape {x_low.shape}")
    if residual_scale <= 0:
        raise ConfigError(f"residual scale must be > 0, got {residual_scale}")
    if plan is not None and plan.shape != x_low.shape:
        raise ConfigError(f"tiling plan shape {plan.shape} != volume shape {x_low.shape}")

    sigmas = discretize_sigmas(cfg.n_steps, sched)
    t0 = float(sigmas[0])
    mr_data = x_mr.data.astype(np.float64) if x_mr is not None else None
    low_data = x_low.data.astype(np.float64)

    degenerate = (
        plan is not None
        and len(plan.regions) == 1
        and plan.regions[0].size == x_low.shape
    )
    if plan is None or degenerate:
        whole = PatchRegion((0, 0, 0), x_low.shape, x_low.shape)
        init = _init_rng(cfg.seed, member).standard_normal(x_low.shape) * t0
        denoiser = _model_denoiser(model, low_data, mr_data, whole.coord_channels)
        y, nfe = integrate(init, sigmas, denoiser, cfg, rng=_patch_rng(cfg.seed, member, 0))
        seams = 0.0
    else:
        outputs, nfe = _sample_patches(model, plan, low_data, mr_data, sigmas, cfg, member)
        stitched = stitch(outputs, plan)
        y = stitched.data
        seams = max(
            float(np.max(np.abs(y_patch - y[region.slices]))) for region, y_patch in outputs
        )

    residual = ResidualVolume(data=y / residual_scale, paired_low=x_low)
    denoised = Volume3D(data=low_data - residual.data, spacing=x_low.spacing,
                        domain=DOMAIN_NORMALIZED, name=x_low.name)
    seeds = {"seed": cfg.seed, "member": member,
             "n_patches": 1 if plan is None else len(plan.regions)}
    return DenoiseResult(residual=residual, denoised=denoised, nfe_used=nfe,
                         per_patch_seams=seams, seeds=seeds)


def sample_ensemble(model, x_low: Volume3D, x_mr: Volume3D | None = None,
                    cfg: SamplerConfig = SamplerConfig(), n_realizations: int = 8,
                    plan: TilingPlan | None = None, sched: NoiseSchedule | None = None,
                    residual_scale: float = 1.0,
                    member_seeds: list[int] | None = None) -> tuple[list[DenoiseResult], Volume3D]:
    """Independent sampler runs plus the voxelwise std of the denoised volumes.

    Members get distinct sub-streams of the run seed unless ``member_seeds``
    pins them explicitly (identical entries give identical realizations).
    """
    if n_realizations < 2:
        raise ConfigError(f"an ensemble needs at least 2 realizations, got {n_realizations}")
    if member_seeds is not None and len(member_seeds) != n_realizations:
        raise ConfigError(f"got {len(member_seeds)} member seeds for {n_realizations} realizations")
    results = []
    for k in range(n_realizations):
        if member_seeds is not None:
            run_cfg = SamplerConfig(n_steps=cfg.n_steps, s_churn=cfg.s_churn, s_noise=cfg.s_noise,
                                    s_t_min=cfg.s_t_min, s_t_max=cfg.s_t_max, mode=cfg.mode,
                                    seed=member_seeds[k])
            results.append(sample_residual(model, x_low, x_mr, plan=plan, cfg=run_cfg,
                                           sched=sched, residual_scale=residual_scale, member=0))
        else:
            results.append(sample_residual(model, x_low, x_mr, plan=plan, cfg=cfg,
                                           sched=sched, residual_scale=residual_scale, member=k))
    stack = np.stack([res.denoised.data for res in results])
    # Shifted variance: translation-invariant, and bitwise-identical members
    # yield an exactly zero field.
    spread = (stack - stack[0]).std(axis=0, ddof=1)
    std = Volume3D(data=spread, spacing=x_low.spacing,
                   domain=DOMAIN_NORMALIZED, name=f"{x_low.name}_std")
    return results, std
