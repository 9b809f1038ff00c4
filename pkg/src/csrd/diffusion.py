"""Noise schedule, denoiser preconditioning, score identity, training losses.

The forward mollification adds i.i.d. Gaussian noise of standard deviation
sigma to the residual field, with the identity time parameterization
sigma(t) = t. A preconditioned network D estimates the clean residual from a
noisy one; the score of the mollified density is then
(D(r; sigma) - r) / sigma**2, which is what the probability-flow integrator
consumes. Losses here are denoising score matching on single patches and the
patch-subdivision aggregate used for whole-volume training.

Functions accept numpy arrays or torch tensors and preserve the input kind,
so the same code path serves analytic oracles and autograd training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import DomainError, NumericError, SpecError, TilingError
from .volumes import PatchRegion, TilingPlan

# Framework defaults for the schedule and the training-sigma prior.
SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0
SIGMA_DATA = 0.5
P_MEAN = -1.2
P_STD = 1.2


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous noise schedule constants plus the training-sigma prior."""

    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho: float = RHO
    sigma_data: float = SIGMA_DATA
    p_mean: float = P_MEAN
    p_std: float = P_STD

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise SpecError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0:
            raise SpecError(f"rho must be > 0, got {self.rho}")
        if self.sigma_data <= 0:
            raise SpecError(f"sigma_data must be > 0, got {self.sigma_data}")
        if self.p_std <= 0:
            raise SpecError(f"p_std must be > 0, got {self.p_std}")


def _check_positive_sigma(sigma) -> None:
    if isinstance(sigma, torch.Tensor):
        bad = bool((sigma <= 0).any())
    else:
        bad = bool(np.any(np.asarray(sigma) <= 0))
    if bad:
        raise DomainError(f"sigma must be strictly positive, got {sigma}")


def sigma_of_t(t: float, sched: NoiseSchedule) -> float:
    """Noise level at integrator time t; identity parameterization."""
    if t < 0:
        raise DomainError(f"time must be >= 0, got {t}")
    return float(t)


def sigma_times_dsigma(t: float, sched: NoiseSchedule) -> float:
    """sigma(t) * d sigma/dt, the drift magnitude of the probability-flow ODE."""
    if t < 0:
        raise DomainError(f"time must be >= 0, got {t}")
    return float(t)


def discretize_sigmas(n_steps: int, sched: NoiseSchedule) -> np.ndarray:
    """Power-law spaced noise grid from sigma_max down to sigma_min, then 0.

    t_i = (sigma_max^(1/rho) + i/(n-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho.
    Endpoints are pinned exactly; the appended 0 is the integration terminal.
    """
    if n_steps < 2:
        raise DomainError(f"need at least 2 steps, got {n_steps}")
    inv_rho = 1.0 / sched.rho
    hi = sched.sigma_max**inv_rho
    lo = sched.sigma_min**inv_rho
    frac = np.arange(n_steps, dtype=np.float64) / (n_steps - 1)
    grid = (hi + frac * (lo - hi)) ** sched.rho
    grid[0] = sched.sigma_max
    grid[-1] = sched.sigma_min
    return np.append(grid, 0.0)


def sample_training_sigma(rng: np.random.Generator, sched: NoiseSchedule, size=None):
    """Log-normal noise-level draw: ln sigma ~ Normal(p_mean, p_std^2)."""
    return np.exp(sched.p_mean + sched.p_std * rng.standard_normal(size))


def precond_coeffs(sigma, sched: NoiseSchedule):
    """(c_skip, c_out, c_in, c_noise) for the given noise level(s).

    c_in normalizes the network input to unit variance, c_skip/c_out mix the
    network output with a skip path so the target stays well-scaled at every
    sigma, and c_noise is the log-level fed to the noise embedding.
    """
    _check_positive_sigma(sigma)
    sd = sched.sigma_data
    s2 = sigma * sigma
    denom = s2 + sd * sd
    c_skip = (sd * sd) / denom
    c_out = sigma * sd / denom**0.5
    c_in = 1.0 / denom**0.5
    if isinstance(sigma, torch.Tensor):
        c_noise = torch.log(sigma) / 4.0
    else:
        c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def lambda_weight(sigma, sched: NoiseSchedule):
    """Loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2 = 1 / c_out^2."""
    _check_positive_sigma(sigma)
    sd = sched.sigma_data
    return (sigma * sigma + sd * sd) / (sigma * sd) ** 2


def _bcast(coef, like):
    """Reshape a per-sample coefficient vector for broadcasting against like."""
    ndim = like.ndim if hasattr(like, "ndim") else 0
    if hasattr(coef, "ndim") and coef.ndim == 1 and ndim > 1:
        return coef.reshape((-1,) + (1,) * (ndim - 1))
    return coef


def precondition(raw_net_output, noisy_input, sigma, sched: NoiseSchedule):
    """Combine skip path and network output into the denoised estimate.

    D = c_skip * r_noisy + c_out * F(...), where F was fed c_in * r_noisy.
    """
    c_skip, c_out, _, _ = precond_coeffs(sigma, sched)
    return _bcast(c_skip, noisy_input) * noisy_input + _bcast(c_out, raw_net_output) * raw_net_output


def score_from_denoiser(denoised, noisy_r, sigma):
    """Score of the mollified density: (D(r; sigma) - r) / sigma^2."""
    _check_positive_sigma(sigma)
    if denoised.shape != noisy_r.shape:
        raise DomainError(f"shape mismatch: denoised {denoised.shape} vs noisy {noisy_r.shape}")
    s2 = sigma * sigma
    return (denoised - noisy_r) / _bcast(s2, noisy_r)


@dataclass
class LossRecord:
    """One loss evaluation: unweighted per-voxel mean square error and its weight.

    ``tensor`` carries the weighted loss as an autograd node when the model
    ran under torch; it is None for pure-array evaluations.
    """

    sigma: float
    per_patch_loss: float
    weight: float
    region: Optional[PatchRegion] = None
    tensor: object = None

    def __post_init__(self):
        if not math.isfinite(self.per_patch_loss) or self.per_patch_loss < 0:
            raise NumericError(f"per-patch loss must be finite and >= 0, got {self.per_patch_loss}")
        if not self.weight > 0:
            raise NumericError(f"loss weight must be > 0, got {self.weight}")

    @property
    def weighted(self) -> float:
        return self.weight * self.per_patch_loss


def dsm_loss(model, residual_patch, cond, sigma, noise_draw, sched: NoiseSchedule | None = None,
             region: PatchRegion | None = None) -> LossRecord:
    """Denoising score-matching loss on one patch.

    ``noise_draw`` is a standard-normal draw of the patch shape; it is scaled
    by sigma here so callers can manage seed streams independently of the
    noise level. ``cond`` is the (low_dose, mr_or_None, coords) conditioning
    triple restricted to the same region. Loss is
    lambda(sigma) * mean((D(y + sigma*eps; sigma, cond) - y)^2) with the mean
    taken per voxel.
    """
    if sched is None:
        sched = getattr(model, "schedule", None) or NoiseSchedule()
    _check_positive_sigma(sigma)
    if noise_draw.shape != residual_patch.shape:
        raise DomainError(
            f"noise shape {noise_draw.shape} != patch shape {residual_patch.shape}"
        )
    noisy = residual_patch + sigma * noise_draw
    denoised = model.denoise(noisy, sigma, cond)
    diff = denoised - residual_patch
    per = (diff * diff).mean()
    value = float(per.detach()) if isinstance(per, torch.Tensor) else float(per)
    if not math.isfinite(value):
        where = f" in region origin={region.origin}" if region is not None else ""
        raise NumericError(f"model produced non-finite output at sigma={float(sigma):g}{where}")
    weight = float(lambda_weight(float(sigma), sched))
    tensor = per * weight if isinstance(per, torch.Tensor) else None
    return LossRecord(sigma=float(sigma), per_patch_loss=value, weight=weight,
                      region=region, tensor=tensor)


def _restrict(arr, region: PatchRegion):
    return arr[region.slices] if arr is not None else None


def patchwise_loss(model, volume_triple, plan: TilingPlan, n_patches_per_step: int,
                   rng: np.random.Generator, sched: NoiseSchedule | None = None,
                   sigma: float | None = None) -> LossRecord:
    """Aggregate loss over regions drawn uniformly from a tiling plan.

    Sums dsm_loss over ``n_patches_per_step`` sampled regions, restricting the
    residual and all conditioning fields to each region. Pass a stride-1 plan
    to sample every valid origin. ``sigma = None`` draws a fresh level per
    region from the training prior.
    """
    if sched is None:
        sched = getattr(model, "schedule", None) or NoiseSchedule()
    if n_patches_per_step < 1:
        raise DomainError(f"need at least one patch per step, got {n_patches_per_step}")
    residual, low, mr = volume_triple
    for name, arr in (("low", low), ("mr", mr)):
        if arr is not None and arr.shape != residual.shape:
            raise DomainError(f"{name} volume shape {arr.shape} != residual shape {residual.shape}")
    for region in plan.regions:
        if any(region.size[a] > residual.shape[a] for a in range(3)):
            raise TilingError(f"region size {region.size} exceeds volume shape {residual.shape}")
    total = 0.0
    total_tensor = None
    indices = rng.integers(0, len(plan.regions), size=n_patches_per_step)
    last_sigma = None
    for idx in indices:
        region = plan.regions[int(idx)]
        y = _restrict(residual, region)
        cond = (_restrict(low, region), _restrict(mr, region), region.coord_channels)
        level = float(sample_training_sigma(rng, sched)) if sigma is None else float(sigma)
        eps = rng.standard_normal(y.shape)
        if isinstance(y, torch.Tensor):
            eps = torch.as_tensor(eps, dtype=y.dtype)
        rec = dsm_loss(model, y, cond, level, eps, sched=sched, region=region)
        total += rec.weighted
        if rec.tensor is not None:
            total_tensor = rec.tensor if total_tensor is None else total_tensor + rec.tensor
        last_sigma = level
    return LossRecord(sigma=float(last_sigma), per_patch_loss=total, weight=1.0,
                      region=None, tensor=total_tensor)
