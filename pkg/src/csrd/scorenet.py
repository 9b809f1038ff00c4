"""Conditioned 3D U-shaped denoiser with noise-level modulation.

The network sees the noisy residual concatenated with its conditioning
fields (low-dose volume, optional MR, three normalized coordinate channels)
and predicts the clean residual through the skip/output preconditioning of
the diffusion module. The output head is zero-initialized, so an untrained
model is exactly c_skip * input: near-identity at small noise levels, which
keeps early training well-behaved.

Fully convolutional: any spatial size divisible by 2^depth works, whole
volumes included. Boundary handling is zero padding except in the
shift-equivariance probe, which requires a periodic-padding model.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, precond_coeffs
from .errors import ConfigError, DimensionError, DomainError, ManifestError

# Forward evaluations slightly above sigma_max occur when the stochastic
# sampler inflates a churned step; allow that headroom, reject further.
SIGMA_HEADROOM = 1.5


def _groups(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class ScoreModelConfig:
    """Architecture hyperparameters for the conditioned denoiser."""

    base_channels: int = 64
    depth: int = 3
    use_mr: bool = True
    patch_size: tuple[int, int, int] = (64, 64, 64)
    time_embed_dim: int = 64
    padding_mode: str = "zeros"

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.base_channels < 1 or self.depth < 1 or self.time_embed_dim < 1:
            raise ConfigError(
                f"base_channels, depth, time_embed_dim must be >= 1, got "
                f"{self.base_channels}, {self.depth}, {self.time_embed_dim}"
            )
        div = 2**self.depth
        if len(self.patch_size) != 3 or any(p % div != 0 or p < div for p in self.patch_size):
            raise ConfigError(f"patch size {self.patch_size} must be divisible by 2^depth = {div}")
        if self.padding_mode not in ("zeros", "circular"):
            raise ConfigError(f"padding mode must be 'zeros' or 'circular', got {self.padding_mode!r}")

    @property
    def in_channels(self) -> int:
        # noisy residual + low-dose + optional MR + 3 coordinate channels
        return 5 + int(self.use_mr)


class _Block(nn.Module):
    """GroupNorm -> noise-conditioned affine -> SiLU -> 3x3x3 conv."""

    def __init__(self, cin: int, cout: int, emb_dim: int, padding_mode: str):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(cin), cin)
        self.film = nn.Linear(emb_dim, 2 * cin)
        self.conv = nn.Conv3d(cin, cout, 3, padding=1, padding_mode=padding_mode)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)

    def forward(self, x, emb):
        scale, shift = self.film(emb)[..., None, None, None].chunk(2, dim=1)
        h = self.norm(x) * (1 + scale) + shift
        return self.conv(torch.nn.functional.silu(h))


class ScoreModel(nn.Module):
    """Encoder-decoder denoiser D(noisy residual; sigma, low, mr, coords)."""

    def __init__(self, config: ScoreModelConfig, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.config = config
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        ted = config.time_embed_dim
        pm = config.padding_mode
        self.embed = nn.Sequential(nn.Linear(1, ted), nn.SiLU(), nn.Linear(ted, ted), nn.SiLU())

        chans = [config.base_channels * min(2**i, 8) for i in range(config.depth + 1)]
        self.stem = nn.Conv3d(config.in_channels, chans[0], 3, padding=1, padding_mode=pm)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.depth):
            self.enc_blocks.append(nn.ModuleList([
                _Block(chans[i], chans[i], ted, pm),
                _Block(chans[i], chans[i], ted, pm),
            ]))
            self.downs.append(nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1, padding_mode=pm))
        self.mid = nn.ModuleList([
            _Block(chans[-1], chans[-1], ted, pm),
            _Block(chans[-1], chans[-1], ted, pm),
        ])
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.ups.append(nn.Conv3d(chans[i + 1], chans[i], 3, padding=1, padding_mode=pm))
            self.dec_blocks.append(nn.ModuleList([
                _Block(2 * chans[i], chans[i], ted, pm),
                _Block(chans[i], chans[i], ted, pm),
            ]))
        self.head_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.head = nn.Conv3d(chans[0], 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self._ema: dict[str, torch.Tensor] | None = None

    # -- plumbing ----------------------------------------------------------

    def _check_sigma(self, sigma: torch.Tensor) -> None:
        lo = self.schedule.sigma_min * (1 - 1e-9)
        hi = self.schedule.sigma_max * SIGMA_HEADROOM
        if bool((sigma < lo).any()) or bool((sigma > hi).any()):
            raise DomainError(
                f"sigma outside supported range [{self.schedule.sigma_min}, "
                f"~{hi:g}]: {sigma}"
            )

    def _raw_net(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        skips = []
        for blocks, down in zip(self.enc_blocks, self.downs):
            for b in blocks:
                h = b(h, emb)
            skips.append(h)
            h = down(h)
        for b in self.mid:
            h = b(h, emb)
        for up, blocks, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            h = up(torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skip], dim=1)
            for b in blocks:
                h = b(h, emb)
        return self.head(torch.nn.functional.silu(self.head_norm(h)))

    def forward(self, noisy_residual, sigma, low_patch, mr_patch, coord_channels) -> torch.Tensor:
        """Denoised residual estimate, same spatial shape as the input.

        Accepts one patch ([X,Y,Z] fields, [3,X,Y,Z] coords, scalar sigma) or
        a batch ([B,X,Y,Z] fields, [B,3,X,Y,Z] coords, per-sample sigma).
        """
        if self.config.use_mr and mr_patch is None:
            raise ConfigError("model was built with use_mr=True but no MR patch was given")
        if not self.config.use_mr and mr_patch is not None:
            raise ConfigError("model was built with use_mr=False but an MR patch was given")

        dtype = next(self.parameters()).dtype
        noisy = torch.as_tensor(noisy_residual, dtype=dtype)
        batched = noisy.ndim == 4
        if noisy.ndim == 3:
            noisy = noisy[None]
        elif noisy.ndim != 4:
            raise DimensionError(f"expected [X,Y,Z] or [B,X,Y,Z] input, got shape {tuple(noisy.shape)}")
        B = noisy.shape[0]
        spatial = noisy.shape[1:]
        div = 2**self.config.depth
        if any(int(s) % div != 0 for s in spatial):
            raise DimensionError(f"spatial shape {tuple(spatial)} not divisible by 2^depth = {div}")

        def channel(arr, label):
            t = torch.as_tensor(arr, dtype=dtype)
            if not batched and t.ndim == 3:
                t = t[None]
            if t.shape != noisy.shape:
                raise DimensionError(f"{label} shape {tuple(t.shape)} != residual shape {tuple(noisy.shape)}")
            return t[:, None]

        coords = torch.as_tensor(coord_channels, dtype=dtype)
        if not batched and coords.ndim == 4:
            coords = coords[None]
        if coords.shape != (B, 3, *spatial):
            raise DimensionError(
                f"coord channels shape {tuple(coords.shape)} != {(B, 3, *spatial)}"
            )

        sig = torch.as_tensor(sigma, dtype=dtype).reshape(-1)
        if sig.numel() == 1:
            sig = sig.expand(B)
        elif sig.numel() != B:
            raise DimensionError(f"got {sig.numel()} sigmas for batch of {B}")
        self._check_sigma(sig)

        c_skip, c_out, c_in, c_noise = precond_coeffs(sig, self.schedule)
        parts = [c_in.reshape(B, 1, 1, 1, 1) * noisy[:, None], channel(low_patch, "low-dose patch")]
        if self.config.use_mr:
            parts.append(channel(mr_patch, "MR patch"))
        parts.append(coords)
        x = torch.cat(parts, dim=1)
        if x.shape[1] != self.config.in_channels:
            raise ConfigError(f"assembled {x.shape[1]} channels, config expects {self.config.in_channels}")
        emb = self.embed(c_noise.reshape(B, 1))
        raw = self._raw_net(x, emb)[:, 0]
        out = c_skip.reshape(B, 1, 1, 1) * noisy + c_out.reshape(B, 1, 1, 1) * raw
        return out if batched else out[0]

    def denoise(self, noisy, sigma, cond):
        """Adapter for the loss functions: cond = (low, mr, coords)."""
        low, mr, coords = cond
        want_numpy = not isinstance(noisy, torch.Tensor)
        out = self(noisy, sigma, low, mr, coords)
        if want_numpy:
            return out.detach().cpu().numpy().astype(np.float64)
        return out

    # -- EMA shadow --------------------------------------------------------

    def init_ema(self) -> None:
        self._ema = {
            k: v.detach().clone() for k, v in self.state_dict().items() if v.dtype.is_floating_point
        }

    def update_ema(self, decay: float = 0.999) -> None:
        if self._ema is None:
            self.init_ema()
            return
        with torch.no_grad():
            for k, v in self.state_dict().items():
                if k in self._ema:
                    self._ema[k].mul_(decay).add_(v.detach(), alpha=1.0 - decay)

    def ema_model(self) -> "ScoreModel":
        """Copy of this model carrying the averaged weights (self if no EMA yet)."""
        clone = ScoreModel(self.config, self.schedule)
        state = {k: v.detach().clone() for k, v in self.state_dict().items()}
        if self._ema is not None:
            state.update({k: v.clone() for k, v in self._ema.items()})
        clone.load_state_dict(state)
        return clone


def shift_equivariance_probe(model: ScoreModel, patch: np.ndarray, shift,
                             sigma: float = 0.5, low=None, mr=None, coords=None,
                             shift_coords: bool = False) -> float:
    """Max |D(roll(x)) - roll(D(x))| with content channels rolled together.

    Coordinate channels stay fixed unless ``shift_coords`` is set, in which
    case the returned value measures intended position dependence rather than
    architectural equivariance. Requires a periodic-padding model so the
    boundary does not break translation symmetry.
    """
    if model.config.padding_mode != "circular":
        raise ConfigError("the equivariance probe needs a model built with padding_mode='circular'")
    patch = np.asarray(patch, dtype=np.float64)
    shift = tuple(int(s) for s in shift)
    if len(shift) != 3 or any(abs(s) > patch.shape[a] for a, s in enumerate(shift)):
        raise DimensionError(f"shift {shift} incompatible with patch shape {patch.shape}")
    low = np.zeros_like(patch) if low is None else np.asarray(low, dtype=np.float64)
    if model.config.use_mr:
        mr = np.zeros_like(patch) if mr is None else np.asarray(mr, dtype=np.float64)
    else:
        mr = None
    if coords is None:
        from .volumes import PatchRegion

        coords = PatchRegion((0, 0, 0), patch.shape, patch.shape).coord_channels
    coords = np.asarray(coords, dtype=np.float64)

    def run(p, lo, m, cc):
        with torch.no_grad():
            return model.denoise(p, sigma, (lo, m, cc))

    base = run(patch, low, mr, coords)
    rolled_in = run(
        np.roll(patch, shift, axis=(0, 1, 2)),
        np.roll(low, shift, axis=(0, 1, 2)),
        np.roll(mr, shift, axis=(0, 1, 2)) if mr is not None else None,
        np.roll(coords, shift, axis=(1, 2, 3)) if shift_coords else coords,
    )
    rolled_out = np.roll(base, shift, axis=(0, 1, 2))
    return float(np.max(np.abs(rolled_in - rolled_out)))


# -- checkpoint IO ---------------------------------------------------------

def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(model: ScoreModel, path, step: int, extra: dict | None = None) -> None:
    """Parameter blob plus JSON manifest describing how to rebuild the model."""
    path = Path(path)
    blob = {"params": model.state_dict(), "ema": model._ema}
    torch.save(blob, path)
    manifest = {
        "config": asdict(model.config),
        "schedule": asdict(model.schedule),
        "step": int(step),
    }
    if extra:
        overlap = set(extra) & set(manifest)
        if overlap:
            raise ManifestError(f"extra manifest keys collide with core keys: {sorted(overlap)}")
        manifest.update(extra)
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[ScoreModel, dict]:
    path = Path(path)
    mpath = _manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise ManifestError(f"checkpoint needs both {path} and {mpath}")
    manifest = json.loads(mpath.read_text())
    try:
        config = ScoreModelConfig(**manifest["config"])
        schedule = NoiseSchedule(**manifest["schedule"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise ManifestError(f"checkpoint manifest does not describe a valid model: {exc}") from exc
    model = ScoreModel(config, schedule)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    try:
        model.load_state_dict(blob["params"])
    except (KeyError, RuntimeError) as exc:
        raise ManifestError(f"parameter blob inconsistent with manifest config: {exc}") from exc
    model._ema = blob.get("ema")
    return model, manifest
