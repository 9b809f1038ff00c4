"""Training loop: dataset sampling, batched DSM objective, Adam, EMA, resume.

Reproducibility design: every iteration derives its own generator from
SeedSequence([seed, iteration]) (iteration numbering starts at 1; [seed, 0]
seeds model initialization), so resuming from a checkpoint replays the exact
draw sequence of an uninterrupted run with no carried RNG state. Residuals
are standardized once per dataset: y = r * (sigma_data / residual_std), with
the scale persisted in every checkpoint so inference can undo it.

Dataset manifests are JSON files listing cases with co-registered
normal-dose, low-dose (per factor), and MR volumes in the RV3D layout. Data
sampling is pure and may run ahead of optimization; parameter updates and
telemetry writes stay on the calling thread.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import (
    NoiseSchedule,
    LossRecord,
    lambda_weight,
    sample_training_sigma,
)
from .errors import ConfigError, ManifestError, NumericError
from .scorenet import ScoreModel, ScoreModelConfig, load_checkpoint, save_checkpoint
from .volumes import PatchRegion, compute_residual, read_rv3d, write_rv3d, Volume3D

MANIFEST_FORMAT = "csrd-dataset-v1"

PRESETS = {
    "paper": dict(lr=0.002, batch_size=16, total_iters=65000, patch_size=(64, 64, 64),
                  base_channels=64, depth=3, checkpoint_every=5000),
    "phantom": dict(lr=0.002, lr_schedule="cosine", batch_size=16, total_iters=5000,
                    patch_size=(16, 16, 16), base_channels=16, depth=3,
                    ema_decay=0.995, checkpoint_every=1000),
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule plus the architecture fields that define a run."""

    dataset_manifest: str
    out_dir: str = "train_run"
    lr: float = 0.002
    lr_schedule: str = "constant"
    batch_size: int = 16
    total_iters: int = 65000
    patch_size: tuple = (64, 64, 64)
    ema_decay: float = 0.999
    seed: int = 0
    use_mr: bool = True
    checkpoint_every: int = 5000
    base_channels: int = 64
    depth: int = 3
    time_embed_dim: int = 64
    mixed_precision: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        patch = tuple(int(v) for v in self.patch_size)
        object.__setattr__(self, "patch_size", patch)
        div = 2**self.depth
        if len(patch) != 3 or any(v < div or v % div != 0 for v in patch):
            raise ConfigError(f"patch size {patch} must be 3 positive multiples of 2^depth = {div}")


def preset_config(name: str, dataset_manifest: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[name])
    fields.update(overrides)
    return TrainConfig(dataset_manifest=dataset_manifest, **fields)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for a 1-based optimization step.

    Pure in (cfg, step) so a resumed run replays the same values. Cosine decays
    from cfg.lr toward zero over the full horizon.
    """
    if cfg.lr_schedule == "constant":
        return cfg.lr
    phase = (step - 1) / cfg.total_iters
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * phase))


# ---------------------------------------------------------------------------
# Dataset

@dataclass
class TrainingPair:
    case_id: str
    factor: int
    residual: np.ndarray  # standardized, float64
    low: np.ndarray
    mr: np.ndarray

    @property
    def label(self) -> str:
        return f"{self.case_id}@{self.factor}x"


class TrainingDataset:
    """In-memory (case, factor) pairs with standardized residuals."""

    def __init__(self, pairs, residual_std: float, residual_scale: float,
                 manifest_path: Path, manifest_digest: str):
        self.pairs = pairs
        self.residual_std = residual_std
        self.residual_scale = residual_scale
        self.manifest_path = manifest_path
        self.manifest_digest = manifest_digest

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def _require(entry: dict, key: str, ident: str):
    if key not in entry:
        raise ManifestError(f"case {ident}: manifest entry missing key {key!r}")
    return entry[key]


def _load_case_volume(base: Path, rel: str, ident: str) -> Volume3D:
    path = base / rel
    if not path.exists():
        raise ManifestError(f"case {ident}: missing file {path}")
    try:
        return read_rv3d(path)
    except Exception as exc:
        raise ManifestError(f"case {ident}: unreadable volume {path}: {exc}") from exc


def make_dataset(manifest: str, cfg: TrainConfig) -> TrainingDataset:
    """Load every (case, factor) pair named by the manifest, standardized."""
    mpath = Path(manifest)
    if not mpath.exists():
        raise ManifestError(f"dataset manifest not found: {mpath}")
    raw = mpath.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    doc = json.loads(raw)
    if doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"unsupported manifest format {doc.get('format')!r}")
    cases = doc.get("cases", [])
    if not cases:
        raise ManifestError("manifest lists no cases")
    base = mpath.parent
    pairs = []
    sq_sum = 0.0
    lin_sum = 0.0
    n_vox = 0
    for entry in cases:
        ident = entry.get("id", "<unnamed>")
        nor = _load_case_volume(base, _require(entry, "nor", ident), ident)
        mr = _load_case_volume(base, _require(entry, "mr", ident), ident)
        lows = _require(entry, "low", ident)
        if not lows:
            raise ManifestError(f"case {ident}: no low-dose volumes listed")
        for shape_check, label in ((mr, "mr"),):
            if shape_check.shape != nor.shape:
                raise ManifestError(
                    f"case {ident}: {label} shape {shape_check.shape} != nor shape {nor.shape}")
        if any(s < p for s, p in zip(nor.shape, cfg.patch_size)):
            raise ManifestError(
                f"case {ident}: volume shape {nor.shape} smaller than patch {cfg.patch_size}")
        for factor_key, rel in sorted(lows.items(), key=lambda kv: float(kv[0])):
            low = _load_case_volume(base, rel, ident)
            if low.shape != nor.shape:
                raise ManifestError(
                    f"case {ident}: low@{factor_key} shape {low.shape} != nor shape {nor.shape}")
            residual = compute_residual(low, nor).data
            sq_sum += float((residual**2).sum())
            lin_sum += float(residual.sum())
            n_vox += residual.size
            pairs.append(TrainingPair(
                case_id=ident, factor=int(float(factor_key)), residual=residual,
                low=np.asarray(low.data, dtype=np.float64),
                mr=np.asarray(mr.data, dtype=np.float64)))
    mean = lin_sum / n_vox
    var = sq_sum / n_vox - mean * mean
    residual_std = float(np.sqrt(max(var, 0.0)))
    sched = NoiseSchedule()
    # Degenerate all-zero residuals (oracle datasets) keep unit scale.
    residual_scale = sched.sigma_data / residual_std if residual_std > 0 else 1.0
    for pair in pairs:
        pair.residual = pair.residual * residual_scale
    return TrainingDataset(pairs, residual_std, residual_scale, mpath, digest)


# ---------------------------------------------------------------------------
# Batch drawing (the per-iteration randomness contract)

@dataclass
class BatchDraw:
    """One iteration's draws, in the documented order.

    Per iteration i >= 1, a fresh default_rng(SeedSequence([seed, i])) emits:
    pair indices [B], then per-sample per-axis origins, then sigmas [B], then
    unit noise [B, *patch].
    """

    iteration: int
    pair_indices: np.ndarray
    origins: list
    sigmas: np.ndarray
    noise: np.ndarray
    residual: np.ndarray
    low: np.ndarray
    mr: np.ndarray
    coords: np.ndarray


def draw_batch(dataset: TrainingDataset, cfg: TrainConfig, iteration: int,
               sched: NoiseSchedule | None = None) -> BatchDraw:
    if sched is None:
        sched = NoiseSchedule()
    if iteration < 1:
        raise ConfigError(f"iterations are numbered from 1, got {iteration}")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration]))
    B = cfg.batch_size
    patch = cfg.patch_size
    pair_indices = rng.integers(0, dataset.n_pairs, size=B)
    origins = []
    for b in range(B):
        shape = dataset.pairs[int(pair_indices[b])].residual.shape
        origins.append(tuple(int(rng.integers(0, shape[a] - patch[a] + 1)) for a in range(3)))
    # Clamp the lognormal prior to schedule support: ~1e-5 of its mass falls
    # outside and would trip the model's level guard on long runs.
    sigmas = np.clip(np.atleast_1d(sample_training_sigma(rng, sched, size=B)),
                     sched.sigma_min, sched.sigma_max)
    noise = rng.standard_normal((B, *patch))

    res = np.empty((B, *patch))
    low = np.empty((B, *patch))
    mr = np.empty((B, *patch))
    coords = np.empty((B, 3, *patch))
    for b in range(B):
        pair = dataset.pairs[int(pair_indices[b])]
        region = PatchRegion(origins[b], patch, pair.residual.shape)
        res[b] = pair.residual[region.slices]
        low[b] = pair.low[region.slices]
        mr[b] = pair.mr[region.slices]
        coords[b] = region.coord_channels
    return BatchDraw(iteration=iteration, pair_indices=pair_indices, origins=origins,
                     sigmas=sigmas, noise=noise, residual=res, low=low, mr=mr, coords=coords)


def batch_loss(model: ScoreModel, draw: BatchDraw, cfg: TrainConfig,
               dataset: TrainingDataset, sched: NoiseSchedule | None = None):
    """Mean weighted DSM loss over the batch; returns (tensor, LossRecord)."""
    if sched is None:
        sched = model.schedule
    dtype = next(model.parameters()).dtype
    y = torch.as_tensor(draw.residual, dtype=dtype)
    eps = torch.as_tensor(draw.noise, dtype=dtype)
    sig = torch.as_tensor(draw.sigmas, dtype=dtype)
    noisy = y + sig.reshape(-1, 1, 1, 1) * eps
    mr = torch.as_tensor(draw.mr, dtype=dtype) if cfg.use_mr else None
    denoised = model(noisy, sig, torch.as_tensor(draw.low, dtype=dtype), mr,
                     torch.as_tensor(draw.coords, dtype=dtype))
    per = ((denoised - y) ** 2).mean(dim=(1, 2, 3))
    weights = torch.as_tensor(lambda_weight(draw.sigmas, sched), dtype=dtype)
    loss = (weights * per).mean()
    value = float(loss.detach())
    if not np.isfinite(value):
        bad = [f"{dataset.pairs[int(i)].label} origin={o} sigma={s:.4g}"
               for i, o, s in zip(draw.pair_indices, draw.origins, draw.sigmas)]
        raise NumericError(
            f"non-finite loss at iteration {draw.iteration}; batch: " + "; ".join(bad))
    record = LossRecord(sigma=float(draw.sigmas.mean()), per_patch_loss=value, weight=1.0)
    return loss, record


# ---------------------------------------------------------------------------
# Run identity

_HASH_FIELDS = ("lr", "lr_schedule", "batch_size", "patch_size", "ema_decay", "seed",
                "use_mr", "base_channels", "depth", "time_embed_dim", "mixed_precision")


def trajectory_hash(cfg: TrainConfig, manifest_digest: str) -> str:
    """Digest of every field that determines the optimization trajectory.

    Under the constant schedule total_iters is deliberately excluded so a
    resumed run extending the horizon matches the direct run it continues.
    A decaying schedule is anchored to the horizon, so there total_iters
    shapes every step and joins the digest.
    """
    core = {name: getattr(cfg, name) for name in _HASH_FIELDS}
    core["patch_size"] = list(cfg.patch_size)
    core["manifest"] = manifest_digest
    if cfg.lr_schedule != "constant":
        core["total_iters"] = cfg.total_iters
    blob = json.dumps(core, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    checkpoints: list
    telemetry_path: str
    losses: list
    model: ScoreModel
    dataset: TrainingDataset
    config: TrainConfig


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"ckpt_{step:06d}.pt"


def _save_train_checkpoint(model, optimizer, cfg, dataset, run_hash, step, out_dir):
    path = _checkpoint_path(out_dir, step)
    extra = {
        "train_config": {**asdict(cfg), "patch_size": list(cfg.patch_size)},
        "config_hash": run_hash,
        "residual_scale": dataset.residual_scale,
        "residual_std": dataset.residual_std,
    }
    save_checkpoint(model, path, step=step, extra=extra)
    torch.save(optimizer.state_dict(), str(path) + ".opt")
    return str(path)


def train(cfg: TrainConfig, resume: str | None = None, model: ScoreModel | None = None,
          callback=None) -> TrainResult:
    """Run (or resume) the optimization loop defined by ``cfg``.

    ``model`` injects a pre-built network (fresh runs only); ``callback`` is
    invoked as callback(step, model, loss_record) after each update, on the
    training thread. Emits JSON-lines telemetry and periodic checkpoints;
    returns the final model (EMA weights ride along inside it).
    """
    dataset = make_dataset(cfg.dataset_manifest, cfg)
    run_hash = trajectory_hash(cfg, dataset.manifest_digest)
    sched = NoiseSchedule()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_iter = 1
    optimizer_state = None
    if resume is not None:
        if model is not None:
            raise ConfigError("pass either a model or a resume checkpoint, not both")
        model, manifest = load_checkpoint(resume)
        if manifest.get("config_hash") != run_hash:
            raise ManifestError(
                "resume refused: checkpoint was produced by a different config or dataset "
                f"(stored hash {manifest.get('config_hash')}, current {run_hash})")
        stored_scale = manifest.get("residual_scale")
        if stored_scale is not None and not np.isclose(stored_scale, dataset.residual_scale):
            raise ManifestError(
                f"resume refused: dataset residual scale changed "
                f"({stored_scale} -> {dataset.residual_scale})")
        start_iter = int(manifest["step"]) + 1
        if cfg.total_iters < start_iter:
            raise ConfigError(
                f"checkpoint already at step {start_iter - 1}, total_iters = {cfg.total_iters}")
        opt_path = str(resume) + ".opt"
        if not Path(opt_path).exists():
            raise ManifestError(f"optimizer state missing: {opt_path}")
        optimizer_state = torch.load(opt_path, map_location="cpu", weights_only=True)
    elif model is None:
        init_seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0])
        torch.manual_seed(init_seed)
        model = ScoreModel(
            ScoreModelConfig(base_channels=cfg.base_channels, depth=cfg.depth,
                             use_mr=cfg.use_mr, patch_size=cfg.patch_size,
                             time_embed_dim=cfg.time_embed_dim), sched)
    if model.config.use_mr != cfg.use_mr:
        raise ConfigError("model/config disagreement on MR conditioning")
    if model._ema is None:
        model.init_ema()

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    telemetry_path = out_dir / "telemetry.jsonl"
    checkpoints = []
    losses = []
    t0 = time.monotonic()
    with telemetry_path.open("a") as stream:
        for step in range(start_iter, cfg.total_iters + 1):
            lr_now = lr_at(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr_now
            draw = draw_batch(dataset, cfg, step, sched)
            with torch.autocast(device_type="cpu", dtype=torch.bfloat16,
                                enabled=cfg.mixed_precision):
                loss, record = batch_loss(model, draw, cfg, dataset, sched)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            model.update_ema(cfg.ema_decay)
            losses.append(record.per_patch_loss)
            stream.write(json.dumps({
                "iter": step, "loss": record.per_patch_loss,
                "sigma_mean": record.sigma, "lr": lr_now,
                "wallclock": time.monotonic() - t0,
            }) + "\n")
            if callback is not None:
                callback(step, model, record)
            if step % cfg.checkpoint_every == 0 or step == cfg.total_iters:
                path = _save_train_checkpoint(model, optimizer, cfg, dataset,
                                              run_hash, step, out_dir)
                if not checkpoints or checkpoints[-1] != path:
                    checkpoints.append(path)
    return TrainResult(checkpoints=checkpoints, telemetry_path=str(telemetry_path),
                       losses=losses, model=model, dataset=dataset, config=cfg)


# ---------------------------------------------------------------------------
# Oracle datasets

def write_gaussian_toy_dataset(out_dir, n_cases: int = 4, shape=(16, 16, 16),
                               mean: float = 0.2, std: float = 0.05,
                               seed: int = 0) -> str:
    """Synthetic manifest whose residuals are iid normal voxels.

    low is constant and MR is zero, so no conditioning channel carries any
    information about the residual (nor = low - residual absorbs it). After
    the dataset's own standardization the residual distribution is
    N(mean*sigma_data/std, sigma_data^2), for which the weighted DSM
    objective has an analytic minimum of exactly 1 at every noise level.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    cases = []
    for c in range(n_cases):
        ident = f"toy_{c:04d}"
        low = np.full(shape, 0.5, dtype=np.float32)
        residual = (mean + std * rng.standard_normal(shape)).astype(np.float32)
        nor = low - residual
        mr = np.zeros(shape, dtype=np.float32)
        write_rv3d(Volume3D(nor, name=f"{ident}_nor"), out / f"{ident}_nor.rv3d")
        write_rv3d(Volume3D(low, name=f"{ident}_low"), out / f"{ident}_low2x.rv3d")
        write_rv3d(Volume3D(mr, name=f"{ident}_mr"), out / f"{ident}_mr.rv3d")
        cases.append({"id": ident, "nor": f"{ident}_nor.rv3d", "mr": f"{ident}_mr.rv3d",
                      "low": {"2": f"{ident}_low2x.rv3d"}})
    manifest = {"format": MANIFEST_FORMAT, "shape": list(shape), "cases": cases}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return str(mpath)


def write_zero_residual_dataset(out_dir, shape=(16, 16, 16)) -> str:
    """One-case manifest with low == nor, so the residual is exactly zero."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nor = np.full(shape, 0.5, dtype=np.float32)
    mr = np.zeros(shape, dtype=np.float32)
    write_rv3d(Volume3D(nor, name="zero_nor"), out / "zero_nor.rv3d")
    write_rv3d(Volume3D(nor.copy(), name="zero_low"), out / "zero_low1x.rv3d")
    write_rv3d(Volume3D(mr, name="zero_mr"), out / "zero_mr.rv3d")
    manifest = {"format": MANIFEST_FORMAT, "shape": list(shape), "cases": [
        {"id": "zero", "nor": "zero_nor.rv3d", "mr": "zero_mr.rv3d",
         "low": {"1": "zero_low1x.rv3d"}}]}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return str(mpath)
