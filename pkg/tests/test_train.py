"""Training-loop tests: draw contracts, determinism, resume, loss oracles."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from csrd.diffusion import NoiseSchedule, lambda_weight
from csrd.errors import ConfigError, ManifestError, NumericError
from csrd.scorenet import ScoreModel, ScoreModelConfig
from csrd.train import (
    MANIFEST_FORMAT,
    PRESETS,
    BatchDraw,
    TrainConfig,
    batch_loss,
    draw_batch,
    make_dataset,
    preset_config,
    train,
    trajectory_hash,
    write_gaussian_toy_dataset,
    write_zero_residual_dataset,
)
from csrd.volumes import Volume3D, write_rv3d


def _write_manifest(root: Path, n_cases: int, factors, shape=(8, 8, 8), seed=0) -> str:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    cases = []
    for c in range(n_cases):
        ident = f"case_{c:04d}"
        nor = rng.uniform(0.2, 1.0, shape).astype(np.float32)
        mr = rng.uniform(0.0, 1.0, shape).astype(np.float32)
        write_rv3d(Volume3D(nor), root / f"{ident}_nor.rv3d")
        write_rv3d(Volume3D(mr), root / f"{ident}_mr.rv3d")
        lows = {}
        for f in factors:
            low = (nor + rng.normal(0, 0.05, shape)).clip(0).astype(np.float32)
            write_rv3d(Volume3D(low), root / f"{ident}_low{f}x.rv3d")
            lows[str(f)] = f"{ident}_low{f}x.rv3d"
        cases.append({"id": ident, "nor": f"{ident}_nor.rv3d",
                      "mr": f"{ident}_mr.rv3d", "low": lows})
    mpath = root / "manifest.json"
    mpath.write_text(json.dumps({"format": MANIFEST_FORMAT, "cases": cases}))
    return str(mpath)


def _tiny_cfg(manifest, out_dir, **kw):
    base = dict(dataset_manifest=manifest, out_dir=str(out_dir), total_iters=3,
                patch_size=(8, 8, 8), depth=2, base_channels=8, batch_size=2,
                use_mr=True, checkpoint_every=10)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# Config and presets

def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", total_iters=0)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", ema_decay=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", checkpoint_every=0)
    with pytest.raises(ConfigError):
        TrainConfig(dataset_manifest="m", patch_size=(12, 16, 16), depth=3)


def test_paper_preset_records_published_schedule():
    cfg = preset_config("paper", "m")
    assert cfg.lr == 0.002
    assert cfg.batch_size == 16
    assert cfg.total_iters == 65000
    assert cfg.patch_size == (64, 64, 64)


def test_phantom_preset_is_desk_scale():
    cfg = preset_config("phantom", "m")
    assert cfg.patch_size == (16, 16, 16)
    assert cfg.depth == 3
    assert cfg.total_iters == 5000
    assert cfg.lr_schedule == "cosine"
    # Short-window EMA: with the rate annealed to ~0 over the last tenth of
    # the run, averaging further back only mixes in pre-convergence weights.
    assert cfg.ema_decay == 0.995


def test_unknown_preset_rejected():
    with pytest.raises(ConfigError):
        preset_config("warehouse", "m")
    assert set(PRESETS) == {"paper", "phantom"}


# ---------------------------------------------------------------------------
# Dataset loading

def test_single_triple_dataset_all_draws_reference_it(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4])
    cfg = _tiny_cfg(man, tmp_path / "r", batch_size=8)
    ds = make_dataset(man, cfg)
    assert ds.n_pairs == 1
    draw = draw_batch(ds, cfg, 1)
    assert np.all(draw.pair_indices == 0)


def test_twenty_subjects_three_factors_make_sixty_pairs(tmp_path):
    man = _write_manifest(tmp_path / "d", 20, [4, 6, 8])
    cfg = _tiny_cfg(man, tmp_path / "r")
    ds = make_dataset(man, cfg)
    assert ds.n_pairs == 60


def test_draw_frequencies_uniform_over_pairs(tmp_path):
    man = _write_manifest(tmp_path / "d", 3, [4, 6])
    cfg = _tiny_cfg(man, tmp_path / "r", batch_size=1000)
    ds = make_dataset(man, cfg)
    counts = np.zeros(ds.n_pairs)
    n_iters = 100
    for it in range(1, n_iters + 1):
        draw = draw_batch(ds, cfg, it)
        counts += np.bincount(draw.pair_indices, minlength=ds.n_pairs)
    n = n_iters * 1000
    p = 1.0 / ds.n_pairs
    bound = 3.0 * np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) <= bound)


def test_draw_origins_valid_and_coords_global(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4], shape=(12, 10, 8))
    cfg = _tiny_cfg(man, tmp_path / "r", batch_size=64)
    ds = make_dataset(man, cfg)
    draw = draw_batch(ds, cfg, 5)
    for b, origin in enumerate(draw.origins):
        shape = ds.pairs[int(draw.pair_indices[b])].residual.shape
        for a in range(3):
            assert 0 <= origin[a] <= shape[a] - cfg.patch_size[a]
        # coord channel values are global normalized positions
        expect0 = (origin[0] + np.arange(8)) / (shape[0] - 1)
        assert np.allclose(draw.coords[b, 0, :, 0, 0], expect0)


def test_residual_standardization_targets_sigma_data(tmp_path):
    man = _write_manifest(tmp_path / "d", 4, [4, 8])
    cfg = _tiny_cfg(man, tmp_path / "r")
    ds = make_dataset(man, cfg)
    sched = NoiseSchedule()
    assert ds.residual_scale == pytest.approx(sched.sigma_data / ds.residual_std)
    allr = np.concatenate([p.residual.ravel() for p in ds.pairs])
    assert allr.std() == pytest.approx(sched.sigma_data, rel=1e-9)


def test_missing_file_error_names_entry(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    (tmp_path / "d" / "case_0001_low4x.rv3d").unlink()
    cfg = _tiny_cfg(man, tmp_path / "r")
    with pytest.raises(ManifestError, match="case_0001"):
        make_dataset(man, cfg)


def test_shape_mismatch_error_names_entry(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    bad = np.zeros((9, 8, 8), dtype=np.float32)
    write_rv3d(Volume3D(bad), tmp_path / "d" / "case_0000_low4x.rv3d")
    cfg = _tiny_cfg(man, tmp_path / "r")
    with pytest.raises(ManifestError, match="case_0000"):
        make_dataset(man, cfg)


def test_manifest_format_and_emptiness_checks(tmp_path):
    cfg = _tiny_cfg("nowhere.json", tmp_path / "r")
    with pytest.raises(ManifestError):
        make_dataset("nowhere.json", cfg)
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"format": "other", "cases": []}))
    with pytest.raises(ManifestError, match="format"):
        make_dataset(str(p), cfg)
    p.write_text(json.dumps({"format": MANIFEST_FORMAT, "cases": []}))
    with pytest.raises(ManifestError, match="no cases"):
        make_dataset(str(p), cfg)


def test_volume_smaller_than_patch_rejected(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4], shape=(8, 8, 8))
    cfg = _tiny_cfg(man, tmp_path / "r", patch_size=(16, 16, 16), depth=2)
    with pytest.raises(ManifestError, match="smaller than patch"):
        make_dataset(man, cfg)


# ---------------------------------------------------------------------------
# Loss oracles

def test_zero_residual_first_loss_matches_preconditioning_algebra(tmp_path):
    man = write_zero_residual_dataset(tmp_path / "zero")
    cfg = _tiny_cfg(man, tmp_path / "run", total_iters=1, batch_size=4)
    result = train(cfg)
    ds = make_dataset(man, cfg)
    draw = draw_batch(ds, cfg, 1)
    sched = NoiseSchedule()
    # Zero residual and a zero-initialized head mean the model returns
    # c_skip * sigma * eps, so the loss reduces to the preconditioning algebra.
    hand = 0.0
    for b in range(cfg.batch_size):
        s = float(draw.sigmas[b])
        c_skip = sched.sigma_data**2 / (s * s + sched.sigma_data**2)
        eps32 = draw.noise[b].astype(np.float32).astype(np.float64)
        hand += float(lambda_weight(s, sched)) * (c_skip * s) ** 2 * float((eps32**2).mean())
    hand /= cfg.batch_size
    assert result.losses[0] == pytest.approx(hand, rel=1e-5)


def test_batch_loss_matches_manual_replay(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    cfg = _tiny_cfg(man, tmp_path / "r", batch_size=3, use_mr=False)
    ds = make_dataset(man, cfg)
    torch.manual_seed(0)
    model = ScoreModel(ScoreModelConfig(base_channels=8, depth=2, use_mr=False,
                                        patch_size=(8, 8, 8)))
    draw = draw_batch(ds, cfg, 2)
    loss, record = batch_loss(model, draw, cfg, ds)
    manual = 0.0
    with torch.no_grad():
        for b in range(3):
            s = float(draw.sigmas[b])
            y = torch.as_tensor(draw.residual[b], dtype=torch.float32)
            eps = torch.as_tensor(draw.noise[b], dtype=torch.float32)
            noisy = y + np.float32(s) * eps
            d = model(noisy, torch.tensor(s), torch.as_tensor(draw.low[b], dtype=torch.float32),
                      None, torch.as_tensor(draw.coords[b], dtype=torch.float32))
            manual += float(lambda_weight(np.float32(s), NoiseSchedule())) * float(((d - y) ** 2).mean())
    assert record.per_patch_loss == pytest.approx(manual / 3, rel=1e-5)
    assert float(loss.detach()) == record.per_patch_loss


def test_nan_loss_aborts_with_diagnostic(tmp_path):
    man = write_zero_residual_dataset(tmp_path / "zero")
    cfg = _tiny_cfg(man, tmp_path / "run", total_iters=2)
    torch.manual_seed(0)
    model = ScoreModel(ScoreModelConfig(base_channels=8, depth=2, use_mr=True,
                                        patch_size=(8, 8, 8)))
    with torch.no_grad():
        next(model.parameters()).view(-1)[0] = float("nan")
    with pytest.raises(NumericError, match=r"zero@1x.*sigma="):
        train(cfg, model=model)


# ---------------------------------------------------------------------------
# Determinism, resume, EMA

def test_fixed_seed_reproduces_loss_sequence_and_params(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    r1 = train(_tiny_cfg(man, tmp_path / "r1"))
    r2 = train(_tiny_cfg(man, tmp_path / "r2"))
    assert r1.losses == r2.losses
    for a, b in zip(r1.model.state_dict().values(), r2.model.state_dict().values()):
        assert torch.equal(a, b)


def test_resume_matches_direct_run_bitwise(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    direct = train(_tiny_cfg(man, tmp_path / "rd", total_iters=6, checkpoint_every=3))
    part = train(_tiny_cfg(man, tmp_path / "rr", total_iters=3, checkpoint_every=3))
    resumed = train(_tiny_cfg(man, tmp_path / "rr", total_iters=6, checkpoint_every=3),
                    resume=part.checkpoints[-1])
    for a, b in zip(direct.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(a, b)
    for k in direct.model._ema:
        assert torch.equal(direct.model._ema[k], resumed.model._ema[k])
    assert direct.losses[3:] == resumed.losses


def test_resume_refuses_changed_config(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    part = train(_tiny_cfg(man, tmp_path / "rr", total_iters=2, checkpoint_every=2))
    with pytest.raises(ManifestError, match="hash"):
        train(_tiny_cfg(man, tmp_path / "rr", total_iters=4, checkpoint_every=2, lr=0.001),
              resume=part.checkpoints[-1])


def test_resume_refuses_exhausted_horizon_and_missing_optimizer(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    part = train(_tiny_cfg(man, tmp_path / "rr", total_iters=2, checkpoint_every=2))
    with pytest.raises(ConfigError, match="already at step"):
        train(_tiny_cfg(man, tmp_path / "rr", total_iters=2, checkpoint_every=2),
              resume=part.checkpoints[-1])
    Path(part.checkpoints[-1] + ".opt").unlink()
    with pytest.raises(ManifestError, match="optimizer"):
        train(_tiny_cfg(man, tmp_path / "rr", total_iters=4, checkpoint_every=2),
              resume=part.checkpoints[-1])


def test_model_and_resume_are_mutually_exclusive(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4])
    cfg = _tiny_cfg(man, tmp_path / "r")
    with pytest.raises(ConfigError):
        train(cfg, resume="x", model=object())


def test_trajectory_hash_ignores_total_iters_but_not_lr(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4])
    a = _tiny_cfg(man, tmp_path / "r", total_iters=3)
    b = _tiny_cfg(man, tmp_path / "r", total_iters=9)
    c = _tiny_cfg(man, tmp_path / "r", lr=0.01)
    assert trajectory_hash(a, "digest") == trajectory_hash(b, "digest")
    assert trajectory_hash(a, "digest") != trajectory_hash(c, "digest")
    assert trajectory_hash(a, "digest") != trajectory_hash(a, "other")


def test_lr_schedule_validation():
    with pytest.raises(ConfigError, match="lr_schedule"):
        TrainConfig(dataset_manifest="m", lr_schedule="linear")


def test_cosine_hash_covers_horizon(tmp_path):
    # Decay is anchored to total_iters, so two horizons are different runs.
    man = _write_manifest(tmp_path / "d", 1, [4])
    a = _tiny_cfg(man, tmp_path / "r", total_iters=3, lr_schedule="cosine")
    b = _tiny_cfg(man, tmp_path / "r", total_iters=9, lr_schedule="cosine")
    c = _tiny_cfg(man, tmp_path / "r", total_iters=3)
    assert trajectory_hash(a, "digest") != trajectory_hash(b, "digest")
    assert trajectory_hash(a, "digest") != trajectory_hash(c, "digest")


def test_cosine_lr_decays_and_resumes_bitwise(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    full = train(_tiny_cfg(man, tmp_path / "r1", total_iters=6, checkpoint_every=3,
                           lr_schedule="cosine"))
    lines = [json.loads(l) for l in Path(full.telemetry_path).read_text().splitlines()]
    lrs = [l["lr"] for l in lines]
    assert lrs[0] == pytest.approx(0.002)
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] < 0.1 * lrs[0]
    resumed = train(_tiny_cfg(man, tmp_path / "r2", total_iters=6, checkpoint_every=3,
                              lr_schedule="cosine"),
                    resume=full.checkpoints[0])
    for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(a, b)
    assert full.losses[3:] == resumed.losses


def test_ema_matches_scalar_reference(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    cfg = _tiny_cfg(man, tmp_path / "r", total_iters=4, ema_decay=0.9)
    snapshots = []
    key = None

    def grab(step, model, record):
        nonlocal key
        sd = model.state_dict()
        if key is None:
            key = next(k for k, v in sd.items() if v.numel() > 0 and v.dtype.is_floating_point)
        snapshots.append(sd[key].detach().clone())

    result = train(cfg, callback=grab)
    # ema_0 = theta_init (the seeded rebuild below); ema_t = d*ema_{t-1} + (1-d)*theta_t.
    init_seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(1)[0])
    torch.manual_seed(init_seed)
    init_model = ScoreModel(ScoreModelConfig(base_channels=cfg.base_channels, depth=cfg.depth,
                                             use_mr=True, patch_size=cfg.patch_size))
    ref = init_model.state_dict()[key].detach().clone()
    for theta in snapshots:
        ref = cfg.ema_decay * ref + (1 - cfg.ema_decay) * theta
    assert torch.allclose(result.model._ema[key], ref, rtol=1e-6, atol=1e-7)


# ---------------------------------------------------------------------------
# Telemetry and checkpoints

def test_telemetry_stream_schema(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4])
    result = train(_tiny_cfg(man, tmp_path / "r", total_iters=3))
    lines = [json.loads(l) for l in Path(result.telemetry_path).read_text().splitlines()]
    assert [l["iter"] for l in lines] == [1, 2, 3]
    for l in lines:
        assert set(l) == {"iter", "loss", "sigma_mean", "lr", "wallclock"}
        assert l["loss"] >= 0 and l["sigma_mean"] > 0


def test_checkpoints_at_cadence_and_end(tmp_path):
    man = _write_manifest(tmp_path / "d", 1, [4])
    result = train(_tiny_cfg(man, tmp_path / "r", total_iters=5, checkpoint_every=2))
    steps = [int(Path(p).stem.split("_")[1]) for p in result.checkpoints]
    assert steps == [2, 4, 5]
    for p in result.checkpoints:
        assert Path(p).exists() and Path(p + ".json").exists() and Path(p + ".opt").exists()


def test_checkpoint_carries_residual_scale(tmp_path):
    man = _write_manifest(tmp_path / "d", 2, [4])
    cfg = _tiny_cfg(man, tmp_path / "r", total_iters=2, checkpoint_every=2)
    result = train(cfg)
    manifest = json.loads(Path(result.checkpoints[-1] + ".json").read_text())
    assert manifest["residual_scale"] == pytest.approx(result.dataset.residual_scale)
    assert manifest["step"] == 2


# ---------------------------------------------------------------------------
# Gaussian toy convergence

@pytest.mark.slow
def test_gaussian_toy_reaches_analytic_floor(tmp_path):
    """Standardization fixes the toy prior at N(mu', sigma_data^2); the
    weighted DSM floor is then exactly 1 at every noise level.
    """
    man = write_gaussian_toy_dataset(tmp_path / "toy", n_cases=4, shape=(16, 16, 16))
    tails = []
    for seed in (0, 1, 2):
        cfg = TrainConfig(dataset_manifest=man, out_dir=str(tmp_path / f"run{seed}"),
                          total_iters=2000, patch_size=(8, 8, 8), depth=2,
                          base_channels=8, batch_size=16, use_mr=False,
                          checkpoint_every=5000, seed=seed)
        result = train(cfg)
        tails.append(float(np.mean(result.losses[-200:])))
    for tail in tails:
        assert abs(tail - 1.0) <= 0.05, f"tail losses {tails}"
