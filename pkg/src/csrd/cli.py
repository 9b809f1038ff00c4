"""Command-line entry point tying simulation, training, denoising, and
evaluation into reproducible run directories.

Configuration precedence, highest first: explicit CLI flags, then the JSON
config file (--config), then the CSRD_OUTPUT_DIR environment variable (which
sets output_dir only; it is the only environment input), then built-in
defaults. Every run writes a resolved-config snapshot with all defaults
materialized into its run directory; re-running from that snapshot changes
nothing. Unknown config keys are rejected, and validation reports every
violated field at once.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import TVConfig, tv_denoise
from .dosesim import (
    PhantomSpec,
    ThinningSpec,
    generate_phantom,
    normalization_scale,
    normalize_counts,
    poisson_thin,
)
from .errors import ConfigError, CsrdError, ManifestError
from .metrics import CSV_COLUMNS, evaluate_pair
from .sampler import SamplerConfig, sample_ensemble, sample_residual
from .scorenet import load_checkpoint
from .train import MANIFEST_FORMAT, TrainConfig, preset_config, train
from .volumes import Volume3D, read_rv3d, tile, write_rv3d


# ---------------------------------------------------------------------------
# Config schema

@dataclass(frozen=True)
class SimulateSection:
    n_train: int = 20
    n_test: int = 4
    size: int = 48
    train_factors: tuple = (4, 6, 8)
    test_factors: tuple = (4, 6, 8, 10)
    n_ellipsoids: int = 6
    percentile: float = 99.5


@dataclass(frozen=True)
class TrainSection:
    preset: str = "phantom"
    dataset_manifest: str = ""
    resume: str = ""
    lr: float | None = None
    lr_schedule: str | None = None
    batch_size: int | None = None
    total_iters: int | None = None
    patch_size: tuple | None = None
    ema_decay: float | None = None
    use_mr: bool | None = None
    checkpoint_every: int | None = None
    base_channels: int | None = None
    depth: int | None = None
    time_embed_dim: int | None = None


@dataclass(frozen=True)
class DenoiseSection:
    checkpoint: str = ""
    input: str = ""
    mr: str = ""
    method: str = "csrd"
    tv_weight: float = 0.1
    n_steps: int = 50
    mode: str = "deterministic"
    s_churn: float = 0.0
    sampler_seed: int = 0
    tiling: str = "whole"
    patch_stride: int = 8
    ensemble: int = 1
    output: str = "denoised.rv3d"


@dataclass(frozen=True)
class EvaluateSection:
    reference: str = ""
    test: str = ""
    case: str = ""
    dose_factor: float = 0.0
    method: str = ""
    extractor: str = "builtin"
    csv_name: str = "metrics.csv"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    device_hint: int = 1
    output_dir: str = "csrd_runs"
    run_name: str = ""
    simulate: SimulateSection = field(default_factory=SimulateSection)
    train: TrainSection = field(default_factory=TrainSection)
    denoise: DenoiseSection = field(default_factory=DenoiseSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def __post_init__(self):
        if self.precision not in ("float32", "mixed"):
            raise ConfigError(f"precision must be float32 or mixed, got {self.precision!r}")


_SECTIONS = {"simulate": SimulateSection, "train": TrainSection,
             "denoise": DenoiseSection, "evaluate": EvaluateSection}
_GLOBAL_KEYS = ("seed", "precision", "device_hint", "output_dir", "run_name")


def _coerce(value, reference):
    if isinstance(reference, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def build_run_config(doc: dict) -> RunConfig:
    """Validate a config document, reporting every unknown key at once."""
    problems = []
    kwargs = {}
    defaults = RunConfig()
    for key, value in doc.items():
        if key == "meta":
            continue
        if key in _GLOBAL_KEYS:
            kwargs[key] = value
        elif key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                problems.append(f"{key}: expected an object")
                continue
            valid = {f.name: getattr(getattr(defaults, key), f.name) for f in dc_fields(cls)}
            sect_kwargs = {}
            for skey, sval in value.items():
                if skey not in valid:
                    problems.append(f"{key}.{skey}: unknown key")
                else:
                    sect_kwargs[skey] = _coerce(sval, valid[skey])
            if not problems:
                kwargs[key] = cls(**sect_kwargs)
        else:
            problems.append(f"{key}: unknown key")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(sorted(problems)))
    return RunConfig(**kwargs)


def _section_dict(section) -> dict:
    out = {}
    for f in dc_fields(section):
        v = getattr(section, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def resolved_config_dict(cfg: RunConfig, command: str, manifest_hashes: dict | None = None) -> dict:
    doc = {key: getattr(cfg, key) for key in _GLOBAL_KEYS}
    for name in _SECTIONS:
        doc[name] = _section_dict(getattr(cfg, name))
    doc["meta"] = {"tool_version": __version__, "command": command,
                   "manifest_hashes": manifest_hashes or {}}
    return doc


def _write_snapshot(run_dir: Path, cfg: RunConfig, command: str,
                    manifest_hashes: dict | None = None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = resolved_config_dict(cfg, command, manifest_hashes)
    (run_dir / "resolved_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_dir(cfg: RunConfig, command: str) -> Path:
    name = cfg.run_name or command
    return Path(cfg.output_dir) / name


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# simulate

def _derived_seed(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _write_case(out: Path, ident: str, spec: PhantomSpec, factors, percentile: float,
                base_seed: int, index: int) -> dict:
    pet, mr = generate_phantom(spec)
    scale = normalization_scale(pet, percentile=percentile)
    nor = normalize_counts(pet, scale)
    write_rv3d(nor, out / f"{ident}_nor.rv3d")
    write_rv3d(mr, out / f"{ident}_mr.rv3d")
    lows = {}
    for factor in factors:
        thinned = poisson_thin(pet, ThinningSpec(
            factor=float(factor), seed=_derived_seed(base_seed, index, int(factor))))
        low = normalize_counts(thinned, scale, dose_factor=float(factor))
        write_rv3d(low, out / f"{ident}_low{factor}x.rv3d")
        lows[str(factor)] = f"{ident}_low{factor}x.rv3d"
    return {"id": ident, "nor": f"{ident}_nor.rv3d", "mr": f"{ident}_mr.rv3d",
            "low": lows, "scale": float(scale)}


def run_simulate(cfg: RunConfig) -> Path:
    """Phantom dataset: counts, thinned doses, MR, split train/test manifests."""
    sim = cfg.simulate
    run_dir = _run_dir(cfg, "simulate")
    run_dir.mkdir(parents=True, exist_ok=True)
    shape = (sim.size, sim.size, sim.size)
    cases_train, cases_test = [], []
    for i in range(sim.n_train + sim.n_test):
        ident = f"phantom_{i:04d}"
        spec = PhantomSpec(shape=shape, n_ellipsoids=sim.n_ellipsoids,
                           seed=_derived_seed(cfg.seed, i))
        is_test = i >= sim.n_train
        factors = sim.test_factors if is_test else sim.train_factors
        entry = _write_case(run_dir, ident, spec, factors, sim.percentile, cfg.seed, i)
        (cases_test if is_test else cases_train).append(entry)
    hashes = {}
    for name, cases in (("train_manifest.json", cases_train), ("test_manifest.json", cases_test)):
        doc = {"format": MANIFEST_FORMAT, "shape": list(shape), "cases": cases}
        path = run_dir / name
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        hashes[name] = _sha256_file(path)
    _write_snapshot(run_dir, cfg, "simulate", hashes)
    return run_dir


# ---------------------------------------------------------------------------
# train

def _train_config(cfg: RunConfig) -> TrainConfig:
    sect = cfg.train
    if not sect.dataset_manifest:
        raise ConfigError("train.dataset_manifest is required")
    overrides = {}
    for f in dc_fields(TrainSection):
        if f.name in ("preset", "dataset_manifest", "resume"):
            continue
        value = getattr(sect, f.name)
        if value is not None:
            overrides[f.name] = tuple(value) if f.name == "patch_size" else value
    run_dir = _run_dir(cfg, "train")
    return preset_config(sect.preset, sect.dataset_manifest, out_dir=str(run_dir),
                         seed=cfg.seed, mixed_precision=(cfg.precision == "mixed"),
                         **overrides)


def run_train(cfg: RunConfig):
    tcfg = _train_config(cfg)
    run_dir = _run_dir(cfg, "train")
    manifest_path = Path(tcfg.dataset_manifest)
    hashes = {manifest_path.name: _sha256_file(manifest_path)} if manifest_path.exists() else {}
    # Snapshot carries the effective hyperparameters, not the None placeholders,
    # so a rerun from the snapshot needs neither the preset table nor the flags.
    materialized = dataclasses.replace(
        cfg.train,
        **{f.name: getattr(tcfg, f.name) for f in dc_fields(TrainSection)
           if f.name not in ("preset", "dataset_manifest", "resume")})
    _write_snapshot(run_dir, dataclasses.replace(cfg, train=materialized), "train", hashes)
    resume = cfg.train.resume or None
    return train(tcfg, resume=resume)


# ---------------------------------------------------------------------------
# denoise

def _load_volume(path: str, label: str) -> Volume3D:
    p = Path(path)
    if not path or not p.exists():
        raise ConfigError(f"denoise.{label} must name an existing volume, got {path!r}")
    return read_rv3d(p)


def run_denoise(cfg: RunConfig) -> Path:
    sect = cfg.denoise
    run_dir = _run_dir(cfg, "denoise")
    run_dir.mkdir(parents=True, exist_ok=True)
    low = _load_volume(sect.input, "input")
    hashes = {Path(sect.input).name: _sha256_file(Path(sect.input))}
    out_path = run_dir / sect.output
    info = {"method": sect.method, "input": str(sect.input)}

    if sect.method == "tv":
        result = tv_denoise(low, TVConfig(weight=sect.tv_weight))
        write_rv3d(result, out_path)
        info["tv_weight"] = sect.tv_weight
    elif sect.method == "csrd":
        if not sect.checkpoint:
            raise ConfigError("denoise.checkpoint is required for the csrd method")
        model, manifest = load_checkpoint(sect.checkpoint)
        if "residual_scale" not in manifest:
            raise ManifestError("checkpoint manifest lacks residual_scale; "
                                "was it produced by the training loop?")
        model = model.ema_model()
        mr = None
        if model.config.use_mr:
            mr = _load_volume(sect.mr, "mr")
            hashes[Path(sect.mr).name] = _sha256_file(Path(sect.mr))
        if sect.mode == "deterministic":
            samp = SamplerConfig(n_steps=sect.n_steps, mode="deterministic",
                                 seed=cfg.seed + sect.sampler_seed)
        else:
            churn = {"s_churn": sect.s_churn} if sect.s_churn > 0 else {}
            samp = SamplerConfig.stochastic(n_steps=sect.n_steps,
                                            seed=cfg.seed + sect.sampler_seed, **churn)
        plan = None
        if sect.tiling == "patch":
            plan = tile(low.shape, model.config.patch_size, (sect.patch_stride,) * 3)
        elif sect.tiling != "whole":
            raise ConfigError(f"denoise.tiling must be whole or patch, got {sect.tiling!r}")
        rscale = float(manifest["residual_scale"])
        if sect.ensemble < 1:
            raise ConfigError(f"denoise.ensemble must be >= 1, got {sect.ensemble}")
        if sect.ensemble > 1:
            # Posterior-mean readout: average independent realizations and keep
            # their voxelwise spread as the uncertainty map.
            members, std = sample_ensemble(model, low, mr, cfg=samp,
                                           n_realizations=sect.ensemble, plan=plan,
                                           residual_scale=rscale)
            mean = np.mean(np.stack([m.denoised.data for m in members]), axis=0)
            denoised = Volume3D(data=mean, spacing=low.spacing, domain=low.domain,
                                name=low.name)
            write_rv3d(denoised, out_path)
            std_path = out_path.with_name(out_path.stem + "_std" + out_path.suffix)
            write_rv3d(std, std_path)
            info.update(nfe_used=sum(m.nfe_used for m in members),
                        ensemble=sect.ensemble, seeds=members[0].seeds,
                        per_patch_seams=max(m.per_patch_seams for m in members),
                        member_std_mean=float(std.data.mean()),
                        checkpoint=str(sect.checkpoint))
        else:
            result = sample_residual(model, low, mr, plan=plan, cfg=samp,
                                     residual_scale=rscale)
            write_rv3d(result.denoised, out_path)
            info.update(nfe_used=result.nfe_used, seeds=result.seeds,
                        per_patch_seams=result.per_patch_seams,
                        checkpoint=str(sect.checkpoint))
        hashes[Path(sect.checkpoint).name] = _sha256_file(Path(sect.checkpoint))
    else:
        raise ConfigError(f"denoise.method must be csrd or tv, got {sect.method!r}")

    (run_dir / (out_path.stem + "_info.json")).write_text(
        json.dumps(info, indent=2, sort_keys=True) + "\n")
    _write_snapshot(run_dir, cfg, "denoise", hashes)
    return out_path


# ---------------------------------------------------------------------------
# evaluate

def run_evaluate(cfg: RunConfig) -> Path:
    sect = cfg.evaluate
    run_dir = _run_dir(cfg, "evaluate")
    run_dir.mkdir(parents=True, exist_ok=True)
    for name in ("reference", "test"):
        if not getattr(sect, name):
            raise ConfigError(f"evaluate.{name} is required")
    ref = read_rv3d(sect.reference)
    test = read_rv3d(sect.test)
    report = evaluate_pair(ref, test, extractor=sect.extractor)
    csv_path = run_dir / sect.csv_name
    new_file = not csv_path.exists()
    with csv_path.open("a", newline="") as handle:
        writer = csv.writer(handle)
        if new_file:
            writer.writerow(CSV_COLUMNS)
        writer.writerow(report.csv_row(sect.case, sect.dose_factor, sect.method))
    safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in f"{sect.case}_{sect.method}")
    (run_dir / f"report_{safe}.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    hashes = {Path(sect.reference).name: _sha256_file(Path(sect.reference)),
              Path(sect.test).name: _sha256_file(Path(sect.test))}
    _write_snapshot(run_dir, cfg, "evaluate", hashes)
    return csv_path


# ---------------------------------------------------------------------------
# Argument handling

def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csrd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--run-name", default=None)

    p = sub.add_parser("simulate", help="generate a phantom dataset")
    common(p)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--size", type=int, default=None)

    p = sub.add_parser("train", help="train the score model")
    common(p)
    p.add_argument("--preset", default=None, choices=["paper", "phantom"])
    p.add_argument("--manifest", default=None, help="dataset manifest path")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--use-mr", dest="use_mr", action="store_true", default=None)
    p.add_argument("--no-mr", dest="use_mr", action="store_false", default=None)

    p = sub.add_parser("denoise", help="denoise one low-dose volume")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--mr", default=None)
    p.add_argument("--method", default=None, choices=["csrd", "tv"])
    p.add_argument("--tv-weight", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--tiling", default=None, choices=["whole", "patch"])
    p.add_argument("--patch-stride", type=int, default=None)
    p.add_argument("--ensemble", type=int, default=None,
                   help="average this many independent realizations")
    p.add_argument("--output", default=None)

    p = sub.add_parser("evaluate", help="score a denoised volume against reference")
    common(p)
    p.add_argument("--reference", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--case", default=None)
    p.add_argument("--dose-factor", type=float, default=None)
    p.add_argument("--method", default=None)

    sub.add_parser("version", help="print the tool version")
    return parser


_FLAG_MAP = {
    "simulate": {"n_train": "simulate.n_train", "n_test": "simulate.n_test",
                 "size": "simulate.size"},
    "train": {"preset": "train.preset", "manifest": "train.dataset_manifest",
              "iters": "train.total_iters", "resume": "train.resume",
              "use_mr": "train.use_mr"},
    "denoise": {"checkpoint": "denoise.checkpoint", "input": "denoise.input",
                "mr": "denoise.mr", "method": "denoise.method",
                "tv_weight": "denoise.tv_weight", "steps": "denoise.n_steps",
                "tiling": "denoise.tiling", "patch_stride": "denoise.patch_stride",
                "ensemble": "denoise.ensemble", "output": "denoise.output"},
    "evaluate": {"reference": "evaluate.reference", "test": "evaluate.test",
                 "case": "evaluate.case", "dose_factor": "evaluate.dose_factor",
                 "method": "evaluate.method"},
}


def _apply_overrides(doc: dict, args: argparse.Namespace, command: str) -> dict:
    for key in ("seed", "run_name"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if getattr(args, "output_dir", None) is not None:
        doc["output_dir"] = args.output_dir
    for attr, path in _FLAG_MAP.get(command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            section, field_name = path.split(".")
            doc.setdefault(section, {})[field_name] = value
    return doc


def dispatch(argv) -> int:
    """Parse argv, run the subcommand, return a process exit code."""
    parser = _parser()
    args = parser.parse_args(argv)
    if args.command == "version":
        print(__version__)
        return 0
    try:
        doc = {}
        if args.config:
            cpath = Path(args.config)
            if not cpath.exists():
                raise ConfigError(f"config file not found: {cpath}")
            doc = json.loads(cpath.read_text())
        if "output_dir" not in doc and os.environ.get("CSRD_OUTPUT_DIR"):
            doc["output_dir"] = os.environ["CSRD_OUTPUT_DIR"]
        doc = _apply_overrides(doc, args, args.command)
        cfg = build_run_config(doc)
        runner = {"simulate": run_simulate, "train": run_train,
                  "denoise": run_denoise, "evaluate": run_evaluate}[args.command]
        runner(cfg)
        return 0
    except CsrdError as exc:
        print(f"csrd: error: {exc}", file=sys.stderr)
        return 2


def main() -> int:
    try:
        return dispatch(sys.argv[1:])
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
