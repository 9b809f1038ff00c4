"""Evaluation metrics: MAE, PSNR, slicewise SSIM, texture and feature distances.

MAE, PSNR and the gray-level co-occurrence texture distance operate on the
full 3D grid; SSIM and the learned-feature distance run per axial slice and
average, since the feature extractor is a 2D stack. The texture distance
follows the classical 13-feature co-occurrence recipe (symmetric matrices,
13 unique unit offsets, intensities quantized over the reference range) and
reports the root-sum-square of relative feature changes. The feature
distance defaults to a frozen, seed-fixed convolutional extractor so results
are reproducible without downloaded weights; a pretrained stack can be
plugged in through the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DimensionError, DomainError
from .volumes import Volume3D

EPS_RELATIVE_GUARD = 1e-12

CSV_COLUMNS = ["case", "dose_factor", "method", "mae", "psnr_db", "ssim", "h_dist", "p_dist"]

FEATURE_NAMES = (
    "angular_second_moment",
    "contrast",
    "correlation",
    "variance",
    "inverse_difference_moment",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "info_correlation_1",
    "info_correlation_2",
)

# The 13 unique nearest-neighbor directions in 3D (one per +/- pair).
DEFAULT_OFFSETS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
)


def _data(vol) -> np.ndarray:
    arr = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    return np.asarray(arr, dtype=np.float64)


def _check_same_shape(ref, test) -> tuple[np.ndarray, np.ndarray]:
    a, b = _data(ref), _data(test)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: reference {a.shape} vs test {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Scalar error metrics

def mae(ref, test, mask=None) -> float:
    """Mean absolute voxel error, optionally restricted to a boolean mask."""
    a, b = _check_same_shape(ref, test)
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != volume shape {a.shape}")
    if not mask.any():
        raise DomainError("mask selects no voxels")
    return float(diff[mask].mean())


def psnr(ref, test, peak: float | None = None) -> float:
    """10*log10(peak^2 / MSE) in dB; identical volumes give +inf."""
    a, b = _check_same_shape(ref, test)
    if peak is None:
        peak = float(a.max())
    if peak <= 0:
        raise DomainError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# Slicewise SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel2d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return ndimage.correlate(img, kernel, mode="reflect")


def ssim(ref, test, data_range: float | None = None) -> float:
    """Mean local structural similarity over axial slices.

    Gaussian window (size 11, sigma 1.5), population covariances, stability
    constants k1 = 0.01, k2 = 0.03 on the data range (reference range by
    default). Equals 1 exactly when test == ref.
    """
    a, b = _check_same_shape(ref, test)
    nx, ny, nz = a.shape
    if nx < SSIM_WINDOW or ny < SSIM_WINDOW:
        raise DimensionError(
            f"axial slices {nx}x{ny} are thinner than the {SSIM_WINDOW}-wide window"
        )
    if data_range is None:
        data_range = float(a.max() - a.min())
        if data_range == 0.0:
            data_range = 1.0
    if data_range <= 0:
        raise DomainError(f"data range must be > 0, got {data_range}")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    kern = _gaussian_kernel2d()
    vals = []
    for k in range(nz):
        x, y = a[:, :, k], b[:, :, k]
        mu_x = _local_mean(x, kern)
        mu_y = _local_mean(y, kern)
        xx = _local_mean(x * x, kern) - mu_x * mu_x
        yy = _local_mean(y * y, kern) - mu_y * mu_y
        xy = _local_mean(x * y, kern) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Co-occurrence texture distance

@dataclass(frozen=True)
class HaralickConfig:
    """Quantization and offset choices for the texture features."""

    n_gray_levels: int = 64
    offsets: tuple = DEFAULT_OFFSETS
    features: tuple = FEATURE_NAMES
    symmetric: bool = True

    def __post_init__(self):
        if self.n_gray_levels < 2:
            raise ConfigError(f"need at least 2 gray levels, got {self.n_gray_levels}")
        offsets = tuple(tuple(int(v) for v in off) for off in self.offsets)
        object.__setattr__(self, "offsets", offsets)
        seen = set()
        for off in offsets:
            if len(off) != 3 or all(v == 0 for v in off):
                raise ConfigError(f"offsets must be nonzero 3-vectors, got {off}")
            neg = tuple(-v for v in off)
            if off in seen or (self.symmetric and neg in seen):
                raise ConfigError(f"offset {off} duplicates or mirrors an earlier one")
            seen.add(off)
        unknown = set(self.features) - set(FEATURE_NAMES)
        if unknown:
            raise ConfigError(f"unknown feature identifiers: {sorted(unknown)}")


def _quantize(data: np.ndarray, lo: float, hi: float, levels: int) -> np.ndarray:
    span = hi - lo
    if span <= 0:
        return np.zeros(data.shape, dtype=np.int64)
    q = np.floor((data - lo) / span * levels).astype(np.int64)
    return np.clip(q, 0, levels - 1)


def _cooccurrence(q: np.ndarray, offset, levels: int, symmetric: bool) -> np.ndarray:
    src = tuple(
        slice(-d if d < 0 else 0, q.shape[a] - d if d > 0 else q.shape[a])
        for a, d in enumerate(offset)
    )
    dst = tuple(
        slice(d if d > 0 else 0, q.shape[a] + d if d < 0 else q.shape[a])
        for a, d in enumerate(offset)
    )
    a = q[src].ravel()
    b = q[dst].ravel()
    if a.size == 0:
        raise DimensionError(f"volume too small for co-occurrence offset {offset}")
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    counts = counts.astype(np.float64)
    if symmetric:
        counts = counts + counts.T
    return counts / counts.sum()


def _entropy(p: np.ndarray) -> float:
    m = p > 0
    return float(-np.sum(p[m] * np.log(p[m])))


def _features_from_glcm(p: np.ndarray) -> dict[str, float]:
    g = p.shape[0]
    idx = np.arange(1, g + 1, dtype=np.float64)
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float(np.sum(idx * px))
    mu_y = float(np.sum(idx * py))
    var_x = float(np.sum((idx - mu_x) ** 2 * px))
    var_y = float(np.sum((idx - mu_y) ** 2 * py))
    ii, jj = np.meshgrid(idx, idx, indexing="ij")

    # Sum / difference marginals: k = i + j in [2, 2g], d = |i - j| in [0, g-1].
    k_sum = np.arange(2, 2 * g + 1, dtype=np.float64)
    p_sum = np.zeros(2 * g - 1)
    np.add.at(p_sum, (ii + jj - 2).astype(np.int64).ravel(), p.ravel())
    k_diff = np.arange(0, g, dtype=np.float64)
    p_diff = np.zeros(g)
    np.add.at(p_diff, np.abs(ii - jj).astype(np.int64).ravel(), p.ravel())

    asm = float(np.sum(p * p))
    contrast = float(np.sum(k_diff**2 * p_diff))
    denom = math.sqrt(var_x * var_y)
    if denom > 0:
        correlation = float((np.sum(ii * jj * p) - mu_x * mu_y) / denom)
    else:
        correlation = 0.0
    variance = var_x
    idm = float(np.sum(p_diff / (1.0 + k_diff**2)))
    sum_average = float(np.sum(k_sum * p_sum))
    sum_variance = float(np.sum((k_sum - sum_average) ** 2 * p_sum))
    sum_entropy = _entropy(p_sum)
    entropy = _entropy(p)
    mu_diff = float(np.sum(k_diff * p_diff))
    difference_variance = float(np.sum((k_diff - mu_diff) ** 2 * p_diff))
    difference_entropy = _entropy(p_diff)

    pxpy = np.outer(px, py)
    m = p > 0
    hxy1 = float(-np.sum(p[m] * np.log(np.maximum(pxpy[m], 1e-300))))
    m2 = pxpy > 0
    hxy2 = float(-np.sum(pxpy[m2] * np.log(pxpy[m2])))
    hx = _entropy(px)
    hy = _entropy(py)
    max_h = max(hx, hy)
    imc1 = float((entropy - hxy1) / max_h) if max_h > 0 else 0.0
    imc2 = math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * (hxy2 - entropy))))

    return {
        "angular_second_moment": asm,
        "contrast": contrast,
        "correlation": correlation,
        "variance": variance,
        "inverse_difference_moment": idm,
        "sum_average": sum_average,
        "sum_variance": sum_variance,
        "sum_entropy": sum_entropy,
        "entropy": entropy,
        "difference_variance": difference_variance,
        "difference_entropy": difference_entropy,
        "info_correlation_1": imc1,
        "info_correlation_2": imc2,
    }


def haralick_features(vol, cfg: HaralickConfig, bounds: tuple[float, float]) -> np.ndarray:
    """Offset-averaged feature vector using fixed quantization bounds."""
    data = _data(vol)
    q = _quantize(data, bounds[0], bounds[1], cfg.n_gray_levels)
    acc = np.zeros(len(cfg.features))
    for off in cfg.offsets:
        p = _cooccurrence(q, off, cfg.n_gray_levels, cfg.symmetric)
        feats = _features_from_glcm(p)
        acc += np.array([feats[name] for name in cfg.features])
    return acc / len(cfg.offsets)


def haralick_distance(ref, test, cfg: HaralickConfig | None = None, detailed: bool = False):
    """Root-sum-square relative change of texture features, test vs reference.

    Quantization bounds come from the reference volume, so the distance is
    invariant to rescaling both volumes together. Near-zero reference
    features are guarded by a small epsilon denominator and flagged.
    """
    if cfg is None:
        cfg = HaralickConfig()
    a, b = _check_same_shape(ref, test)
    bounds = (float(a.min()), float(a.max()))
    h_ref = haralick_features(a, cfg, bounds)
    h_test = haralick_features(b, cfg, bounds)
    flagged = [name for name, v in zip(cfg.features, h_ref) if abs(v) < EPS_RELATIVE_GUARD]
    denom = np.where(np.abs(h_ref) < EPS_RELATIVE_GUARD, EPS_RELATIVE_GUARD, h_ref)
    dist = float(np.sqrt(np.sum(((h_test - h_ref) / denom) ** 2)))
    if detailed:
        return dist, {"guarded_features": flagged, "ref_features": h_ref, "test_features": h_test}
    return dist


# ---------------------------------------------------------------------------
# Learned-feature distance

class ExtractorUnavailable(ConfigError):
    """Requested feature extractor cannot be constructed in this environment."""


class BuiltinExtractor(torch.nn.Module):
    """Frozen 5-layer strided conv stack with seed-fixed random weights.

    Expects 3-channel 2D inputs (gray slices replicated), returns the feature
    map after every layer. Deterministic across processes: weights depend
    only on the hard-coded seed.
    """

    expected_channels = 3

    def __init__(self, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [self.expected_channels, 8, 16, 32, 64, 64]
        convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = torch.nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=gen) / math.sqrt(9 * cin)
                conv.weight.copy_(w)
                conv.bias.zero_()
            convs.append(conv)
        self.convs = torch.nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = torch.nn.functional.silu(conv(h))
            feats.append(h)
        return feats


_builtin_extractor: BuiltinExtractor | None = None


def builtin_extractor() -> BuiltinExtractor:
    global _builtin_extractor
    if _builtin_extractor is None:
        _builtin_extractor = BuiltinExtractor()
    return _builtin_extractor


def get_extractor(name: str):
    """Resolve an extractor by name; raises ExtractorUnavailable when absent."""
    if name == "builtin":
        return builtin_extractor()
    if name == "vgg19":
        try:
            import torchvision  # noqa: F401
        except ImportError as exc:
            raise ExtractorUnavailable("torchvision is not installed; vgg19 features unavailable") from exc
        raise ExtractorUnavailable("pretrained vgg19 weights are not bundled in this environment")
    raise ExtractorUnavailable(f"unknown extractor {name!r}")


def perceptual_distance(ref, test, extractor=None) -> float:
    """Mean squared feature difference, averaged over layers and axial slices."""
    a, b = _check_same_shape(ref, test)
    if extractor is None:
        extractor = builtin_extractor()
    ch = getattr(extractor, "expected_channels", 3)

    def stack(vol: np.ndarray) -> torch.Tensor:
        # [nz, ch, nx, ny]: axial slices replicated across channels.
        t = torch.as_tensor(np.moveaxis(vol, 2, 0), dtype=torch.float32)[:, None]
        return t.expand(-1, ch, -1, -1)

    with torch.no_grad():
        feats_a = extractor.features(stack(a))
        feats_b = extractor.features(stack(b))
    layer_means = [float(((fa - fb) ** 2).mean()) for fa, fb in zip(feats_a, feats_b)]
    return float(np.mean(layer_means))


# ---------------------------------------------------------------------------
# Aggregation

@dataclass
class EvalReport:
    """All five metrics for one (reference, test) pair plus provenance."""

    mae: float
    psnr_db: float
    ssim: float
    h_dist: float
    p_dist: float
    mask: Optional[str] = None
    reference_name: str = ""
    test_name: str = ""
    flags: list = dc_field(default_factory=list)

    def __post_init__(self):
        if self.mae < 0:
            raise DomainError(f"mae must be >= 0, got {self.mae}")
        if not -1.0 - 1e-9 <= self.ssim <= 1.0 + 1e-9:
            raise DomainError(f"ssim must lie in [-1, 1], got {self.ssim}")
        if self.h_dist < 0 or self.p_dist < 0:
            raise DomainError("feature distances must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "h_dist": self.h_dist,
            "p_dist": self.p_dist,
            "mask": self.mask,
            "reference_name": self.reference_name,
            "test_name": self.test_name,
            "flags": list(self.flags),
        }

    def csv_row(self, case: str, dose_factor, method: str) -> list:
        return [case, dose_factor, method, self.mae, self.psnr_db, self.ssim,
                self.h_dist, self.p_dist]


def evaluate_pair(ref, test, haralick_cfg: HaralickConfig | None = None,
                  extractor=None, mask=None) -> EvalReport:
    """Run all five metrics on one pair.

    ``extractor`` may be an extractor object or a name; an unavailable named
    extractor falls back to the built-in one with a flag on the report.
    """
    flags = []
    if isinstance(extractor, str):
        try:
            extractor = get_extractor(extractor)
        except ExtractorUnavailable:
            extractor = builtin_extractor()
            flags.append("perceptual_extractor_fallback")
    h_dist, detail = haralick_distance(ref, test, cfg=haralick_cfg, detailed=True)
    for name in detail["guarded_features"]:
        flags.append(f"haralick_guard:{name}")
    mask_desc = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask_desc = f"{int(mask.sum())} voxels"
    return EvalReport(
        mae=mae(ref, test, mask=mask),
        psnr_db=psnr(ref, test),
        ssim=ssim(ref, test),
        h_dist=h_dist,
        p_dist=perceptual_distance(ref, test, extractor=extractor),
        mask=mask_desc,
        reference_name=getattr(ref, "name", ""),
        test_name=getattr(test, "name", ""),
        flags=flags,
    )
