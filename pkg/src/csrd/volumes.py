"""Volumetric containers, residual arithmetic, patch tiling and stitching.

Arrays are indexed ``data[x, y, z]``. Counts-domain volumes hold non-negative
event counts; normalized-domain volumes hold finite real intensities. The
on-disk format ("RV3D") is a raw little-endian float32 payload in x-fastest
order plus a JSON sidecar header.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import CompletenessError, DimensionError, DomainError, TilingError

DOMAIN_COUNTS = "counts"
DOMAIN_NORMALIZED = "normalized"

BLEND_UNIFORM = "uniform-average"
BLEND_COSINE = "cosine-window"

# Raised-cosine window floor applied before weight normalization; keeps edge
# voxels of interior patches from being annihilated.
COSINE_FLOOR = 0.05


def _as_int3(value, label: str) -> tuple[int, int, int]:
    arr = np.asarray(value)
    if arr.shape != (3,):
        raise DimensionError(f"{label} must be a 3-vector, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer) and not np.all(arr == np.floor(arr)):
        raise DimensionError(f"{label} must be integer-valued, got {value}")
    return tuple(int(v) for v in arr)


@dataclass(eq=False)
class Volume3D:
    """A 3D scalar grid with voxel spacing and an intensity-domain tag."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    domain: str = DOMAIN_NORMALIZED
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"volume data must be 3D with all extents >= 1, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DimensionError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.domain not in (DOMAIN_COUNTS, DOMAIN_NORMALIZED):
            raise DomainError(f"unknown domain {self.domain!r}")
        if self.domain == DOMAIN_COUNTS:
            if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
                raise DomainError("counts volume must be finite and non-negative")
        else:
            if not np.all(np.isfinite(self.data)):
                raise DomainError("normalized volume must contain only finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, domain: str | None = None, name: str | None = None) -> "Volume3D":
        """New volume sharing this volume's metadata."""
        return Volume3D(
            data=data,
            spacing=self.spacing,
            domain=self.domain if domain is None else domain,
            name=self.name if name is None else name,
        )


@dataclass(eq=False)
class ResidualVolume:
    """Voxelwise difference low - normal, kept in float64 alongside its low-dose pair."""

    data: np.ndarray
    paired_low: Volume3D

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.paired_low.shape:
            raise DimensionError(
                f"residual shape {self.data.shape} != paired low-dose shape {self.paired_low.shape}"
            )


@dataclass(frozen=True)
class PatchRegion:
    """A sub-volume: integer origin and size inside a parent grid.

    ``coord_channels`` encodes each voxel's position in the *parent* volume,
    per axis linearly mapped to [0, 1] over the full extent (0 for a
    degenerate axis of extent 1).
    """

    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    parent_shape: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_int3(self.origin, "origin"))
        object.__setattr__(self, "size", _as_int3(self.size, "size"))
        object.__setattr__(self, "parent_shape", _as_int3(self.parent_shape, "parent_shape"))
        for a in range(3):
            if self.size[a] < 1:
                raise DimensionError(f"region size must be >= 1 per axis, got {self.size}")
            if self.origin[a] < 0 or self.origin[a] + self.size[a] > self.parent_shape[a]:
                raise DimensionError(
                    f"region origin {self.origin} size {self.size} exceeds parent {self.parent_shape}"
                )

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    @cached_property
    def coord_channels(self) -> np.ndarray:
        """(3, *size) float64 array of normalized parent coordinates."""
        axes = []
        for a in range(3):
            extent = self.parent_shape[a]
            idx = np.arange(self.origin[a], self.origin[a] + self.size[a], dtype=np.float64)
            axes.append(idx / (extent - 1) if extent > 1 else np.zeros_like(idx))
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack(grids, axis=0)


@dataclass(eq=False)
class TilingPlan:
    """An ordered set of regions covering a volume, plus the blend rule."""

    regions: list[PatchRegion]
    blend: str = BLEND_COSINE
    shape: tuple[int, int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.blend not in (BLEND_UNIFORM, BLEND_COSINE):
            raise TilingError(f"unknown blend mode {self.blend!r}")
        if not self.regions:
            raise TilingError("a tiling plan needs at least one region")
        if self.shape is None:
            self.shape = self.regions[0].parent_shape
        self.shape = _as_int3(self.shape, "shape")
        for r in self.regions:
            if r.parent_shape != self.shape:
                raise TilingError(f"region parent shape {r.parent_shape} != plan shape {self.shape}")

    def window(self, region: PatchRegion) -> np.ndarray:
        """Unnormalized blend window for one region."""
        if self.blend == BLEND_UNIFORM:
            return np.ones(region.size, dtype=np.float64)
        axes = []
        for n in region.size:
            j = np.arange(n, dtype=np.float64)
            hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * (j + 0.5) / n)
            axes.append(np.maximum(hann, COSINE_FLOOR))
        return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]

    def weight_sum(self) -> np.ndarray:
        """Per-voxel sum of unnormalized windows over all covering regions."""
        acc = np.zeros(self.shape, dtype=np.float64)
        for region in self.regions:
            acc[region.slices] += self.window(region)
        return acc

    def coverage_count(self) -> np.ndarray:
        """Per-voxel number of covering regions."""
        acc = np.zeros(self.shape, dtype=np.int64)
        for region in self.regions:
            acc[region.slices] += 1
        return acc


def compute_residual(low: Volume3D, nor: Volume3D) -> ResidualVolume:
    """Voxelwise residual low - normal on normalized-domain volumes.

    Computed in float64 so that float32-grid inputs round-trip bitwise
    through :func:`apply_residual`.
    """
    if low.shape != nor.shape:
        raise DimensionError(f"shape mismatch: low {low.shape} vs normal {nor.shape}")
    if low.spacing != nor.spacing:
        raise DimensionError(f"spacing mismatch: low {low.spacing} vs normal {nor.spacing}")
    if low.domain != DOMAIN_NORMALIZED or nor.domain != DOMAIN_NORMALIZED:
        raise DomainError("residuals are defined on normalized intensities, not counts")
    data = low.data.astype(np.float64) - nor.data.astype(np.float64)
    return ResidualVolume(data=data, paired_low=low)


def apply_residual(low: Volume3D, residual: ResidualVolume) -> Volume3D:
    """Inverse of :func:`compute_residual`: the denoised estimate low - residual."""
    if low.shape != residual.data.shape:
        raise DimensionError(f"shape mismatch: low {low.shape} vs residual {residual.data.shape}")
    data = low.data.astype(np.float64) - residual.data
    return Volume3D(data=data, spacing=low.spacing, domain=DOMAIN_NORMALIZED, name=low.name)


def _axis_starts(extent: int, patch: int, stride: int) -> list[int]:
    n = math.ceil((extent - patch) / stride) + 1
    starts = [min(i * stride, extent - patch) for i in range(n)]
    return starts


def tile(shape, patch_size, stride) -> TilingPlan:
    """Regular tiling at multiples of ``stride``, final region clamped to the edge."""
    shape = _as_int3(shape, "shape")
    patch_size = _as_int3(patch_size, "patch_size")
    stride = _as_int3(stride, "stride")
    for a in range(3):
        if not 1 <= patch_size[a] <= shape[a]:
            raise TilingError(f"patch size {patch_size} incompatible with volume shape {shape}")
        if not 1 <= stride[a] <= patch_size[a]:
            raise TilingError(f"stride {stride} must be in [1, patch_size={patch_size}]")
    per_axis = [_axis_starts(shape[a], patch_size[a], stride[a]) for a in range(3)]
    regions = [
        PatchRegion(origin=(x, y, z), size=patch_size, parent_shape=shape)
        for x in per_axis[0]
        for y in per_axis[1]
        for z in per_axis[2]
    ]
    return TilingPlan(regions=regions, shape=shape)


def dense_tiling(shape, patch_size) -> TilingPlan:
    """Stride-1 plan: one region per valid origin (the training sampling space)."""
    return tile(shape, patch_size, (1, 1, 1))


def extract_patch(vol: Volume3D, region: PatchRegion) -> np.ndarray:
    """Copy of the sub-grid selected by ``region``."""
    if region.parent_shape != vol.shape:
        raise DimensionError(f"region parent shape {region.parent_shape} != volume shape {vol.shape}")
    return np.array(vol.data[region.slices])


def stitch(patches, plan: TilingPlan, shape=None, like: Volume3D | None = None) -> Volume3D:
    """Blend-weighted assembly of per-region patches into a full volume.

    ``patches`` is a sequence of (PatchRegion, grid) pairs matching
    ``plan.regions`` one-to-one and in order. Weights are the plan's windows
    normalized per voxel, so patches extracted from a single source volume
    reconstruct it to float precision.
    """
    shape = plan.shape if shape is None else _as_int3(shape, "shape")
    if shape != plan.shape:
        raise DimensionError(f"requested shape {shape} != plan shape {plan.shape}")
    patches = list(patches)
    if len(patches) != len(plan.regions):
        raise CompletenessError(f"got {len(patches)} patches for {len(plan.regions)} plan regions")
    acc = np.zeros(shape, dtype=np.float64)
    wacc = np.zeros(shape, dtype=np.float64)
    for (region, grid), planned in zip(patches, plan.regions):
        if (region.origin, region.size) != (planned.origin, planned.size):
            raise CompletenessError(
                f"patch region origin={region.origin} size={region.size} does not match "
                f"plan region origin={planned.origin} size={planned.size}"
            )
        grid = np.asarray(grid, dtype=np.float64)
        if grid.shape != region.size:
            raise DimensionError(f"patch grid shape {grid.shape} != region size {region.size}")
        w = plan.window(region)
        acc[region.slices] += w * grid
        wacc[region.slices] += w
    if np.any(wacc == 0):
        raise CompletenessError("plan does not cover the full volume")
    data = acc / wacc
    if like is not None:
        return like.with_data(data)
    return Volume3D(data=data)


# ---------------------------------------------------------------------------
# RV3D on-disk format: <path> holds raw f32le voxels in x-fastest order,
# <path>.json holds {shape, spacing_mm, domain, dtype}.

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_rv3d(vol: Volume3D, path) -> None:
    path = Path(path)
    header = {
        "shape": list(vol.shape),
        "spacing_mm": list(vol.spacing),
        "domain": vol.domain,
        "dtype": "f32le",
    }
    if vol.name:
        header["name"] = vol.name
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F")
    path.write_bytes(payload.tobytes())


def read_rv3d(path) -> Volume3D:
    path = Path(path)
    sidecar = _sidecar(path)
    if not path.exists() or not sidecar.exists():
        raise FileNotFoundError(f"RV3D volume needs both {path} and {sidecar}")
    header = json.loads(sidecar.read_text())
    if header.get("dtype") != "f32le":
        raise DomainError(f"unsupported RV3D dtype {header.get('dtype')!r}")
    shape = _as_int3(header["shape"], "shape")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DimensionError(f"RV3D payload has {raw.size} voxels, header says {np.prod(shape)}")
    data = raw.reshape(shape, order="F")
    return Volume3D(
        data=data,
        spacing=tuple(header["spacing_mm"]),
        domain=header["domain"],
        name=header.get("name", path.stem),
    )
