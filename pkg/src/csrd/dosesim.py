"""Low-dose acquisition simulation and synthetic PET/MR phantom generation.

Dose reduction is modeled at the voxel level: each count survives
independently with probability 1/factor, so a voxel with n events becomes
Binomial(n, 1/factor). Thinning a Poisson(lam) voxel this way yields
Poisson(lam/factor), which is the statistic the event-discarding acquisition
model produces. Attenuation, scatter and tomographic reconstruction are out
of scope; phantoms are piecewise-constant ellipsoid uptake maps with a
co-registered noiseless-geometry MR contrast volume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, SpecError
from .volumes import DOMAIN_COUNTS, DOMAIN_NORMALIZED, Volume3D

DEFAULT_SCALE_PERCENTILE = 99.5


@dataclass(frozen=True)
class ThinningSpec:
    """Dose-reduction factor and the seed that fixes the discard pattern."""

    factor: float
    seed: int

    def __post_init__(self):
        if not self.factor > 1:
            raise SpecError(f"thinning factor must be > 1, got {self.factor}")

    @property
    def keep_probability(self) -> float:
        return 1.0 / self.factor


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semiaxes: tuple[float, float, float]

    def inside(self, shape) -> bool:
        return all(
            self.semiaxes[a] > 0
            and self.center[a] - self.semiaxes[a] >= 0
            and self.center[a] + self.semiaxes[a] <= shape[a] - 1
            for a in range(3)
        )

    def mask(self, shape) -> np.ndarray:
        grids = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, self.center, self.semiaxes))
        return q <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity recipe for one synthetic PET/MR pair.

    When ``ellipsoids`` is omitted the geometry is drawn from the seed;
    explicit ellipsoids must fit inside the volume. ``mr_contrast_map``
    assigns one MR intensity per ellipsoid (drawn from the seed if omitted).
    """

    shape: tuple[int, int, int] = (48, 48, 48)
    n_ellipsoids: int = 6
    uptake_range: tuple[float, float] = (5.0, 50.0)
    background_uptake: float = 2.0
    seed: int = 0
    mr_contrast_map: tuple[float, ...] | None = None
    mr_background: float = 0.1
    ellipsoids: tuple[Ellipsoid, ...] | None = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        if len(shape) != 3 or min(shape) < 1:
            raise SpecError(f"phantom shape must be 3 positive extents, got {self.shape}")
        if self.n_ellipsoids < 1:
            raise SpecError(f"need at least one ellipsoid, got {self.n_ellipsoids}")
        lo, hi = self.uptake_range
        if lo < 0 or hi < lo:
            raise SpecError(f"uptake range must satisfy 0 <= min <= max, got {self.uptake_range}")
        if self.background_uptake < 0:
            raise SpecError(f"background uptake must be >= 0, got {self.background_uptake}")
        if self.mr_contrast_map is not None and len(self.mr_contrast_map) != self.n_ellipsoids:
            raise SpecError(
                f"mr_contrast_map has {len(self.mr_contrast_map)} entries "
                f"for {self.n_ellipsoids} ellipsoids"
            )
        if self.ellipsoids is not None:
            if len(self.ellipsoids) != self.n_ellipsoids:
                raise SpecError(
                    f"got {len(self.ellipsoids)} explicit ellipsoids for n_ellipsoids={self.n_ellipsoids}"
                )
            for e in self.ellipsoids:
                if not e.inside(shape):
                    raise SpecError(f"ellipsoid {e} does not fit inside volume of shape {shape}")


def binomial_thin(data: np.ndarray, keep_probability: float, rng: np.random.Generator) -> np.ndarray:
    """Per-voxel Binomial(n, p) survival draw; p = 1 is an exact identity."""
    if not 0 < keep_probability <= 1:
        raise DomainError(f"keep probability must be in (0, 1], got {keep_probability}")
    if not np.all(data == np.floor(data)):
        raise DomainError("thinning requires integer-valued counts")
    if keep_probability == 1.0:
        return data.copy()
    n = data.astype(np.int64)
    return rng.binomial(n, keep_probability).astype(np.float64)


def poisson_thin(counts: Volume3D, spec: ThinningSpec) -> Volume3D:
    """Simulated low-dose acquisition: keep each event with probability 1/factor."""
    if counts.domain != DOMAIN_COUNTS:
        raise DomainError(f"thinning operates on counts volumes, got domain {counts.domain!r}")
    rng = np.random.default_rng(spec.seed)
    data = binomial_thin(np.asarray(counts.data, dtype=np.float64), spec.keep_probability, rng)
    return Volume3D(data=data, spacing=counts.spacing, domain=DOMAIN_COUNTS, name=counts.name)


def normalization_scale(nor: Volume3D, percentile: float = DEFAULT_SCALE_PERCENTILE) -> float:
    """Robust intensity scale of a normal-dose volume (upper-percentile value)."""
    scale = float(np.percentile(nor.data, percentile))
    if scale <= 0:
        raise DomainError(f"normalization scale must be positive, got {scale} at percentile {percentile}")
    return scale


def normalize_counts(counts: Volume3D, scale: float, dose_factor: float = 1.0) -> Volume3D:
    """Map counts to the common intensity scale.

    Thinned volumes pass their dose factor so low- and normal-dose land on
    the same scale in expectation.
    """
    if counts.domain != DOMAIN_COUNTS:
        raise DomainError(f"normalize_counts expects a counts volume, got domain {counts.domain!r}")
    if scale <= 0:
        raise DomainError(f"scale must be > 0, got {scale}")
    if dose_factor < 1:
        raise DomainError(f"dose factor must be >= 1, got {dose_factor}")
    data = np.asarray(counts.data, dtype=np.float64) * (dose_factor / scale)
    return Volume3D(data=data, spacing=counts.spacing, domain=DOMAIN_NORMALIZED, name=counts.name)


def _sample_ellipsoids(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Ellipsoid, ...]:
    out = []
    shape = spec.shape
    for _ in range(spec.n_ellipsoids):
        semi = tuple(float(rng.uniform(0.08, 0.22) * shape[a]) for a in range(3))
        center = tuple(
            float(rng.uniform(semi[a], shape[a] - 1 - semi[a])) for a in range(3)
        )
        out.append(Ellipsoid(center=center, semiaxes=semi))
    return tuple(out)


def phantom_fields(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noiseless maps: (pet activity lam, MR contrast, ellipsoid membership mask).

    Later ellipsoids paint over earlier ones, so both modalities share the
    same piecewise-constant geometry voxel for voxel.
    """
    rng = np.random.default_rng(spec.seed)
    ellipsoids = spec.ellipsoids if spec.ellipsoids is not None else _sample_ellipsoids(spec, rng)
    uptakes = rng.uniform(spec.uptake_range[0], spec.uptake_range[1], size=spec.n_ellipsoids)
    if spec.mr_contrast_map is not None:
        contrasts = np.asarray(spec.mr_contrast_map, dtype=np.float64)
    else:
        contrasts = rng.uniform(0.3, 1.0, size=spec.n_ellipsoids)
    lam = np.full(spec.shape, float(spec.background_uptake), dtype=np.float64)
    mr = np.full(spec.shape, float(spec.mr_background), dtype=np.float64)
    membership = np.zeros(spec.shape, dtype=bool)
    for e, uptake, contrast in zip(ellipsoids, uptakes, contrasts):
        m = e.mask(spec.shape)
        lam[m] = uptake
        mr[m] = contrast
        membership |= m
    return lam, mr, membership


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D]:
    """Draw one (pet_counts, mr) pair; bitwise reproducible from the seed.

    The geometry/intensity stream and the noise stream are split off the same
    seed so the noiseless fields and the noisy draws stay coupled.
    """
    lam, mr_clean, _ = phantom_fields(spec)
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    pet = noise_rng.poisson(lam).astype(np.float64)
    sigma = 0.01 * float(mr_clean.max())
    mr = mr_clean + noise_rng.normal(0.0, sigma, size=mr_clean.shape) if sigma > 0 else mr_clean.copy()
    pet_vol = Volume3D(data=pet, domain=DOMAIN_COUNTS, name=f"phantom{spec.seed:04d}")
    mr_vol = Volume3D(data=mr, domain=DOMAIN_NORMALIZED, name=f"phantom{spec.seed:04d}_mr")
    return pet_vol, mr_vol
