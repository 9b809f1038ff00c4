import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(rng, shape=(8, 8, 8), domain="normalized", lo=-1.0, hi=1.0, spacing=(1.0, 1.0, 1.0)):
    """Random volume on the float32 grid (values exactly representable in f32)."""
    data = rng.uniform(lo, hi, size=shape).astype(np.float32).astype(np.float64)
    if domain == "counts":
        data = np.abs(data)
    from csrd.volumes import Volume3D

    return Volume3D(data=data, spacing=spacing, domain=domain)
