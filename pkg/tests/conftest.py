import numpy as np
import pytest

from tensorgrade.volume import RoiMask, SubjectMeta, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_log_volume(rng, dims=(4, 4, 4), scale=0.3, spacing=(1.0, 1.0, 1.0)):
    """Random symmetric 6-channel volume, log-tensor-like in magnitude."""
    nx, ny, nz = dims
    return Volume(scale * rng.standard_normal((nz, ny, nx, 6)), spacing)


def full_mask(dims):
    nx, ny, nz = dims
    return RoiMask(np.ones((nz, ny, nx), dtype=bool))


def meta(subject_id, label, age=50.0, scan_id="s1"):
    return SubjectMeta(subject_id=subject_id, scan_id=scan_id, age=age, label=label)
