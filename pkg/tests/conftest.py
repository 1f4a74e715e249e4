import numpy as np
import pytest

from gpkmd.kernels import KernelSpec
from gpkmd.model import GpkmdParams


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_psd(rng, n, rank=None, complex_=False):
    rank = n if rank is None else rank
    a = crandn(rng, n, rank) if complex_ else rng.standard_normal((n, rank))
    return a @ a.conj().T


def random_instance(rng, d=3, t=7, k=2, p=2, noise_var=0.7, coef_var=1.3):
    """Random observations and parameters of a small GPKMD problem."""
    y = crandn(rng, d, t)
    params = GpkmdParams(
        rng.standard_normal((p, t + 1)),
        crandn(rng, d, k),
        crandn(rng, k),
        noise_var,
        coef_var,
    )
    return y, params


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def rbf():
    return KernelSpec("rbf", 1.2, 1.5)
