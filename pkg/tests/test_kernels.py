import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpkmd.kernels import (
    KernelSpec,
    contract_cross_grad,
    contract_cross_hyper,
    gram,
    gram_diag,
    gram_grad_input,
    median_lengthscale,
)

VARIANTS = [
    KernelSpec("rbf", 1.3, 0.9),
    KernelSpec("linear", linear_variance=0.7),
    KernelSpec("rbf_plus_linear", 0.8, 1.4, 0.6),
]


def test_single_point_rbf_is_variance():
    assert np.array_equal(gram(np.zeros((2, 1)), np.zeros((2, 1)), KernelSpec("rbf", 1.0, 2.0)), [[1.0]])


def test_rbf_closed_form_off_diagonal():
    ell = 0.7
    pts = np.array([[0.0, ell * np.sqrt(2.0)]])
    g = gram(pts, pts, KernelSpec("rbf", 1.0, ell))
    assert g[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-14)


def test_linear_kernel_is_scaled_inner_product(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    assert np.allclose(gram(a, b, KernelSpec("linear", linear_variance=2.5)), 2.5 * a.T @ b)


@pytest.mark.parametrize("spec", VARIANTS)
def test_random_gram_is_psd(rng, spec):
    pts = rng.standard_normal((2, 5))
    assert np.min(np.linalg.eigvalsh(gram(pts, pts, spec))) >= -1e-9


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(variant="rbf", rbf_variance=0.0),
        dict(variant="rbf", rbf_lengthscale=-1.0),
        dict(variant="linear", linear_variance=-0.1),
        dict(variant="matern"),
    ],
)
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(ValueError):
        KernelSpec(**kwargs)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        gram(np.zeros((2, 3)), np.zeros((3, 3)), KernelSpec())


def test_spec_dict_round_trip():
    spec = VARIANTS[2]
    assert KernelSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("spec", VARIANTS)
def test_gram_swap_is_transpose(rng, spec):
    a, b = rng.standard_normal((2, 4)), rng.standard_normal((2, 6))
    assert np.allclose(gram(a, b, spec), gram(b, a, spec).T, atol=1e-14)


@pytest.mark.parametrize("spec", VARIANTS)
def test_gram_diag_matches_gram(rng, spec):
    pts = rng.standard_normal((3, 5))
    assert np.allclose(gram_diag(pts, spec), np.diag(gram(pts, pts, spec)))


def test_zero_points_give_constant_rbf_gram(rng):
    pts = 0.0 * rng.standard_normal((2, 4))
    assert np.allclose(gram(pts, pts, KernelSpec("rbf", 1.7, 0.3)), 1.7 * np.ones((4, 4)))


def test_median_lengthscale():
    pts = np.array([[0.0, 1.0, 3.0]])
    assert median_lengthscale(pts) == 2.0
    assert median_lengthscale(np.zeros((2, 4))) == 1.0
    assert median_lengthscale(np.zeros((2, 1))) == 1.0


# ------------------------------------------------------------ gradients


def test_single_point_rbf_gradient_is_zero():
    assert np.array_equal(gram_grad_input(np.ones((2, 1)), KernelSpec(), 1, 0), [0.0])


def test_two_point_rbf_gradient_closed_form():
    spec = KernelSpec("rbf", 1.0, 0.8)
    pts = np.array([[0.3, -0.5], [1.0, 0.2]])
    k01 = gram(pts, pts, spec)[0, 1]
    col = gram_grad_input(pts, spec, 0, 0)
    assert col[1] == pytest.approx(-(0.3 + 0.5) / 0.8**2 * k01, rel=1e-12)
    assert col[0] == 0.0


def test_two_point_linear_gradient():
    spec = KernelSpec("linear", linear_variance=1.5)
    pts = np.array([[0.3, -0.5], [1.0, 0.2]])
    col = gram_grad_input(pts, spec, 1, 0)
    assert col[1] == pytest.approx(1.5 * 0.2)


def test_gradient_index_errors():
    with pytest.raises(IndexError):
        gram_grad_input(np.zeros((2, 3)), KernelSpec(), 2, 0)
    with pytest.raises(IndexError):
        gram_grad_input(np.zeros((2, 3)), KernelSpec(), 0, 3)


def _fd_column(pts, spec, p, i, h=1e-6):
    up, dn = pts.copy(), pts.copy()
    up[p, i] += h
    dn[p, i] -= h
    return (gram(up, up, spec) - gram(dn, dn, spec))[:, i] / (2 * h)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), which=st.integers(0, 2), data=st.data())
def test_gram_grad_input_matches_finite_differences(seed, which, data):
    rng = np.random.default_rng(seed)
    spec = VARIANTS[which]
    pts = rng.standard_normal((2, 6))
    p = data.draw(st.integers(0, 1))
    i = data.draw(st.integers(0, 5))
    fd = _fd_column(pts, spec, p, i)
    an = gram_grad_input(pts, spec, p, i)
    assert np.max(np.abs(an - fd)) <= 1e-5 * max(np.max(np.abs(fd)), 1e-3)


def test_rbf_gradient_trace_vanishes(rng):
    pts = rng.standard_normal((2, 6))
    col = gram_grad_input(pts, KernelSpec("rbf", 1.0, 1.0), 0, 2)
    # the full derivative has this column and row; its diagonal entry is 2 * col[i]
    assert col[2] == 0.0


@pytest.mark.parametrize("spec", VARIANTS)
def test_contractions_match_finite_differences(rng, spec):
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 3))
    w = rng.standard_normal((5, 3))

    def f(a_, b_, s_=spec):
        return float(np.sum(w * gram(a_, b_, s_)))

    ga, gb = contract_cross_grad(a, b, spec, w)
    h = 1e-6
    for pts, grad, first in ((a, ga, True), (b, gb, False)):
        fd = np.zeros_like(pts)
        for idx in np.ndindex(pts.shape):
            up, dn = pts.copy(), pts.copy()
            up[idx] += h
            dn[idx] -= h
            fd[idx] = (f(up, b) - f(dn, b)) / (2 * h) if first else (f(a, up) - f(a, dn)) / (2 * h)
        assert np.allclose(grad, fd, rtol=1e-6, atol=1e-7)

    hyper = contract_cross_hyper(a, b, spec, w)
    for name, value in hyper.items():
        theta = getattr(spec, name)
        up = spec.replace(**{name: theta * np.exp(h)})
        dn = spec.replace(**{name: theta * np.exp(-h)})
        assert value == pytest.approx((f(a, b, up) - f(a, b, dn)) / (2 * h), rel=1e-6, abs=1e-8)
