"""Kernels on latent points, Gram assembly and Gram-gradient contractions.

Points are stored column-wise: a ``P x n`` array holds ``n`` latent states.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import pdist

VARIANTS = ("rbf", "linear", "rbf_plus_linear")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    ``rbf``: ``v exp(-|a - b|^2 / (2 l^2))``; ``linear``: ``v_lin a^T b``;
    ``rbf_plus_linear`` is their sum.
    """

    variant: str = "rbf"
    rbf_variance: float = 1.0
    rbf_lengthscale: float = 1.0
    linear_variance: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.has_rbf and not (self.rbf_variance > 0 and self.rbf_lengthscale > 0):
            raise ValueError("rbf_variance and rbf_lengthscale must be positive")
        if self.has_linear and not self.linear_variance >= 0:
            raise ValueError("linear_variance must be nonnegative")

    @property
    def has_rbf(self) -> bool:
        return self.variant in ("rbf", "rbf_plus_linear")

    @property
    def has_linear(self) -> bool:
        return self.variant in ("linear", "rbf_plus_linear")

    def hyper_names(self) -> list[str]:
        names = []
        if self.has_rbf:
            names += ["rbf_variance", "rbf_lengthscale"]
        if self.has_linear:
            names.append("linear_variance")
        return names

    def replace(self, **changes) -> "KernelSpec":
        return KernelSpec(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(**data)


def median_lengthscale(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance between columns; 1.0 if degenerate."""
    points = np.asarray(points, dtype=float)
    if points.shape[1] < 2:
        return 1.0
    med = float(np.median(pdist(points.T)))
    return med if med > 0 and np.isfinite(med) else 1.0


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(a**2, axis=0)[:, None]
        + np.sum(b**2, axis=0)[None, :]
        - 2.0 * a.T @ b
    )
    return np.maximum(d2, 0.0)


def _rbf(a, b, spec):
    return spec.rbf_variance * np.exp(-0.5 * _sqdist(a, b) / spec.rbf_lengthscale**2)


def gram(points_a: np.ndarray, points_b: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Gram matrix ``G[i, j] = k(a_i, b_j)`` for column-stored points."""
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"inconsistent point dimensions {a.shape} vs {b.shape}")
    out = np.zeros((a.shape[1], b.shape[1]))
    if spec.has_rbf:
        out += _rbf(a, b, spec)
    if spec.has_linear:
        out += spec.linear_variance * (a.T @ b)
    return out


def gram_diag(points: np.ndarray, spec: KernelSpec) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.shape[1])
    if spec.has_rbf:
        out += spec.rbf_variance
    if spec.has_linear:
        out += spec.linear_variance * np.sum(points**2, axis=0)
    return out


def gram_grad_input(points: np.ndarray, spec: KernelSpec, p: int, i: int) -> np.ndarray:
    """Column ``i`` of ``dG/dx_{p,i}`` for ``G = gram(points, points)``.

    All other entries of the derivative vanish except row ``i``, which
    equals this column by symmetry.
    """
    points = np.asarray(points, dtype=float)
    dim, n = points.shape
    if not (0 <= p < dim and 0 <= i < n):
        raise IndexError(f"index (p={p}, i={i}) out of range for points {points.shape}")
    xi = points[:, i : i + 1]
    col = np.zeros(n)
    if spec.has_rbf:
        k = _rbf(xi, points, spec)[0]
        col += -(points[p, i] - points[p]) / spec.rbf_lengthscale**2 * k
    if spec.has_linear:
        lin = spec.linear_variance * points[p].copy()
        lin[i] *= 2.0
        col += lin
    return col


def contract_cross_grad(
    points_a: np.ndarray, points_b: np.ndarray, spec: KernelSpec, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum_ij W_ij k(a_i, b_j)`` w.r.t. both point sets.

    Returns arrays shaped like ``points_a`` and ``points_b``.  When the two
    sets are the same points, the full gradient is the sum of both.
    """
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    if spec.has_rbf:
        kw = _rbf(a, b, spec) * weight
        scale = 1.0 / spec.rbf_lengthscale**2
        grad_a -= scale * (a * kw.sum(axis=1) - b @ kw.T)
        grad_b -= scale * (b * kw.sum(axis=0) - a @ kw)
    if spec.has_linear:
        grad_a += spec.linear_variance * (b @ weight.T)
        grad_b += spec.linear_variance * (a @ weight)
    return grad_a, grad_b


def contract_cross_hyper(
    points_a: np.ndarray, points_b: np.ndarray, spec: KernelSpec, weight: np.ndarray
) -> dict[str, float]:
    """``d/d log(theta) sum_ij W_ij k(a_i, b_j)`` for each hyperparameter."""
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    out = {}
    if spec.has_rbf:
        d2 = _sqdist(a, b)
        kw = spec.rbf_variance * np.exp(-0.5 * d2 / spec.rbf_lengthscale**2) * weight
        out["rbf_variance"] = float(np.sum(kw))
        out["rbf_lengthscale"] = float(np.sum(kw * d2) / spec.rbf_lengthscale**2)
    if spec.has_linear:
        out["linear_variance"] = float(spec.linear_variance * np.sum((a.T @ b) * weight))
    return out
