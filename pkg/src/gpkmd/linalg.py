"""Structured linear algebra for Kronecker-structured covariances.

Covariances here have the form ``noise_var * I + signal_var * (G kron H)``
where ``G`` is a temporal (T x T) Gram matrix and ``H`` an output-space
(D x D) Hermitian matrix.  Vectors of length ``D*T`` are column-major
stackings of a ``D x T`` matrix, so ``(G kron H) vec(Y) = vec(H Y G^T)``.

Two fast paths are provided:

* exact, from full eigendecompositions of both factors
  (:class:`StegleDecomposition`, :func:`stegle_solve`, :func:`stegle_logdet`);
* low rank, from thin factors ``G ~ U_G S_G^2 U_G^*`` and ``H ~ U_H S_H^2 U_H^*``
  (:func:`woodbury_solve`, :func:`woodbury_logdet`), which never forms more
  than an ``r_H x r_G`` diagonal system.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

JITTER = 1e-10
RIDGE = 1e-8
ICD_TOL = 1e-8


@dataclass(frozen=True)
class LowRankFactor:
    """Thin factor ``(u, sigma)`` of a PSD matrix ``u @ diag(sigma**2) @ u^*``.

    Attributes
    ----------
    u : ndarray, shape (n, r)
        Orthonormal columns.
    sigma : ndarray, shape (r,)
        Nonnegative, descending.
    """

    u: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u)
        sigma = np.asarray(self.sigma, dtype=float)
        if u.ndim != 2 or sigma.ndim != 1 or u.shape[1] != sigma.shape[0]:
            raise ValueError(
                f"incompatible factor shapes u={u.shape}, sigma={sigma.shape}"
            )
        if u.shape[1] > u.shape[0]:
            raise ValueError("rank exceeds matrix size")
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @property
    def eigvals(self) -> np.ndarray:
        return self.sigma**2

    def scaled(self) -> np.ndarray:
        """Return ``u @ diag(sigma)``, a square root of the represented matrix."""
        return self.u * self.sigma

    def dense(self) -> np.ndarray:
        b = self.scaled()
        return b @ b.conj().T

    @classmethod
    def from_root(cls, root: np.ndarray) -> "LowRankFactor":
        """Factor ``root @ root^*`` through a thin SVD of ``root``."""
        root = np.asarray(root)
        u, s, _ = np.linalg.svd(root, full_matrices=False)
        return cls(u, s)

    @classmethod
    def from_psd(cls, matrix: np.ndarray, rank: int | None = None) -> "LowRankFactor":
        """Truncated eigendecomposition of a Hermitian PSD matrix.

        Negative eigenvalues (round-off) are clamped to zero.
        """
        w, v = np.linalg.eigh(matrix)
        order = np.argsort(w)[::-1]
        w, v = w[order], v[:, order]
        if rank is not None:
            w, v = w[:rank], v[:, :rank]
        return cls(v, np.sqrt(np.clip(w, 0.0, None)))


@dataclass(frozen=True)
class StegleDecomposition:
    """Full eigendecompositions of the temporal and output factors."""

    u_k: np.ndarray
    s_k: np.ndarray
    u_w: np.ndarray
    s_w: np.ndarray

    @classmethod
    def from_matrices(cls, k: np.ndarray, h: np.ndarray) -> "StegleDecomposition":
        s_k, u_k = np.linalg.eigh(k)
        s_w, u_w = np.linalg.eigh(h)
        return cls(u_k, np.clip(s_k, 0.0, None), u_w, np.clip(s_w, 0.0, None))

    def factors(self) -> tuple[LowRankFactor, LowRankFactor]:
        """The same decomposition as a pair of full-rank :class:`LowRankFactor`."""
        ok = np.argsort(self.s_k)[::-1]
        ow = np.argsort(self.s_w)[::-1]
        g = LowRankFactor(self.u_k[:, ok], np.sqrt(self.s_k[ok]))
        h = LowRankFactor(self.u_w[:, ow], np.sqrt(self.s_w[ow]))
        return g, h


@dataclass(frozen=True)
class KroneckerCov:
    """``noise_var * I + signal_var * (K kron H)`` held in Stegle form."""

    noise_var: float
    signal_var: float
    decomposition: StegleDecomposition

    @property
    def shape(self) -> tuple[int, int]:
        return self.decomposition.u_w.shape[0], self.decomposition.u_k.shape[0]

    def dense(self) -> np.ndarray:
        dec = self.decomposition
        k = (dec.u_k * dec.s_k) @ dec.u_k.conj().T
        h = (dec.u_w * dec.s_w) @ dec.u_w.conj().T
        n = k.shape[0] * h.shape[0]
        return self.noise_var * np.eye(n) + self.signal_var * np.kron(k, h)


def _check_noise(noise_var: float) -> None:
    if not noise_var > 0:
        raise ValueError(f"noise_var must be positive, got {noise_var}")


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(matrix).ravel(order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (rows * cols,):
        raise ValueError(f"expected vector of length {rows * cols}, got {v.shape}")
    return v.reshape((rows, cols), order="F")


def kron_identities_check(
    a: np.ndarray,
    b: np.ndarray,
    c: np.ndarray,
    d: np.ndarray,
    *,
    kron: Callable[[np.ndarray, np.ndarray], np.ndarray] = np.kron,
    vec: Callable[[np.ndarray], np.ndarray] = vec,
    tol: float = 1e-10,
) -> bool:
    """Check the mixed-product, vec, trace and inner-product identities.

    The ``kron`` and ``vec`` primitives are injectable so the check can be
    used to validate an implementation of either convention.  All four
    inputs must be square and of equal size.
    """
    mats = [np.asarray(m, dtype=complex) for m in (a, b, c, d)]
    n = mats[0].shape[0]
    for m in mats:
        if m.ndim != 2 or m.shape != (n, n):
            raise ValueError("kron_identities_check needs equal-size square matrices")
    a, b, c, d = mats

    def close(x, y):
        x, y = np.asarray(x), np.asarray(y)
        if x.shape != y.shape:
            return False
        scale = max(1.0, float(np.max(np.abs(y), initial=0.0)))
        return bool(np.max(np.abs(x - y), initial=0.0) <= tol * scale)

    return (
        close(kron(a, b) @ kron(c, d), kron(a @ c, b @ d))
        and close(vec(a @ b @ c), kron(c.T, a) @ vec(b))
        and close(np.trace(kron(a, b)), np.trace(a) * np.trace(b))
        and close(np.vdot(vec(a), vec(b)), np.trace(a.conj().T @ b))
    )


def stegle_solve(cov: KroneckerCov, v: np.ndarray) -> np.ndarray:
    """Solve ``cov @ x = v`` through the two eigenbases."""
    _check_noise(cov.noise_var)
    dec = cov.decomposition
    d, t = cov.shape
    y = unvec(np.asarray(v, dtype=complex), d, t)
    z = dec.u_w.conj().T @ y @ dec.u_k.conj()
    z /= cov.noise_var + cov.signal_var * np.outer(dec.s_w, dec.s_k)
    return vec(dec.u_w @ z @ dec.u_k.T)


def stegle_logdet(cov: KroneckerCov) -> float:
    _check_noise(cov.noise_var)
    dec = cov.decomposition
    return float(
        np.sum(np.log(cov.noise_var + cov.signal_var * np.outer(dec.s_w, dec.s_k)))
    )


def uniform_landmarks(n: int, s: int) -> np.ndarray:
    """``s`` distinct indices spread with uniform stride over ``range(n)``."""
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    return np.unique(np.round(np.linspace(0, n - 1, s)).astype(int))


def nystrom(
    gram_column_oracle: Callable[[np.ndarray], np.ndarray],
    landmark_indices: Sequence[int],
    t: int,
    jitter: float = JITTER,
) -> LowRankFactor:
    """Nystrom factor of an ``t x t`` PSD Gram matrix.

    Parameters
    ----------
    gram_column_oracle : callable
        ``oracle(idx)`` returns the ``t x len(idx)`` block of Gram columns.
    landmark_indices : sequence of int
        Distinct landmark indices, at most ``t`` of them.
    t : int
        Size of the Gram matrix.
    jitter : float
        Eigenvalues of the landmark block below ``jitter * max`` are dropped.

    Returns
    -------
    LowRankFactor
        ``R R^T ~ K`` with ``K ~ C W^+ C^T``; at most ``len(landmarks)`` columns.
    """
    idx = np.asarray(landmark_indices, dtype=int)
    if idx.ndim != 1 or idx.size == 0:
        raise ValueError("landmark_indices must be a non-empty 1-d sequence")
    if np.unique(idx).size != idx.size:
        raise ValueError("duplicate landmark indices")
    if idx.size > t:
        raise ValueError(f"{idx.size} landmarks exceed matrix size {t}")
    if idx.min() < 0 or idx.max() >= t:
        raise ValueError("landmark index out of range")

    c = np.asarray(gram_column_oracle(idx), dtype=float)
    if c.shape != (t, idx.size):
        raise ValueError(f"oracle returned shape {c.shape}, expected {(t, idx.size)}")
    inv_root = pinv_root(c[idx], jitter)
    if inv_root.shape[1] == 0:
        return LowRankFactor(np.zeros((t, 0)), np.zeros(0))
    return LowRankFactor.from_root(c @ inv_root)


def ridge_inv_root(block: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """``B`` with ``B B^T = (block + c I)^{-1}``, ``c = ridge * trace / n``.

    Unlike :func:`pinv_root` this is smooth in ``block``, so objectives
    built on it stay differentiable when eigenvalues approach zero.
    """
    block = np.asarray(block, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (block + block.T))
    c = ridge * float(np.trace(block)) / max(block.shape[0], 1)
    if c <= 0:
        return np.zeros((block.shape[0], 0))
    return evecs / np.sqrt(np.maximum(evals, 0.0) + c)


def pinv_root(block: np.ndarray, jitter: float = JITTER) -> np.ndarray:
    """``B`` with ``B B^T`` the pseudo-inverse of a symmetric PSD block.

    Eigenvalues at or below ``jitter`` times the largest are treated as zero.
    """
    block = np.asarray(block, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (block + block.T))
    top = evals.max(initial=0.0)
    keep = evals > jitter * top if top > 0 else np.zeros_like(evals, dtype=bool)
    return evecs[:, keep] / np.sqrt(evals[keep])


def incomplete_cholesky(
    diagonal: np.ndarray,
    gram_column_oracle: Callable[[np.ndarray], np.ndarray],
    max_rank: int,
    tol: float = ICD_TOL,
) -> tuple[LowRankFactor, np.ndarray]:
    """Pivoted incomplete Cholesky factorization of a PSD Gram matrix.

    Stops when the largest residual diagonal entry drops to ``tol`` or
    ``max_rank`` pivots have been taken.  Returns the factor and the
    selected pivot indices.
    """
    resid = np.array(diagonal, dtype=float)
    n = resid.shape[0]
    max_rank = min(max_rank, n)
    g = np.zeros((n, max_rank))
    pivots = []
    for j in range(max_rank):
        i = int(np.argmax(resid))
        if resid[i] <= tol:
            break
        col = np.asarray(gram_column_oracle(np.array([i])), dtype=float)[:, 0]
        col = col - g[:, :j] @ g[i, :j]
        g[:, j] = col / np.sqrt(resid[i])
        resid -= g[:, j] ** 2
        resid[i] = 0.0
        pivots.append(i)
    g = g[:, : len(pivots)]
    return LowRankFactor.from_root(g), np.array(pivots, dtype=int)


def _spectral_terms(noise_var, signal_var, g: LowRankFactor, h: LowRankFactor):
    # c[j, i] pairs the j-th output component with the i-th temporal one
    c = signal_var * np.outer(h.eigvals, g.eigvals)
    return c, c / (noise_var + c)


def project(g: LowRankFactor, h: LowRankFactor, y: np.ndarray) -> np.ndarray:
    """``(U_G kron U_H)^* vec(y)`` as an ``r_H x r_G`` matrix."""
    return h.u.conj().T @ y @ g.u.conj()


def woodbury_solve_matrix(noise_var, signal_var, g, h, y):
    """Matrix form of :func:`woodbury_solve` acting on a ``D x T`` array."""
    _check_noise(noise_var)
    _, shrink = _spectral_terms(noise_var, signal_var, g, h)
    z = project(g, h, y)
    return (y - h.u @ (shrink * z) @ g.u.T) / noise_var


def woodbury_solve(
    noise_var: float,
    signal_var: float,
    g: LowRankFactor,
    h: LowRankFactor,
    v: np.ndarray,
) -> np.ndarray:
    """Apply ``(noise_var I + signal_var (G kron H))^{-1}`` to ``v``.

    ``G`` and ``H`` are taken as exactly ``g.dense()`` and ``h.dense()``;
    ``v`` has length ``h.n * g.n`` in column-major order.
    """
    y = unvec(np.asarray(v, dtype=complex), h.n, g.n)
    return vec(woodbury_solve_matrix(noise_var, signal_var, g, h, y))


def woodbury_logdet(
    noise_var: float,
    signal_var: float,
    g: LowRankFactor,
    h: LowRankFactor,
    d: int,
    t: int,
) -> float:
    """Log-determinant via the Weinstein-Aronszajn identity."""
    _check_noise(noise_var)
    if g.n != t or h.n != d:
        raise ValueError("factor sizes do not match (d, t)")
    c, _ = _spectral_terms(noise_var, signal_var, g, h)
    return float((d * t - c.size) * np.log(noise_var) + np.sum(np.log(noise_var + c)))
