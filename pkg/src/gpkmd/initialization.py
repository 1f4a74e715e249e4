"""PCA latents, SVD-based DMD and the GPKMD starting point built from them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec, median_lengthscale
from .model import GpkmdParams, KoopmanSpectrum

RANK_TOL = 1e-10
PAIR_TOL = 1e-8
SELECTIONS = ("svd", "amplitude")


@dataclass
class DmdResult:
    """Exact-DMD eigenvalues, modes and initial amplitudes.

    Triples are ordered by decreasing ``|amplitude|``.
    """

    eigenvalues: np.ndarray
    modes: np.ndarray
    amplitudes: np.ndarray
    mode_convention: str = "exact"

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]


def _real_view(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if np.iscomplexobj(y) and np.any(y.imag != 0):
        return np.vstack([y.real, y.imag])
    return np.asarray(y.real, dtype=float)


def pca_latents(y: np.ndarray, p: int) -> np.ndarray:
    """Top-``p`` principal-component scores of the observations.

    Complex data are stacked as ``[Re Y; Im Y]``.  A copy of ``x_1`` is
    prepended as ``x_0`` so the result is ``p x (T + 1)``.
    """
    z = _real_view(y)
    if not 1 <= p <= min(z.shape):
        raise ValueError(f"p={p} must lie in [1, {min(z.shape)}]")
    zc = z - z.mean(axis=1, keepdims=True)
    u, s, vh = np.linalg.svd(zc, full_matrices=False)
    # fix signs so the largest loading of each direction is positive
    flip = np.sign(u[np.argmax(np.abs(u[:, :p]), axis=0), np.arange(p)])
    flip[flip == 0] = 1.0
    scores = (s[:p, None] * vh[:p]) * flip[:, None]
    return np.hstack([scores[:, :1], scores])


def _select_with_pairs(eigenvalues, order, k):
    # pairs that do not fit are skipped whole; they only fill leftover
    # slots when no unpaired candidate remains
    chosen, skipped = [], []
    remaining = list(order)
    while len(chosen) < k and remaining:
        i = remaining.pop(0)
        lam = eigenvalues[i]
        partner = None
        if abs(lam.imag) > PAIR_TOL * max(1.0, abs(lam)):
            for j in remaining:
                if abs(eigenvalues[j] - lam.conjugate()) <= PAIR_TOL * max(1.0, abs(lam)):
                    partner = j
                    break
        if partner is None:
            chosen.append(i)
            continue
        remaining.remove(partner)
        if len(chosen) + 2 <= k:
            chosen += [i, partner]
        else:
            skipped += [i, partner]
    chosen += skipped[: k - len(chosen)]
    return np.array(chosen, dtype=int)


def dmd(y: np.ndarray, k: int, selection: str = "svd") -> DmdResult:
    """SVD-based exact DMD of the snapshot pairs ``(y_t, y_{t+1})``.

    Parameters
    ----------
    y : ndarray, shape (D, T)
    k : int
        Number of eigenvalue/mode pairs returned.
    selection : {"svd", "amplitude"}
        ``"svd"`` truncates the snapshot SVD at rank ``k``.  ``"amplitude"``
        keeps the full numerical rank and returns the ``k`` triples of
        largest amplitude, keeping complex-conjugate pairs together.
    """
    y = np.asarray(y, dtype=complex)
    if selection not in SELECTIONS:
        raise ValueError(f"unknown selection {selection!r}")
    d, t = y.shape
    if not 1 <= k <= min(d, t - 1):
        raise ValueError(f"k={k} must lie in [1, min(D, T-1)={min(d, t - 1)}]")
    y0, y1 = y[:, :-1], y[:, 1:]
    u, s, vh = np.linalg.svd(y0, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s.size and s[0] > 0 else 0
    if k > rank:
        raise ValueError(f"k={k} exceeds the numerical rank {rank} of the snapshots")
    r = k if selection == "svd" else rank
    u, s, v = u[:, :r], s[:r], vh[:r].conj().T
    y1v = (y1 @ v) / s
    atilde = u.conj().T @ y1v
    eigenvalues, vecs = np.linalg.eig(atilde)
    modes = y1v @ vecs
    amplitudes = np.linalg.lstsq(modes, y0[:, 0], rcond=None)[0]
    order = np.argsort(-np.abs(amplitudes), kind="stable")
    if selection == "amplitude":
        order = _select_with_pairs(eigenvalues, order, k)
    return DmdResult(eigenvalues[order], modes[:, order], amplitudes[order])


def to_continuous(spec: KoopmanSpectrum) -> np.ndarray:
    """Principal-branch ``log(lambda) / dt``."""
    lam = np.asarray(spec.discrete, dtype=complex)
    if np.any(lam == 0):
        raise ValueError("zero eigenvalue has no continuous-time counterpart")
    return np.log(lam) / spec.dt


@dataclass
class Initialization:
    params: GpkmdParams
    dmd: DmdResult
    kernel: KernelSpec
    latent_kernel: KernelSpec


def initialize(
    y: np.ndarray,
    n_modes: int,
    latent_dims: int,
    selection: str = "svd",
    coef_var: float = 1.0,
) -> Initialization:
    """Starting point for MAP fitting from PCA latents and DMD.

    Modes are DMD modes scaled by their amplitudes; the noise variance
    starts at the mean squared residual of a rank-``n_modes`` SVD of the
    data (floored at ``1e-4`` times the mean power).  Kernel lengthscales
    follow the median heuristic on the initial latents.
    """
    y = np.asarray(y, dtype=complex)
    latents = pca_latents(y, latent_dims)
    result = dmd(y, n_modes, selection)
    modes = result.modes * result.amplitudes

    u, s, vh = np.linalg.svd(y, full_matrices=False)
    resid = y - (u[:, :n_modes] * s[:n_modes]) @ vh[:n_modes]
    power = float(np.mean(np.abs(y) ** 2))
    noise_var = max(float(np.mean(np.abs(resid) ** 2)), 1e-4 * power, 1e-12)

    ell = median_lengthscale(latents)
    kernel = KernelSpec("rbf", 1.0, ell)
    latent_kernel = KernelSpec("rbf_plus_linear", 1.0, ell, 1.0)
    params = GpkmdParams(latents, modes, result.eigenvalues, noise_var, coef_var)
    return Initialization(params, result, kernel, latent_kernel)
