"""GPKMD log-posterior: marginal likelihood, priors and gradients.

The likelihood is the sum of two zero-mean complex-normal log-densities of
``vec(Y)`` (column-major), with covariances

    noise_var I + coef_var (K1 kron W W^*)
    noise_var I + coef_var (K0 kron W L L^* W^*)

where ``K1`` is the Gram matrix of ``x_1..x_T``, ``K0`` that of
``x_0..x_{T-1}`` and ``L = diag(eigenvalues)``.

The fast path replaces both Gram matrices with one Nystrom approximation
``C Omega^+ C^T`` over ``x_0..x_T`` and evaluates everything in the joint
eigenbasis of the two Kronecker factors.  Latent and kernel gradients are
those of the approximated objective: the Gram weights are pushed through
``C`` and ``Omega``, so only ``T x S`` arrays are formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .kernels import (
    KernelSpec,
    contract_cross_grad,
    contract_cross_hyper,
    gram,
    gram_diag,
)
from .linalg import (
    LowRankFactor,
    incomplete_cholesky,
    RIDGE,
    ridge_inv_root,
    project,
    uniform_landmarks,
)

FACTORIZERS = ("nystrom", "icd")


@dataclass
class GpkmdParams:
    """Point in GPKMD parameter space.

    Attributes
    ----------
    latents : ndarray, shape (P, T + 1)
        Real latent states ``x_0 .. x_T``.
    modes : ndarray, shape (D, K)
        Complex Koopman modes.
    eigenvalues : ndarray, shape (K,)
        Complex discrete-time Koopman eigenvalues.
    noise_var, coef_var : float
        Observation noise variance and expansion-coefficient variance.
    """

    latents: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    noise_var: float
    coef_var: float

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=float)
        self.modes = np.asarray(self.modes, dtype=complex)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=complex)
        self.noise_var = float(self.noise_var)
        self.coef_var = float(self.coef_var)
        if self.latents.ndim != 2 or self.modes.ndim != 2 or self.eigenvalues.ndim != 1:
            raise ValueError("latents and modes must be 2-d, eigenvalues 1-d")
        if self.modes.shape[1] != self.eigenvalues.shape[0]:
            raise ValueError("modes and eigenvalues disagree on K")
        if not (self.noise_var > 0 and self.coef_var > 0):
            raise ValueError("noise_var and coef_var must be positive")
        for arr in (self.latents, self.modes, self.eigenvalues):
            if not np.all(np.isfinite(arr)):
                raise ValueError("parameters must be finite")
        if self.K > self.D:
            warnings.warn(f"K={self.K} exceeds D={self.D}", stacklevel=2)

    @property
    def P(self) -> int:
        return self.latents.shape[0]

    @property
    def T(self) -> int:
        return self.latents.shape[1] - 1

    @property
    def D(self) -> int:
        return self.modes.shape[0]

    @property
    def K(self) -> int:
        return self.modes.shape[1]

    def copy(self, **changes) -> "GpkmdParams":
        base = dict(
            latents=self.latents.copy(),
            modes=self.modes.copy(),
            eigenvalues=self.eigenvalues.copy(),
            noise_var=self.noise_var,
            coef_var=self.coef_var,
        )
        base.update(changes)
        return GpkmdParams(**base)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of the GPDM latent prior and the parameter priors."""

    latent_scale: float = 1.0
    latent_kernel: KernelSpec = field(
        default_factory=lambda: KernelSpec("rbf_plus_linear")
    )
    mode_scale: float = 1.0
    eig_scale: float = 1.0
    noise_shape: float = 1e-3
    noise_rate: float = 1e-3
    coef_shape: float = 1e-3
    coef_rate: float = 1e-3

    def __post_init__(self):
        for name in (
            "latent_scale",
            "mode_scale",
            "eig_scale",
            "noise_shape",
            "noise_rate",
            "coef_shape",
            "coef_rate",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["latent_kernel"] = self.latent_kernel.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PriorSpec":
        data = dict(data)
        if isinstance(data.get("latent_kernel"), dict):
            data["latent_kernel"] = KernelSpec.from_dict(data["latent_kernel"])
        return cls(**data)


@dataclass(frozen=True)
class KoopmanSpectrum:
    """Discrete-time eigenvalues together with the sampling interval."""

    discrete: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "discrete", np.asarray(self.discrete, dtype=complex))
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def continuous(self) -> np.ndarray:
        from .initialization import to_continuous

        return to_continuous(self)


@dataclass
class Evaluation:
    """Log-posterior value with its parts and (optionally) all gradients.

    Complex gradients follow ``d/dRe + i d/dIm``.  Variance gradients are
    taken with respect to ``log noise_var`` and ``log coef_var``; kernel
    hyperparameter gradients with respect to their logarithms.
    """

    value: float
    log_likelihood: float
    log_prior: float
    latents: np.ndarray | None = None
    modes: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    log_noise_var: float | None = None
    log_coef_var: float | None = None
    kernel: dict | None = None
    latent_kernel: dict | None = None


def _check_inputs(y: np.ndarray, params: GpkmdParams) -> np.ndarray:
    y = np.asarray(y, dtype=complex)
    if y.ndim != 2:
        raise ValueError("observations must be a D x T matrix")
    d, t = y.shape
    if t < 2:
        raise ValueError("need at least T = 2 time steps")
    if d != params.D or t != params.T:
        raise ValueError(
            f"observations {y.shape} do not match params (D={params.D}, T={params.T})"
        )
    return y


def default_landmarks(t: int, rank_s: int) -> np.ndarray:
    """Landmarks over the ``t + 1`` latent states; all of them when ``rank_s >= t``."""
    if rank_s < 1:
        raise ValueError("rank_s must be at least 1")
    if rank_s > t:
        raise ValueError(f"rank_s={rank_s} exceeds T={t}")
    if rank_s == t:
        return np.arange(t + 1)
    return uniform_landmarks(t + 1, rank_s)


@dataclass
class GramApprox:
    """Nystrom approximation ``C Omega^+ C^T`` of the Gram of ``x_0..x_T``.

    ``cross`` holds the ``(T + 1) x S`` landmark columns and ``inv_root``
    a factor with ``inv_root inv_root^T`` the ridge-regularized inverse of
    the landmark block ``Omega``.
    """

    landmarks: np.ndarray
    cross: np.ndarray
    inv_root: np.ndarray

    def factors(self) -> tuple[LowRankFactor, LowRankFactor]:
        """Factors of the ``x_1..x_T`` and ``x_0..x_{T-1}`` blocks."""
        root = self.cross @ self.inv_root
        return LowRankFactor.from_root(root[1:]), LowRankFactor.from_root(root[:-1])


def gram_approx(
    latents: np.ndarray,
    kernel: KernelSpec,
    rank_s: int,
    landmarks: np.ndarray | None = None,
    factorizer: str = "nystrom",
) -> GramApprox:
    """Shared low-rank Gram approximation over all ``T + 1`` latent states.

    ``factorizer="icd"`` picks the landmarks as the pivots of an incomplete
    Cholesky run; the resulting approximation is the same as that run's.
    """
    x = np.asarray(latents, dtype=float)
    t = x.shape[1] - 1
    if factorizer == "nystrom":
        if landmarks is None:
            landmarks = default_landmarks(t, rank_s)
    elif factorizer == "icd":
        max_rank = t + 1 if rank_s >= t else rank_s
        _, landmarks = incomplete_cholesky(
            gram_diag(x, kernel), lambda idx: gram(x, x[:, idx], kernel), max_rank
        )
        landmarks = np.sort(landmarks)
    else:
        raise ValueError(f"unknown factorizer {factorizer!r}")
    landmarks = np.asarray(landmarks, dtype=int)
    if landmarks.size == 0 or np.unique(landmarks).size != landmarks.size:
        raise ValueError("landmarks must be non-empty and distinct")
    cross = gram(x, x[:, landmarks], kernel)
    return GramApprox(landmarks, cross, ridge_inv_root(cross[landmarks]))


def gram_factors(
    latents: np.ndarray,
    kernel: KernelSpec,
    rank_s: int,
    landmarks: np.ndarray | None = None,
    factorizer: str = "nystrom",
) -> tuple[LowRankFactor, LowRankFactor]:
    """Low-rank factors of ``K1`` and ``K0`` from one shared factorization."""
    return gram_approx(latents, kernel, rank_s, landmarks, factorizer).factors()


class _Term:
    """One complex-normal factor ``CN(vec Y | 0, s2 I + sb2 (G kron H))``."""

    def __init__(self, y, noise_var, coef_var, g: LowRankFactor, h: LowRankFactor):
        self.y, self.g, self.h = y, g, h
        self.noise, self.coef = np.float64(noise_var), np.float64(coef_var)
        self.n = y.size
        self.gh = np.outer(h.eigvals, g.eigvals)
        self.c = coef_var * self.gh
        self.denom = noise_var + self.c
        self.shrink = self.c / self.denom
        self.z = project(g, h, y)
        self.az2 = np.abs(self.z) ** 2
        self.perp = max(float(np.vdot(y, y).real) - float(self.az2.sum()), 0.0)
        logdet = (self.n - self.c.size) * np.log(noise_var) + np.sum(np.log(self.denom))
        quad = self.perp / noise_var + np.sum(self.az2 / self.denom)
        self.value = float(-self.n * np.log(np.pi) - logdet - quad)

    def alpha(self) -> np.ndarray:
        """``Sigma^{-1} vec(Y)`` as a D x T matrix."""
        return (self.y - self.h.u @ (self.shrink * self.z) @ self.g.u.T) / self.noise

    def variance_grads(self) -> tuple[float, float]:
        """Derivatives w.r.t. ``noise_var`` and ``coef_var`` (not log)."""
        r = 1.0 / self.denom - self.az2 / self.denom**2
        dnoise = (
            -(self.n - self.c.size) / self.noise
            + self.perp / self.noise**2
            - float(np.sum(r))
        )
        dcoef = -float(np.sum(self.gh * r))
        return dnoise, dcoef

    def gram_weight_apply(self, alpha, mat) -> np.ndarray:
        """``Phi @ mat`` for the symmetric ``Phi`` with ``d value = sum dG * Phi``."""
        m = self.h.sigma[:, None] * (self.h.u.conj().T @ alpha)
        e = self.shrink.T @ self.h.eigvals
        tr_h = float(self.h.eigvals.sum())
        out = (m.conj().T @ (m @ mat)).real
        out += ((self.g.u * e) @ (self.g.u.T @ mat) - tr_h * mat) / self.noise
        return self.coef * out

    def output_weight(self, alpha) -> np.ndarray:
        """Hermitian ``Psi`` with ``d value = tr(dH Psi)``."""
        f = (alpha @ self.g.u) * self.g.sigma
        q = self.shrink @ self.g.eigvals
        tr_g = float(self.g.eigvals.sum())
        xi = tr_g * np.eye(self.h.n) - (self.h.u * q) @ self.h.u.conj().T
        return self.coef * (f @ f.conj().T - xi / self.noise)


def _invgamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def _cn_logpdf_sum(z, scale):
    z = np.asarray(z)
    return float(-z.size * np.log(np.pi * scale) - np.sum(np.abs(z) ** 2) / scale)


def _prior(params: GpkmdParams, prior: PriorSpec, gradient: bool, hyper: bool):
    x = params.latents
    p, t = params.P, params.T
    s2 = prior.latent_scale
    x0, x1, xin = x[:, 0], x[:, 1:], x[:, :-1]
    kx = prior.latent_kernel

    cmat = gram(xin, xin, kx) + s2 * np.eye(t)
    chol = cho_factor(cmat, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
    b = cho_solve(chol, x1.T)  # C^{-1} X1^T
    value = (
        -0.5 * p * np.log(2 * np.pi * s2)
        - 0.5 * float(x0 @ x0) / s2
        - 0.5 * p * t * np.log(2 * np.pi)
        - 0.5 * p * logdet
        - 0.5 * float(np.sum(x1.T * b))
    )
    value += _cn_logpdf_sum(params.modes, prior.mode_scale)
    value += _cn_logpdf_sum(params.eigenvalues, prior.eig_scale)
    value += _invgamma_logpdf(params.noise_var, prior.noise_shape, prior.noise_rate)
    value += _invgamma_logpdf(params.coef_var, prior.coef_shape, prior.coef_rate)
    if not gradient:
        return float(value), None

    grads = {}
    gx = np.zeros_like(x)
    gx[:, 0] = -x0 / s2
    gx[:, 1:] = -b.T
    cinv = cho_solve(chol, np.eye(t))
    phi = 0.5 * (b @ b.T - p * cinv)
    ga, gb = contract_cross_grad(xin, xin, kx, phi)
    gx[:, :-1] += ga + gb
    grads["latents"] = gx
    grads["modes"] = -2.0 * params.modes / prior.mode_scale
    grads["eigenvalues"] = -2.0 * params.eigenvalues / prior.eig_scale
    grads["log_noise_var"] = -(prior.noise_shape + 1) + prior.noise_rate / params.noise_var
    grads["log_coef_var"] = -(prior.coef_shape + 1) + prior.coef_rate / params.coef_var
    if hyper:
        grads["latent_kernel"] = contract_cross_hyper(xin, xin, kx, phi)
    return float(value), grads


def evaluate(
    y: np.ndarray,
    params: GpkmdParams,
    kernel: KernelSpec,
    prior: PriorSpec,
    rank_s: int,
    *,
    gradient: bool = True,
    hyper: bool = False,
    landmarks: np.ndarray | None = None,
    factorizer: str = "nystrom",
) -> Evaluation:
    """Fast-path log-posterior and, if requested, every gradient.

    Parameters
    ----------
    y : ndarray, shape (D, T)
    params : GpkmdParams
    kernel : KernelSpec
        Kernel of the likelihood Gram matrices.
    prior : PriorSpec
    rank_s : int
        Rank of the shared Gram factorization; ``rank_s == T`` is exact.
    gradient : bool
        Also compute gradients.
    hyper : bool
        Also compute gradients w.r.t. log kernel hyperparameters.
    """
    y = _check_inputs(y, params)
    x = params.latents
    approx = gram_approx(x, kernel, rank_s, landmarks, factorizer)
    g1, g0 = approx.factors()
    w = params.modes
    v = w * params.eigenvalues
    h1 = LowRankFactor.from_root(w)
    h2 = LowRankFactor.from_root(v)
    terms = (
        _Term(y, params.noise_var, params.coef_var, g1, h1),
        _Term(y, params.noise_var, params.coef_var, g0, h2),
    )
    loglik = terms[0].value + terms[1].value
    logprior, pgrad = _prior(params, prior, gradient, hyper)
    out = Evaluation(loglik + logprior, loglik, logprior)
    if not gradient:
        return out

    dnoise = dcoef = 0.0
    psis = []
    # d value = <Phi, dK~> with K~ = C Omega^+ C^T, so
    # d value = 2 <Phi C Omega^+, dC> - <Omega^+ C^T Phi C Omega^+, dOmega>
    phi_c = np.zeros_like(approx.cross)
    for term, cols in zip(terms, (slice(1, None), slice(None, -1))):
        alpha = term.alpha()
        phi_c[cols] += term.gram_weight_apply(alpha, approx.cross[cols])
        dn, dc = term.variance_grads()
        dnoise += dn
        dcoef += dc
        psis.append(term.output_weight(alpha))

    inv = approx.inv_root
    b = (phi_c @ inv) @ inv.T
    e = inv @ (inv.T @ (approx.cross.T @ b))
    e = 0.5 * (e + e.T)
    # the ridge is proportional to trace(Omega)
    e[np.diag_indices_from(e)] += RIDGE * np.trace(e) / e.shape[0]
    marks = approx.landmarks
    xl = x[:, marks]
    ga, gb = contract_cross_grad(x, xl, kernel, 2.0 * b)
    ea, eb = contract_cross_grad(xl, xl, kernel, e)
    gx = pgrad["latents"] + ga
    np.add.at(gx.T, marks, (gb - ea - eb).T)

    grad_v = 2.0 * psis[1] @ v
    out.latents = gx
    out.modes = 2.0 * psis[0] @ w + grad_v * params.eigenvalues.conj() + pgrad["modes"]
    out.eigenvalues = np.sum(w.conj() * grad_v, axis=0) + pgrad["eigenvalues"]
    out.log_noise_var = params.noise_var * dnoise + pgrad["log_noise_var"]
    out.log_coef_var = params.coef_var * dcoef + pgrad["log_coef_var"]
    if hyper:
        out.kernel = contract_cross_hyper(x, xl, kernel, 2.0 * b)
        for name, val in contract_cross_hyper(xl, xl, kernel, e).items():
            out.kernel[name] -= val
        out.latent_kernel = pgrad["latent_kernel"]
    return out


def log_likelihood_naive(y: np.ndarray, params: GpkmdParams, kernel: KernelSpec) -> float:
    """Dense reference likelihood; builds both ``DT x DT`` covariances."""
    y = _check_inputs(y, params)
    x = params.latents
    k1 = gram(x[:, 1:], x[:, 1:], kernel)
    k0 = gram(x[:, :-1], x[:, :-1], kernel)
    w = params.modes
    v = w * params.eigenvalues
    yv = y.ravel(order="F")
    n = yv.size
    total = 0.0
    for k, h in ((k1, w @ w.conj().T), (k0, v @ v.conj().T)):
        cov = params.noise_var * np.eye(n) + params.coef_var * np.kron(k, h)
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(chol, yv)
        total += -n * np.log(np.pi) - 2 * np.sum(np.log(np.diag(chol).real))
        total -= float(np.vdot(sol, sol).real)
    return float(total)


def log_likelihood_fast(
    y: np.ndarray,
    params: GpkmdParams,
    kernel: KernelSpec,
    rank_s: int,
    **kwargs,
) -> float:
    return evaluate(y, params, kernel, PriorSpec(), rank_s, gradient=False, **kwargs).log_likelihood


def log_prior(params: GpkmdParams, prior: PriorSpec) -> float:
    return _prior(params, prior, gradient=False, hyper=False)[0]


def log_posterior(y, params, kernel, prior, rank_s, **kwargs) -> float:
    return evaluate(y, params, kernel, prior, rank_s, gradient=False, **kwargs).value


def grad_latents(y, params, kernel, prior, rank_s, **kwargs) -> np.ndarray:
    return evaluate(y, params, kernel, prior, rank_s, **kwargs).latents


def grad_modes(y, params, kernel, prior, rank_s, **kwargs) -> np.ndarray:
    return evaluate(y, params, kernel, prior, rank_s, **kwargs).modes


def grad_variances(y, params, kernel, prior, rank_s, **kwargs) -> tuple[float, float]:
    ev = evaluate(y, params, kernel, prior, rank_s, **kwargs)
    return ev.log_noise_var, ev.log_coef_var


def grad_eigenvalues(y, params, kernel, prior, rank_s, **kwargs) -> np.ndarray:
    return evaluate(y, params, kernel, prior, rank_s, **kwargs).eigenvalues


def eigenvalue_likelihood_grad(y, params, kernel, rank_s, **kwargs) -> np.ndarray:
    """Likelihood-only part of the eigenvalue gradient (prior excluded)."""
    ev = evaluate(y, params, kernel, PriorSpec(), rank_s, **kwargs)
    return ev.eigenvalues + 2.0 * params.eigenvalues / PriorSpec().eig_scale


__all__ = [
    "Evaluation",
    "GpkmdParams",
    "KoopmanSpectrum",
    "PriorSpec",
    "default_landmarks",
    "evaluate",
    "grad_eigenvalues",
    "grad_latents",
    "grad_modes",
    "grad_variances",
    "gram_factors",
    "log_likelihood_fast",
    "log_likelihood_naive",
    "log_posterior",
    "log_prior",
]
