"""MAP estimation of GPKMD parameters by nonlinear conjugate gradients.

The optimized vector holds every latent coordinate, the real and imaginary
parts of the modes, the eigenvalue magnitudes, ``log noise_var`` and
``log coef_var`` (plus log kernel hyperparameters when requested).
Eigenvalue angles are not free variables: they stay at their initial
values, and magnitudes are kept nonnegative by projection.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import KernelSpec
from .linalg import incomplete_cholesky
from .model import (
    GpkmdParams,
    PriorSpec,
    default_landmarks,
    evaluate,
)
from .kernels import gram, gram_diag

log = logging.getLogger(__name__)

STATUSES = ("converged", "max_iters", "line_search_failed")


@dataclass
class FitConfig:
    """Optimizer settings.

    ``restart_period`` defaults to the number of optimized variables.
    ``landmark_method="pivoted"`` re-selects Nystrom landmarks by pivoted
    Cholesky on the current latents every ``landmark_refresh`` iterations;
    the default uniform stride keeps them fixed.  With ``precondition`` the
    iteration runs in coordinates rescaled block by block (latents, mode
    real parts, mode imaginary parts, eigenvalue magnitudes, each log
    variance, kernel hyperparameters) by the square root of a curvature
    estimate, refreshed every ``precondition_refresh`` iterations.
    The first trial step of every line search moves no coordinate by more
    than ``max_step``.
    """

    max_iters: int = 500
    grad_tol: float = 1e-5
    restart_period: int | None = None
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_ls_steps: int = 40
    rank_s: int = 50
    seed: int = 0
    learn_kernel: bool = False
    landmark_method: str = "uniform"
    landmark_refresh: int = 25
    factorizer: str = "nystrom"
    initial_step: float = 0.1
    precondition: bool = True
    precondition_refresh: int = 50
    max_step: float = 1.0

    def __post_init__(self):
        if self.max_iters < 0 or self.rank_s < 1 or self.max_ls_steps < 1:
            raise ValueError("max_iters, rank_s and max_ls_steps must be positive")
        if not (self.grad_tol > 0 and 0 < self.shrink < 1 and 0 < self.armijo_c < 1 and self.max_step > 0):
            raise ValueError("invalid line-search or tolerance settings")
        if self.restart_period is not None and self.restart_period < 1:
            raise ValueError("restart_period must be positive")
        if self.landmark_method not in ("uniform", "pivoted"):
            raise ValueError(f"unknown landmark_method {self.landmark_method!r}")
        if self.landmark_refresh < 1 or self.precondition_refresh < 1:
            raise ValueError("refresh periods must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitTrace:
    """Per-iteration record; row 0 is the starting point."""

    iters: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    step: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    status: str = "max_iters"
    kernel: KernelSpec | None = None
    latent_kernel: KernelSpec | None = None
    restart_index: int = 0

    def append(self, it, objective, grad_norm, step, seconds):
        self.iters.append(int(it))
        self.objective.append(float(objective))
        self.grad_norm.append(float(grad_norm))
        self.step.append(float(step))
        self.seconds.append(float(seconds))

    def rows(self):
        return zip(self.iters, self.objective, self.grad_norm, self.step, self.seconds)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "objective", "grad_norm", "step", "seconds"])
            for it, obj, gn, st, sec in self.rows():
                writer.writerow([it, f"{obj:.17g}", f"{gn:.17g}", f"{st:.17g}", f"{sec:.6f}"])


class _Packer:
    """Maps (params, kernels) to the optimizer's flat real vector and back."""

    def __init__(self, params: GpkmdParams, kernel, prior, learn_kernel):
        self.shape_x = params.latents.shape
        self.shape_w = params.modes.shape
        self.k = params.K
        self.phase = np.exp(1j * np.angle(params.eigenvalues))
        self.kernel, self.prior = kernel, prior
        self.learn_kernel = learn_kernel
        self.knames = kernel.hyper_names() if learn_kernel else []
        self.kxnames = prior.latent_kernel.hyper_names() if learn_kernel else []
        nx = int(np.prod(self.shape_x))
        nw = int(np.prod(self.shape_w))
        self.sl_x = slice(0, nx)
        self.sl_wr = slice(nx, nx + nw)
        self.sl_wi = slice(nx + nw, nx + 2 * nw)
        self.sl_m = slice(nx + 2 * nw, nx + 2 * nw + self.k)
        base = self.sl_m.stop
        self.i_noise, self.i_coef = base, base + 1
        self.sl_k = slice(base + 2, base + 2 + len(self.knames))
        self.sl_kx = slice(self.sl_k.stop, self.sl_k.stop + len(self.kxnames))
        self.size = self.sl_kx.stop
        self.blocks = [
            b
            for b in (
                self.sl_x,
                self.sl_wr,
                self.sl_wi,
                self.sl_m,
                slice(self.i_noise, self.i_noise + 1),
                slice(self.i_coef, self.i_coef + 1),
                *(slice(i, i + 1) for i in range(self.sl_k.start, self.sl_kx.stop)),
            )
            if b.stop > b.start
        ]

    def pack(self, params, kernel, prior) -> np.ndarray:
        theta = np.empty(self.size)
        theta[self.sl_x] = params.latents.ravel()
        theta[self.sl_wr] = params.modes.real.ravel()
        theta[self.sl_wi] = params.modes.imag.ravel()
        theta[self.sl_m] = np.abs(params.eigenvalues)
        theta[self.i_noise] = np.log(params.noise_var)
        theta[self.i_coef] = np.log(params.coef_var)
        theta[self.sl_k] = [np.log(getattr(kernel, n)) for n in self.knames]
        theta[self.sl_kx] = [np.log(getattr(prior.latent_kernel, n)) for n in self.kxnames]
        return theta

    def unpack(self, theta):
        params = GpkmdParams(
            theta[self.sl_x].reshape(self.shape_x),
            (theta[self.sl_wr] + 1j * theta[self.sl_wi]).reshape(self.shape_w),
            theta[self.sl_m] * self.phase,
            np.exp(theta[self.i_noise]),
            np.exp(theta[self.i_coef]),
        )
        kernel, prior = self.kernel, self.prior
        if self.learn_kernel:
            kernel = kernel.replace(
                **{n: float(np.exp(v)) for n, v in zip(self.knames, theta[self.sl_k])}
            )
            kx = prior.latent_kernel.replace(
                **{n: float(np.exp(v)) for n, v in zip(self.kxnames, theta[self.sl_kx])}
            )
            prior = PriorSpec.from_dict({**prior.to_dict(), "latent_kernel": kx.to_dict()})
        return params, kernel, prior

    def gradient(self, ev) -> np.ndarray:
        g = np.empty(self.size)
        g[self.sl_x] = ev.latents.ravel()
        g[self.sl_wr] = ev.modes.real.ravel()
        g[self.sl_wi] = ev.modes.imag.ravel()
        g[self.sl_m] = (ev.eigenvalues.conj() * self.phase).real
        g[self.i_noise] = ev.log_noise_var
        g[self.i_coef] = ev.log_coef_var
        g[self.sl_k] = [ev.kernel[n] for n in self.knames]
        g[self.sl_kx] = [ev.latent_kernel[n] for n in self.kxnames]
        return g

    def project(self, theta):
        theta = theta.copy()
        np.maximum(theta[self.sl_m], 0.0, out=theta[self.sl_m])
        return theta

    def projected_gradient(self, theta, g):
        g = g.copy()
        m = theta[self.sl_m]
        gm = g[self.sl_m]
        gm[(m <= 0) & (gm < 0)] = 0.0
        return g


def _block_scales(grad, theta, packer, rng, eps=1e-5):
    """Square roots of directional curvatures, one per variable block.

    Each block gets a random unit direction ``v`` and the central difference
    ``v^T (g(theta + eps v) - g(theta - eps v)) / (2 eps)``.
    """
    curv = np.empty(len(packer.blocks))
    for b, block in enumerate(packer.blocks):
        v = np.zeros_like(theta)
        v[block] = rng.choice((-1.0, 1.0), size=block.stop - block.start)
        v /= np.linalg.norm(v)
        gp, gm = grad(packer.project(theta + eps * v)), grad(packer.project(theta - eps * v))
        curv[b] = abs(float((gp - gm) @ v)) / (2 * eps)
    finite = curv[np.isfinite(curv) & (curv > 0)]
    floor = 1e-6 * finite.max() if finite.size else 1.0
    curv = np.where(np.isfinite(curv), np.maximum(curv, floor), floor)
    scale = np.empty_like(theta)
    for b, block in enumerate(packer.blocks):
        scale[block] = np.sqrt(curv[b])
    return scale


def _pivoted_landmarks(latents, kernel, rank_s):
    t = latents.shape[1] - 1
    if rank_s >= t:
        return np.arange(t + 1)
    _, pivots = incomplete_cholesky(
        gram_diag(latents, kernel),
        lambda idx: gram(latents, latents[:, idx], kernel),
        rank_s,
    )
    if pivots.size == 0:
        return default_landmarks(t, rank_s)
    return np.sort(pivots)


def map_fit(
    y: np.ndarray,
    init_params: GpkmdParams,
    kernel: KernelSpec,
    prior: PriorSpec,
    config: FitConfig | None = None,
) -> tuple[GpkmdParams, FitTrace]:
    """Maximize the GPKMD log-posterior from ``init_params``.

    Returns the best parameters found and the iteration trace; the trace's
    ``status`` is one of ``"converged"``, ``"max_iters"`` or
    ``"line_search_failed"`` (best-so-far returned, with a warning).
    """
    config = config or FitConfig()
    y = np.asarray(y, dtype=complex)
    rank_s = min(config.rank_s, y.shape[1])
    packer = _Packer(init_params, kernel, prior, config.learn_kernel)
    restart_period = config.restart_period or packer.size
    start = time.perf_counter()

    landmarks = None
    if config.factorizer == "nystrom":
        if config.landmark_method == "pivoted":
            landmarks = _pivoted_landmarks(init_params.latents, kernel, rank_s)
        else:
            landmarks = default_landmarks(y.shape[1], rank_s)

    def value(theta, marks):
        params, ker, pri = packer.unpack(theta)
        return evaluate(
            y, params, ker, pri, rank_s, gradient=False,
            landmarks=marks, factorizer=config.factorizer,
        ).value

    def value_grad(theta, marks):
        params, ker, pri = packer.unpack(theta)
        ev = evaluate(
            y, params, ker, pri, rank_s, hyper=config.learn_kernel,
            landmarks=marks, factorizer=config.factorizer,
        )
        return ev.value, packer.gradient(ev)

    rng = np.random.default_rng(config.seed)
    theta = packer.pack(init_params, kernel, prior)
    with np.errstate(all="ignore"):
        f, g = value_grad(theta, landmarks)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise FloatingPointError("log-posterior is not finite at the initial point")

    def rescale():
        if not config.precondition:
            return np.ones_like(theta)
        return _block_scales(lambda t: value_grad(t, landmarks)[1], theta, packer, rng)

    # iterate on phi = scale * theta; "s" marks phi-space gradients
    scale = rescale()
    gp = packer.projected_gradient(theta, g)
    trace = FitTrace()
    trace.append(0, f, np.max(np.abs(gp), initial=0.0), 0.0, time.perf_counter() - start)

    gs = gp / scale
    d = gs / scale
    alpha_prev = slope_prev = None
    since_restart = 0
    status = "max_iters"
    for it in range(1, config.max_iters + 1):
        if np.max(np.abs(gp), initial=0.0) <= config.grad_tol:
            status = "converged"
            break

        refresh = False
        if (
            config.landmark_method == "pivoted"
            and config.factorizer == "nystrom"
            and it > 1
            and (it - 1) % config.landmark_refresh == 0
        ):
            params, ker, _ = packer.unpack(theta)
            fresh = _pivoted_landmarks(params.latents, ker, rank_s)
            if not np.array_equal(fresh, landmarks):
                f_new, g_new = value_grad(theta, fresh)
                if np.isfinite(f_new) and f_new >= f:
                    landmarks, f, g = fresh, f_new, g_new
                    refresh = True
        if config.precondition and it > 1 and (it - 1) % config.precondition_refresh == 0:
            scale = rescale()
            refresh = True
        if refresh:
            gp = packer.projected_gradient(theta, g)
            gs = gp / scale
            d = gs / scale
            alpha_prev = None
            since_restart = 0

        # d is the theta-space direction; its phi-space image is d * scale
        accepted = None
        for attempt in range(2):
            slope = float(g @ d)
            if slope <= 0:
                d = gs / scale
                slope = float(g @ d)
                since_restart = 0
            if alpha_prev is None:
                alpha = 1.0 if config.precondition else config.initial_step / max(
                    np.max(np.abs(d)), 1e-300
                )
            else:
                alpha = min(alpha_prev * slope_prev / slope, 10.0 * alpha_prev)
            alpha = min(alpha, config.max_step / max(np.max(np.abs(d)), 1e-300))
            for _ in range(config.max_ls_steps):
                trial = packer.project(theta + alpha * d)
                moved = trial - theta
                if np.any(moved != 0):
                    f_trial = value(trial, landmarks)
                    if np.isfinite(f_trial) and f_trial >= f + config.armijo_c * float(g @ moved):
                        accepted = (trial, alpha, slope)
                        break
                alpha *= config.shrink
            if accepted is not None or np.array_equal(d, gs / scale):
                break
            d = gs / scale
            since_restart = 0

        if accepted is None:
            status = "line_search_failed"
            warnings.warn("line search failed; returning best parameters so far")
            break

        theta_new, alpha, slope = accepted
        f_new, g_new = value_grad(theta_new, landmarks)
        gp_new = packer.projected_gradient(theta_new, g_new)
        gs_new = gp_new / scale
        since_restart += 1
        if since_restart >= restart_period:
            beta = 0.0
            since_restart = 0
        else:
            beta = max(0.0, float(gs_new @ (gs_new - gs)) / max(float(gs @ gs), 1e-300))
        d = gs_new / scale + beta * d
        m = theta_new[packer.sl_m]
        d[packer.sl_m][(m <= 0) & (d[packer.sl_m] < 0)] = 0.0

        theta, f, g, gp, gs = theta_new, f_new, g_new, gp_new, gs_new
        alpha_prev, slope_prev = alpha, slope
        gnorm = np.max(np.abs(gp), initial=0.0)
        trace.append(it, f, gnorm, alpha, time.perf_counter() - start)
        log.debug("iter %d objective %.10g grad %.3e step %.3e", it, f, gnorm, alpha)
    else:
        if np.max(np.abs(gp), initial=0.0) <= config.grad_tol:
            status = "converged"

    params, ker, pri = packer.unpack(theta)
    if config.max_iters == 0 or len(trace.iters) == 1:
        # no accepted step: hand back the caller's exact values
        params = init_params.copy()
    trace.status = status
    trace.kernel = ker
    trace.latent_kernel = pri.latent_kernel
    return params, trace


def _jittered(params: GpkmdParams, seed: int, scale: float = 0.01) -> GpkmdParams:
    rng = np.random.default_rng(seed)
    return params.copy(latents=params.latents + scale * rng.standard_normal(params.latents.shape))


def map_fit_restarts(
    y: np.ndarray,
    init_params: GpkmdParams,
    kernel: KernelSpec,
    prior: PriorSpec,
    config: FitConfig | None = None,
    restarts: int = 1,
    max_workers: int | None = None,
) -> tuple[GpkmdParams, FitTrace]:
    """Run ``restarts`` fits concurrently and keep the best posterior.

    Run 0 starts from ``init_params``; run ``i > 0`` jitters the latents
    with seed ``config.seed + i``.  Ties go to the lowest run index.
    """
    config = config or FitConfig()
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    starts = [init_params] + [
        _jittered(init_params, config.seed + i) for i in range(1, restarts)
    ]
    if restarts == 1:
        results = [map_fit(y, starts[0], kernel, prior, config)]
    else:
        with ThreadPoolExecutor(max_workers=max_workers or restarts) as pool:
            results = list(pool.map(lambda p: map_fit(y, p, kernel, prior, config), starts))
    best = max(range(restarts), key=lambda i: (results[i][1].objective[-1], -i))
    params, trace = results[best]
    trace.restart_index = best
    return params, trace
