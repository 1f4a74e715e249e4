"""Synthetic Stuart-Landau data, CSV ingestion and post-fit analyses."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import KoopmanSpectrum

WEEKS_PER_YEAR = 365.25 / 7


@dataclass(frozen=True)
class StuartLandauConfig:
    delta: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    dt: float = 0.05
    t_len: int = 751
    r0: float = 0.1
    theta0: float = 0.0
    d: int = 35
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.t_len < 2:
            raise ValueError("t_len must be at least 2")
        if self.d < 1:
            raise ValueError("d must be at least 1")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def channel_orders(d: int) -> np.ndarray:
    """Harmonic order of each channel for 1-based channel index ``1..d``.

    Odd channels get ``index - ceil(d / 2)``, even channels ``index / 2``.
    """
    idx = np.arange(1, d + 1)
    return np.where(idx % 2 == 1, idx - math.ceil(d / 2), idx // 2)


def stuart_landau(config: StuartLandauConfig) -> tuple[np.ndarray, np.ndarray]:
    """Euler-discretized Stuart-Landau trajectory and its harmonic observable.

    Returns
    -------
    truth : ndarray, shape (2, T)
        Rows are the radius ``r_t`` and angle ``theta_t``.
    y : ndarray, shape (D, T)
        ``exp(i n_d theta_t)`` plus circular complex Gaussian noise.
    """
    c = config
    r = np.empty(c.t_len)
    theta = np.empty(c.t_len)
    r[0], theta[0] = c.r0, c.theta0
    for t in range(c.t_len - 1):
        r[t + 1] = r[t] + (c.delta * r[t] - r[t] ** 3) * c.dt
        theta[t + 1] = theta[t] + (c.gamma - c.beta * r[t] ** 2) * c.dt
    y = np.exp(1j * np.outer(channel_orders(c.d), theta))
    if c.noise_std > 0:
        rng = np.random.default_rng(c.seed)
        noise = rng.standard_normal((2,) + y.shape)
        y = y + c.noise_std * np.sqrt(0.5) * (noise[0] + 1j * noise[1])
    return np.vstack([r, theta]), y


def exact_sl_eigenvalues(
    delta: float, beta: float, gamma: float, l_max: int, n_max: int
) -> np.ndarray:
    """Continuous-time eigenvalue grid ``-2 l delta + i n omega0``.

    ``omega0 = gamma - beta * delta``.  Rows run over ``l = 0..l_max``,
    columns over ``n = -n_max..n_max``.
    """
    if l_max < 0 or n_max < 0:
        raise ValueError("l_max and n_max must be nonnegative")
    omega0 = gamma - beta * delta
    l = np.arange(l_max + 1)[:, None]
    n = np.arange(-n_max, n_max + 1)[None, :]
    return -2.0 * l * delta + 1j * n * omega0


def match_exact(estimated: np.ndarray, exact_grid: np.ndarray) -> np.ndarray:
    """Nearest exact eigenvalue by imaginary part for each estimate.

    Ties among equal imaginary parts go to the first entry of the flattened
    grid, i.e. the smallest ``l``.
    """
    est = np.atleast_1d(np.asarray(estimated, dtype=complex))
    grid = np.asarray(exact_grid, dtype=complex).ravel()
    if est.size == 0 or grid.size == 0:
        raise ValueError("empty eigenvalue inputs")
    dist = np.abs(est.imag[:, None] - grid.imag[None, :])
    return grid[np.argmin(dist, axis=1)]


def eigenvalue_error(estimated: np.ndarray, exact_grid: np.ndarray) -> float:
    """Norm of the real-part residuals against the matched exact values."""
    est = np.atleast_1d(np.asarray(estimated, dtype=complex))
    matched = match_exact(est, exact_grid)
    return float(np.linalg.norm((matched - est).real))


@dataclass
class PhaseTable:
    """Mode phases in ``[0, 1)`` (D x K) and mode frequencies (K)."""

    phases: np.ndarray
    frequencies: np.ndarray


def mode_phases(
    modes: np.ndarray,
    eigenvalues: KoopmanSpectrum,
    samples_per_unit: float | None = None,
) -> PhaseTable:
    """Phase ``arg(w_dk) / 2 pi`` of every mode entry and mode frequencies.

    Frequencies are ``|arg(lambda_k)| / 2 pi`` cycles per sample times
    ``samples_per_unit`` (default ``1 / dt``).
    """
    lam = np.asarray(eigenvalues.discrete, dtype=complex)
    if np.any(lam == 0):
        raise ValueError("zero eigenvalue has no frequency")
    if samples_per_unit is None:
        samples_per_unit = 1.0 / eigenvalues.dt
    phases = np.mod(np.angle(np.asarray(modes, dtype=complex)), 2 * np.pi) / (2 * np.pi)
    phases[phases >= 1.0] = 0.0
    freqs = np.abs(np.angle(lam)) / (2 * np.pi) * samples_per_unit
    return PhaseTable(phases, freqs)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_matrix_csv(
    path, matrix: np.ndarray, names=None, index_name: str = "t", index_start: int = 0
) -> None:
    """Write a ``D x T`` matrix with one row per time step.

    Complex matrices get paired ``<name>_re,<name>_im`` columns; names
    default to 1-based channel numbers ``y1..yD``.  The leading index
    column counts from ``index_start``.
    """
    matrix = np.asarray(matrix)
    d, t = matrix.shape
    names = list(names) if names is not None else [f"y{i + 1}" for i in range(d)]
    is_complex = np.iscomplexobj(matrix)
    header = [index_name]
    for name in names:
        header += [f"{name}_re", f"{name}_im"] if is_complex else [name]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for j in range(t):
            row = [str(j + index_start)]
            for i in range(d):
                v = matrix[i, j]
                row += [_fmt(v.real), _fmt(v.imag)] if is_complex else [_fmt(v)]
            writer.writerow(row)


def read_matrix_csv(path) -> tuple[np.ndarray, list[str]]:
    """Inverse of :func:`write_matrix_csv`; returns the matrix and channel names."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    cols = header[1:]
    values = np.array([[float(v) for v in row[1:]] for row in body], dtype=float)
    if values.size == 0:
        values = values.reshape(0, len(cols))
    if cols and all(c.endswith(("_re", "_im")) for c in cols) and len(cols) % 2 == 0:
        names = [c[:-3] for c in cols[::2]]
        matrix = values[:, ::2] + 1j * values[:, 1::2]
    else:
        names = cols
        matrix = values
    return matrix.T, names


@dataclass(frozen=True)
class CsvOptions:
    """Preprocessing for :func:`load_series_csv`.

    ``log_transform`` is ``"none"``, ``"log"`` (strictly positive data) or
    ``"log1p"``.  ``skip_columns`` drops leading non-numeric columns such as
    dates.  ``header=None`` detects a header row automatically.
    """

    log_transform: str = "none"
    standardize: bool = True
    skip_columns: int = 0
    header: bool | None = None

    def __post_init__(self):
        if self.log_transform not in ("none", "log", "log1p"):
            raise ValueError(f"unknown log_transform {self.log_transform!r}")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_series_csv(path, options: CsvOptions | None = None) -> np.ndarray:
    """Load a rows-are-time CSV into a complex ``D x T`` observation matrix."""
    options = options or CsvOptions()
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: no data")
    has_header = options.header
    if has_header is None:
        has_header = not all(_is_number(c) for c in rows[0][options.skip_columns :])
    body = rows[1:] if has_header else rows
    if not body:
        raise ValueError(f"{path}: no data rows")
    width = len(body[0])
    values = []
    for lineno, row in enumerate(body, start=2 if has_header else 1):
        if len(row) != width:
            raise ValueError(f"{path}:{lineno}: ragged row ({len(row)} cells, expected {width})")
        cells = row[options.skip_columns :]
        parsed = []
        for cell in cells:
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan", "null"):
                raise ValueError(f"{path}:{lineno}: missing value")
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
        values.append(parsed)
    data = np.array(values, dtype=float).T
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: non-finite values")
    if options.log_transform == "log":
        if np.any(data <= 0):
            raise ValueError(f"{path}: log transform needs strictly positive values")
        data = np.log(data)
    elif options.log_transform == "log1p":
        if np.any(data <= -1):
            raise ValueError(f"{path}: log1p transform needs values > -1")
        data = np.log1p(data)
    if options.standardize:
        sd = data.std(axis=1)
        if np.any(sd == 0):
            bad = int(np.flatnonzero(sd == 0)[0]) + 1
            raise ValueError(f"{path}: constant channel {bad} cannot be standardized")
        data = (data - data.mean(axis=1, keepdims=True)) / sd[:, None]
    return data.astype(complex)
