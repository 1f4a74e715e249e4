"""Command-line front end: ``gpkmd generate | fit | eval-eigs | phases``.

Every command prints a one-line JSON summary on stdout.  Failures print
``{"error": ..., "message": ...}`` instead and exit nonzero: 2 for bad input
or configuration, 3 when a fit ends with a failed line search, 1 otherwise.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .data import (
    WEEKS_PER_YEAR,
    CsvOptions,
    StuartLandauConfig,
    eigenvalue_error,
    exact_sl_eigenvalues,
    load_series_csv,
    mode_phases,
    read_matrix_csv,
    stuart_landau,
    write_matrix_csv,
)
from .initialization import initialize
from .kernels import VARIANTS, KernelSpec
from .model import KoopmanSpectrum, PriorSpec
from .optimize import FitConfig, map_fit_restarts

log = logging.getLogger("gpkmd")

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_FIT = 0, 1, 2, 3
L_MAX, N_MAX = 10, 40

_NUM = {"type": "number"}
_INT = {"type": "integer"}


def _obj(props: dict, required=()) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(required),
        "additionalProperties": False,
    }


_KERNEL = _obj(
    {
        "variant": {"enum": list(VARIANTS)},
        "rbf_variance": _NUM,
        "rbf_lengthscale": _NUM,
        "linear_variance": _NUM,
    }
)

CONFIG_SCHEMA = _obj(
    {
        "seed": {"type": "integer", "minimum": 0},
        "data": _obj(
            {
                "source": {"enum": ["stuart_landau", "observations", "csv"]},
                "path": {"type": "string"},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "stuart_landau": _obj(
                    {
                        "delta": _NUM,
                        "beta": _NUM,
                        "gamma": _NUM,
                        "dt": _NUM,
                        "t_len": _INT,
                        "r0": _NUM,
                        "theta0": _NUM,
                        "d": _INT,
                        "noise_std": _NUM,
                    }
                ),
                "preprocessing": _obj(
                    {
                        "log_transform": {"enum": ["none", "log", "log1p"]},
                        "standardize": {"type": "boolean"},
                        "skip_columns": {"type": "integer", "minimum": 0},
                        "header": {"type": ["boolean", "null"]},
                    }
                ),
            }
        ),
        "model": _obj(
            {
                "modes": {"type": "integer", "minimum": 1},
                "latent_dims": {"type": "integer", "minimum": 1},
                "rank": {"type": "integer", "minimum": 1},
                "dmd_selection": {"enum": ["svd", "amplitude"]},
                "kernel": _KERNEL,
                "latent_kernel": _KERNEL,
            }
        ),
        "prior": _obj(
            {
                name: {"type": "number", "exclusiveMinimum": 0}
                for name in (
                    "latent_scale",
                    "mode_scale",
                    "eig_scale",
                    "noise_shape",
                    "noise_rate",
                    "coef_shape",
                    "coef_rate",
                )
            }
        ),
        "fit": _obj(
            {
                "max_iters": {"type": "integer", "minimum": 0},
                "grad_tol": _NUM,
                "restart_period": {"type": ["integer", "null"], "minimum": 1},
                "armijo_c": _NUM,
                "shrink": _NUM,
                "max_ls_steps": {"type": "integer", "minimum": 1},
                "learn_kernel": {"type": "boolean"},
                "landmark_method": {"enum": ["uniform", "pivoted"]},
                "landmark_refresh": {"type": "integer", "minimum": 1},
                "factorizer": {"enum": ["nystrom", "icd"]},
                "initial_step": _NUM,
                "precondition": {"type": "boolean"},
                "precondition_refresh": {"type": "integer", "minimum": 1},
                "max_step": {"type": "number", "exclusiveMinimum": 0},
                "restarts": {"type": "integer", "minimum": 1},
                "coef_var": {"type": "number", "exclusiveMinimum": 0},
            }
        ),
        "output": _obj({"directory": {"type": "string"}}),
    }
)

DEFAULTS = {
    "seed": 0,
    "data": {"source": "stuart_landau"},
    "model": {"modes": 16, "latent_dims": 2, "rank": 50, "dmd_selection": "svd"},
    "prior": {},
    "fit": {"restarts": 1, "coef_var": 1.0},
    "output": {"directory": "out"},
}


class CliError(Exception):
    """Error reported as JSON with a given exit code."""

    def __init__(self, message: str, code: int = EXIT_INPUT, kind: str = "input_error"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in extra.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    """Read, validate and merge a run configuration; flags win over the file."""
    user = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(user, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise CliError(f"invalid config at {where}: {exc.message}") from None
    return _merge(_merge(DEFAULTS, user), overrides)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON config, ignoring the output location."""
    config = {k: v for k, v in config.items() if k != "output"}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _sl_config(config: dict) -> StuartLandauConfig:
    try:
        return StuartLandauConfig(
            **config["data"].get("stuart_landau", {}), seed=config["seed"]
        )
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid stuart_landau section: {exc}") from None


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _continuous_or_inf(spectrum: KoopmanSpectrum) -> np.ndarray:
    """Continuous eigenvalues, with ``-inf`` real part where ``lambda = 0``."""
    lam = spectrum.discrete.astype(complex)
    cont = np.empty_like(lam)
    with np.errstate(divide="ignore"):
        cont.real = np.log(np.abs(lam)) / spectrum.dt
    cont.imag = np.angle(lam) / spectrum.dt
    return cont


def write_eigenvalues(path: Path, spectrum: KoopmanSpectrum) -> None:
    # magnitudes projected onto zero by the fit are written, not rejected
    cont = _continuous_or_inf(spectrum)
    rows = [
        [k + 1, _fmt(lam.real), _fmt(lam.imag), _fmt(c.real), _fmt(c.imag)]
        for k, (lam, c) in enumerate(zip(spectrum.discrete, cont))
    ]
    _write_rows(
        path,
        ["mode", "discrete_re", "discrete_im", "continuous_re", "continuous_im"],
        rows,
    )


def read_eigenvalues(path: Path) -> np.ndarray:
    """Discrete eigenvalues from an eigenvalue table."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["discrete_re"]) + 1j * float(r["discrete_im"]) for r in rows])


def write_modes(path: Path, modes: np.ndarray) -> None:
    """Modes as one row per (1-based) channel with ``mode<k>_re/_im`` columns."""
    names = [f"mode{k + 1}" for k in range(modes.shape[1])]
    write_matrix_csv(path, modes.T, names, index_name="channel", index_start=1)


def read_modes(path: Path) -> np.ndarray:
    matrix, _ = read_matrix_csv(path)
    return matrix.T


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(config: dict) -> Path:
    out = Path(config["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(config: dict) -> dict:
    """Write a Stuart-Landau dataset: observations, truth and metadata."""
    if config["data"].get("source", "stuart_landau") != "stuart_landau":
        raise CliError("generate needs data.source = stuart_landau")
    sl = _sl_config(config)
    truth, y = stuart_landau(sl)
    out = _out_dir(config)
    write_matrix_csv(out / "observations.csv", y)
    write_matrix_csv(out / "truth.csv", truth, ["r", "theta"])
    _write_json(
        out / "metadata.json",
        {
            "generator": "stuart_landau",
            "config": sl.to_dict(),
            "seed": sl.seed,
            "noise": "complex normal, real and imaginary parts each with variance noise_std^2/2",
            "shape": list(y.shape),
            "version": __version__,
        },
    )
    return {"outputs": ["observations.csv", "truth.csv", "metadata.json"], "directory": str(out)}


def load_observations(config: dict) -> tuple[np.ndarray, float]:
    """Observation matrix and sampling interval for a fit."""
    data = config["data"]
    source = data.get("source", "stuart_landau")
    if source == "stuart_landau":
        sl = _sl_config(config)
        return stuart_landau(sl)[1], data.get("dt", sl.dt)
    path = data.get("path")
    if not path:
        raise CliError(f"data.path is required for source {source!r}")
    if not Path(path).is_file():
        raise CliError(f"input file not found: {path}")
    dt = data.get("dt")
    if source == "observations":
        if dt is None:
            meta = Path(path).with_name("metadata.json")
            if meta.is_file():
                dt = json.loads(meta.read_text()).get("config", {}).get("dt")
        try:
            y, _ = read_matrix_csv(path)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        return y.astype(complex), dt or 1.0
    try:
        y = load_series_csv(path, CsvOptions(**data.get("preprocessing", {})))
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return y, dt or 1.0


def _kernel_override(base: KernelSpec, section: dict | None) -> KernelSpec:
    if not section:
        return base
    try:
        return base.replace(**section)
    except ValueError as exc:
        raise CliError(f"invalid kernel: {exc}") from None


def cmd_fit(config: dict, dmd_only: bool = False) -> dict:
    """Initialize from PCA + DMD, run MAP estimation and write every table."""
    y, dt = load_observations(config)
    model = config["model"]
    k, p = model["modes"], model["latent_dims"]
    d, t = y.shape
    rank = model["rank"]
    if rank > t:
        raise CliError(f"rank {rank} exceeds T={t}")
    try:
        init = initialize(
            y, k, p, model["dmd_selection"], coef_var=config["fit"]["coef_var"]
        )
        fit_opts = {
            key: val
            for key, val in config["fit"].items()
            if key not in ("restarts", "coef_var")
        }
        fit_config = FitConfig(rank_s=rank, seed=config["seed"], **fit_opts)
        prior = PriorSpec.from_dict(
            {
                **config["prior"],
                "latent_kernel": _kernel_override(init.latent_kernel, model.get("latent_kernel")),
            }
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    kernel = _kernel_override(init.kernel, model.get("kernel"))

    out = _out_dir(config)
    dmd_spec = KoopmanSpectrum(init.dmd.eigenvalues, dt)
    write_eigenvalues(out / "dmd_eigenvalues.csv", dmd_spec)
    write_modes(out / "dmd_modes.csv", init.params.modes)
    outputs = ["dmd_eigenvalues.csv", "dmd_modes.csv"]

    manifest = {
        "version": __version__,
        "command": "fit",
        "config": {key: val for key, val in config.items() if key != "output"},
        "config_sha256": config_hash(config),
        "seed": config["seed"],
        "dt": dt,
        "shape": [d, t],
        "modes": k,
        "latent_dims": p,
        "mode_convention": init.dmd.mode_convention,
        "dmd_selection": model["dmd_selection"],
        "initial_kernel": kernel.to_dict(),
        "fit_config": fit_config.to_dict(),
        "prior": prior.to_dict(),
        "created": datetime.now(timezone.utc).isoformat(),
    }
    if dmd_only:
        manifest["status"] = "dmd_only"
    else:
        params, trace = map_fit_restarts(
            y, init.params, kernel, prior, fit_config, config["fit"]["restarts"]
        )
        spec = KoopmanSpectrum(params.eigenvalues, dt)
        names = [f"x{i + 1}" for i in range(p)]
        write_matrix_csv(out / "latents.csv", params.latents, names)
        write_matrix_csv(out / "pca_latents.csv", init.params.latents, names)
        write_modes(out / "modes.csv", params.modes)
        write_eigenvalues(out / "eigenvalues.csv", spec)
        variances = [
            ["noise_var", _fmt(params.noise_var)],
            ["coef_var", _fmt(params.coef_var)],
        ]
        for prefix, ker in (("kernel", trace.kernel), ("latent_kernel", trace.latent_kernel)):
            variances += [[f"{prefix}.{n}", _fmt(getattr(ker, n))] for n in ker.hyper_names()]
        _write_rows(out / "variances.csv", ["name", "value"], variances)
        trace.to_csv(out / "trace.csv")
        outputs += [
            "latents.csv",
            "pca_latents.csv",
            "modes.csv",
            "eigenvalues.csv",
            "variances.csv",
            "trace.csv",
        ]
        manifest.update(
            status=trace.status,
            iterations=trace.iters[-1],
            restart_index=trace.restart_index,
            initial_log_posterior=trace.objective[0],
            final_log_posterior=trace.objective[-1],
            final_kernel=trace.kernel.to_dict(),
            final_latent_kernel=trace.latent_kernel.to_dict(),
        )
    _write_json(out / "manifest.json", manifest)
    outputs.append("manifest.json")
    summary = {"outputs": outputs, "directory": str(out), "status": manifest["status"]}
    if manifest["status"] == "line_search_failed":
        raise CliError(
            "line search failed; best parameters so far were written",
            EXIT_FIT,
            "fit_failed",
        )
    return summary


def _fit_dir(path: str) -> Path:
    fit = Path(path)
    if not (fit / "manifest.json").is_file():
        raise CliError(f"no fit output (manifest.json) in {path}")
    return fit


def cmd_eval_eigs(fit_path: str, system: dict) -> dict:
    """Eigenvalue errors of the DMD initializer and the GPKMD fit."""
    fit = _fit_dir(fit_path)
    manifest = json.loads((fit / "manifest.json").read_text())
    dt = manifest["dt"]
    grid = exact_sl_eigenvalues(
        system["delta"], system["beta"], system["gamma"], L_MAX, N_MAX
    )
    rows = []
    for method, name in (("dmd", "dmd_eigenvalues.csv"), ("gpkmd", "eigenvalues.csv")):
        path = fit / name
        if not path.is_file():
            continue
        lam = read_eigenvalues(path)
        if lam.size != manifest["modes"]:
            raise CliError(f"{name} holds {lam.size} eigenvalues, manifest says K={manifest['modes']}")
        # a zero eigenvalue has no continuous counterpart; its error is inf
        cont = _continuous_or_inf(KoopmanSpectrum(lam, dt))
        with np.errstate(invalid="ignore"):
            rows.append([method, lam.size, _fmt(eigenvalue_error(cont, grid))])
    if not rows:
        raise CliError(f"no eigenvalue tables in {fit_path}")
    _write_rows(fit / "eig_errors.csv", ["method", "k", "error"], rows)
    return {
        "outputs": ["eig_errors.csv"],
        "errors": {r[0]: float(r[2]) for r in rows},
    }


def cmd_phases(fit_path: str, samples_per_unit: float | None, method: str = "gpkmd") -> dict:
    """Mode phase and frequency tables for plotting."""
    fit = _fit_dir(fit_path)
    manifest = json.loads((fit / "manifest.json").read_text())
    prefix = "" if method == "gpkmd" else "dmd_"
    mpath, epath = fit / f"{prefix}modes.csv", fit / f"{prefix}eigenvalues.csv"
    if not (mpath.is_file() and epath.is_file()):
        raise CliError(f"no {method} modes/eigenvalues in {fit_path}")
    modes = read_modes(mpath)
    spec = KoopmanSpectrum(read_eigenvalues(epath), manifest["dt"])
    try:
        table = mode_phases(modes, spec, samples_per_unit)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    names = [f"mode{k + 1}" for k in range(modes.shape[1])]
    write_matrix_csv(fit / "phases.csv", table.phases.T, names, index_name="channel", index_start=1)
    _write_rows(
        fit / "frequencies.csv",
        ["mode", "frequency"],
        [[k + 1, _fmt(f)] for k, f in enumerate(table.frequencies)],
    )
    return {"outputs": ["phases.csv", "frequencies.csv"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpkmd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fit_flags=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if fit_flags:
            p.add_argument("--modes", type=int, metavar="K")
            p.add_argument("--latent-dims", type=int, metavar="P")
            p.add_argument("--rank", type=int, metavar="S")
            p.add_argument("--restarts", type=int, metavar="N")
            p.add_argument("--data", help="observations CSV written by 'generate'")
            p.add_argument("--dmd-only", action="store_true", help="skip MAP fitting")

    common(sub.add_parser("generate", help="simulate Stuart-Landau data"))
    common(sub.add_parser("fit", help="fit GPKMD (and DMD) to data"), fit_flags=True)

    ev = sub.add_parser("eval-eigs", help="eigenvalue errors against the exact spectrum")
    ev.add_argument("fit_dir")
    ev.add_argument("--config", help="config whose data.stuart_landau gives the system")
    ev.add_argument("--delta", type=float)
    ev.add_argument("--beta", type=float)
    ev.add_argument("--gamma", type=float)
    ev.add_argument("-v", "--verbose", action="count", default=0)

    ph = sub.add_parser("phases", help="mode phase and frequency tables")
    ph.add_argument("fit_dir")
    unit = ph.add_mutually_exclusive_group()
    unit.add_argument("--weekly", action="store_true", help="weekly samples, cycles per year")
    unit.add_argument("--samples-per-unit", type=float)
    ph.add_argument("--method", choices=["gpkmd", "dmd"], default="gpkmd")
    ph.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        over["output"] = {"directory": args.out}
    model = {
        key: val
        for key, val in (
            ("modes", getattr(args, "modes", None)),
            ("latent_dims", getattr(args, "latent_dims", None)),
            ("rank", getattr(args, "rank", None)),
        )
        if val is not None
    }
    if model:
        over["model"] = model
    if getattr(args, "restarts", None) is not None:
        over["fit"] = {"restarts": args.restarts}
    if getattr(args, "data", None) is not None:
        over["data"] = {"source": "observations", "path": args.data}
    return over


def _system(args) -> dict:
    system = dict(StuartLandauConfig().to_dict())
    if args.config:
        config = load_config(args.config, {})
        system.update(config["data"].get("stuart_landau", {}))
    for name in ("delta", "beta", "gamma"):
        if getattr(args, name) is not None:
            system[name] = getattr(args, name)
    return system


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            summary = cmd_generate(load_config(args.config, _overrides(args)))
        elif args.command == "fit":
            summary = cmd_fit(load_config(args.config, _overrides(args)), args.dmd_only)
        elif args.command == "eval-eigs":
            summary = cmd_eval_eigs(args.fit_dir, _system(args))
        else:
            spu = WEEKS_PER_YEAR if args.weekly else args.samples_per_unit
            summary = cmd_phases(args.fit_dir, spu, args.method)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}))
        return exc.code
    except Exception as exc:  # surfaced as JSON rather than a traceback
        log.debug("unexpected failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_ERROR
    print(json.dumps({"command": args.command, **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
