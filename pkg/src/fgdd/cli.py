"""Command-line front end: theory sweeps, Monte Carlo runs and comparisons.

Every subcommand writes CSV (17 significant digits, ``#`` comment lines
echoing the effective configuration first).  Settings come from flags,
then an optional ``--config`` key-value file, then built-in defaults.

Exit codes: 0 success, 1 usage error, 2 solver failure, 3 comparison
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from fractions import Fraction
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .decomposition import TERM_NAMES, decompose, recombine, training_loss
from .ensemble import EnsembleSpec, optimal_ratio, scale_decomposition
from .moments import compute_moments, get_activation, stein_check
from .simulator import (
    SimConfig,
    SingularKernelError,
    estimate_decomposition,
    make_experiment,
    simulate_ensembles,
)
from .tau import ModelShape, SolverError, solve_tau

__all__ = ["main", "build_parser", "parse_grid", "UsageError"]

log = logging.getLogger("fgdd")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_COMPARE = 0, 1, 2, 3
Z_LIMIT = 4.0

SWEEP_AXES = ("n1_over_m", "gamma", "snr", "sigma_w2")

THEORY_COLUMNS = (
    "axis", "value", "phi", "psi", "gamma", "sigma_w2", "nu", "sigma_eps",
    "eta", "zeta", "eta_prime", "tau1", "tau2", "dtau1", "dtau2",
    *TERM_NAMES, "E_test", "diverged", "status",
)
VIEW_COLUMNS = (
    "B_sc", "V_sc", "V_D_comp", "V_P_comp", "V_PD",
    "dascoli_bias", "dascoli_init", "dascoli_samp", "dascoli_noise",
)
TRAIN_COLUMNS = ("T1", "T2", "E_train")


class UsageError(Exception):
    """Invalid command line or configuration."""


# --------------------------------------------------------------------------
# value parsing


def parse_number(text: str) -> float:
    """Float, also accepting fractions such as ``1/16``."""
    text = str(text).strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def parse_int(text: str) -> int:
    v = parse_number(text)
    if not v.is_integer():
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return int(v)


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_size_list(text: str) -> list[float]:
    """Comma-separated ensemble sizes; ``inf`` allowed."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        v = math.inf if part.lower() == "inf" else parse_int(part)
        if v < 1:
            raise argparse.ArgumentTypeError(f"ensemble sizes must be >= 1, got {part!r}")
        out.append(v)
    if not out:
        raise argparse.ArgumentTypeError("empty size list")
    return out


def parse_grid(text: str) -> np.ndarray:
    """Grid from ``a,b,c`` or ``lo:hi:count[:log|linear]`` (default log).

    The result must be nonempty and strictly monotone.
    """
    text = str(text).strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (3, 4):
            raise argparse.ArgumentTypeError(f"range grid needs lo:hi:count[:spacing], got {text!r}")
        lo, hi = parse_number(parts[0]), parse_number(parts[1])
        count = parse_int(parts[2])
        spacing = parts[3].strip().lower() if len(parts) == 4 else "log"
        if count < 1:
            raise argparse.ArgumentTypeError("grid count must be positive")
        if spacing == "log":
            if lo <= 0 or hi <= 0:
                raise argparse.ArgumentTypeError("log grid needs positive bounds")
            grid = np.geomspace(lo, hi, count)
        elif spacing == "linear":
            grid = np.linspace(lo, hi, count)
        else:
            raise argparse.ArgumentTypeError(f"spacing must be log or linear, got {spacing!r}")
    else:
        grid = np.array([parse_number(p) for p in text.split(",") if p.strip()])
    if grid.size == 0:
        raise argparse.ArgumentTypeError("grid is empty")
    d = np.diff(grid)
    if grid.size > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise argparse.ArgumentTypeError("grid must be strictly monotone")
    return grid


# --------------------------------------------------------------------------
# options

# name -> (converter, default, help)
OPTIONS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "activation": (str, "tanh", "activation: identity, relu or tanh"),
    "model": (str, "rf", "rf or ntk"),
    "phi": (parse_number, None, "n0/m (default from --n0/--m)"),
    "psi": (parse_number, None, "n0/n1 (default from --n0/--n1)"),
    "gamma": (parse_number, 1e-6, "ridge"),
    "sigma_w2": (parse_number, 0.0, "second-layer weight std (NTK)"),
    "sigma_eps": (parse_number, None, "label-noise std"),
    "snr": (parse_number, None, "signal-to-noise ratio; sets sigma_eps = 1/sqrt(snr)"),
    "centering": (parse_bool, False, "center the NTK predictor"),
    "feature_mode": (str, "exact", "exact or gaussian-equivalent"),
    "m": (parse_int, 1024, "training samples"),
    "n0": (parse_int, 512, "input dimension"),
    "n1": (parse_int, 1024, "hidden width"),
    "n_test": (parse_int, 512, "test points per replicate"),
    "replicates": (parse_int, 64, "Monte Carlo replicates"),
    "seed": (parse_int, 0, "base seed"),
    "test_sampling": (str, "per-replicate", "per-replicate or fixed"),
    "sweep_axis": (str, None, "one of " + ", ".join(SWEEP_AXES)),
    "grid": (parse_grid, None, "a,b,c or lo:hi:count[:log|linear]"),
    "nodes": (parse_int, 128, "quadrature nodes"),
    "views": (parse_bool, False, "add recombined-view columns"),
    "train_loss": (parse_bool, False, "add training-loss columns"),
    "kp": (parse_size_list, [1, 2], "parameter ensemble sizes"),
    "kd": (parse_size_list, [1, 2], "data ensemble sizes"),
    "simulate": (parse_bool, False, "also run the Monte Carlo ensemble"),
}
FLAG_BOOLS = ("centering", "views", "train_loss", "simulate")
CHOICES = {
    "activation": ("identity", "relu", "tanh"),
    "model": ("rf", "ntk"),
    "feature_mode": ("exact", "gaussian-equivalent"),
    "test_sampling": ("per-replicate", "fixed"),
    "sweep_axis": SWEEP_AXES,
}

COMMAND_OPTIONS = {
    "moments": ("activation", "nodes"),
    "theory": (
        "activation", "model", "phi", "psi", "gamma", "sigma_w2", "sigma_eps", "snr",
        "centering", "m", "n0", "n1", "nodes", "sweep_axis", "grid", "views", "train_loss",
    ),
    "simulate": (
        "activation", "model", "gamma", "sigma_w2", "sigma_eps", "snr", "centering",
        "feature_mode", "m", "n0", "n1", "n_test", "replicates", "seed", "test_sampling",
    ),
    "ensemble": (
        "activation", "model", "phi", "psi", "gamma", "sigma_w2", "sigma_eps", "snr",
        "centering", "feature_mode", "m", "n0", "n1", "n_test", "replicates", "seed",
        "test_sampling", "nodes", "kp", "kd", "simulate",
    ),
}
COMMAND_OPTIONS["compare"] = COMMAND_OPTIONS["simulate"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fgdd", description=__doc__.split("\n")[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"fgdd {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    for cmd, names in COMMAND_OPTIONS.items():
        p = sub.add_parser(cmd, allow_abbrev=False, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--out", help="output CSV path (default stdout)")
        for name in names:
            conv, default, text = OPTIONS[name]
            help_ = f"{text} (default {default!r})"
            if name in FLAG_BOOLS:
                p.add_argument(_flag(name), dest=name, action="store_true", help=help_)
            else:
                p.add_argument(
                    _flag(name), dest=name, type=conv, choices=CHOICES.get(name), help=help_
                )
    return parser


def read_config_file(path: str, allowed: Iterable[str]) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    allowed = set(allowed)
    out: dict[str, Any] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        conv = OPTIONS[key][0]
        try:
            out[key] = conv(value)
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
        if key in CHOICES and out[key] not in CHOICES[key]:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {CHOICES[key]}")
    return out


def _merge(layers: Sequence[dict[str, Any]]) -> dict[str, Any]:
    """Later layers win; setting snr or sigma_eps clears the other."""
    merged: dict[str, Any] = {}
    for layer in layers:
        if "snr" in layer and "sigma_eps" in layer:
            raise UsageError("give either snr or sigma_eps, not both")
        for key in ("snr", "sigma_eps"):
            if key in layer:
                merged.pop("sigma_eps" if key == "snr" else "snr", None)
        merged.update(layer)
    return merged


def resolve_options(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    names = COMMAND_OPTIONS[command]
    defaults = {n: OPTIONS[n][1] for n in names if OPTIONS[n][1] is not None}
    given = {k: v for k, v in vars(ns).items() if k in names}
    file_layer = read_config_file(ns.config, names) if getattr(ns, "config", None) else {}
    opts = _merge([defaults, file_layer, given])
    for n in names:
        opts.setdefault(n, None)
    if "sigma_eps" in names:
        opts["sigma_eps"] = _noise(opts)
        opts.pop("snr", None)
    if opts.get("model") == "rf" and opts.get("sigma_w2", 0.0) != 0.0:
        raise UsageError("the rf model has no second layer; use --model ntk with --sigma-w2")
    return opts


def _noise(opts: dict[str, Any]) -> float:
    snr = opts.get("snr")
    if snr is not None:
        if not snr > 0:
            raise UsageError("snr must be positive")
        return 0.0 if snr == math.inf else 1.0 / math.sqrt(snr)
    se = opts.get("sigma_eps")
    if se is None:
        return 0.0
    if not se >= 0:
        raise UsageError("sigma_eps must be nonnegative")
    return float(se)


# --------------------------------------------------------------------------
# CSV output


def fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


class CsvOut:
    """Header comments followed by RFC-4180 rows."""

    def __init__(self, config: dict[str, Any], command: str):
        self.buf = io.StringIO()
        self.buf.write(f"# fgdd {__version__} {command}\n")
        for key in sorted(config):
            val = config[key]
            if isinstance(val, np.ndarray):
                val = ",".join(fmt(v) for v in val)
            elif isinstance(val, list):
                val = ",".join(fmt(v) for v in val)
            else:
                val = fmt(val)
            self.buf.write(f"# {key}={val}\n")
        self.writer = csv.writer(self.buf, lineterminator="\r\n")

    def row(self, values: Iterable[Any]) -> None:
        self.writer.writerow([fmt(v) for v in values])

    def emit(self, path: Optional[str]) -> None:
        text = self.buf.getvalue()
        if path:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
            sys.stdout.flush()


# --------------------------------------------------------------------------
# commands


def cmd_moments(opts: dict[str, Any]) -> tuple[CsvOut, int]:
    act = get_activation(opts["activation"])
    mo = compute_moments(act, opts["nodes"])
    out = CsvOut(opts, "moments")
    out.row(("activation", "nodes", "eta", "zeta", "eta_prime", "converged", "stein_check"))
    out.row((act.name, mo.quadrature_nodes, mo.eta, mo.zeta, mo.eta_prime, mo.converged,
             stein_check(act, opts["nodes"])))
    return out, EXIT_OK


def _base_shape(opts: dict[str, Any]) -> ModelShape:
    phi = opts["phi"] if opts.get("phi") is not None else opts["n0"] / opts["m"]
    psi = opts["psi"] if opts.get("psi") is not None else opts["n0"] / opts["n1"]
    return ModelShape(
        phi=phi,
        psi=psi,
        gamma=opts["gamma"],
        sigma_w2=opts["sigma_w2"],
        sigma_eps=opts["sigma_eps"],
        nu=0 if opts["centering"] else 1,
    )


def _sweep_points(opts: dict[str, Any], base: ModelShape) -> list[tuple[str, Optional[float], ModelShape]]:
    axis, grid = opts.get("sweep_axis"), opts.get("grid")
    if axis is None and grid is None:
        return [("none", None, base)]
    if axis is None or grid is None:
        raise UsageError("--sweep-axis and --grid must be given together")
    points = []
    for v in grid:
        v = float(v)
        if axis == "n1_over_m":
            if not v > 0:
                raise UsageError("n1_over_m values must be positive")
            shape = base.with_(psi=base.phi / v)
        elif axis == "gamma":
            shape = base.with_(gamma=v)
        elif axis == "snr":
            if not v > 0:
                raise UsageError("snr values must be positive")
            shape = base.with_(sigma_eps=0.0 if v == math.inf else 1.0 / math.sqrt(v))
        else:
            if opts["model"] != "ntk":
                raise UsageError("a sigma_w2 sweep needs --model ntk")
            shape = base.with_(sigma_w2=v)
        if shape.gamma == 0.0 and shape.is_rf and shape.at_threshold:
            log.warning("skipping %s=%r: ridgeless sweeps exclude psi = phi", axis, v)
            continue
        points.append((axis, v, shape))
    return points


def cmd_theory(opts: dict[str, Any]) -> tuple[CsvOut, int]:
    mo = compute_moments(opts["activation"], opts["nodes"])
    try:
        points = _sweep_points(opts, _base_shape(opts))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    columns = list(THEORY_COLUMNS)
    if opts["views"]:
        columns += VIEW_COLUMNS
    if opts["train_loss"]:
        columns += TRAIN_COLUMNS
    out = CsvOut(opts, "theory")
    out.row(columns)
    code = EXIT_OK
    for axis, value, shape in points:
        row: dict[str, Any] = {
            "axis": axis, "value": value, "phi": shape.phi, "psi": shape.psi,
            "gamma": shape.gamma, "sigma_w2": shape.sigma_w2, "nu": shape.nu,
            "sigma_eps": shape.sigma_eps, "eta": mo.eta, "zeta": mo.zeta,
            "eta_prime": mo.eta_prime,
        }
        try:
            tau = solve_tau(shape, mo)
            d = decompose(shape, mo, tau)
            row.update(tau1=tau.tau1, tau2=tau.tau2, dtau1=tau.dtau1, dtau2=tau.dtau2)
            row.update(d.terms())
            row.update(E_test=d.E_test, diverged=d.diverged,
                       status="diverged" if d.diverged else "ok")
            if opts["views"]:
                row.update({k: v for k, v in recombine(d).as_dict().items() if k in VIEW_COLUMNS})
            if opts["train_loss"]:
                tl = training_loss(shape, mo, tau)
                row.update(T1=tl.T1, T2=tl.T2, E_train=tl.E_train)
        except SolverError as exc:
            log.error("solver failed%s: %s", f" at {axis}={value!r}" if value is not None else "", exc)
            row.update(diverged=False, status="error")
            code = EXIT_SOLVER
        out.row(row.get(c, math.nan) for c in columns)
    return out, code


def _sim_config(opts: dict[str, Any]) -> SimConfig:
    try:
        return SimConfig(
            m=opts["m"], n0=opts["n0"], n1=opts["n1"], activation=opts["activation"],
            gamma=opts["gamma"], sigma_eps=opts["sigma_eps"], model=opts["model"],
            sigma_w2=opts["sigma_w2"], centering=opts["centering"],
            feature_mode=opts["feature_mode"], n_test=opts["n_test"],
            n_replicates=opts["replicates"], base_seed=opts["seed"],
            test_sampling=opts["test_sampling"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _estimate(cfg: SimConfig):
    try:
        return estimate_decomposition(make_experiment(cfg))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_simulate(opts: dict[str, Any]) -> tuple[CsvOut, int]:
    cfg = _sim_config(opts)
    est = _estimate(cfg)
    out = CsvOut(opts, "simulate")
    out.row(("quantity", "key", "value", "se"))
    for mask, v in est.htable.as_dict().items():
        out.row(("H", mask, v, est.htable.se(mask)))
    for mask, v in est.vardecomp.as_dict().items():
        if mask != "000":
            out.row(("V", mask, v, est.vardecomp.se(mask)))
    out.row(("bias", "", est.bias, est.bias_se))
    out.row(("total_variance", "", est.total_variance, est.total_variance_se))
    out.row(("e_test", "", est.e_test, est.e_test_se))
    out.row(("e_train", "", est.e_train, est.e_train_se))
    return out, EXIT_OK


def z_score(estimate: float, theory: float, se: float) -> float:
    diff = estimate - theory
    if se > 0:
        return diff / se
    return 0.0 if diff == 0 else math.copysign(math.inf, diff)


def cmd_compare(opts: dict[str, Any]) -> tuple[CsvOut, int]:
    cfg = _sim_config(opts)
    mo = compute_moments(cfg.act)
    d = decompose(cfg.shape, mo)
    if d.diverged:
        raise SolverError("theory diverges at this configuration (ridgeless threshold)")
    est = _estimate(cfg)
    out = CsvOut(opts, "compare")
    out.row(("term", "theory", "estimate", "se", "z", "status"))
    code = EXIT_OK
    theory = dict(d.terms(), E_test=d.E_test)
    for term, (value, se) in est.terms().items():
        z = z_score(value, theory[term], se)
        ok = abs(z) <= Z_LIMIT
        if not ok:
            code = EXIT_COMPARE
        out.row((term, theory[term], value, se, z, "ok" if ok else "fail"))
    return out, code


def cmd_ensemble(opts: dict[str, Any]) -> tuple[CsvOut, int]:
    mo = compute_moments(opts["activation"], opts["nodes"])
    specs = [EnsembleSpec(p, q) for p in opts["kp"] for q in opts["kd"]]
    if opts["simulate"]:
        if opts.get("phi") is not None or opts.get("psi") is not None:
            raise UsageError("--simulate takes the shape from --m/--n0/--n1, not --phi/--psi")
        cfg = _sim_config(opts)
        shape = cfg.shape
    else:
        shape = _base_shape(opts)
    d = decompose(shape, mo)
    try:
        ratio = optimal_ratio(d)
    except ValueError:
        ratio = math.inf
    sims: dict[EnsembleSpec, Any] = {}
    if opts["simulate"]:
        finite = [s for s in specs if s.members != math.inf]
        if finite:
            try:
                ests = simulate_ensembles(make_experiment(cfg), finite)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            sims = dict(zip(finite, ests))
    columns = ["k_p", "k_d", *TERM_NAMES, "E_test", "optimal_ratio", "sim_e_test", "sim_e_test_se"]
    out = CsvOut(opts, "ensemble")
    out.row(columns)
    for spec in specs:
        sd = scale_decomposition(d, spec)
        est = sims.get(spec)
        out.row((
            spec.k_p, spec.k_d, *sd.terms().values(), sd.E_test, ratio,
            est.e_test if est else math.nan, est.e_test_se if est else math.nan,
        ))
    return out, EXIT_OK


COMMANDS = {
    "moments": cmd_moments,
    "theory": cmd_theory,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "ensemble": cmd_ensemble,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="fgdd: %(levelname)s: %(message)s")
    try:
        ns = build_parser().parse_args(argv)
        opts = resolve_options(ns.command, ns)
        out, code = COMMANDS[ns.command](opts)
        out.emit(getattr(ns, "out", None))
        return code
    except UsageError as exc:
        print(f"fgdd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, SingularKernelError) as exc:
        print(f"fgdd: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
