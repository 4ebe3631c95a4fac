"""Command-line interface: ``pcde {fit,select,segment,simulate,risk,slope}``.

Options may also come from a TOML file given by ``--config``: top-level
keys apply to every command and a table named after the command overrides
them; explicit flags override both. Keys are option names with ``_`` or
``-``. Exit status: 0 success, 1 usage or validation error, 2 data or I/O
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import divergence, formats, polydens, selection, simulate, spatial_gmm
from .exceptions import (CalibrationError, DegenerateFitError, DomainError, ResourceBudgetError, SamplerError,
                         SelectionError)
from .geometry import CollectionKind, PartitionTree

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Value parsing
# ---------------------------------------------------------------------------

def parse_degrees(value) -> list:
    """Degree candidates: ``"0,1"`` or ``[0, 1]``; per-axis degrees are joined by ``:`` (``"1:2"``)."""
    items = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
    out = []
    for item in items:
        parts = item if isinstance(item, list) else str(item).split(":")
        try:
            deg = tuple(int(p) for p in parts)
        except ValueError:
            raise UsageError(f"bad degree {item!r}") from None
        if not deg or any(d < 0 or d > polydens.MAX_DEGREE for d in deg):
            raise UsageError(f"degrees must lie in 0..{polydens.MAX_DEGREE}, got {item!r}")
        out.append(deg)
    if not out:
        raise UsageError("no degree given")
    return out


def _broadcast(deg: tuple, d_y: int) -> tuple:
    if len(deg) == 1:
        return deg * d_y
    if len(deg) != d_y:
        raise UsageError(f"degree {deg} does not match the response dimension {d_y}")
    return deg


def parse_k_range(value) -> list:
    """``"1-3"``, ``"1,2,4"`` or a list of integers."""
    if isinstance(value, list):
        ks = [int(v) for v in value]
    else:
        text = str(value).strip()
        try:
            if "-" in text:
                a, b = text.split("-", 1)
                ks = list(range(int(a), int(b) + 1))
            else:
                ks = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad K range {value!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("K values must be positive")
    return ks


def parse_cov_specs(value) -> list:
    items = value if isinstance(value, list) else [v for v in str(value).split(";") if v.strip()]
    try:
        return [spatial_gmm.CovarianceSpec.parse(s) for s in items]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_quadrature(value):
    """``grid``, ``grid:<points>``, ``mc`` or ``mc:<samples>``."""
    if value is None:
        return None
    kind, _, arg = str(value).partition(":")
    try:
        if kind == "grid":
            return divergence.Grid(int(arg) if arg else 512)
        if kind == "mc":
            return divergence.MonteCarlo(int(arg) if arg else 20_000)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    raise UsageError(f"bad quadrature {value!r}")


def parse_ns(value) -> list:
    items = value if isinstance(value, list) else str(value).split(",")
    try:
        ns = [int(v) for v in items]
    except ValueError:
        raise UsageError(f"bad sample sizes {value!r}") from None
    if not ns or min(ns) < 1:
        raise UsageError("sample sizes must be positive")
    return ns


def _penalty(args):
    try:
        return selection.parse_mode(args.penalty_mode, args.kappa)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _collection(value) -> CollectionKind:
    try:
        return CollectionKind.parse(value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

DEFAULTS = {
    "out": ".",
    "seed": 0,
    "threads": 1,
    "family": "poly",
    "degrees": "0",
    "x_depth": 0,
    "y_depth": 0,
    "collection_x": "RDP",
    "collection_y": "RDP",
    "k_range": "1-3",
    "cov_spec": "mu_K L_K D_K A_K",
    "penalty_mode": "slope",
    "search": "dp",
    "n": "500",
    "replicates": 20,
    "estimator": "scenario",
    "rho": 0.5,
}


def _shared(p, *, data=True):
    p.add_argument("--config", help="TOML file with option values")
    if data:
        p.add_argument("--data", help="dataset CSV or CUBE1 file")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="worker cap")


def _selection_flags(p):
    p.add_argument("--family", choices=("poly", "gmm"), help="piecewise polynomials or spatial mixtures")
    p.add_argument("--collection-x", help="covariate partition collection: UDP, RDP, RDSP, RSP or HRP")
    p.add_argument("--collection-y", help="response partition collection (poly)")
    p.add_argument("--degrees", help="degree candidates, e.g. 0,1 or 1:2 per axis (poly)")
    p.add_argument("--k-range", help="component counts, e.g. 1-3 (gmm)")
    p.add_argument("--cov-spec", help="';'-separated covariance codes such as 'mu_K L D A_K' (gmm)")
    p.add_argument("--penalty-mode", choices=("slope", "theoretical", "manual"))
    p.add_argument("--kappa", type=float, help="penalty multiplier (theoretical or manual mode; fixes kappa_hat in slope mode)")
    p.add_argument("--max-x-leaves", type=int)
    p.add_argument("--max-y-leaves", type=int)
    p.add_argument("--max-depth-x", type=int)


def _divergence_flags(p):
    p.add_argument("--rho", type=float, help="JKL mixing weight (default 0.5)")
    p.add_argument("--quadrature", help="grid[:points] or mc[:samples]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcde", description="Partition-based conditional density estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="maximum-likelihood fit on uniform dyadic partitions")
    _shared(p)
    p.add_argument("--family", choices=("poly", "gmm"))
    p.add_argument("--degrees", help="degree of the polynomial fit")
    p.add_argument("--x-depth", type=int, help="dyadic depth of the covariate partition")
    p.add_argument("--y-depth", type=int, help="dyadic depth of the response partition (poly)")
    p.add_argument("--k-range", help="number of components (gmm; a single value)")
    p.add_argument("--cov-spec", help="covariance code (gmm)")
    p.add_argument("--penalty-mode", choices=("slope", "theoretical", "manual"))
    p.add_argument("--kappa", type=float)

    p = sub.add_parser("select", help="penalised model selection")
    _shared(p)
    _selection_flags(p)
    p.add_argument("--search", choices=("dp", "exhaustive"), help="partition search (poly)")

    p = sub.add_parser("segment", help="MAP labels from a fitted spatial mixture")
    _shared(p)
    p.add_argument("--model", help="model document (JSON)")

    p = sub.add_parser("simulate", help="draw a dataset from a scenario")
    _shared(p, data=False)
    p.add_argument("--scenario", help="shipped scenario name or TOML path")
    p.add_argument("--n", help="sample size")

    p = sub.add_parser("risk", help="Monte-Carlo JKL risk of a scenario's estimator")
    _shared(p, data=False)
    _divergence_flags(p)
    p.add_argument("--scenario")
    p.add_argument("--n", help="comma-separated sample sizes")
    p.add_argument("--replicates", type=int)
    p.add_argument("--estimator", choices=("scenario", "truth"))
    p.add_argument("--oracle", action="store_true", default=None, help="also write the grid oracle table")

    p = sub.add_parser("slope", help="slope-heuristic calibration diagnostics")
    _shared(p)
    _selection_flags(p)
    return parser


def _config_values(path, command: str, allowed: set) -> dict:
    try:
        doc = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file is not valid TOML: {exc}") from None
    commands = {"fit", "select", "segment", "simulate", "risk", "slope"}
    merged = {}
    for key, value in doc.items():
        if isinstance(value, dict) and key in commands:
            continue
        merged[key.replace("-", "_")] = value
    for key, value in doc.get(command, {}).items():
        merged[key.replace("-", "_")] = value
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    return merged


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    allowed = {k for k in vars(args) if k not in ("command", "config")}
    values = {k: v for k, v in DEFAULTS.items() if k in allowed}
    if args.config:
        values.update(_config_values(args.config, args.command, allowed))
    values.update({k: v for k, v in vars(args).items() if v is not None and k in allowed})
    for k in allowed:
        setattr(args, k, values.get(k))
    if getattr(args, "threads", 1) is not None and args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return args


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(args):
    if not args.data:
        raise UsageError("--data is required")
    path = Path(args.data)
    if not path.is_file():
        raise DataError(f"data file {path} not found")
    try:
        return formats.read_dataset(path)
    except (formats.FormatError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def _report_text(lines) -> str:
    return "".join(f"{k}: {v}\n" for k, v in lines)


def cmd_fit(args) -> int:
    data = _load_data(args)
    out = _out_dir(args)
    n = data.n
    if args.x_depth < 0 or args.y_depth < 0:
        raise UsageError("depths must be nonnegative")
    x_tree = PartitionTree.uniform(n, data.d_x, args.x_depth)
    mode = _penalty(args) if args.kappa is not None else None
    if args.family == "poly":
        degs = parse_degrees(args.degrees)
        if len(degs) != 1:
            raise UsageError("fit takes exactly one degree")
        r = _broadcast(degs[0], data.d_y)
        _check_unit(data)
        model = polydens.fit(data, x_tree, PartitionTree.uniform(n, data.d_y, args.y_depth), r)
        dim = model.dimension()[0]
        pen = None if mode is None else selection.penalty_poly(r, "UDP", "UDP", n, data.d_x, mode,
                                                               shared_udp=True).for_model(model)
    else:
        ks = parse_k_range(args.k_range)
        specs = parse_cov_specs(args.cov_spec)
        if len(ks) != 1 or len(specs) != 1:
            raise UsageError("fit takes exactly one K and one covariance spec")
        model = spatial_gmm.em_fit(data, x_tree, ks[0], specs[0], spatial_gmm.EMOptions(seed=args.seed))
        dim = model.dimension()
        pen = None if mode is None else selection.penalty_gmm(x_tree, ks[0], specs[0], "known", data.d_y, data.d_y,
                                                              n, mode).for_model(model)
    meta = {"n": n, "loglik": float(model.loglik), "seed": int(args.seed)}
    if pen is not None:
        meta.update(penalty=float(pen), score=float(-model.loglik + pen))
    formats.save_model(out / "model.json", model, meta)
    _write(out / "report.txt", _report_text([
        ("model", model.identifier), ("dim", dim), ("loglik", repr(float(model.loglik))),
        ("penalty", "n/a" if pen is None else repr(float(pen))),
    ]))
    return EXIT_OK


def _check_unit(data):
    for name, A in (("covariates", data.X), ("responses", data.Y)):
        if A.size and (A.min() < 0 or A.max() > 1):
            raise DataError(f"{name} must lie in [0, 1] for piecewise-polynomial models")


def _run_selection(args, data):
    pen = _penalty(args)
    if args.family == "poly":
        _check_unit(data)
        degs = [_broadcast(d, data.d_y) for d in parse_degrees(args.degrees)]
        kx, ky = _collection(args.collection_x), _collection(args.collection_y)
        budget = selection.PolyBudget(max_x_leaves=args.max_x_leaves, max_y_leaves=args.max_y_leaves,
                                      max_depth_x=args.max_depth_x)
        search = getattr(args, "search", "dp")
        if search == "exhaustive" or CollectionKind.HRP in (kx, ky):
            return selection.exhaustive_select_poly(data, kx, ky, degs, pen, budget=budget)
        return selection.dp_select_poly(data, kx, ky, degs, pen, budget=budget)
    if getattr(args, "search", "dp") != "dp":
        raise UsageError("spatial mixtures are only searched by dp")
    opts = selection.GmmSelectOptions(em=spatial_gmm.EMOptions(seed=args.seed), max_x_leaves=args.max_x_leaves,
                                      max_depth_x=args.max_depth_x)
    return selection.dp_select_gmm(data, _collection(args.collection_x), parse_k_range(args.k_range),
                                   parse_cov_specs(args.cov_spec), None, pen, opts=opts)


def report_csv(report: selection.SelectionReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "dim", "neg_loglik", "penalty", "score", "chosen"])
    for r in report.records:
        w.writerow([r.identifier, r.dim, repr(float(r.neg_loglik)), repr(float(r.penalty)), repr(float(r.score)),
                    int(r.identifier == report.chosen)])
    return buf.getvalue()


def slope_csv(diag: selection.SlopeDiagnostics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value"])
    for k in ("kappa_hat", "kappa_tilde", "intercept", "n_fit", "jump_kappa", "jump_size"):
        v = getattr(diag, k)
        w.writerow([k, repr(float(v)) if isinstance(v, float) else v])
    return buf.getvalue()


def slope_path_csv(diag: selection.SlopeDiagnostics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kappa", "dim"])
    for k, d in diag.path:
        w.writerow([repr(float(k)), d])
    return buf.getvalue()


def _chosen_meta(report, data, seed):
    rec = report.chosen_record
    return {"n": data.n, "loglik": -rec.neg_loglik, "penalty": rec.penalty, "score": rec.score, "seed": int(seed)}


def cmd_select(args) -> int:
    data = _load_data(args)
    out = _out_dir(args)
    report, model = _run_selection(args, data)
    _write(out / "report.csv", report_csv(report))
    formats.save_model(out / "model.json", model, _chosen_meta(report, data, args.seed))
    if report.slope is not None:
        _write(out / "slope.csv", slope_csv(report.slope))
    return EXIT_OK


def cmd_slope(args) -> int:
    data = _load_data(args)
    out = _out_dir(args)
    if args.penalty_mode != "slope" or args.kappa is not None:
        raise UsageError("slope calibration needs --penalty-mode slope without --kappa")
    report, _ = _run_selection(args, data)
    _write(out / "slope.csv", slope_csv(report.slope))
    _write(out / "slope_path.csv", slope_path_csv(report.slope))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dim", "neg_loglik"])
    for r in report.records:
        w.writerow([r.dim, repr(float(r.neg_loglik))])
    _write(out / "slope_models.csv", buf.getvalue())
    return EXIT_OK


def cmd_segment(args) -> int:
    data = _load_data(args)
    out = _out_dir(args)
    if not args.model:
        raise UsageError("--model is required")
    path = Path(args.model)
    if not path.is_file():
        raise DataError(f"model file {path} not found")
    try:
        model, _ = formats.load_model(path)
    except formats.FormatError as exc:
        raise DataError(str(exc)) from None
    if not isinstance(model, spatial_gmm.SpatialGmm):
        raise UsageError("segmentation needs a spatial mixture model")
    if data.d_x != model.x_tree.dim or data.d_y != model.d_y:
        raise DataError("dataset dimensions do not match the model")
    labels = spatial_gmm.segment(model, data)
    _write(out / "labels.csv", formats.labels_to_csv(labels, data.grid_shape))
    return EXIT_OK


def _scenario(args):
    if not args.scenario:
        raise UsageError("--scenario is required")
    name = args.scenario
    if name not in simulate.SCENARIOS and not Path(name).is_file():
        raise DataError(f"scenario {name!r} is neither shipped nor a file")
    try:
        return simulate.load_scenario(name)
    except (KeyError, ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"invalid scenario: {exc}") from None


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    ns = parse_ns(args.n)
    if len(ns) != 1:
        raise UsageError("simulate takes a single sample size")
    formats.write_dataset(out / "data.csv", simulate.sample(sc.truth, ns[0], args.seed))
    return EXIT_OK


def cmd_risk(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    ns = parse_ns(args.n)
    if args.replicates < 3:
        raise UsageError("--replicates must be at least 3")
    try:
        cfg = divergence.DivergenceConfig(rho=float(args.rho), quadrature=parse_quadrature(args.quadrature))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    est = simulate.Truth() if args.estimator == "truth" else sc.estimator
    curve = simulate.risk_curve(sc.truth, est, ns, args.replicates, cfg, args.seed, args.threads)
    _write(out / "risk.csv", curve.to_csv())
    if args.oracle:
        if sc.grid is None:
            raise UsageError("the scenario has no model grid")
        buf = []
        for n in ns:
            tab = simulate.oracle_table(sc.truth, sc.grid, n, args.replicates, cfg, args.seed, args.threads)
            lines = tab.to_csv().splitlines()
            if not buf:
                buf.append("n," + lines[0])
            buf.extend(f"{n},{line}" for line in lines[1:])
        _write(out / "oracle.csv", "\n".join(buf) + "\n")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "select": cmd_select,
    "segment": cmd_segment,
    "simulate": cmd_simulate,
    "risk": cmd_risk,
    "slope": cmd_slope,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"pcde: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError, OSError) as exc:
        print(f"pcde: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateFitError, CalibrationError, SamplerError, SelectionError, ResourceBudgetError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"pcde: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"pcde: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
