"""Batch command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import re
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from . import __version__
from .errors import DomainError, NumericError
from .grid import GridSpec, build_areal_mapping, build_point_mapping
from .matern import MaternParams
from .normal_fit import DEFAULT_LOG_LAMBDA_BOUNDS, maximize_lambda
from .precision import build_precision, parse_family, write_triplets
from . import simulation, spectral

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "MRFGRID_THREADS"


class InputError(DomainError):
    """Malformed command-line input or data file."""


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list
    outputs: list
    root_seed: int | None = None
    wall_clock_seconds: float = 0.0
    version: str = __version__
    extra: dict = field(default_factory=dict)


def _atomic_write_text(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(manifest: RunManifest, path: str) -> None:
    _atomic_write_text(path, json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def parse_lambda(text: str) -> float:
    """``'e4'`` -> exp(4); ``'e-2.5'`` -> exp(-2.5); otherwise a plain float."""
    text = str(text).strip()
    m = re.fullmatch(r"e([+-]?\d+(\.\d*)?)", text)
    try:
        value = math.exp(float(m.group(1))) if m else float(text)
    except ValueError:
        raise InputError(f"cannot parse lambda {text!r}; use a number or e<k> for exp(k)") from None
    if not (math.isfinite(value) and value > 0):
        raise InputError(f"lambda must be finite and positive, got {text!r}")
    return value


def _add_grid_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid")
    g.add_argument("--grid", help="GridSpec JSON file (overrides the flags below)")
    g.add_argument("--nx", type=int, default=10)
    g.add_argument("--ny", type=int, default=None, help="defaults to nx")
    g.add_argument("--x0", type=float, default=0.0)
    g.add_argument("--y0", type=float, default=0.0)
    g.add_argument("--dx", type=float, default=None, help="defaults to 1/nx (unit square)")
    g.add_argument("--dy", type=float, default=None, help="defaults to 1/ny")


def _grid_from_args(args) -> GridSpec:
    if args.grid:
        with open(args.grid) as fh:
            return GridSpec.from_dict(json.load(fh))
    ny = args.ny if args.ny is not None else args.nx
    if args.nx < 1 or ny < 1:
        raise InputError(f"grid dimensions must be positive, got {args.nx}x{ny}")
    dx = args.dx if args.dx is not None else 1.0 / args.nx
    dy = args.dy if args.dy is not None else 1.0 / ny
    return GridSpec(args.nx, ny, args.x0, args.y0, dx, dy)


POINT_HEADER = ["x", "y", "value"]
RECT_HEADER = ["xmin", "ymin", "xmax", "ymax", "value"]


def read_observations(path: str, grid: GridSpec):
    """Read one data file and return ``(K, Y, kind)``.

    CSV files with header ``x,y,value`` are point data; ``xmin,ymin,xmax,ymax,value``
    are rectangles. ``.json`` files hold ``[{"vertices": [[x, y], ...], "value": v}, ...]``.
    """
    if path.lower().endswith(".json"):
        with open(path) as fh:
            try:
                items = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(items, list) or not items:
            raise InputError(f"{path}: expected a non-empty list of polygons")
        try:
            polys = [it["vertices"] for it in items]
            Y = np.array([float(it["value"]) for it in items])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: polygon entries need 'vertices' and 'value' ({exc})") from None
        return build_areal_mapping(grid, polys), Y, "polygon"
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty data file")
        header = [h.strip().lower() for h in header]
        if header == POINT_HEADER:
            kind = "point"
        elif header == RECT_HEADER:
            kind = "rect"
        else:
            raise InputError(f"{path}: unrecognized header {header}; expected "
                             f"{','.join(POINT_HEADER)} or {','.join(RECT_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise InputError(f"{path}: line {lineno}: non-numeric value in {row}") from None
            if len(vals) != len(header) or not all(math.isfinite(v) for v in vals):
                raise InputError(f"{path}: line {lineno}: expected {len(header)} finite values")
            rows.append(vals)
    if not rows:
        raise InputError(f"{path}: no observations")
    a = np.array(rows)
    if kind == "point":
        return build_point_mapping(grid, a[:, :2]), a[:, 2], kind
    return build_areal_mapping(grid, [tuple(r) for r in a[:, :4]]), a[:, 4], kind


def cmd_precision(args) -> int:
    t0 = time.perf_counter()
    grid = _grid_from_args(args)
    family, param = parse_family(args.family)
    prec = build_precision(grid, family, param)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_triplets(prec, args.out)
    write_manifest(RunManifest("precision", {"grid": grid.to_dict(), "family": prec.label()},
                               [], [args.out, f"{args.out}.json"],
                               wall_clock_seconds=time.perf_counter() - t0),
                   f"{args.out}.manifest.json")
    print(f"wrote {args.out} ({prec.label()}, m={prec.m}, c={prec.c}, nnz={prec.Q.nnz})")
    return EXIT_OK


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    grid = _grid_from_args(args)
    family, param = parse_family(args.family)
    prec = build_precision(grid, family, param)
    Ks, Ys, kinds = [], [], []
    for path in args.data:
        K, Y, kind = read_observations(path, grid)
        Ks.append(K)
        Ys.append(Y)
        kinds.append(kind)
    K = sp.vstack(Ks).tocsr()
    Y = np.concatenate(Ys)
    fit = maximize_lambda(K, prec, Y, bounds=tuple(args.bounds), se_method=args.se_method)
    os.makedirs(args.out_dir, exist_ok=True)
    fit_path = os.path.join(args.out_dir, "fit.json")
    grid_path = os.path.join(args.out_dir, "grid.csv")
    pi_path = os.path.join(args.out_dir, "intervals.csv")
    result = fit.to_json()
    result.update({"family": prec.label(), "n": int(len(Y)), "m": grid.m})
    _atomic_write_text(fit_path, json.dumps(result, indent=2, sort_keys=True) + "\n")
    z = norm.ppf(0.5 + args.level / 2.0)
    half = z * np.sqrt(fit.se_g ** 2 + fit.hyper.tau2)
    rows, cols = np.divmod(np.arange(grid.m), grid.nx)
    with open(grid_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "ghat", "se"])
        for r, c, gv, sv in zip(rows, cols, fit.ghat, fit.se_g):
            w.writerow([r, c, repr(float(gv)), repr(float(sv))])
    with open(pi_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "pred_lower", "pred_upper"])
        for r, c, gv, hv in zip(rows, cols, fit.ghat, half):
            w.writerow([r, c, repr(float(gv - hv)), repr(float(gv + hv))])
    write_manifest(RunManifest("fit", {"grid": grid.to_dict(), "family": prec.label(),
                                       "bounds": list(args.bounds), "level": args.level,
                                       "data_kinds": kinds},
                               list(args.data), [fit_path, grid_path, pi_path],
                               wall_clock_seconds=time.perf_counter() - t0),
                   os.path.join(args.out_dir, "manifest.json"))
    flag = " (at search bound)" if fit.converged_at_bound else ""
    print(f"lambda={fit.hyper.lam:.6g}{flag} tau2={fit.hyper.tau2:.6g} -> {args.out_dir}")
    return EXIT_OK


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", label).strip("_")


def _parse_gp(token: str) -> MaternParams:
    """``'nu=2,rho=0.1'`` -> MaternParams."""
    try:
        kv = dict(part.split("=") for part in token.split(","))
        return MaternParams(float(kv["nu"]), float(kv["rho"]))
    except (ValueError, KeyError):
        raise InputError(f"bad --gp spec {token!r}; use nu=<v>,rho=<v>") from None


def cmd_diagnose(args) -> int:
    t0 = time.perf_counter()
    grid = _grid_from_args(args)
    os.makedirs(args.out_dir, exist_ok=True)
    families = [f for f in (args.families or "").split(",") if f.strip()]
    gps = [_parse_gp(t) for t in (args.gp or [])]
    if not families and not gps:
        raise InputError("nothing to diagnose: give --families and/or --gp")
    outputs = []
    if args.what == "eigen":
        for token in families:
            prec = build_precision(grid, *parse_family(token))
            curve = spectral.eigencurve_mrf(prec, args.normalize_index, args.max_index)
            path = os.path.join(args.out_dir, f"eigen_{_safe(prec.label())}.csv")
            spectral.write_curve_csv(curve, path)
            outputs.append(path)
        for params in gps:
            curve = spectral.eigencurve_gp(grid.centroids(), params, args.normalize_index,
                                           args.max_index)
            path = os.path.join(args.out_dir, f"eigen_{_safe(curve.label)}.csv")
            spectral.write_curve_csv(curve, path)
            outputs.append(path)
        config = {"normalize_index": args.normalize_index, "max_index": args.max_index}
    else:
        if args.lam is None:
            raise InputError("diagnose kernel needs --lambda")
        lam = parse_lambda(args.lam)
        kernels = [spectral.equivalent_kernel_mrf(build_precision(grid, *parse_family(t)), lam,
                                                  args.focal) for t in families]
        kernels += [spectral.equivalent_kernel_gp(grid, p, lam, args.focal) for p in gps]
        for k in kernels:
            stem = os.path.join(args.out_dir, f"kernel_{_safe(k.label)}")
            spectral.write_cross_section_csv(k, f"{stem}_x.csv", "x")
            spectral.write_cross_section_csv(k, f"{stem}_y.csv", "y")
            spectral.write_kernel_image_csv(k, f"{stem}_image.csv")
            outputs += [f"{stem}_x.csv", f"{stem}_y.csv", f"{stem}_image.csv"]
        config = {"lambda": lam, "focal": kernels[0].focal}
    config.update({"grid": grid.to_dict(), "families": families,
                   "gp": [asdict(p) for p in gps], "what": args.what})
    write_manifest(RunManifest(f"diagnose {args.what}", config, [], outputs,
                               wall_clock_seconds=time.perf_counter() - t0),
                   os.path.join(args.out_dir, f"manifest_{args.what}.json"))
    print(f"wrote {len(outputs)} file(s) to {args.out_dir}")
    return EXIT_OK


def _resolve_config(path: str) -> str:
    if os.path.exists(path):
        return path
    name = path if path.endswith(".json") else f"{path}.json"
    bundled = resources.files("mrfgrid") / "configs" / name
    if bundled.is_file():
        return str(bundled)
    raise InputError(f"config {path!r} not found (and no bundled config of that name)")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer") from None


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    path = _resolve_config(args.config)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
    if args.seed is not None:
        raw["root_seed"] = args.seed
    configs = simulation.load_config(raw)
    threads = args.threads if args.threads is not None else _default_threads()
    os.makedirs(args.out_dir, exist_ok=True)
    extra = {}
    if args.oracle:
        rows = []
        for cfg in configs:
            rows += simulation.run_oracle(cfg, threads, args.full_scale)
        out = os.path.join(args.out_dir, "oracle.csv")
        from .oracle import ORACLE_FIELDS
        simulation.write_rows_csv(rows, out, ORACLE_FIELDS)
        outputs = [out]
        extra["oracle_gate"] = simulation.oracle_gate(rows)
        failed_all = not rows
    else:
        rows = []
        for cfg in configs:
            rows += simulation.run_scenario(cfg, threads, args.full_scale)
        areal = tuple(c.name for c in configs if c.sampling == "areal")
        summary = simulation.summarize(rows, areal)
        res = os.path.join(args.out_dir, "results.csv")
        summ = os.path.join(args.out_dir, "summary.csv")
        simulation.write_rows_csv(rows, res, simulation.RESULT_FIELDS)
        simulation.write_rows_csv(summary, summ, simulation.SUMMARY_FIELDS)
        outputs = [res, summ]
        errors = [r for r in rows if r["error"]]
        extra["failed_rows"] = len(errors)
        for r in errors:
            print(f"warning: {r['scenario']} cell ({r['nu']}, {r['rho']}, {r['tau2']}) rep "
                  f"{r['rep']} {r['family']}: {r['error']}", file=sys.stderr)
        fitted = [r for r in rows if r["family"] != "null"]
        failed_all = bool(fitted) and all(r["error"] for r in fitted)
    seeds = sorted({c.root_seed for c in configs})
    write_manifest(RunManifest("simulate", {"config_path": path, "scenarios":
                                            [c.to_dict() for c in configs],
                                            "oracle": args.oracle, "threads": threads,
                                            "full_scale": args.full_scale},
                               [path], outputs, seeds[0] if len(seeds) == 1 else None,
                               time.perf_counter() - t0, extra=extra),
                   os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote {', '.join(outputs)}")
    if failed_all:
        print("error: every cell failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrfgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("precision", help="write an MRF precision matrix as triplets")
    _add_grid_args(p)
    p.add_argument("--family", required=True, help="icar, hicar:<max_dist>, dicar:<r>, tpsmrf")
    p.add_argument("--out", default="precision.txt")
    p.set_defaults(func=cmd_precision)

    p = sub.add_parser("fit", help="fit an MRF to point and/or areal data")
    _add_grid_args(p)
    p.add_argument("--family", default="tpsmrf")
    p.add_argument("--data", action="append", required=True,
                   help="CSV (x,y,value or xmin,ymin,xmax,ymax,value) or polygon JSON; repeatable")
    p.add_argument("--bounds", type=float, nargs=2, default=list(DEFAULT_LOG_LAMBDA_BOUNDS),
                   metavar=("LO", "HI"), help="log-lambda search interval")
    p.add_argument("--se-method", choices=("auto", "exact", "stochastic"), default="auto")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out-dir", default="fit_out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="eigenvalue curves or equivalent kernels")
    p.add_argument("what", choices=("eigen", "kernel"))
    _add_grid_args(p)
    p.add_argument("--families", default="", help="comma-separated, e.g. icar,tpsmrf,hicar:3")
    p.add_argument("--gp", action="append", help="Matérn model nu=<v>,rho=<v>; repeatable")
    p.add_argument("--normalize-index", type=int, default=100)
    p.add_argument("--max-index", type=int, default=None)
    p.add_argument("--lambda", dest="lam", default=None, help="number or e<k> for exp(k)")
    p.add_argument("--focal", type=int, default=None, help="focal cell (default: centre)")
    p.add_argument("--out-dir", default="diagnose_out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run a simulation or oracle study from a JSON config")
    p.add_argument("--config", required=True, help="JSON path or bundled name (desk_scale)")
    p.add_argument("--out-dir", default="sim_out")
    p.add_argument("--oracle", action="store_true", help="expected-SSE study instead of fitting")
    p.add_argument("--full-scale", action="store_true", help="allow joint simulations above the desk-scale size guard")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default ${THREADS_ENV} or 1)")
    p.add_argument("--seed", type=int, default=None, help="override the root seed")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
