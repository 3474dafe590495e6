"""Command line front end: ``fsmle estimate|geometry|bounds|verify``.

Exit codes: 0 success, 2 configuration error, 3 non-convergence,
4 geometry failure (including rank-deficient designs), 5 check failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (
    BoundError,
    auto_radius,
    confidence_critical,
    err_bound,
    make_bracket,
    quad_tail,
    quad_tail_prob,
    spread_bound,
    spread_bound_prob,
    tau_alpha,
)
from .config import ConfigError, build_model, load, resolve
from .estimation import fit_qmle
from .geometry import GeometryError, build_geometry
from .models import ModelError, RankDeficientDesign
from .verify import (
    Scenario,
    derive_seed,
    prepare,
    records_to_csv,
    reports_to_long_csv,
    run_checks,
    run_replications,
    summary,
)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_GEOMETRY, EXIT_CHECK = 0, 2, 3, 4, 5


class GeometryFailure(Exception):
    pass


def jsonable(obj):
    """Plain JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _header(cfg) -> dict:
    return {"config": cfg, "seed": cfg["run"]["seed"], "version": __version__}


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def _csv_with_header(cfg, body: str) -> str:
    meta = json.dumps(jsonable(_header(cfg)), sort_keys=True, separators=(",", ":"))
    return f"# {meta}\n{body}"


def _geometry(model, cfg):
    run = cfg["run"]
    try:
        return build_geometry(model, nu=run["nu"], g1=run["g1"], K=run["grid"]["K"])
    except GeometryError as exc:
        raise GeometryFailure(str(exc)) from exc


def cmd_estimate(cfg, args, out: Path) -> int:
    model = build_model(cfg, args.base_dir)
    seed = cfg["run"]["seed"]
    rng = np.random.default_rng(derive_seed(seed, 0, "data"))
    y = model.population.sample(rng)
    fit = fit_qmle(model, y)
    body = _header(cfg)
    body["fit"] = fit.to_dict()
    path = _write(out, "estimate.json", dump_json(body))
    print(f"estimate: converged={fit.converged} -> {path}")
    return EXIT_OK if fit.converged else EXIT_NONCONV


def cmd_geometry(cfg, args, out: Path) -> int:
    model = build_model(cfg, args.base_dir)
    geo = _geometry(model, cfg)
    body = _header(cfg)
    body["geometry"] = geo.to_dict()
    path = _write(out, "geometry.json", dump_json(body))
    print(f"geometry: a={geo.a:.6g} -> {path}")
    return EXIT_OK


def bounds_report(geo, x: float, r_cfg) -> dict:
    """Explicit bounds at level ``x`` for a computed geometry."""
    rep = {"x": x}
    try:
        zq = err_bound(x, geo.p, geo.g, geo.nu)
        rep["err_bound"] = {"z_Q": zq, "applicable": True, "prob": math.exp(-x)}
    except BoundError as exc:
        zq = None
        rep["err_bound"] = {"z_Q": None, "applicable": False, "reason": str(exc)}
    tail = geo.tail
    if tail is not None:
        rep["quad_tail"] = {"z": quad_tail(x, tail), "prob": quad_tail_prob(x, tail),
                            "lambda0": tail.lambda0}
    else:
        rep["quad_tail"] = {"z": None, "reason": geo.tail_error}
    radius = auto_radius(geo, x)
    rep["radius"] = radius.to_dict()
    if r_cfg == "auto":
        r = radius.r0 if math.isfinite(radius.r0) else None
    else:
        r = float(r_cfg)
    rep["r"] = r
    if r is None:
        rep["bracket"] = None
        return rep
    br = make_bracket(geo, r)
    rep["bracket"] = br.to_dict()
    try:
        tau, alpha = tau_alpha(br.delta, br.omega, geo.a)
        rep["tau"], rep["alpha"] = tau, alpha
    except BoundError as exc:
        tau = alpha = None
        rep["tau"] = rep["alpha"] = None
        rep["tau_reason"] = str(exc)
    err_level = br.omega * zq if zq is not None else (0.0 if br.omega == 0 else None)
    if tail is not None and alpha is not None and err_level is not None:
        s = spread_bound(br.omega, zq if zq is not None else 0.0, alpha, tail.lambda0,
                         quad_tail(x, tail))
        rep["spread_bound"] = {"value": s, "prob": spread_bound_prob(x, tail.xc)}
    else:
        rep["spread_bound"] = None
    if tail is not None and err_level is not None:
        rep["confidence_critical"] = confidence_critical(x, tail, err_level)
    else:
        rep["confidence_critical"] = None
    return rep


def cmd_bounds(cfg, args, out: Path) -> int:
    model = build_model(cfg, args.base_dir)
    geo = _geometry(model, cfg)
    body = _header(cfg)
    body["bounds"] = bounds_report(geo, args.x, cfg["run"]["r"])
    path = _write(out, "bounds.json", dump_json(body))
    rr = body["bounds"]["radius"]
    print(f"bounds: r0={rr['r0']:.6g} feasible={rr['feasible']} -> {path}")
    return EXIT_OK


def cmd_verify(cfg, args, out: Path) -> int:
    model = build_model(cfg, args.base_dir)
    run = cfg["run"]
    geo = _geometry(model, cfg)
    sc = Scenario(
        model,
        R=run["R"],
        master_seed=run["seed"],
        x_levels=tuple(float(x) for x in run["x_levels"]),
        r=None if run["r"] == "auto" else float(run["r"]),
        r_x=run["r_x"],
        K=run["grid"]["K"],
        J=run["grid"]["J"],
        nu=run["nu"],
        g1=run["g1"],
        geometry=geo,
    )
    try:
        ctx = prepare(sc)
    except ValueError as exc:
        raise GeometryFailure(str(exc)) from exc
    records = run_replications(sc, args.workers, ctx)
    reports = run_checks(ctx, records)
    summ = summary(ctx, records, reports)
    body = _header(cfg)
    body["summary"] = summ
    fmts = cfg["output"]["formats"]
    if "csv" in fmts:
        _write(out, "records.csv", _csv_with_header(cfg, records_to_csv(records, model.p)))
        _write(out, "checks_long.csv", _csv_with_header(cfg, reports_to_long_csv(reports)))
    if "json" in fmts:
        _write(out, "summary.json", dump_json(body))
    failed = [c for c in reports if c.passed is False]
    for c in reports:
        flag = {True: "pass", False: "FAIL", None: "n/a"}[c.passed]
        x = "" if c.x is None else f" x={c.x:g}"
        print(f"{flag:4s} {c.check}{x}: empirical={c.empirical:.6g} bound={c.bound:.6g}")
    outside = summ["outside_C"]
    print(f"records outside C(r): {outside} of {len(records)}")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "estimate": cmd_estimate,
    "geometry": cmd_geometry,
    "bounds": cmd_bounds,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fsmle", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fsmle {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--x", type=float, default=2.0, help="deviation level (bounds)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", help="output directory (overrides output.directory)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(load(args.config))
        if not args.x > 0:
            raise ConfigError("--x: must be positive")
        if args.workers < 1:
            raise ConfigError("--workers: must be at least 1")
        args.base_dir = Path(args.config).resolve().parent
        out = Path(args.out) if args.out else Path(cfg["output"]["directory"])
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RankDeficientDesign, GeometryFailure) as exc:
        print(f"geometry failure: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except ModelError as exc:
        print(f"config error: model: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
