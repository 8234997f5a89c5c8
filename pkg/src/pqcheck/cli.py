"""``pqcheck`` command line: scene files in, JSON reports out.

Exit codes: 0 all checks passed, 1 a check failed, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .catalog import BUILDERS, CatalogGateError, scene_dict
from .expr import ExprError
from .geometry import GeodesicState, GeometryError, integrate_geodesic
from .integrals import (
    DRIFT_TOL,
    REGULARIZED_DRIFT_TOL,
    IntegralSpec,
    NearSpectrumError,
    commutation_report,
    conservation_report,
    energy_drift,
    integral_along,
)
from .pq_struct import (
    CONDITION_TOL,
    RESIDUAL_TOL,
    PQScene,
    SceneError,
    condition_checks,
    residual_report,
)
from .spectra import SpectrumError, classify_pair, lemma_dim_check, lemma_eigenvectors_check, spectra_at

ENERGY_TOL = 1e-6


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# I/O helpers


def write_atomic(path: str, text: str):
    """Write to a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_scene(path: str) -> PQScene:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read scene file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"scene file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError("scene file must hold a JSON object")
    return PQScene.from_dict(data)


def _plain(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, default=_plain) + "\n"


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"{what}: expected comma-separated numbers, got {text!r}") from exc


def _vector(text: str, m: int, what: str) -> np.ndarray:
    vals = _floats(text, what)
    if len(vals) != m:
        raise InputError(f"{what}: expected {m} components, got {len(vals)}")
    return np.array(vals)


def _pairs(text: str) -> list[tuple[float, float]]:
    out = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 2:
            raise InputError(f"--pairs: expected t:s items, got {item!r}")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise InputError(f"--pairs: not a number in {item!r}") from exc
    return out


def _regularized(text: str) -> IntegralSpec:
    parts = text.split(",")
    if len(parts) != 2:
        raise InputError("--regularized expects c,k")
    try:
        c, k = float(parts[0]), int(parts[1])
    except ValueError as exc:
        raise InputError(f"--regularized: cannot parse {text!r}") from exc
    if k < 1:
        raise InputError("--regularized: k must be a positive integer")
    return IntegralSpec(c, regularized=True, k=k)


def _check(name, passed, metrics: dict | None = None, **more) -> dict:
    return {"name": name, **(metrics or {}), **more, "passed": bool(passed)}


# --------------------------------------------------------------------------
# Subcommands. Each returns (checks, thresholds, extra report fields).


def cmd_validate(scene, args):
    checks = condition_checks(scene, scene.sample(args.samples, args.seed), args.tol)
    return [c.to_dict() for c in checks], {"condition": args.tol}, {}


def cmd_residuals(scene, args):
    rep = residual_report(scene, args.eq, samples=args.samples, seed=args.seed, tolerance=args.tol)
    return [_check(f"residual_{args.eq}", rep.passed, rep.to_dict())], {"residual": args.tol}, {}


def cmd_spectrum(scene, args):
    pts = scene.chart.grid(args.grid) if args.grid else scene.sample(args.samples, args.seed)
    specs = spectra_at(scene, pts)
    mu = np.array([s.eigenvalues for s in specs])
    summary = {
        "points": len(pts),
        "sampling": f"grid {args.grid}" if args.grid else "latin-hypercube",
        "eigenvalue_min": mu.min(axis=0).tolist(),
        "eigenvalue_max": mu.max(axis=0).tolist(),
        "min_gap": float(min(s.min_gap() for s in specs)),
    }
    dim = lemma_dim_check(scene, pts)
    vec = lemma_eigenvectors_check(scene, pts)
    thresholds = {**dim.thresholds, **vec.thresholds}
    return [dim.to_dict(), vec.to_dict()], thresholds, {"spectrum": summary}


def _trajectory(scene, args):
    m = scene.dim
    init = GeodesicState(_vector(args.x0, m, "--x0"), _vector(args.v0, m, "--v0"))
    if not scene.chart.contains(init.x):
        raise InputError(f"--x0 {init.x.tolist()} lies outside the scene domain")
    return integrate_geodesic(scene.g, init, args.T, args.h, scene.chart)


def _write_csv(path, scene, traj, columns):
    m = scene.dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{i + 1}" for i in range(m)] + [f"v{i + 1}" for i in range(m)] + list(columns))
    cols = list(columns.values())
    for n in range(len(traj)):
        row = [traj.times[n], *traj.positions[n], *traj.velocities[n], *(c[n] for c in cols)]
        w.writerow([repr(float(v)) for v in row])
    write_atomic(path, buf.getvalue())


def _spec_columns(scene, traj, specs):
    return {f"F_t{i + 1}": integral_along(scene, s, traj.positions, traj.velocities)[0] for i, s in enumerate(specs)}


def cmd_geodesic(scene, args):
    traj = _trajectory(scene, args)
    specs = [IntegralSpec(t) for t in _floats(args.t, "--t")] if args.t else []
    drift = energy_drift(scene, traj)
    if args.csv:
        _write_csv(args.csv, scene, traj, _spec_columns(scene, traj, specs))
    extra = {
        "trajectory": {
            "samples": len(traj),
            "termination": traj.reason,
            "final_position": traj.positions[-1].tolist(),
            "final_velocity": traj.velocities[-1].tolist(),
        }
    }
    return [_check("energy_drift", drift <= ENERGY_TOL, relative_drift_per_time=drift)], {"energy": ENERGY_TOL}, extra


def cmd_integrals(scene, args):
    specs = [IntegralSpec(t) for t in _floats(args.t, "--t")] if args.t else []
    if args.regularized:
        specs.append(_regularized(args.regularized))
    if not specs:
        raise InputError("give --t and/or --regularized")
    traj = _trajectory(scene, args)
    rep = conservation_report(scene, traj, specs)
    if args.csv:
        _write_csv(args.csv, scene, traj, _spec_columns(scene, traj, specs))
    checks = [_check(f"conservation {r['integral']}", r["passed"], r) for r in rep.to_dict()["integrals"]]
    thresholds = {"drift": DRIFT_TOL, "regularized_drift": REGULARIZED_DRIFT_TOL}
    return checks, thresholds, {"trajectory": {"samples": len(traj), "termination": traj.reason}}


def cmd_brackets(scene, args):
    pairs = _pairs(args.pairs)
    rep = commutation_report(scene, pairs, samples=args.phase_samples, seed=args.seed, tol=args.tol)
    checks = [
        _check(f"bracket {t:g}:{s:g}", r <= rep.tolerance, max_relative=r)
        for (t, s), r in zip(rep.pairs, rep.max_relative)
    ]
    return checks, {"bracket": args.tol}, {"phase_samples": args.phase_samples}


def cmd_classify(scene, args):
    cl = classify_pair(scene, samples=args.samples, seed=args.seed)
    passed = cl.verdict != "inconsistent"
    thresholds = {"residual": RESIDUAL_TOL, "condition": CONDITION_TOL, "affine": 1e-8, "P_lambda": 1e-8}
    return [_check("classification", passed, evidence=cl.evidence)], thresholds, {"verdict": cl.verdict}


COMMANDS = {
    "validate": cmd_validate,
    "residuals": cmd_residuals,
    "spectrum": cmd_spectrum,
    "geodesic": cmd_geodesic,
    "integrals": cmd_integrals,
    "brackets": cmd_brackets,
    "classify": cmd_classify,
}


# --------------------------------------------------------------------------
# Catalog


def _catalog_params(items: list[str]) -> dict:
    params = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise InputError(f"--param expects key=value, got {item!r}")
        if key in ("X", "Y"):
            params[key] = val
        elif key == "C":
            nums = _floats(val, "C")
            if len(nums) == 3:
                params[key] = np.diag(nums)
            elif len(nums) == 9:
                params[key] = np.array(nums).reshape(3, 3)
            else:
                raise InputError("C expects 3 (diagonal) or 9 numbers")
        elif key == "m":
            params[key] = int(val)
        else:
            params[key] = float(val)
    return params


def run_catalog(args) -> int:
    try:
        params = _catalog_params(args.param)
        data = scene_dict(args.entry, **params)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from exc
    except TypeError as exc:
        raise InputError(f"bad parameter for {args.entry}: {exc}") from exc
    except CatalogGateError as exc:
        print(f"catalog gate failed: {exc}", file=sys.stderr)
        return 1
    text = dump_json(data)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqcheck", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"pqcheck {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def scene_cmd(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("scene", help="scene JSON file")
        sp.add_argument("--out", help="write the JSON report here as well")
        sp.add_argument("--seed", type=int, default=42)
        sp.add_argument("--samples", type=int, default=1000)
        return sp

    sp = scene_cmd("validate", "check the algebraic conditions of a scene")
    sp.add_argument("--tol", type=float, default=CONDITION_TOL)
    sp = scene_cmd("residuals", "residuals of the defining equations")
    sp.add_argument("--eq", choices=["main", "pqproj", "projective", "hprojective"], default="main")
    sp.add_argument("--tol", type=float, default=RESIDUAL_TOL)
    sp = scene_cmd("spectrum", "eigenvalue traces and the eigenstructure checks")
    sp.add_argument("--grid", type=int, default=0, help="points per axis (default: random samples)")
    for name, help_text in (("geodesic", "integrate a geodesic"), ("integrals", "conservation of F_t")):
        sp = scene_cmd(name, help_text)
        sp.add_argument("--x0", required=True, help="comma-separated start point (use --x0=-1,2 for negatives)")
        sp.add_argument("--v0", required=True, help="comma-separated start velocity")
        sp.add_argument("--T", type=float, default=1.0, help="duration")
        sp.add_argument("--h", type=float, default=1e-3, help="RK4 step")
        sp.add_argument("--t", default="", help="comma-separated t values")
        sp.add_argument("--csv", help="write the trajectory as CSV")
        if name == "integrals":
            sp.add_argument("--regularized", help="c,k for the regularized integral")
    sp = scene_cmd("brackets", "pairwise Poisson brackets of F_t")
    sp.add_argument("--pairs", required=True, help='"t1:s1,t2:s2,..."')
    sp.add_argument("--phase-samples", type=int, default=100)
    sp.add_argument("--tol", type=float, default=1e-5)
    scene_cmd("classify", "classify the pair")

    sp = sub.add_parser("catalog", help="emit a catalog scene file")
    sp.add_argument("entry", help=", ".join(sorted(BUILDERS) + ["eps-one"]))
    sp.add_argument("--param", action="append", default=[], help="key=value builder parameter (repeatable)")
    sp.add_argument("--out", help="output scene file (default: stdout)")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "catalog":
            return run_catalog(args)
        started = time.perf_counter()
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        scene = load_scene(args.scene)
        checks, thresholds, extra = COMMANDS[args.command](scene, args)
    except SpectrumError as exc:
        print(f"pqcheck {args.command}: {exc}", file=sys.stderr)
        return 1
    except (InputError, SceneError, ExprError, NearSpectrumError, GeometryError, ValueError) as exc:
        print(f"pqcheck {args.command}: invalid input: {exc}", file=sys.stderr)
        return 2
    passed = all(c["passed"] for c in checks)
    report = {
        "tool": "pqcheck",
        "version": __version__,
        "command": args.command,
        "scene": os.path.basename(args.scene),
        "scene_digest": scene.digest(),
        "seed": args.seed,
        "thresholds": thresholds,
        "checks": checks,
        **extra,
        "passed": passed,
        "verdict": extra.pop("verdict", "pass" if passed else "fail"),
        "timing": {"started": stamp, "wall_clock_s": round(time.perf_counter() - started, 4)},
    }
    text = dump_json(report)
    if args.out:
        write_atomic(args.out, text)
    sys.stdout.write(text)
    return 0 if passed else 1


def main():
    sys.exit(run())
