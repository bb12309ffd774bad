"""Command-line front end.

Exit codes: 0 success, 1 validation failure (rank bound or Jacobian check),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .lowrank import DegenerateSceneError, build_blocks, verify_properties
from .metrics import estimation_error
from .scene import (
    MalformedTDOAError,
    MeasurementKind,
    MeasurementMatrix,
    Scene,
    TimingOffsets,
    add_noise,
    generate_scene,
    pseudo_offsets,
    pseudo_toa_from_tdoa,
    tdoa_from_scene,
    toa_from_scene,
)
from .solver import (
    ConfigurationError,
    Method,
    PenaltyWeights,
    Problem,
    SolverConfig,
    init_offsets,
    jacobian_fd,
    jacobian_rel_error,
    random_point,
    resolve_weights,
    solve,
)

log = logging.getLogger("clra")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _offsets_to_dict(offsets: TimingOffsets) -> dict:
    return {"delta": offsets.delta.tolist(), "eta": offsets.eta.tolist()}


def _load_offsets(path) -> TimingOffsets:
    data = json.loads(Path(path).read_text())
    if "delta" not in data or "eta" not in data:
        raise UsageError(f"{path}: expected keys 'delta' and 'eta'")
    return TimingOffsets(np.array(data["delta"], float), np.array(data["eta"], float))


def _write(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _scene_measurement(args):
    scene = generate_scene(args.m, args.n, seed=args.seed)
    if args.kind == "tdoa":
        meas, _ = pseudo_toa_from_tdoa(tdoa_from_scene(scene), scene.c)
        return scene, meas, pseudo_offsets(scene)
    return scene, toa_from_scene(scene), scene.offsets


def cmd_generate(args) -> int:
    scene, meas, truth = _scene_measurement(args)
    if args.sigma:
        meas = add_noise(meas, args.sigma, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    meas.save(out / "measurement.csv")
    (out / "truth.json").write_text(json.dumps(_offsets_to_dict(truth), indent=2))
    print(f"wrote {out}/scene.json, measurement.csv, truth.json", file=sys.stderr)
    return EXIT_OK


def cmd_rank_check(args) -> int:
    if args.measurement:
        if not args.offsets:
            raise UsageError("--measurement requires --offsets")
        meas = MeasurementMatrix.load(args.measurement)
        offsets = _load_offsets(args.offsets)
    else:
        if args.m is None or args.n is None:
            raise UsageError("give --m and --n, or --measurement with --offsets")
        _, meas, offsets = _scene_measurement(args)
    reports = verify_properties(build_blocks(meas, offsets), args.rel_tol)
    _write("".join(r.to_json() + "\n" for r in reports), args.out)
    failed = [r.matrix_name for r in reports if r.applicable and not r.holds]
    for r in reports:
        tag = "n/a" if not r.applicable else ("ok" if r.holds else "FAIL")
        print(f"{r.matrix_name}: rank {r.numeric_rank} bound {r.bound} [{tag}]", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def _weights_override(args):
    given = {k: getattr(args, k) for k in ("lam", "alpha", "beta", "gamma")}
    if all(v is None for v in given.values()):
        return None
    return PenaltyWeights(**{k: (v or 0.0) for k, v in given.items()})


def cmd_solve(args) -> int:
    meas = MeasurementMatrix.load(args.measurement)
    m, n = meas.shape
    config = SolverConfig(w_star=args.w_star, d_p=args.d_p, m2=args.m2)
    init = _load_offsets(args.init) if args.init else init_offsets(m, n, seed=args.seed)
    outcome = solve(meas, args.method, init=init, config=config, case=args.case,
                    weights=_weights_override(args), seed=args.seed)
    if args.truth:
        outcome.er = estimation_error(outcome.offsets, _load_offsets(args.truth))
    _write(outcome.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_jacobian_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    method = Method.parse(args.method)
    worst = 0.0
    for trial in range(args.trials):
        scene = generate_scene(args.m, args.n, seed=int(rng.integers(2**31)))
        _, _, weights = resolve_weights(method, args.m, args.n)
        problem = Problem(toa_from_scene(scene), weights)
        p = random_point(problem, rng)
        err = jacobian_rel_error(problem.jacobian(p), jacobian_fd(problem, p))
        worst = max(worst, err)
        print(json.dumps({"trial": trial, "method": method.value, "m": args.m, "n": args.n,
                          "max_rel_error": err}))
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'MISMATCH'})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def _report(records) -> None:
    for (m, n, method, sigma), s in experiments.group_summaries(records).items():
        print(f"M={m} N={n} {method} sigma={sigma:g}: Rr={s.recovery_rate:.3f} "
              f"Cr={s.convergence_rate:.3f}", file=sys.stderr)


def cmd_monte_carlo(args) -> int:
    plan, _ = experiments.load_plan(args.config)
    if args.seed is not None:
        plan.master_seed = args.seed
    records = experiments.run_plan(plan, jobs=args.jobs)
    if args.out:
        experiments.persist(records, args.out)
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(experiments.CSV_HEADER)
        for rec in records:
            writer.writerow(rec.csv_row())
    _report(records)
    return EXIT_OK


def _sweep_points(sweep: dict) -> list:
    if "points" in sweep:
        return [dict(p) for p in sweep["points"]]
    names = sweep.get("names")
    lo, hi = sweep.get("range", (1, 15))
    if not names:
        raise UsageError("sweep needs 'points' or 'names' + 'range'")
    values = range(int(lo), int(hi) + 1)
    if sweep.get("diagonal", False) or len(names) == 1:
        return [{k: v for k in names} for v in values]
    if len(names) != 2:
        raise UsageError("full sweep grids support one or two weight names")
    return [{names[0]: a, names[1]: b} for a in values for b in values]


def cmd_sweep(args) -> int:
    plan, sweep = experiments.load_plan(args.config)
    if not sweep:
        raise UsageError(f"{args.config}: no 'sweep' section")
    if args.seed is not None:
        plan.master_seed = args.seed
    results = experiments.sweep_penalties(plan, sweep["method"], _sweep_points(sweep),
                                          jobs=args.jobs)
    rows = experiments.sweep_table(results)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clra", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def scene_opts(p, required=False):
        p.add_argument("--m", type=int, required=required, help="number of microphones")
        p.add_argument("--n", type=int, required=required, help="number of sources")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--kind", choices=("toa", "tdoa"), default="toa")

    p = sub.add_parser("generate", help="write a random scene and its measurement")
    scene_opts(p, required=True)
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise std (s)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("rank-check", help="rank reports for D+U and its variants")
    scene_opts(p)
    p.add_argument("--measurement")
    p.add_argument("--offsets", help="JSON with delta and eta")
    p.add_argument("--rel-tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rank_check)

    p = sub.add_parser("solve", help="estimate offsets from a measurement file")
    p.add_argument("--measurement", required=True)
    p.add_argument("--method", default="CLRA", type=str.upper,
                   choices=[m.value for m in Method])
    p.add_argument("--case", choices=("C1", "C2", "C3"))
    p.add_argument("--truth", help="JSON with true delta and eta, to report er")
    p.add_argument("--init", help="JSON with initial delta and eta")
    p.add_argument("--seed", type=int, default=0, help="seed for the random initialisation")
    p.add_argument("--m2", type=int, default=100)
    p.add_argument("--d-p", type=float, default=1e-9)
    p.add_argument("--w-star", type=float, default=1e30)
    for name in ("lam", "alpha", "beta", "gamma"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("jacobian-check", help="analytic vs finite-difference Jacobian")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--method", default="CLRA", type=str.upper,
                   choices=[m.value for m in Method])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_jacobian_check)

    for name, func, help_ in (
        ("monte-carlo", cmd_monte_carlo, "run an experiment plan"),
        ("sweep", cmd_sweep, "penalty-parameter sweep from a plan's sweep section"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON plan file")
        p.add_argument("--out")
        p.add_argument("--seed", type=int, help="override the plan's master seed")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, MalformedTDOAError, DegenerateSceneError,
            ValueError, OSError, KeyError) as exc:
        print(f"clra {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
