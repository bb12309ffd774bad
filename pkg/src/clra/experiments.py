"""Monte-Carlo studies over (M, N) grids, initialisations, noise levels and methods."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .metrics import estimation_error, summarize
from .scene import (
    DEFAULT_BOX,
    DEFAULT_TIME_RANGE,
    SPEED_OF_SOUND,
    MeasurementKind,
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
    SolverConfig,
    select_case,
    init_offsets,
    solve,
)

log = logging.getLogger(__name__)

CSV_HEADER = (
    "method", "m", "n", "case", "config", "init", "sigma", "seed",
    "status", "iterations", "er", "runtime_ms",
)
SEED_ENV = "CLRA_SEED"

# seed domains, so scene / noise / init streams never collide
_SCENE, _NOISE, _INIT = 0, 1, 2


def derive_seed(master_seed: int, *key: int) -> int:
    """Counter-based seed for ``key``; independent of execution order."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class RunRecord:
    method: str
    m: int
    n: int
    case: str
    config_index: int
    init_index: int
    sigma: float
    seed: int
    status: str
    iterations: int
    er: float
    runtime_ms: float = field(compare=False)

    def key(self) -> tuple:
        return (self.m, self.n, self.sigma, self.method, self.config_index, self.init_index)

    def csv_row(self) -> list:
        return [
            self.method, self.m, self.n, self.case, self.config_index, self.init_index,
            repr(float(self.sigma)), self.seed, self.status, self.iterations,
            repr(float(self.er)), repr(float(self.runtime_ms)),
        ]

    @classmethod
    def from_csv_row(cls, row: dict) -> "RunRecord":
        return cls(
            method=row["method"],
            m=int(row["m"]),
            n=int(row["n"]),
            case=row["case"],
            config_index=int(row["config"]),
            init_index=int(row["init"]),
            sigma=float(row["sigma"]),
            seed=int(row["seed"]),
            status=row["status"],
            iterations=int(row["iterations"]),
            er=float(row["er"]),
            runtime_ms=float(row["runtime_ms"]),
        )


@dataclass
class ExperimentPlan:
    grid: list
    methods: list
    nc: int = 20
    n_inits: int = 50
    sigmas: list = field(default_factory=lambda: [0.0])
    master_seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    measurement_kind: MeasurementKind = MeasurementKind.TOA
    weights: dict = field(default_factory=dict)  # method name -> PenaltyWeights
    box: tuple = DEFAULT_BOX
    time_range: tuple = DEFAULT_TIME_RANGE
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        if self.nc < 1 or self.n_inits < 1:
            raise ValueError("nc and n_inits must be >= 1")
        self.grid = [tuple(int(v) for v in mn) for mn in self.grid]
        self.methods = [Method.parse(x).value for x in self.methods]
        self.sigmas = [float(s) for s in self.sigmas]
        self.measurement_kind = MeasurementKind(self.measurement_kind)
        self.weights = {
            Method.parse(k).value: v if isinstance(v, PenaltyWeights) else PenaltyWeights(**v)
            for k, v in self.weights.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        data = dict(data)
        if "solver" in data and not isinstance(data["solver"], SolverConfig):
            data["solver"] = SolverConfig(**data["solver"])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"sweep"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        data.pop("sweep", None)
        return cls(**data)

    def valid_grid(self) -> list:
        out = []
        for m, n in self.grid:
            if m < 5 or n < 5:
                log.warning("skipping (M=%d, N=%d): low-rank properties need M, N >= 5", m, n)
                continue
            out.append((m, n))
        return out


def load_plan(path) -> tuple:
    """Read a JSON plan; returns ``(plan, sweep_section_or_None)``.

    The ``CLRA_SEED`` environment variable overrides ``master_seed``.
    """
    data = json.loads(Path(path).read_text())
    if os.environ.get(SEED_ENV):
        data["master_seed"] = int(os.environ[SEED_ENV])
    return ExperimentPlan.from_dict(data), data.get("sweep")


def _measurement(plan: ExperimentPlan, scene):
    if plan.measurement_kind is MeasurementKind.TOA:
        return toa_from_scene(scene), scene.offsets
    meas, _ = pseudo_toa_from_tdoa(tdoa_from_scene(scene), scene.c)
    return meas, pseudo_offsets(scene)


def _run_config(plan: ExperimentPlan, m: int, n: int, config_index: int) -> list:
    """All sigma x method x init runs sharing one scene."""
    ms = plan.master_seed
    scene = generate_scene(
        m, n, plan.box, plan.time_range, plan.c, seed=derive_seed(ms, _SCENE, m, n, config_index)
    )
    clean, truth = _measurement(plan, scene)
    case = select_case(m, n).value
    # initialisations are shared across methods and noise levels (paired comparison)
    inits = []
    for k in range(plan.n_inits):
        seed = derive_seed(ms, _INIT, m, n, config_index, k)
        inits.append((seed, init_offsets(m, n, plan.time_range, seed)))
    records = []
    for sigma_index, sigma in enumerate(plan.sigmas):
        noise_seed = derive_seed(ms, _NOISE, m, n, config_index, sigma_index)
        meas = add_noise(clean, sigma, noise_seed)
        for method in plan.methods:
            for init_index, (seed, init) in enumerate(inits):
                try:
                    out = solve(
                        meas, method, init=init, config=plan.solver,
                        weights=plan.weights.get(method), seed=seed,
                    )
                    er = estimation_error(out.offsets, truth)
                    rec = RunRecord(method, m, n, case, config_index, init_index, sigma, seed,
                                    out.status.value, out.iterations,
                                    er if math.isfinite(er) else math.inf, out.runtime_ms)
                except (ConfigurationError, ValueError) as exc:
                    log.debug("run %s (%d,%d) cfg %d init %d failed: %s",
                              method, m, n, config_index, init_index, exc)
                    rec = RunRecord(method, m, n, case, config_index, init_index, sigma, seed,
                                    "Error", 0, math.inf, 0.0)
                records.append(rec)
    return records


def _run_config_star(args):
    return _run_config(*args)


def run_plan(plan: ExperimentPlan, jobs: int | None = 1) -> list:
    """Execute every run of ``plan``; the result is sorted by record key.

    ``jobs`` > 1 spreads configurations over a process pool; ``None`` uses
    all logical cores. Output does not depend on ``jobs``.
    """
    items = [(plan, m, n, k) for m, n in plan.valid_grid() for k in range(plan.nc)]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        chunks = [_run_config(*it) for it in items]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_run_config_star, items))
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=RunRecord.key)
    return records


def group_summaries(records) -> dict:
    """MetricSummary per (m, n, method, sigma)."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.m, r.n, r.method, r.sigma)].append(r)
    return {k: summarize(v) for k, v in sorted(groups.items())}


def sweep_penalties(base: ExperimentPlan, method, exponent_grid, jobs: int | None = 1) -> list:
    """Run ``base`` once per exponent point with weights ``10 ** exponent``.

    ``exponent_grid`` is a list of dicts such as ``{"lam": 10, "gamma": 9}``.
    Returns ``[(exponents, records), ...]`` in grid order.
    """
    method = Method.parse(method).value
    exponent_grid = list(exponent_grid)
    if not exponent_grid:
        raise ValueError("exponent grid is empty")
    out = []
    for point in exponent_grid:
        weights = PenaltyWeights.from_exponents(**point)
        plan = ExperimentPlan(**{**asdict_shallow(base), "methods": [method],
                                 "weights": {method: weights}})
        out.append((dict(point), run_plan(plan, jobs)))
    return out


def asdict_shallow(plan: ExperimentPlan) -> dict:
    return {f.name: getattr(plan, f.name) for f in fields(plan)}


def sweep_table(results) -> list:
    """Rectangular rows: exponents, m, n, sigma, recovery and convergence rates."""
    rows = []
    for point, records in results:
        for (m, n, method, sigma), summary in group_summaries(records).items():
            rows.append({**point, "method": method, "m": m, "n": n, "sigma": sigma,
                         "recovery_rate": summary.recovery_rate,
                         "convergence_rate": summary.convergence_rate})
    return rows


def persist(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow(rec.csv_row())


def load(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [RunRecord.from_csv_row(row) for row in reader]
