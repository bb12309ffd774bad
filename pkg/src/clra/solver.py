"""Penalised Gauss-Newton estimation of microphone start and source emission times.

The unknowns are packed as ``p = [delta, eta[1:], vec(X), vec(Y), vec(Z), vec(W)]``
(column-major ``vec``) and the residual as

    q = [vec(U), lam * vec(S[:, :3] X - S[:, 3:]), gam * vec(T31 Y - T32),
         alp * vec(T11 Z - T12), bet * vec(T21 W - T22)]

with ``S = D + U``. Only blocks with a nonzero weight are assembled unless
``all_blocks`` is requested; ``eta[0]`` is pinned to zero and never enters ``p``.
"""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .lowrank import LowRankBlocks, build_blocks, check_sizes
from .scene import DEFAULT_TIME_RANGE, MeasurementMatrix, TimingOffsets


class ConfigurationError(ValueError):
    """Method, case and weights do not fit together."""


class Case(str, enum.Enum):
    C1 = "C1"  # M - N > 3: T1 variant informative
    C2 = "C2"  # N - M > 3: T2 variant informative
    C3 = "C3"  # |M - N| <= 3


class Method(str, enum.Enum):
    STLS = "STLS"
    CLRA1 = "CLRA1"  # LRP + T3 variant
    CLRA2 = "CLRA2"  # LRP + T2 variant
    CLRA3 = "CLRA3"  # LRP + T1 variant
    CLRA = "CLRA"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            raise ConfigurationError(f"unknown method {name!r}") from None


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    MAX_ITERATIONS = "MaxIterations"


def select_case(m: int, n: int) -> Case:
    check_sizes(m, n)
    if m - n > 3:
        return Case.C1
    if n - m > 3:
        return Case.C2
    return Case.C3


@dataclass(frozen=True)
class PenaltyWeights:
    lam: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigurationError(f"penalty weight {name} must be finite and >= 0")

    @property
    def is_stls(self) -> bool:
        return self.alpha == 0 and self.beta == 0 and self.gamma == 0

    def check_case(self, case: Case) -> None:
        if self.alpha and case is not Case.C1:
            raise ConfigurationError(f"alpha (T1 variant) is only usable in C1, not {case.value}")
        if self.beta and case is not Case.C2:
            raise ConfigurationError(f"beta (T2 variant) is only usable in C2, not {case.value}")

    @classmethod
    def from_exponents(cls, **exps) -> "PenaltyWeights":
        return cls(**{k: 10.0 ** v for k, v in exps.items()})


_PRESETS = {
    (Method.STLS, None): PenaltyWeights(lam=1e10),
    (Method.CLRA1, Case.C1): PenaltyWeights(lam=1e10, gamma=1e10),
    (Method.CLRA1, Case.C3): PenaltyWeights(lam=1e10, gamma=1e10),
    (Method.CLRA1, Case.C2): PenaltyWeights(lam=1e12, gamma=1e9),
    (Method.CLRA2, Case.C2): PenaltyWeights(lam=1e10, beta=1e11),
    (Method.CLRA3, Case.C1): PenaltyWeights(lam=1e10, alpha=1e11),
    (Method.CLRA, Case.C3): PenaltyWeights(lam=1e10, gamma=1e10),
    (Method.CLRA, Case.C1): PenaltyWeights(lam=1e10, gamma=1e10, alpha=1e11),
    (Method.CLRA, Case.C2): PenaltyWeights(lam=1e12, gamma=1e9, beta=1e13),
}


def default_weights(method, case: Case) -> PenaltyWeights:
    method = Method.parse(method)
    case = Case(case)
    if method is Method.STLS:
        return _PRESETS[(method, None)]
    try:
        return _PRESETS[(method, case)]
    except KeyError:
        raise ConfigurationError(f"{method.value} is not applicable in case {case.value}") from None


@dataclass(frozen=True)
class SolverConfig:
    w_star: float = 1e30
    d_p: float = 1e-9
    m2: int = 100
    fd_step: float = 1e-6

    def __post_init__(self):
        if not self.w_star > 0:
            raise ConfigurationError("w_star must be positive")
        if not self.d_p > 0:
            raise ConfigurationError("d_p must be positive")
        if int(self.m2) != self.m2 or self.m2 < 1:
            raise ConfigurationError("m2 must be an integer >= 1")


# coefficient block -> (residual block, weight attribute)
_COEF_ORDER = ("X", "Y", "Z", "W")
_RESIDUAL_OF = {"X": "f_B", "Y": "f_C", "Z": "f_D", "W": "f_E"}
_WEIGHT_OF = {"X": "lam", "Y": "gamma", "Z": "alpha", "W": "beta"}
# q stacks residual blocks in this order
_RESIDUAL_ORDER = ("X", "Y", "Z", "W")


def coef_shape(name: str, m: int, n: int) -> tuple[int, int]:
    m_n = min(n - 1 + 3, m - 1 + 3)
    return {
        "X": (3, n - 1 - 3),
        "Y": (m_n, 2 * (n - 1) - m_n),
        "Z": (n - 1 + 3, n - 1 - 3),
        "W": (m - 1 + 3, m - 1 - 3),
    }[name]


def _residual_rows(name: str, m: int, n: int) -> int:
    lhs_rows = {"X": m - 1, "Y": 2 * (m - 1), "Z": m - 1, "W": n - 1}[name]
    return lhs_rows * coef_shape(name, m, n)[1]


def closed_form_p(m: int, n: int) -> int:
    m_n = min(n - 1 + 3, m - 1 + 3)
    return (
        m + n - 1 + 3 * (n - 1 - 3) + m_n * (2 * (n - 1) - m_n)
        + (n - 1 + 3) * (n - 1 - 3) + (m - 1 + 3) * (m - 1 - 3)
    )


def closed_form_q(m: int, n: int) -> int:
    m_n = min(n - 1 + 3, m - 1 + 3)
    return (m - 1) * (8 * (n - 1) - 2 * m_n - 6) - 3 * (n - 1)


@dataclass(frozen=True)
class Layout:
    """Index bookkeeping for the packed parameter and residual vectors."""

    m: int
    n: int
    active: tuple  # subset of _COEF_ORDER, in order

    @classmethod
    def for_weights(cls, m: int, n: int, weights: PenaltyWeights, all_blocks: bool = False):
        check_sizes(m, n)
        if all_blocks:
            active = _COEF_ORDER
        else:
            active = tuple(k for k in _COEF_ORDER if getattr(weights, _WEIGHT_OF[k]) > 0)
        return cls(m, n, active)

    @property
    def n_timing(self) -> int:
        return self.m + self.n - 1

    @property
    def p_slices(self) -> dict:
        out = {"delta": slice(0, self.m), "eta": slice(self.m, self.n_timing)}
        start = self.n_timing
        for name in self.active:
            r, c = coef_shape(name, self.m, self.n)
            out[name] = slice(start, start + r * c)
            start += r * c
        return out

    @property
    def q_slices(self) -> dict:
        size_a = (self.m - 1) * (self.n - 1)
        out = {"f_A": slice(0, size_a)}
        start = size_a
        for name in _RESIDUAL_ORDER:
            if name in self.active:
                rows = _residual_rows(name, self.m, self.n)
                out[_RESIDUAL_OF[name]] = slice(start, start + rows)
                start += rows
        return out

    @property
    def p_size(self) -> int:
        return self.n_timing + sum(
            np.prod(coef_shape(k, self.m, self.n)) for k in self.active
        )

    @property
    def q_size(self) -> int:
        return (self.m - 1) * (self.n - 1) + sum(
            _residual_rows(k, self.m, self.n) for k in self.active
        )

    def pack(self, offsets: TimingOffsets, coefs: dict) -> np.ndarray:
        parts = [offsets.delta, offsets.eta[1:]]
        for name in self.active:
            c = np.asarray(coefs[name], dtype=float)
            if c.shape != coef_shape(name, self.m, self.n):
                raise ValueError(f"coefficient {name} has shape {c.shape}")
            parts.append(c.ravel(order="F"))
        return np.concatenate(parts)

    def unpack_offsets(self, p: np.ndarray) -> TimingOffsets:
        sl = self.p_slices
        eta = np.concatenate([[0.0], p[sl["eta"]]])
        return TimingOffsets(p[sl["delta"]], eta)

    def unpack_coefs(self, p: np.ndarray) -> dict:
        sl = self.p_slices
        return {
            k: p[sl[k]].reshape(coef_shape(k, self.m, self.n), order="F") for k in self.active
        }


def init_offsets(m: int, n: int, time_range=DEFAULT_TIME_RANGE, seed: int = 0) -> TimingOffsets:
    """Random starting point: uniform offsets with ``eta[0] = 0``."""
    lo, hi = map(float, time_range)
    if m < 1 or n < 1 or not hi > lo:
        raise ValueError("invalid sizes or time range")
    rng = np.random.default_rng(seed)
    delta = rng.uniform(lo, hi, size=m)
    eta = rng.uniform(lo, hi, size=n)
    eta[0] = 0.0
    return TimingOffsets(delta, eta)


def init_coefficients(blocks: LowRankBlocks, active) -> dict:
    """Minimum-norm least-squares coefficients for each active constraint."""
    systems = blocks.constraint_systems()
    out = {}
    for name in active:
        lhs, rhs = systems[name]
        out[name] = scipy.linalg.lstsq(lhs, rhs, lapack_driver="gelsd")[0]
    return out


def _dU(t: np.ndarray, delta: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """Derivative tensor dU[i-1, j-1, k] w.r.t. theta = [delta_1..M, eta_2..N]."""
    m, n = t.shape
    out = np.zeros((m - 1, n - 1, m + n - 1))
    # delta_1 touches every entry
    out[:, :, 0] = (-2.0 * (t[0, 1:] - t[0, 0]) + 2.0 * eta[1:])[None, :]
    # delta_k, k >= 2: row k-1 only
    rows = np.arange(m - 1)
    out[rows, :, rows + 1] = 2.0 * (t[1:, 1:] - t[1:, :1]) - 2.0 * eta[None, 1:]
    # eta_k, k >= 2: column k-1 only
    cols = np.arange(n - 1)
    out[:, cols, m + cols] = (
        -2.0 * (t[1:, 1:] - t[:1, 1:]) + 2.0 * (delta[0] - delta[1:, None])
    )
    return out


def _vec_tensor(arr: np.ndarray) -> np.ndarray:
    """Column-major vec of the first two axes of an (r, c, k) tensor."""
    r, c, k = arr.shape
    return arr.transpose(1, 0, 2).reshape(r * c, k)


class Problem:
    """Residual and Jacobian of the penalised objective for one measurement."""

    def __init__(self, meas, weights: PenaltyWeights, all_blocks: bool = False):
        t = meas.values if isinstance(meas, MeasurementMatrix) else np.asarray(meas)
        if t.dtype.kind != "f":
            t = t.astype(float)
        self.t = t
        self.m, self.n = t.shape
        self.weights = weights
        self.layout = Layout.for_weights(self.m, self.n, weights, all_blocks)

    def weight(self, name: str) -> float:
        return getattr(self.weights, _WEIGHT_OF[name])

    def blocks(self, offsets: TimingOffsets) -> LowRankBlocks:
        return build_blocks(self.t, offsets)

    def initial_point(self, offsets: TimingOffsets) -> np.ndarray:
        coefs = init_coefficients(self.blocks(offsets), self.layout.active)
        return self.layout.pack(offsets, coefs)

    def _terms(self, p):
        offsets = self.layout.unpack_offsets(p)
        blocks = self.blocks(offsets)
        return offsets, blocks, self.layout.unpack_coefs(p)

    def residual(self, p: np.ndarray) -> np.ndarray:
        _, blocks, coefs = self._terms(p)
        systems = blocks.constraint_systems()
        parts = [blocks.u.ravel(order="F")]
        for name in _RESIDUAL_ORDER:
            if name in self.layout.active:
                lhs, rhs = systems[name]
                parts.append(self.weight(name) * (lhs @ coefs[name] - rhs).ravel(order="F"))
        return np.concatenate(parts)

    def objective(self, p: np.ndarray) -> float:
        q = self.residual(p)
        return float(q @ q)

    def _structured_derivs(self, du: np.ndarray, blocks: LowRankBlocks) -> dict:
        """Derivatives of (lhs, rhs) of each constraint w.r.t. the timing parameters."""
        m1, n1 = self.m - 1, self.n - 1
        k = du.shape[2]
        out = {}
        active = self.layout.active
        if "X" in active:
            out["X"] = (du[:, :3], du[:, 3:])
        if "Y" in active:
            d3 = np.zeros((2 * m1, 2 * n1, k))
            d3[:m1, n1:] = du
            d3[m1:, :n1] = du
            out["Y"] = (d3[:, : blocks.m_n], d3[:, blocks.m_n :])
        if "Z" in active:
            d1 = np.zeros((m1, 2 * n1, k))
            d1[:, n1:] = du
            out["Z"] = (d1[:, : n1 + 3], d1[:, n1 + 3 :])
        if "W" in active:
            d2 = np.zeros((n1, 2 * m1, k))
            d2[:, m1:] = du.transpose(1, 0, 2)
            out["W"] = (d2[:, : m1 + 3], d2[:, m1 + 3 :])
        return out

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        offsets, blocks, coefs = self._terms(p)
        lay = self.layout
        qs, ps = lay.q_slices, lay.p_slices
        jac = np.zeros((lay.q_size, lay.p_size))
        timing = slice(0, lay.n_timing)

        du = _dU(self.t, offsets.delta, offsets.eta)
        jac[qs["f_A"], timing] = _vec_tensor(du)

        systems = blocks.constraint_systems()
        derivs = self._structured_derivs(du, blocks)
        for name in lay.active:
            w = self.weight(name)
            lhs, _ = systems[name]
            dlhs, drhs = derivs[name]
            coef = coefs[name]
            rows = qs[_RESIDUAL_OF[name]]
            d_timing = np.einsum("ruk,uc->rck", dlhs, coef) - drhs
            jac[rows, timing] = w * _vec_tensor(d_timing)
            jac[rows, ps[name]] = w * np.kron(np.eye(coef.shape[1]), lhs)
        return jac


def jacobian_fd(problem: Problem, p: np.ndarray, rel_step: float = 1e-6,
                dtype=np.longdouble) -> np.ndarray:
    """Central finite differences with step ``rel_step * (1 + |p_k|)``.

    Residuals are evaluated in ``dtype`` (extended precision by default): the
    penalty weights are ~1e10, so float64 cancellation error would otherwise
    swamp small Jacobian entries.
    """
    hp = Problem(problem.t.astype(dtype), problem.weights)
    hp.layout = problem.layout
    base = p.astype(dtype)
    jac = np.empty((problem.layout.q_size, p.size))
    for k in range(p.size):
        h = dtype(rel_step) * (1 + abs(base[k]))
        hi, lo = base.copy(), base.copy()
        hi[k] += h
        lo[k] -= h
        jac[:, k] = (hp.residual(hi) - hp.residual(lo)) / (2 * h)
    return jac


def jacobian_rel_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-9) -> float:
    """Largest entrywise ``|a - r| / max(|r|, floor)``."""
    denom = np.maximum(np.abs(reference), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


def random_point(problem: Problem, rng, time_range=DEFAULT_TIME_RANGE, coef_scale: float = 0.1):
    """Random offsets with least-squares coefficients, then perturbed so no block is at rest."""
    m, n = problem.m, problem.n
    offsets = init_offsets(m, n, time_range, seed=int(rng.integers(2**63)))
    p = problem.initial_point(offsets)
    coef = slice(problem.layout.n_timing, p.size)
    p[coef] += coef_scale * rng.standard_normal(p[coef].size)
    return p


def gauss_newton_step(p: np.ndarray, jac: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``p - argmin ||J d - q||`` using a complete orthogonal factorisation.

    Rank-deficient ``J`` gets the minimum-norm step.
    """
    if not (np.all(np.isfinite(jac)) and np.all(np.isfinite(q))):
        raise FloatingPointError("non-finite Jacobian or residual")
    step = scipy.linalg.lstsq(jac, q, lapack_driver="gelsy", check_finite=False)[0]
    return p - step


@dataclass
class SolveOutcome:
    offsets: TimingOffsets
    status: Status
    iterations: int
    final_objective: float
    runtime_ms: float
    method: str = ""
    case: str = ""
    seed: int | None = None
    er: float | None = None
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        rec = {
            "method": self.method,
            "case": self.case,
            "status": self.status.value,
            "iterations": self.iterations,
            "final_objective": self.final_objective,
            "runtime_ms": self.runtime_ms,
            "seed": self.seed,
            "delta": self.offsets.delta.tolist(),
            "eta": self.offsets.eta.tolist(),
        }
        if self.er is not None:
            rec["er"] = self.er
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def resolve_weights(method, m: int, n: int, case=None, weights=None) -> tuple:
    method = Method.parse(method)
    case = select_case(m, n) if case is None else Case(case)
    if weights is None:
        weights = default_weights(method, case)
    weights.check_case(case)
    return method, case, weights


def solve(
    meas,
    method="CLRA",
    init: TimingOffsets | None = None,
    config: SolverConfig | None = None,
    case=None,
    weights: PenaltyWeights | None = None,
    all_blocks: bool = False,
    seed: int | None = None,
    keep_history: bool = False,
) -> SolveOutcome:
    """Run Gauss-Newton from ``init`` until divergence, a small step, or ``m2`` steps.

    Per iteration the objective is checked against ``w_star`` first, then the
    step norm against ``d_p``, then the iteration cap.
    """
    config = config or SolverConfig()
    values = meas.values if isinstance(meas, MeasurementMatrix) else np.asarray(meas, float)
    m, n = values.shape
    method, case, weights = resolve_weights(method, m, n, case, weights)
    if init is None:
        init = init_offsets(m, n, seed=0 if seed is None else seed)
    if init.delta.shape != (m,) or init.eta.shape != (n,):
        raise ValueError("initial offsets do not match the measurement size")
    if init.eta[0] != 0.0:
        init = init.gauged()

    start = time.perf_counter()
    problem = Problem(values, weights, all_blocks)
    p = problem.initial_point(init)
    history = [p.copy()] if keep_history else []
    status = Status.MAX_ITERATIONS
    iterations = 0
    q = problem.residual(p)
    while True:
        obj = float(q @ q)
        if not math.isfinite(obj) or obj > config.w_star:
            status = Status.DIVERGED
            break
        if iterations >= config.m2:
            break
        try:
            p_next = gauss_newton_step(p, problem.jacobian(p), q)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError):
            status = Status.DIVERGED
            break
        iterations += 1
        step = float(np.linalg.norm(p_next - p))
        p = p_next
        if keep_history:
            history.append(p.copy())
        q = problem.residual(p)
        if not math.isfinite(step):
            status = Status.DIVERGED
            break
        if step < config.d_p:
            obj = float(q @ q)
            status = Status.DIVERGED if not math.isfinite(obj) or obj > config.w_star else Status.CONVERGED
            break
    runtime_ms = 1e3 * (time.perf_counter() - start)
    return SolveOutcome(
        offsets=problem.layout.unpack_offsets(p),
        status=status,
        iterations=iterations,
        final_objective=float(q @ q),
        runtime_ms=runtime_ms,
        method=method.value,
        case=case.value,
        seed=seed,
        history=history,
    )
