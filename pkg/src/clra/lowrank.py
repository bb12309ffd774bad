"""Structured low-rank matrices built from a TOA matrix and a timing hypothesis.

For measurements ``t`` (M x N) and offsets ``delta``, ``eta`` the double-centred
squared-TOA matrix ``D`` and the offset-dependent correction ``U`` satisfy
``D + U = -2 R^T S / c^2`` at the true offsets, where ``R`` and ``S`` hold
microphone/source positions relative to microphone 1 and source 1. Hence
``rank(D + U) <= 3``. Three stacked variants add further rank bounds:

* ``T1 = [D U]``            rank <= N - 1 + 3 (informative when M > N + 3)
* ``T2 = [D^T U^T]``        rank <= M - 1 + 3 (informative when N > M + 3)
* ``T3 = [[D U], [U D]]``   rank <= min(N - 1 + 3, M - 1 + 3)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from .scene import MeasurementMatrix, Scene, TimingOffsets

DEFAULT_REL_TOL = 1e-8


class DegenerateSceneError(ValueError):
    """The first three columns of D + U are not linearly independent."""


def _values(meas) -> np.ndarray:
    if isinstance(meas, MeasurementMatrix):
        return meas.values
    return np.asarray(meas, dtype=float)


def check_sizes(m: int, n: int) -> None:
    if m - 1 <= 3 or n - 1 <= 3:
        raise ValueError(f"low-rank machinery needs M >= 5 and N >= 5, got M={m}, N={n}")


def d_matrix(t: np.ndarray) -> np.ndarray:
    sq = t * t
    return sq[1:, 1:] - sq[1:, :1] - sq[:1, 1:] + sq[0, 0]


def u_matrix(t: np.ndarray, delta: np.ndarray, eta: np.ndarray) -> np.ndarray:
    row_diff = t[1:, 1:] - t[1:, :1]           # t_ij - t_i1
    ref_row = t[:1, 1:] - t[0, 0]              # t_1j - t_11
    col_diff = t[1:, 1:] - t[:1, 1:]           # t_ij - t_1j
    d_i = delta[1:, None]
    e_j = eta[None, 1:]
    return (
        2 * d_i * row_diff
        - 2 * delta[0] * ref_row
        - 2 * e_j * col_diff
        + 2 * e_j * (delta[0] - d_i)
    )


@dataclass(frozen=True)
class LowRankBlocks:
    d: np.ndarray
    u: np.ndarray

    @property
    def m(self) -> int:
        return self.d.shape[0] + 1

    @property
    def n(self) -> int:
        return self.d.shape[1] + 1

    @property
    def m_n(self) -> int:
        return min(self.n - 1 + 3, self.m - 1 + 3)

    @property
    def a(self):
        return self.d[:, :3]

    @property
    def b(self):
        return self.d[:, 3:]

    @property
    def f(self):
        return self.u[:, :3]

    @property
    def g(self):
        return self.u[:, 3:]

    @cached_property
    def t1(self):
        return np.hstack([self.d, self.u])

    @cached_property
    def t2(self):
        return np.hstack([self.d.T, self.u.T])

    @cached_property
    def t3(self):
        return np.block([[self.d, self.u], [self.u, self.d]])

    @property
    def t11(self):
        return self.t1[:, : self.n - 1 + 3]

    @property
    def t12(self):
        return self.t1[:, self.n - 1 + 3 :]

    @property
    def t21(self):
        return self.t2[:, : self.m - 1 + 3]

    @property
    def t22(self):
        return self.t2[:, self.m - 1 + 3 :]

    @property
    def t31(self):
        return self.t3[:, : self.m_n]

    @property
    def t32(self):
        return self.t3[:, self.m_n :]

    def constraint_systems(self) -> dict:
        """Linear systems ``lhs @ coef = rhs`` implied by each rank property.

        Keys: ``"X"`` (LRP), ``"Y"`` (T3 variant), ``"Z"`` (T1 variant),
        ``"W"`` (T2 variant).
        """
        s = self.d + self.u
        return {
            "X": (s[:, :3], s[:, 3:]),
            "Y": (self.t31, self.t32),
            "Z": (self.t11, self.t12),
            "W": (self.t21, self.t22),
        }

    def check_nondegenerate(self, rel_tol: float = DEFAULT_REL_TOL) -> None:
        rank, _ = numeric_rank(self.d[:, :3] + self.u[:, :3], rel_tol)
        if rank < 3:
            raise DegenerateSceneError(
                "first three columns of D + U are dependent (rank %d)" % rank
            )


def build_blocks(meas, offsets: TimingOffsets) -> LowRankBlocks:
    t = _values(meas)
    m, n = t.shape
    check_sizes(m, n)
    if offsets.delta.shape != (m,) or offsets.eta.shape != (n,):
        raise ValueError(
            f"offset lengths ({offsets.m}, {offsets.n}) do not match measurement {t.shape}"
        )
    return LowRankBlocks(d_matrix(t), u_matrix(t, offsets.delta, offsets.eta))


def geometry_product(scene: Scene) -> np.ndarray:
    """``-2 R^T S / c^2`` computed directly from positions."""
    r = (scene.mic_positions[1:] - scene.mic_positions[0]).T
    s = (scene.src_positions[1:] - scene.src_positions[0]).T
    return -2.0 * r.T @ s / scene.c**2


@dataclass(frozen=True)
class RankReport:
    matrix_name: str
    numeric_rank: int
    bound: int
    singular_values: tuple
    applicable: bool = True

    @property
    def holds(self) -> bool:
        return self.numeric_rank <= self.bound

    def to_json(self, top_k: int = 6) -> str:
        rec = asdict(self)
        rec["singular_values"] = [float(v) for v in self.singular_values[:top_k]]
        rec["holds"] = self.holds
        return json.dumps(rec)


def numeric_rank(mat, rel_tol: float = DEFAULT_REL_TOL) -> tuple[int, np.ndarray]:
    """Count singular values above ``rel_tol * sigma_max``.

    Returns ``(rank, singular_values)`` with singular values descending.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.size == 0:
        raise ValueError("numeric_rank of an empty matrix")
    if not 0.0 < rel_tol < 1.0:
        raise ValueError("rel_tol must lie in (0, 1)")
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv[0] == 0.0:
        return 0, sv
    return int(np.count_nonzero(sv > rel_tol * sv[0])), sv


def verify_properties(blocks: LowRankBlocks, rel_tol: float = DEFAULT_REL_TOL) -> list:
    """Rank reports for D + U and the three stacked variants.

    T1 and T2 are always reported, but ``applicable`` is only set when their
    bound is smaller than their row count (the regimes where they carry
    information).
    """
    m1, n1 = blocks.m - 1, blocks.n - 1
    items = [
        ("D+U", blocks.d + blocks.u, 3, True),
        ("T1", blocks.t1, n1 + 3, m1 > n1 + 3),
        ("T2", blocks.t2, m1 + 3, n1 > m1 + 3),
        ("T3", blocks.t3, blocks.m_n, True),
    ]
    reports = []
    for name, mat, bound, applicable in items:
        rank, sv = numeric_rank(mat, rel_tol)
        reports.append(RankReport(name, rank, bound, tuple(float(v) for v in sv), applicable))
    return reports
