"""Random scenes and synthetic TOA / TDOA measurements.

Positions are 3-D and in meters, times in seconds. Every scene is anchored so
that microphone 1 sits on the positive x axis and source 1 at the origin, and
timing is gauged so that the first source emits at t = 0.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

SPEED_OF_SOUND = 340.0
DEFAULT_BOX = (10.0, 10.0, 3.0)
DEFAULT_TIME_RANGE = (-1.0, 1.0)


def _as_real(values) -> np.ndarray:
    # keep extended precision when given; everything else becomes float64
    arr = np.array(values)
    if arr.dtype.kind != "f":
        arr = arr.astype(float)
    return arr


class MalformedTDOAError(ValueError):
    """TDOA matrix whose reference row is not zero."""


class MeasurementKind(str, enum.Enum):
    TOA = "TOA"
    PSEUDO_TOA = "PseudoTOA"


@dataclass(frozen=True)
class TimingOffsets:
    """Microphone start times ``delta`` and source emission times ``eta``."""

    delta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        for name in ("delta", "eta"):
            arr = _as_real(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def m(self) -> int:
        return self.delta.size

    @property
    def n(self) -> int:
        return self.eta.size

    def shifted(self, shift: float) -> "TimingOffsets":
        """Apply the TOA-invariant gauge change (delta, eta) -> (delta + s, eta + s)."""
        return TimingOffsets(self.delta + shift, self.eta + shift)

    def gauged(self) -> "TimingOffsets":
        """Same offsets with ``eta[0]`` moved to exactly zero."""
        out = self.shifted(-self.eta[0])
        # guard against rounding in eta - eta[0]
        eta = out.eta.copy()
        eta[0] = 0.0
        return TimingOffsets(out.delta, eta)


@dataclass(frozen=True)
class Scene:
    mic_positions: np.ndarray  # (M, 3)
    src_positions: np.ndarray  # (N, 3)
    delta: np.ndarray
    eta: np.ndarray
    c: float = SPEED_OF_SOUND
    seed: int | None = None

    def __post_init__(self):
        for name in ("mic_positions", "src_positions", "delta", "eta"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.mic_positions.ndim != 2 or self.mic_positions.shape[1] != 3:
            raise ValueError("mic_positions must be (M, 3)")
        if self.src_positions.ndim != 2 or self.src_positions.shape[1] != 3:
            raise ValueError("src_positions must be (N, 3)")
        if self.delta.shape != (self.m,) or self.eta.shape != (self.n,):
            raise ValueError("delta/eta lengths must match the number of mics/sources")

    @property
    def m(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def n(self) -> int:
        return self.src_positions.shape[0]

    @property
    def offsets(self) -> TimingOffsets:
        return TimingOffsets(self.delta, self.eta)

    def distances(self) -> np.ndarray:
        """(M, N) matrix of microphone-source distances."""
        diff = self.mic_positions[:, None, :] - self.src_positions[None, :, :]
        return np.linalg.norm(diff, axis=-1)

    def to_dict(self) -> dict:
        return {
            "mic_positions": self.mic_positions.tolist(),
            "src_positions": self.src_positions.tolist(),
            "delta": self.delta.tolist(),
            "eta": self.eta.tolist(),
            "c": self.c,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls(
            mic_positions=np.array(data["mic_positions"], dtype=float),
            src_positions=np.array(data["src_positions"], dtype=float),
            delta=np.array(data["delta"], dtype=float),
            eta=np.array(data["eta"], dtype=float),
            c=float(data["c"]),
            seed=data.get("seed"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class MeasurementMatrix:
    values: np.ndarray
    kind: MeasurementKind = MeasurementKind.TOA
    c: float = SPEED_OF_SOUND
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).copy()
        if vals.ndim != 2:
            raise ValueError("measurement values must be a 2-D matrix")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "kind", MeasurementKind(self.kind))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def save(self, path) -> None:
        """Write ``M,N,c,kind`` followed by M comma-separated rows."""
        m, n = self.shape
        lines = [f"{m},{n},{self.c!r},{self.kind.value}"]
        lines += [",".join(repr(float(v)) for v in row) for row in self.values]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "MeasurementMatrix":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty measurement file")
        head = lines[0].split(",")
        if len(head) != 4:
            raise ValueError(f"{path}: header must be M,N,c,kind")
        m, n, c, kind = int(head[0]), int(head[1]), float(head[2]), head[3].strip()
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
        values = np.array(rows, dtype=float)
        if values.shape != (m, n):
            raise ValueError(f"{path}: expected {m}x{n} values, found {values.shape}")
        kind = MeasurementKind(kind)
        if kind is MeasurementKind.PSEUDO_TOA:
            return pseudo_toa_from_tdoa(values, c)[0]
        return cls(values, kind, c)


def _anchor(mics: np.ndarray, srcs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # translate source 1 to the origin, then rotate mic 1 onto +x
    mics = mics - srcs[0]
    srcs = srcs - srcs[0]
    r1 = mics[0]
    norm = np.linalg.norm(r1)
    if norm == 0.0:
        raise ValueError("microphone 1 coincides with source 1; cannot anchor")
    rot, _ = Rotation.align_vectors([[1.0, 0.0, 0.0]], [r1 / norm])
    mics = rot.apply(mics)
    srcs = rot.apply(srcs)
    mics[0] = (norm, 0.0, 0.0)
    srcs[0] = 0.0
    return mics, srcs


def generate_scene(
    m: int,
    n: int,
    box=DEFAULT_BOX,
    time_range=DEFAULT_TIME_RANGE,
    c: float = SPEED_OF_SOUND,
    seed: int = 0,
) -> Scene:
    """Draw a random anchored and gauged scene.

    Positions are uniform in ``[0, box]``, offsets uniform in ``time_range``.
    The scene is then translated/rotated so that ``r1 = (r11, 0, 0)`` and
    ``s1 = 0``, and the offsets are shifted so that ``eta[0] == 0``. Neither
    step changes any TOA value.
    """
    if m < 2 or n < 2:
        raise ValueError(f"need at least 2 microphones and 2 sources, got m={m}, n={n}")
    box = np.asarray(box, dtype=float)
    if box.shape != (3,) or np.any(box <= 0):
        raise ValueError("box must have three positive extents")
    lo, hi = map(float, time_range)
    if not hi > lo:
        raise ValueError("time_range must be a nonempty interval")
    if not c > 0:
        raise ValueError("speed of sound must be positive")

    rng = np.random.default_rng(seed)
    mics = rng.uniform(0.0, 1.0, size=(m, 3)) * box
    srcs = rng.uniform(0.0, 1.0, size=(n, 3)) * box
    delta = rng.uniform(lo, hi, size=m)
    eta = rng.uniform(lo, hi, size=n)

    mics, srcs = _anchor(mics, srcs)
    offsets = TimingOffsets(delta, eta).gauged()
    return Scene(mics, srcs, offsets.delta, offsets.eta, c, seed)


def toa_from_scene(scene: Scene) -> MeasurementMatrix:
    values = scene.distances() / scene.c + scene.eta[None, :] - scene.delta[:, None]
    return MeasurementMatrix(values, MeasurementKind.TOA, scene.c)


def tdoa_from_scene(scene: Scene) -> np.ndarray:
    """TDOA of every microphone against microphone 1; row 0 is exactly zero."""
    dist = scene.distances()
    zeta = (dist - dist[0]) / scene.c + scene.delta[0] - scene.delta[:, None]
    zeta[0] = 0.0
    return zeta


def pseudo_toa_from_tdoa(tdoa, c: float = SPEED_OF_SOUND, atol: float = 1e-9):
    """Reinterpret a TDOA matrix as a pseudo-TOA measurement.

    The matrix itself is unchanged. The returned note records how the pseudo
    offsets relate to the physical ones; use :func:`pseudo_offsets` to get
    them for a known scene.
    """
    tdoa = np.asarray(tdoa, dtype=float)
    if tdoa.ndim != 2:
        raise MalformedTDOAError("TDOA must be a 2-D matrix")
    if np.max(np.abs(tdoa[0])) > atol:
        raise MalformedTDOAError("first row of a TDOA matrix must be zero")
    note = (
        "pseudo eta_j = (|r1 - s1| - |r1 - sj|) / c; "
        "pseudo delta_i = delta_i - delta_1 + |r1 - s1| / c"
    )
    meas = MeasurementMatrix(tdoa, MeasurementKind.PSEUDO_TOA, c, meta={"gauge": note})
    return meas, note


def pseudo_offsets(scene: Scene, regauge: bool = True) -> TimingOffsets:
    """Ground-truth pseudo start/emission times that reproduce the scene's TDOA."""
    dist1 = np.linalg.norm(scene.mic_positions[0] - scene.src_positions, axis=1)
    eta_hat = -dist1 / scene.c
    delta_hat = -(scene.delta[0] - scene.delta)
    out = TimingOffsets(delta_hat, eta_hat)
    return out.gauged() if regauge else out


def add_noise(meas: MeasurementMatrix, sigma: float, seed: int = 0) -> MeasurementMatrix:
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError("sigma must be a finite nonnegative number")
    if sigma == 0:
        return MeasurementMatrix(meas.values, meas.kind, meas.c, dict(meas.meta))
    rng = np.random.default_rng(seed)
    noisy = meas.values + rng.normal(0.0, sigma, size=meas.shape)
    return MeasurementMatrix(noisy, meas.kind, meas.c, dict(meas.meta))
