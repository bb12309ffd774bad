"""Estimation error, recovery decision, and recovery / convergence rates."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import TimingOffsets

RECOVERY_THRESHOLD = 1e-4
# (label, lower inclusive, upper exclusive), seconds
ERROR_BANDS = (("er<1e-4", 0.0, 1e-4), ("1e-4<=er<1e-2", 1e-4, 1e-2))


def estimation_error(est: TimingOffsets, truth: TimingOffsets) -> float:
    """Mean absolute start-time error plus mean absolute emission-time error."""
    if est.delta.shape != truth.delta.shape or est.eta.shape != truth.eta.shape:
        raise ValueError("estimate and truth have different sizes")
    return float(
        np.mean(np.abs(truth.delta - est.delta)) + np.mean(np.abs(truth.eta - est.eta))
    )


def is_recovered(er: float) -> bool:
    return er < RECOVERY_THRESHOLD


@dataclass
class MetricSummary:
    recovery_rate: float
    convergence_rate: float
    band_ratios: dict = field(default_factory=dict)
    per_config_counts: list = field(default_factory=list)
    n_configs: int = 0
    n_inits: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def csv_row(self, **key) -> str:
        """One CSV line keyed by e.g. m, n, method, sigma."""
        row = dict(key)
        row.update(recovery_rate=self.recovery_rate, convergence_rate=self.convergence_rate)
        row.update(self.band_ratios)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def summarize(records) -> MetricSummary:
    """Aggregate the runs of one (M, N, method, sigma) group.

    ``records`` are RunRecord-like objects with ``config_index``, ``init_index``
    and ``er``. Every configuration must have the same number of
    initialisations.
    """
    by_config = defaultdict(list)
    for rec in records:
        by_config[rec.config_index].append(rec)
    if not by_config:
        raise ValueError("no records to summarize")
    sizes = {len(v) for v in by_config.values()}
    if len(sizes) != 1:
        raise ValueError(f"ragged grouping: initialisation counts {sorted(sizes)}")
    n_inits = sizes.pop()
    n_configs = len(by_config)

    counts = [
        sum(is_recovered(r.er) for r in by_config[k]) for k in sorted(by_config)
    ]
    total = n_inits * n_configs
    ers = np.array([r.er for r in records], dtype=float)
    bands = {
        label: float(np.count_nonzero((ers >= lo) & (ers < hi))) / total
        for label, lo, hi in ERROR_BANDS
    }
    return MetricSummary(
        recovery_rate=sum(counts) / total,
        convergence_rate=sum(1 for c in counts if c) / n_configs,
        band_ratios=bands,
        per_config_counts=counts,
        n_configs=n_configs,
        n_inits=n_inits,
    )
