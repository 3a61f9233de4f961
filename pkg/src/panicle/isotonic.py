"""Monotone correction of count time series by pool-adjacent-violators.

Counts over a season should be non-decreasing; model noise breaks this.
PAVA projects the raw series onto the cone of non-decreasing sequences in
least squares, pooling adjacent violating blocks into their mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError


def pava(raw) -> list[float]:
    """Least-squares non-decreasing projection of a sequence (unit weights)."""
    values = [float(v) for v in raw]
    if not values:
        raise ParameterError("pava requires a non-empty sequence")
    # blocks of (mean, weight); merge backwards while the tail violates order
    means: list[float] = []
    weights: list[int] = []
    for v in values:
        means.append(v)
        weights.append(1)
        while len(means) >= 2 and means[-2] > means[-1]:
            w = weights[-2] + weights[-1]
            m = (means[-2] * weights[-2] + means[-1] * weights[-1]) / w
            means[-2:] = [m]
            weights[-2:] = [w]
    out: list[float] = []
    for m, w in zip(means, weights):
        out.extend([m] * w)
    return out


@dataclass
class CountSeries:
    """(gdd, raw count) pairs for one row segment, gdd strictly increasing."""

    segment_id: str
    gdd: list[float]
    raw_counts: list[float]
    corrected: list[float] | None = None

    def __post_init__(self):
        if len(self.gdd) != len(self.raw_counts):
            raise ParameterError("gdd and raw_counts must have the same length")
        for a, b in zip(self.gdd, self.gdd[1:]):
            if not a < b:
                raise ParameterError("gdd values must be strictly increasing")

    def fit(self) -> "CountSeries":
        self.corrected = pava(self.raw_counts)
        return self


def correct_series(series: list[CountSeries]) -> list[CountSeries]:
    return [s.fit() for s in series]


def load_count_csv(path) -> list[CountSeries]:
    """Read `segment_id,gdd,raw_count[,isotonic_count]` rows grouped by segment."""
    groups: dict[str, list[tuple[float, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                sid = row["segment_id"]
                entry = (float(row["gdd"]), float(row["raw_count"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(
                    f"{path} line {lineno}: expected segment_id,gdd,raw_count columns"
                ) from exc
            if sid not in groups:
                groups[sid] = []
                order.append(sid)
            groups[sid].append(entry)
    series = []
    for sid in order:
        entries = sorted(groups[sid])
        series.append(CountSeries(sid, [g for g, _ in entries], [c for _, c in entries]))
    return series


def save_count_csv(path, series: list[CountSeries]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "gdd", "raw_count", "isotonic_count"])
        for s in series:
            corrected = s.corrected if s.corrected is not None else [""] * len(s.gdd)
            for g, raw, fit in zip(s.gdd, s.raw_counts, corrected):
                writer.writerow([s.segment_id, f"{g:g}", f"{raw:.6f}", f"{fit:.6f}" if fit != "" else ""])
