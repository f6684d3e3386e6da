"""Rebalance the long-tailed per-ship window distribution.

Ships heard in at most ``t`` windows keep all of them; a ship heard in
``c > t`` windows keeps each window independently with probability ``t/c``,
so every ship's expected retained count is ``min(c, t)``.  The threshold is
either supplied by the operator or detected at the knee of the descending
occurrence curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import ManifestEntry
from .errors import ValidationError
from .geo_align import AlignedWindowSet

THRESHOLD_ORIGINS = ("detected", "manual")


@dataclass(frozen=True)
class OccurrenceHistogram:
    """Distinct-window counts per ship over an aligned window set."""

    counts: dict[int, int]
    total_ships: int
    total_windows: int

    def __post_init__(self):
        if any(c < 1 for c in self.counts.values()):
            raise ValidationError("occurrence counts must be >= 1")
        if self.total_ships != len(self.counts):
            raise ValidationError("total_ships inconsistent with counts")


@dataclass(frozen=True)
class Threshold:
    t: int
    origin: str

    def __post_init__(self):
        if self.t < 1:
            raise ValidationError(f"threshold must be >= 1, got {self.t}")
        if self.origin not in THRESHOLD_ORIGINS:
            raise ValidationError(f"origin {self.origin!r} not in {THRESHOLD_ORIGINS}")


def histogram(aligned: AlignedWindowSet) -> OccurrenceHistogram:
    """Count, per ship, the distinct windows it was heard in.

    A window shared by several ships counts once for each of them.  Partial
    histograms from workers over disjoint pulse partitions may be combined
    by building from the unioned AlignedWindowSet.
    """
    counts: dict[int, int] = {}
    for mmsis in aligned.ships.values():
        for mmsi in mmsis:
            counts[mmsi] = counts.get(mmsi, 0) + 1
    return OccurrenceHistogram(counts=counts, total_ships=len(counts), total_windows=len(aligned))


def occurrence_curve(hist: OccurrenceHistogram) -> list[tuple[int, int]]:
    """``(rank, count)`` pairs, counts descending, rank starting at 0."""
    ordered = sorted(hist.counts.values(), reverse=True)
    return list(enumerate(ordered))


def detect_knee(hist: OccurrenceHistogram) -> Threshold:
    """Kneedle-style knee of the descending occurrence curve.

    Both axes are normalized to [0, 1]; because the curve is decreasing and
    convex, the knee is the rank maximizing ``(1 - y_norm) - x_norm``
    (smallest rank on ties).  The returned threshold is the count at the
    knee rank.  Needs at least 3 distinct count values to be meaningful;
    flatter histograms require a manual threshold.
    """
    curve = occurrence_curve(hist)
    values = np.asarray([c for _, c in curve], dtype=np.float64)
    if len(np.unique(values)) < 3:
        raise ValidationError(
            "occurrence histogram has fewer than 3 distinct values; no knee — pass a manual threshold"
        )
    ranks = np.arange(len(values), dtype=np.float64)
    y_norm = (values - values.min()) / (values.max() - values.min())
    x_norm = ranks / ranks.max()
    diff = (1.0 - y_norm) - x_norm
    knee_rank = int(diff.argmax())
    return Threshold(t=int(values[knee_rank]), origin="detected")


def sampling_probability(occurrence: int, t: int) -> float:
    """Retention probability for one window of a ship seen in ``occurrence`` windows."""
    if occurrence < 1 or t < 1:
        raise ValidationError("occurrence and t must be >= 1")
    if occurrence <= t:
        return 1.0
    return t / occurrence


def curate(aligned: AlignedWindowSet, threshold: Threshold, seed: int) -> list[ManifestEntry]:
    """Thin the aligned windows ship by ship; returns manifest entries.

    Each ship uses its own generator seeded with ``seed XOR mmsi`` and draws
    over its windows in ascending window_id order, so the output does not
    depend on how ships were partitioned across workers.  A window heard
    from several ships is kept if at least one of them retains it, and the
    entry records the smallest retaining mmsi.
    """
    by_ship: dict[int, list[int]] = {}
    for wid, mmsis in aligned.ships.items():
        for mmsi in mmsis:
            by_ship.setdefault(mmsi, []).append(wid)

    retained: dict[int, int] = {}
    for mmsi in sorted(by_ship):
        wids = sorted(by_ship[mmsi])
        p = sampling_probability(len(wids), threshold.t)
        if p >= 1.0:
            kept = wids
        else:
            rng = np.random.default_rng(np.random.PCG64(seed ^ mmsi))
            draws = rng.random(len(wids))
            kept = [wid for wid, u in zip(wids, draws) if u < p]
        for wid in kept:
            if wid not in retained or mmsi < retained[wid]:
                retained[wid] = mmsi

    entries = []
    for wid in sorted(retained):
        window = aligned.windows[wid]
        entries.append(
            ManifestEntry(
                window_id=wid,
                hydrophone_id=window.hydrophone_id,
                recording_id=window.recording_id,
                offset_s=window.offset_s,
                source="ais",
                mmsi=retained[wid],
            )
        )
    return entries
