"""Synthetic data generators and brute-force reference implementations.

Everything in this module exists for tests and acceptance checks.  The
production modules never import it, so comparisons between the streaming
implementations and these references are comparisons between independent
code paths, not shared helpers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_model import (
    AisPulse,
    DeploymentConfig,
    GeoPoint,
    Hydrophone,
    Recording,
    WINDOW_S,
    parse_utc,
    window_id_of,
)
from .errors import ValidationError

# ---------------------------------------------------------------------------
# Gaussian mixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture with optionally long-tailed weights."""

    k: int
    dim: int
    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    stddevs: tuple[float, ...]
    n: int
    seed: int

    def __post_init__(self):
        if self.k < 1 or self.dim < 1 or self.n < 1:
            raise ValidationError("k, dim and n must be >= 1")
        if len(self.weights) != self.k or len(self.means) != self.k or len(self.stddevs) != self.k:
            raise ValidationError("weights, means and stddevs must each have k entries")
        if any(w <= 0 for w in self.weights):
            raise ValidationError("weights must be positive")
        if not math.isclose(sum(self.weights), 1.0, rel_tol=1e-9):
            raise ValidationError(f"weights must sum to 1, got {sum(self.weights)}")
        if any(s <= 0 for s in self.stddevs):
            raise ValidationError("stddevs must be positive")
        if any(len(m) != self.dim for m in self.means):
            raise ValidationError("every mean must have dim components")


def gen_mixture(spec: MixtureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``spec.n`` points; returns ``(points, component_labels)``.

    Pure function of the spec: the same spec (seed included) always yields
    the same sample.
    """
    rng = np.random.default_rng(spec.seed)
    weights = np.asarray(spec.weights, dtype=np.float64)
    weights = weights / weights.sum()
    labels = rng.choice(spec.k, size=spec.n, p=weights)
    means = np.asarray(spec.means, dtype=np.float64)
    stddevs = np.asarray(spec.stddevs, dtype=np.float64)
    noise = rng.standard_normal((spec.n, spec.dim))
    points = means[labels] + stddevs[labels][:, None] * noise
    return points, labels


# ---------------------------------------------------------------------------
# Synthetic vessel traffic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrafficSpec:
    """Per-ship window occurrences drawn from a bounded discrete power law."""

    ships: int
    alpha: float
    occ_min: int = 1
    occ_max: int = 1000
    seed: int = 0
    window_pool: int | None = None

    def __post_init__(self):
        if self.ships < 1:
            raise ValidationError("ships must be >= 1")
        if self.occ_min < 1 or self.occ_max < self.occ_min:
            raise ValidationError("need 1 <= occ_min <= occ_max")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")


@dataclass(frozen=True)
class TrafficSample:
    """A traffic draw plus its ground truth.

    ``pulses`` fall inside the synthetic hydrophone's fence at mid-window
    times, so aligning them against ``deployment`` reproduces ``windows``
    exactly.  ``counts`` maps each mmsi to its number of distinct windows.
    """

    pulses: tuple[AisPulse, ...]
    windows: dict[int, set[int]]
    counts: dict[int, int]
    deployment: DeploymentConfig


_TRAFFIC_HYDROPHONE = "SYNTH0"
_TRAFFIC_RECORDING = "SR0"
_TRAFFIC_START = parse_utc("2023-01-01T00:00:00")
_TRAFFIC_MMSI_BASE = 200_000_000


def gen_traffic(spec: TrafficSpec) -> TrafficSample:
    rng = np.random.default_rng(spec.seed)
    values = np.arange(spec.occ_min, spec.occ_max + 1, dtype=np.float64)
    pmf = values ** (-spec.alpha)
    pmf /= pmf.sum()
    occurrences = rng.choice(values.astype(np.int64), size=spec.ships, p=pmf)

    pool = spec.window_pool if spec.window_pool is not None else 2 * int(occurrences.max())
    if pool < int(occurrences.max()):
        raise ValidationError(f"window_pool {pool} smaller than the largest occurrence {occurrences.max()}")

    deployment = DeploymentConfig(
        hydrophones=(
            Hydrophone(
                id=_TRAFFIC_HYDROPHONE,
                location=GeoPoint(0.0, 0.0),
                recordings=(
                    Recording(
                        id=_TRAFFIC_RECORDING,
                        start=_TRAFFIC_START,
                        duration_s=pool * WINDOW_S,
                        native_sample_rate_hz=64_000,
                    ),
                ),
            ),
        )
    )

    slot_ids = [window_id_of(_TRAFFIC_HYDROPHONE, _TRAFFIC_RECORDING, s * WINDOW_S) for s in range(pool)]
    pulses: list[AisPulse] = []
    windows: dict[int, set[int]] = {}
    counts: dict[int, int] = {}
    center = GeoPoint(0.0, 0.0)
    for ship in range(spec.ships):
        mmsi = _TRAFFIC_MMSI_BASE + ship
        c = int(occurrences[ship])
        slots = np.sort(rng.choice(pool, size=c, replace=False))
        counts[mmsi] = c
        for s in slots:
            wid = slot_ids[int(s)]
            pulses.append(AisPulse(mmsi=mmsi, time=_TRAFFIC_START + int(s) * WINDOW_S + 5, position=center))
            windows.setdefault(wid, set()).add(mmsi)
    return TrafficSample(pulses=tuple(pulses), windows=windows, counts=counts, deployment=deployment)


def tail_index_mle(occurrences, occ_min: int) -> float:
    """Continuous-approximation maximum-likelihood exponent of a discrete power law."""
    occ = np.asarray(occurrences, dtype=np.float64)
    occ = occ[occ >= occ_min]
    if len(occ) == 0:
        raise ValidationError("no occurrences at or above occ_min")
    return 1.0 + len(occ) / np.log(occ / (occ_min - 0.5)).sum()


# ---------------------------------------------------------------------------
# Batch k-means reference
# ---------------------------------------------------------------------------


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ValidationError(f"fewer than {k} distinct points for k-means++ seeding")
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def lloyd_reference(
    points,
    k: int,
    seed: int = 0,
    init: np.ndarray | None = None,
    max_iter: int = 200,
    collect_trajectory: bool = False,
):
    """Classic batch k-means run to an assignment fixpoint (or ``max_iter``).

    Initialization is k-means++ unless explicit ``init`` centroids are given.
    The within-cluster squared-distance objective is asserted non-increasing
    at every iteration.  With ``collect_trajectory`` the per-iteration
    centroid states are returned alongside the result.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError("points must be a 2-d array")
    n = len(points)
    if n < k:
        raise ValidationError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    if init is None:
        centroids = _kmeans_pp(points, k, rng)
    else:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (k, points.shape[1]):
            raise ValidationError(f"init shape {centroids.shape} != {(k, points.shape[1])}")

    trajectory = []
    prev_assign = None
    prev_obj = math.inf
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        assign = d2.argmin(axis=1)
        obj = d2[np.arange(n), assign].sum()
        assert obj <= prev_obj * (1 + 1e-12) + 1e-12, "k-means objective increased"
        prev_obj = obj
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for c in range(k):
            members = points[assign == c]
            if len(members):
                centroids[c] = members.sum(axis=0) / len(members)
        if collect_trajectory:
            trajectory.append(centroids.copy())
    if collect_trajectory:
        return centroids, trajectory
    return centroids


def kmeans_objective(points, centroids) -> float:
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    return float(_sq_distances(points, centroids).min(axis=1).sum())


# ---------------------------------------------------------------------------
# Offline per-cluster selection reference
# ---------------------------------------------------------------------------


def exact_topn_per_cluster(
    window_ids,
    points,
    centroids,
    quotas,
    normalize: bool = False,
) -> dict[int, set[int]]:
    """For each cluster, the quota-many assigned ids closest to the centroid.

    Assignment is by squared Euclidean distance (lowest cluster index on
    ties); ranking within a cluster is by ``(distance, window_id)``
    ascending, so equal distances resolve to the smaller id.
    """
    window_ids = np.asarray(window_ids, dtype=np.uint64)
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if normalize:
        points = points / np.linalg.norm(points, axis=1, keepdims=True)
    d2 = _sq_distances(points, centroids)
    assign = d2.argmin(axis=1)
    dist = np.sqrt(d2[np.arange(len(points)), assign])

    selected: dict[int, set[int]] = {}
    for c in range(len(centroids)):
        quota = int(quotas[c]) if not isinstance(quotas, dict) else int(quotas.get(c, 0))
        members = np.flatnonzero(assign == c)
        if quota <= 0 or len(members) == 0:
            selected[c] = set()
            continue
        ranked = sorted((float(dist[i]), int(window_ids[i])) for i in members)
        selected[c] = {wid for _, wid in ranked[:quota]}
    return selected


# ---------------------------------------------------------------------------
# Dense-grid knee reference
# ---------------------------------------------------------------------------


def kneedle_dense_oracle(curve, n_ranks: int, grid: int = 100_001) -> float:
    """Continuous knee location of a descending convex curve.

    ``curve`` maps a (fractional) rank in ``[0, n_ranks - 1]`` to a count.
    The curve is evaluated on a dense grid, both axes are normalized to
    [0, 1], and the knee is the grid point maximizing
    ``(1 - y_norm) - x_norm`` (the standard transform that turns the knee of
    a decreasing convex curve into a peak).  Returns the fractional rank.
    """
    if n_ranks < 3:
        raise ValidationError("need at least 3 ranks")
    r = np.linspace(0.0, n_ranks - 1.0, grid)
    y = np.asarray([curve(x) for x in r], dtype=np.float64)
    y_norm = (y - y.min()) / (y.max() - y.min())
    x_norm = r / (n_ranks - 1.0)
    diff = (1.0 - y_norm) - x_norm
    return float(r[int(diff.argmax())])
