"""Dataset-level distribution of raw CAM values, per selected class.

The per-sample raw map is M = sum_f W^f (pre-resize, pre-scaling); the
statistics over all scalar values of M across the dataset supply the
P10/P90 anchors for the common intensity scale. Exact mode sorts the full
value multiset; sketch mode uses a mergeable t-digest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import archive as ar
from . import schemes as sc

DEFAULT_PERCENTILES = (1, 5, 10, 25, 50, 75, 90, 95, 99)
HISTOGRAM_BINS = 256


class EmptyStatsError(ValueError):
    pass


class StatsMergeError(ValueError):
    pass


def _percentile_key(p):
    """Canonical percentile key: int when whole (so 10 and "10.0" collide)."""
    f = float(p)
    return int(f) if f.is_integer() else f


@dataclass
class DistributionStats:
    class_id: object  # int class id or "gt" (pooled per-true-class)
    scheme: str
    count: int
    mean: float
    std: float  # population
    min: float
    max: float
    percentiles: dict  # p -> value, includes 10 and 90
    histogram_edges: list
    histogram_counts: list
    source_split: str
    mode: str = "exact"

    @property
    def p10(self) -> float:
        return self.percentiles[10]

    @property
    def p90(self) -> float:
        return self.percentiles[90]

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "scheme": self.scheme,
            "count": self.count,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "percentiles": {str(p): v for p, v in self.percentiles.items()},
            "histogram_edges": list(self.histogram_edges),
            "histogram_counts": [int(c) for c in self.histogram_counts],
            "source_split": self.source_split,
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DistributionStats":
        cid = doc["class_id"]
        return cls(
            class_id=cid if cid == "gt" else int(cid),
            scheme=doc["scheme"],
            count=int(doc["count"]),
            mean=float(doc["mean"]),
            std=float(doc["std"]),
            min=float(doc["min"]),
            max=float(doc["max"]),
            percentiles={_percentile_key(p): float(v) for p, v in doc["percentiles"].items()},
            histogram_edges=[float(e) for e in doc["histogram_edges"]],
            histogram_counts=[int(c) for c in doc["histogram_counts"]],
            source_split=doc["source_split"],
            mode=doc.get("mode", "exact"),
        )

    def save(self, path):
        p = Path(path)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2))
        tmp.replace(p)

    @classmethod
    def load(cls, path) -> "DistributionStats":
        return cls.from_json(json.loads(Path(path).read_text()))


class TDigest:
    """Mergeable streaming quantile sketch (merging t-digest, k1 scale function)."""

    def __init__(self, compression: float = 200.0):
        self.compression = float(compression)
        self.means = np.empty(0)
        self.weights = np.empty(0)
        self._buf = []
        self._buf_len = 0
        self._buf_limit = int(10 * compression)
        self.vmin = math.inf
        self.vmax = -math.inf

    def add(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return
        self.vmin = min(self.vmin, float(values.min()))
        self.vmax = max(self.vmax, float(values.max()))
        self._buf.append(values)
        self._buf_len += values.size
        if self._buf_len >= self._buf_limit:
            self._compress()

    def merge(self, other: "TDigest"):
        other._compress()
        self.vmin = min(self.vmin, other.vmin)
        self.vmax = max(self.vmax, other.vmax)
        if other.means.size:
            # fold the other digest's centroids in as weighted points
            self._compress()
            self._merge_points(other.means, other.weights)

    def _k(self, q: np.ndarray) -> np.ndarray:
        return self.compression / (2.0 * math.pi) * np.arcsin(2.0 * q - 1.0)

    def _compress(self):
        if self._buf_len == 0:
            return
        pts = np.concatenate(self._buf)
        self._buf = []
        self._buf_len = 0
        self._merge_points(pts, np.ones(pts.size))

    def _merge_points(self, means: np.ndarray, weights: np.ndarray):
        means = np.concatenate([self.means, means])
        weights = np.concatenate([self.weights, weights])
        order = np.argsort(means, kind="stable")
        means = means[order]
        weights = weights[order]
        total = weights.sum()
        out_m, out_w = [], []
        cur_m, cur_w = means[0], weights[0]
        acc = 0.0  # weight emitted before the current cluster
        k_left = self._k(np.array([0.0]))[0]
        for m, w in zip(means[1:], weights[1:]):
            q_new = (acc + cur_w + w) / total
            if self._k(np.array([min(q_new, 1.0)]))[0] - k_left <= 1.0:
                cur_m += (m - cur_m) * (w / (cur_w + w))
                cur_w += w
            else:
                out_m.append(cur_m)
                out_w.append(cur_w)
                acc += cur_w
                k_left = self._k(np.array([acc / total]))[0]
                cur_m, cur_w = m, w
        out_m.append(cur_m)
        out_w.append(cur_w)
        self.means = np.asarray(out_m)
        self.weights = np.asarray(out_w)

    def _cdf_axes(self):
        self._compress()
        if self.means.size == 0:
            raise EmptyStatsError("empty sketch")
        cum = np.cumsum(self.weights)
        total = cum[-1]
        # centroid i sits at the midpoint of its weight span
        mids = cum - self.weights / 2.0
        xs = np.concatenate([[self.vmin], self.means, [self.vmax]])
        qs = np.concatenate([[0.0], mids / total, [1.0]])
        # enforce monotone x for interpolation
        xs = np.maximum.accumulate(xs)
        return xs, qs

    def quantile(self, q: float) -> float:
        xs, qs = self._cdf_axes()
        return float(np.interp(q, qs, xs))

    def cdf(self, x) -> np.ndarray:
        xs, qs = self._cdf_axes()
        return np.interp(x, xs, qs)

    @property
    def count(self) -> float:
        self._compress()
        return float(self.weights.sum())


class StatsAccumulator:
    """Shard-local accumulator of raw map values; merge is associative.

    Exact mode keeps every value and computes all statistics from the final
    sorted array, so results are identical regardless of sharding. Sketch
    mode keeps exact count/min/max/mean/M2 plus a t-digest.
    """

    def __init__(
        self,
        class_id,
        scheme: str,
        source_split: str = "other",
        mode: str = "exact",
        percentiles: Sequence[float] = DEFAULT_PERCENTILES,
        compression: float = 200.0,
    ):
        if mode not in ("exact", "sketch"):
            raise ValueError(f"unknown stats mode {mode!r}")
        self.class_id = class_id
        self.scheme = sc.parse_scheme(scheme)
        self.source_split = source_split
        self.mode = mode
        self.percentiles = tuple(percentiles)
        if 10 not in self.percentiles:
            self.percentiles = self.percentiles + (10,)
        if 90 not in self.percentiles:
            self.percentiles = self.percentiles + (90,)
        self._chunks = []  # exact mode
        self._digest = TDigest(compression) if mode == "sketch" else None
        self.count = 0
        self._mean = 0.0
        self._m2 = 0.0
        self.vmin = math.inf
        self.vmax = -math.inf

    def add_values(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size == 0:
            return
        if self.mode == "exact":
            self._chunks.append(values.copy())
        else:
            self._digest.add(values)
        n_b = values.size
        mean_b = float(values.mean())
        m2_b = float(((values - mean_b) ** 2).sum())
        self._combine_moments(n_b, mean_b, m2_b)
        self.vmin = min(self.vmin, float(values.min()))
        self.vmax = max(self.vmax, float(values.max()))

    def _combine_moments(self, n_b, mean_b, m2_b):
        n_a, mean_a, m2_a = self.count, self._mean, self._m2
        n = n_a + n_b
        delta = mean_b - mean_a
        self._mean = mean_a + delta * n_b / n
        self._m2 = m2_a + m2_b + delta * delta * n_a * n_b / n
        self.count = n

    def _compatible(self, other: "StatsAccumulator"):
        if (
            self.class_id != other.class_id
            or self.scheme != other.scheme
            or self.mode != other.mode
            or self.percentiles != other.percentiles
        ):
            raise StatsMergeError("accumulators have incompatible configurations")

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        self._compatible(other)
        if other.count == 0:
            return self
        if self.mode == "exact":
            self._chunks.extend(other._chunks)
        else:
            self._digest.merge(other._digest)
        self._combine_moments(other.count, other._mean, other._m2)
        self.vmin = min(self.vmin, other.vmin)
        self.vmax = max(self.vmax, other.vmax)
        return self

    def finalize(self) -> DistributionStats:
        if self.count == 0:
            raise EmptyStatsError(
                f"no values collected for class {self.class_id} / scheme {self.scheme}"
            )
        if self.mode == "exact":
            values = np.sort(np.concatenate(self._chunks), kind="stable")
            # everything derived from the sorted multiset: shard-order invariant
            count = values.size
            mean = float(values.mean())
            std = float(values.std())
            vmin, vmax = float(values[0]), float(values[-1])
            pct = {
                p: float(np.percentile(values, p, method="linear")) for p in self.percentiles
            }
            edges, counts = _exact_histogram(values, vmin, vmax)
        else:
            count = self.count
            mean = self._mean
            std = math.sqrt(self._m2 / self.count)
            vmin, vmax = self.vmin, self.vmax
            pct = {p: self._digest.quantile(p / 100.0) for p in self.percentiles}
            edges, counts = _sketch_histogram(self._digest, vmin, vmax, count)
        return DistributionStats(
            class_id=self.class_id,
            scheme=self.scheme,
            count=int(count),
            mean=mean,
            std=std,
            min=vmin,
            max=vmax,
            percentiles=dict(sorted(pct.items())),
            histogram_edges=list(edges),
            histogram_counts=list(counts),
            source_split=self.source_split,
            mode=self.mode,
        )


def _exact_histogram(sorted_values, vmin, vmax):
    if vmin == vmax:
        edges = np.array([vmin, vmax])
        return edges, np.array([sorted_values.size])
    counts, edges = np.histogram(sorted_values, bins=HISTOGRAM_BINS, range=(vmin, vmax))
    return edges, counts


def _sketch_histogram(digest: TDigest, vmin, vmax, count):
    if vmin == vmax:
        return np.array([vmin, vmax]), np.array([int(count)])
    edges = np.linspace(vmin, vmax, HISTOGRAM_BINS + 1)
    cdf = digest.cdf(edges)
    counts = np.rint(np.diff(cdf) * count).astype(np.int64)
    counts = np.maximum(counts, 0)
    # nudge the largest bin so the counts sum exactly to count
    diff = int(count) - int(counts.sum())
    if diff != 0:
        counts[int(np.argmax(counts))] += diff
    return edges, counts


def raw_map_values(rec: ar.SampleRecord, scheme: str, class_id) -> Optional[np.ndarray]:
    """Flattened raw map M = sum_f W^f for one sample, or None if the
    required gradients are absent. class_id="gt" uses the true class."""
    c = rec.true_class if class_id == "gt" else class_id
    if c is None or c < 0 or c not in rec.grads:
        return None
    stack = sc.weighted_features(scheme, rec.features, rec.grads[c], rec.sample_id, c)
    return stack.maps.sum(axis=0)


def collect_stats(
    archive_path,
    scheme: str,
    class_id,
    mode: str = "exact",
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    workers: int = 1,
) -> DistributionStats:
    """Distribution of raw map values over a whole archive.

    class_id is an integer class or "gt" (each sample contributes its
    true-class map). Samples without the required gradients are skipped;
    if none qualify an EmptyStatsError is raised. Results are independent
    of the worker/shard count in exact mode.
    """
    manifest = ar.read_manifest(archive_path)
    shards = [
        StatsAccumulator(class_id, scheme, manifest.dataset_split, mode, percentiles)
        for _ in range(max(1, workers))
    ]
    i = 0
    for rec in ar.iter_samples(archive_path):
        values = raw_map_values(rec, scheme, class_id)
        if values is None:
            continue
        shards[i % len(shards)].add_values(values)
        i += 1
    acc = shards[0]
    for other in shards[1:]:
        acc.merge(other)
    return acc.finalize()


def merge_stats(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    """Associative merge of two partial accumulators (a is updated and returned)."""
    return a.merge(b)
