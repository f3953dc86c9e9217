"""Feature decomposition: importance matrices, feature masks and IM analyses.

The importance of a feature for a class is the average spatial sum of its
weighted map over a dataset: an F x C matrix built either per selected
class (averaging over all samples) or unified in a single pass using each
sample's true class.
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


class ImportanceError(ValueError):
    pass


class MissingGradsError(ImportanceError):
    def __init__(self, class_id, sample_ids):
        ids = ", ".join(str(s) for s in sample_ids[:10])
        more = "..." if len(sample_ids) > 10 else ""
        super().__init__(f"samples missing grads for class {class_id}: {ids}{more}")
        self.sample_ids = sample_ids


@dataclass
class ImportanceMatrix:
    values: np.ndarray  # (F, C)
    counts: np.ndarray  # (C,) samples used per class column
    stds: np.ndarray  # (F, C) per-entry standard deviation (recorded, unused in thresholding)
    scheme: str
    archive_id: str
    split: str
    class_names: list

    @property
    def num_features(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def available(self, class_id: int) -> bool:
        return self.counts[class_id] > 0

    def column(self, class_id: int) -> np.ndarray:
        if not self.available(class_id):
            raise ImportanceError(f"class {class_id} column unavailable (no samples)")
        return self.values[:, class_id]

    def save_csv(self, path):
        lines = ["feature," + ",".join(self.class_names)]
        for f in range(self.num_features):
            row = ",".join(f"{v:.9g}" for v in self.values[f])
            lines.append(f"{f},{row}")
        p = Path(path)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(p)

    def save_meta(self, path):
        doc = {
            "scheme": self.scheme,
            "archive_id": self.archive_id,
            "split": self.split,
            "class_names": self.class_names,
            "counts": [int(c) for c in self.counts],
            "stds": self.stds.tolist(),
        }
        Path(path).write_text(json.dumps(doc, indent=2))

    @classmethod
    def load_csv(cls, csv_path, meta_path=None) -> "ImportanceMatrix":
        lines = Path(csv_path).read_text().strip().splitlines()
        class_names = lines[0].split(",")[1:]
        rows = [[float(v) for v in line.split(",")[1:]] for line in lines[1:]]
        values = np.asarray(rows, dtype=np.float64)
        counts = np.full(values.shape[1], -1, dtype=np.int64)
        stds = np.zeros_like(values)
        scheme, archive_id, split = "grad_cam", "", "other"
        if meta_path is not None and Path(meta_path).exists():
            meta = json.loads(Path(meta_path).read_text())
            counts = np.asarray(meta["counts"], dtype=np.int64)
            stds = np.asarray(meta["stds"], dtype=np.float64)
            scheme = meta["scheme"]
            archive_id = meta["archive_id"]
            split = meta["split"]
        return cls(values, counts, stds, scheme, archive_id, split, class_names)


@dataclass
class FeatureMask:
    masks: np.ndarray  # (C, F) in {0,1}
    rule: dict  # provenance: threshold rule and source IM id
    class_names: list = field(default_factory=list)

    def column(self, class_id: int) -> np.ndarray:
        return self.masks[class_id]

    def union(self) -> np.ndarray:
        """Single blocking vector: a feature passes if any class selects it."""
        return (self.masks.max(axis=0) > 0).astype(np.float64)

    def save(self, path):
        doc = {
            "rule": self.rule,
            "classes": [
                {
                    "class_id": c,
                    "class_name": self.class_names[c] if self.class_names else str(c),
                    "selected": [int(i) for i in np.flatnonzero(self.masks[c])],
                }
                for c in range(self.masks.shape[0])
            ],
            "num_features": int(self.masks.shape[1]),
        }
        p = Path(path)
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2))
        tmp.replace(p)

    @classmethod
    def load(cls, path) -> "FeatureMask":
        doc = json.loads(Path(path).read_text())
        num_f = int(doc["num_features"])
        classes = doc["classes"]
        masks = np.zeros((len(classes), num_f))
        names = []
        for entry in classes:
            masks[entry["class_id"]][entry["selected"]] = 1.0
            names.append(entry.get("class_name", str(entry["class_id"])))
        return cls(masks=masks, rule=doc["rule"], class_names=names)


def contribution(stack: sc.WeightedFeatureStack) -> np.ndarray:
    """Per-feature spatial sum of the weighted maps; linear in the stack."""
    return stack.maps.sum(axis=1)


def _contribution_for(rec: ar.SampleRecord, scheme: str, class_id: int) -> np.ndarray:
    stack = sc.weighted_features(scheme, rec.features, rec.grads[class_id], rec.sample_id, class_id)
    return contribution(stack)


def build_im_per_class(archive_path, scheme: str, class_id: int) -> np.ndarray:
    """One IM column: average contribution over ALL archive samples for the
    selected class, regardless of each sample's true class."""
    scheme = sc.parse_scheme(scheme)
    total = None
    n = 0
    missing = []
    for rec in ar.iter_samples(archive_path):
        if class_id not in rec.grads:
            missing.append(rec.sample_id)
            continue
        contrib = _contribution_for(rec, scheme, class_id)
        total = contrib if total is None else total + contrib
        n += 1
    if missing:
        raise MissingGradsError(class_id, missing)
    if n == 0:
        raise ImportanceError(f"archive has no samples with grads for class {class_id}")
    return total / n


def build_im_unified(archive_path, scheme: str) -> ImportanceMatrix:
    """Unified IM in a single archive pass: column c averages contributions
    over samples with true class c. Unlabeled samples (gt = -1) are skipped;
    empty columns are flagged unavailable via counts."""
    scheme = sc.parse_scheme(scheme)
    manifest = ar.read_manifest(archive_path)
    f_count, c_count = manifest.num_features, manifest.num_classes
    sums = np.zeros((f_count, c_count))
    sq_sums = np.zeros((f_count, c_count))
    counts = np.zeros(c_count, dtype=np.int64)
    missing = []
    for rec in ar.iter_samples(archive_path):
        gt = rec.true_class
        if gt < 0:
            continue
        if gt not in rec.grads:
            missing.append(rec.sample_id)
            continue
        contrib = _contribution_for(rec, scheme, gt)
        sums[:, gt] += contrib
        sq_sums[:, gt] += contrib * contrib
        counts[gt] += 1
    if missing:
        raise MissingGradsError("gt", missing)
    safe = np.maximum(counts, 1)
    values = sums / safe
    variance = np.maximum(sq_sums / safe - values * values, 0.0)
    return ImportanceMatrix(
        values=values,
        counts=counts,
        stds=np.sqrt(variance),
        scheme=scheme,
        archive_id=manifest.archive_id,
        split=manifest.dataset_split,
        class_names=list(manifest.class_names),
    )


def top_pct_indices(column: np.ndarray, k: float) -> np.ndarray:
    """Indices of the ceil(k/100 * F) largest values; ties keep the lower index."""
    if not 0 < k <= 100:
        raise ImportanceError(f"top percentage must be in (0, 100], got {k}")
    f_count = column.shape[0]
    n_keep = math.ceil(k / 100.0 * f_count)
    # sort by (-value, index): stable tie-break on the lower feature index
    order = np.lexsort((np.arange(f_count), -column))
    return np.sort(order[:n_keep])


def threshold_im(im: ImportanceMatrix, rule: str, k: Optional[float] = None,
                 indices: Optional[Sequence[int]] = None, im_id: str = "") -> FeatureMask:
    """Binarize an IM into per-class feature masks.

    rule is "top_pct" (keep the strongest ceil(k% * F) features),
    "bottom_pct" (the complement of top_pct(100 - k)... i.e. everything
    top_pct(100-k) would drop), or "explicit" (a fixed index list for all
    classes).
    """
    f_count, c_count = im.values.shape
    masks = np.zeros((c_count, f_count))
    if rule == "explicit":
        idx = np.asarray(list(indices), dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= f_count):
            raise ImportanceError(f"explicit indices out of range [0, {f_count})")
        masks[:, idx] = 1.0
        prov = {"rule": "explicit", "indices": [int(i) for i in idx], "im_id": im_id}
    elif rule in ("top_pct", "bottom_pct"):
        if k is None:
            raise ImportanceError(f"{rule} requires a percentage")
        for c in range(c_count):
            if not im.available(c):
                continue
            top = top_pct_indices(im.values[:, c], k)
            if rule == "top_pct":
                masks[c, top] = 1.0
            else:
                masks[c] = 1.0
                masks[c, top_pct_indices(im.values[:, c], 100 - k) if k < 100 else []] = 0.0
        prov = {"rule": rule, "k": k, "im_id": im_id}
    else:
        raise ImportanceError(f"unknown threshold rule {rule!r}")
    return FeatureMask(masks=masks, rule=prov, class_names=list(im.class_names))


def complement_mask(mask: FeatureMask) -> FeatureMask:
    return FeatureMask(
        masks=1.0 - mask.masks,
        rule={"rule": "complement", "of": mask.rule},
        class_names=list(mask.class_names),
    )


@dataclass
class DriftReport:
    per_class: list  # dicts: class_id, diff (F,), norm, top_drifted ids


def im_drift(im_train: ImportanceMatrix, im_test: ImportanceMatrix) -> DriftReport:
    """Train-vs-test IM difference per class; large normalized drift hints
    at overfitting."""
    if im_train.values.shape != im_test.values.shape:
        raise ImportanceError("importance matrices have different shapes")
    if im_train.scheme != im_test.scheme:
        raise ImportanceError("importance matrices built with different schemes")
    per_class = []
    for c in range(im_train.num_classes):
        diff = im_test.values[:, c] - im_train.values[:, c]
        base = float(np.linalg.norm(im_train.values[:, c]))
        norm = float(np.linalg.norm(diff)) / base if base > 0 else float(np.linalg.norm(diff))
        top = np.argsort(-np.abs(diff), kind="stable")[:10]
        per_class.append(
            {
                "class_id": c,
                "diff": diff,
                "normalized_drift": norm,
                "top_drifted": [int(i) for i in top],
            }
        )
    return DriftReport(per_class=per_class)


def outlier_score(sample_contribution: np.ndarray, im_column: np.ndarray) -> float:
    """1 - cosine similarity against the class's IM column, in [0, 2].

    A zero sample vector scores 1 (no evidence either way)."""
    v = np.asarray(sample_contribution, dtype=np.float64)
    col = np.asarray(im_column, dtype=np.float64)
    col_norm = np.linalg.norm(col)
    if col_norm == 0:
        raise ImportanceError("IM column is all-zero; outlier score undefined")
    v_norm = np.linalg.norm(v)
    if v_norm == 0:
        return 1.0
    return float(1.0 - np.dot(v, col) / (v_norm * col_norm))


@dataclass
class RedundancyReport:
    ratio: float
    feature_ids: list
    threshold: float


def redundancy_report(im: ImportanceMatrix, eps: float) -> RedundancyReport:
    """Features whose activation stays below eps times the strongest IM entry
    in every class are pruning candidates."""
    if not 0 < eps < 1:
        raise ImportanceError(f"eps must be in (0, 1), got {eps}")
    magnitudes = np.abs(im.values)
    threshold = eps * float(magnitudes.max())
    rare = np.flatnonzero(magnitudes.max(axis=1) < threshold)
    return RedundancyReport(
        ratio=len(rare) / im.num_features,
        feature_ids=[int(i) for i in rare],
        threshold=threshold,
    )
