"""Evaluation metrics: logit consistency, masked-feature accuracy via head
replay, and average increase/drop through the masked-input job protocol.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import archive as ar
from . import campipe as cp
from .importance import FeatureMask

MASK_MAGIC = cp.CAM_MAGIC  # .maskf32 shares the .camf32 layout


class EvalError(ValueError):
    pass


class ConstantSeriesError(EvalError):
    pass


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties resolved to the average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = x.std(), y.std()
    if sx == 0 or sy == 0:
        raise ConstantSeriesError("correlation undefined for a constant series")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    return pearson(_average_ranks(x), _average_ranks(y))


def jarque_bera(values: np.ndarray):
    """(statistic, p-value) with p from chi-squared(2): p = exp(-stat/2)."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    centered = values - values.mean()
    m2 = (centered**2).mean()
    if m2 == 0:
        raise ConstantSeriesError("normality test undefined for a constant series")
    skew = (centered**3).mean() / m2**1.5
    kurt = (centered**4).mean() / m2**2
    stat = n * (skew**2 / 6.0 + (kurt - 3.0) ** 2 / 24.0)
    return float(stat), float(math.exp(-stat / 2.0))


@dataclass
class ConsistencyReport:
    class_id: object
    scheme: str
    scale_mode: str
    n: int
    pearson_r: float
    spearman_rho: float
    jb_cam: tuple  # (statistic, p)
    jb_logit: tuple
    selected_coefficient: str  # pearson iff both series pass normality at p > 0.05
    cam_sums: np.ndarray
    logits: np.ndarray

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "scheme": self.scheme,
            "scale_mode": self.scale_mode,
            "n": self.n,
            "pearson": self.pearson_r,
            "spearman": self.spearman_rho,
            "jarque_bera": {
                "cam_sum": {"statistic": self.jb_cam[0], "p": self.jb_cam[1]},
                "logit": {"statistic": self.jb_logit[0], "p": self.jb_logit[1]},
            },
            "selected_coefficient": self.selected_coefficient,
            "selection_rule": "pearson iff both Jarque-Bera p-values > 0.05",
        }

    def save_csv(self, path, sample_ids: Optional[Sequence[int]] = None):
        ids = sample_ids if sample_ids is not None else range(self.n)
        lines = ["sample_id,cam_sum,logit"]
        for sid, s, l in zip(ids, self.cam_sums, self.logits):
            lines.append(f"{sid},{s:.9g},{l:.9g}")
        Path(path).write_text("\n".join(lines) + "\n")


def consistency(
    cam_sums,
    logits,
    class_id=None,
    scheme: str = "",
    scale_mode: str = "",
) -> ConsistencyReport:
    cam_sums = np.asarray(cam_sums, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if cam_sums.shape != logits.shape or cam_sums.ndim != 1:
        raise EvalError("cam_sums and logits must be equal-length vectors")
    n = cam_sums.size
    if n < 3:
        raise EvalError(f"need at least 3 pairs, got {n}")
    if not (np.isfinite(cam_sums).all() and np.isfinite(logits).all()):
        raise EvalError("non-finite values in the paired series")
    r = pearson(cam_sums, logits)
    rho = spearman(cam_sums, logits)
    jb_cam = jarque_bera(cam_sums)
    jb_logit = jarque_bera(logits)
    selected = "pearson" if (jb_cam[1] > 0.05 and jb_logit[1] > 0.05) else "spearman"
    return ConsistencyReport(
        class_id=class_id,
        scheme=scheme,
        scale_mode=scale_mode,
        n=n,
        pearson_r=r,
        spearman_rho=rho,
        jb_cam=jb_cam,
        jb_logit=jb_logit,
        selected_coefficient=selected,
        cam_sums=cam_sums,
        logits=logits,
    )


def replay_logits(head: ar.HeadSpec, features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Logits with the forward paths of unmasked features blocked.

    gap_linear: logit_c = sum_f m_f * w_{c,f} * spatial_mean(A^f) + b_c;
    flatten_linear zeroes the masked feature blocks before the affine map."""
    if head.kind == "external":
        raise EvalError("external head cannot be replayed; use the masked-input job protocol")
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    f_count, spatial = features.shape
    if mask.shape != (f_count,):
        raise EvalError(f"mask length {mask.shape} != F={f_count}")
    if head.kind == "gap_linear":
        pooled = features.mean(axis=1) * mask
        return head.weights @ pooled + head.bias
    expected = f_count * spatial
    if head.weights.shape[1] != expected:
        raise EvalError(
            f"flatten_linear head expects {head.weights.shape[1]} inputs, features give {expected}"
        )
    blocked = (features * mask[:, None]).ravel()
    return head.weights @ blocked + head.bias


@dataclass
class MaskedAccuracyReport:
    accuracy_all: float
    accuracy_principal: float
    accuracy_nonprincipal: float
    n: int
    mask_provenance: dict
    predictions: dict  # condition -> list of predicted classes

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy_all": self.accuracy_all,
            "accuracy_principal": self.accuracy_principal,
            "accuracy_nonprincipal": self.accuracy_nonprincipal,
            "mask_provenance": self.mask_provenance,
        }


def masked_accuracy(archive_path, mask: FeatureMask) -> MaskedAccuracyReport:
    """Accuracy under all features, the mask, and its complement.

    The per-class masks are collapsed into one blocking vector by union
    (a feature stays open if any class selects it), since inference blocks
    feature paths before all logits are computed. Argmax ties go to the
    lower class index; unlabeled samples are excluded."""
    manifest = ar.read_manifest(archive_path)
    if manifest.head is None or manifest.head.kind == "external":
        raise EvalError("archive head is not replayable")
    head = manifest.head
    union = mask.union()
    conditions = {
        "all": np.ones(manifest.num_features),
        "principal": union,
        "nonprincipal": 1.0 - union,
    }
    preds = {name: [] for name in conditions}
    labels = []
    for rec in ar.iter_samples(archive_path):
        if rec.true_class < 0:
            continue
        labels.append(rec.true_class)
        for name, m in conditions.items():
            logits = replay_logits(head, rec.features, m)
            preds[name].append(int(np.argmax(logits)))  # first max wins ties
    if not labels:
        raise EvalError("archive has no labeled samples")
    labels = np.asarray(labels)
    acc = {name: float((np.asarray(p) == labels).mean()) for name, p in preds.items()}
    return MaskedAccuracyReport(
        accuracy_all=acc["all"],
        accuracy_principal=acc["principal"],
        accuracy_nonprincipal=acc["nonprincipal"],
        n=len(labels),
        mask_provenance=mask.rule,
        predictions=preds,
    )


def emit_mask_jobs(
    cams: Iterable[cp.CamResult],
    archive_path,
    out_dir,
    threshold: float = 0.0,
) -> dict:
    """Write per-sample input masks for the confidence increase/drop metric.

    Each CAM is resized to the sample's input size, rectified and min-max
    normalized to [0, 1] (soft masking); mask values below the optional
    threshold are zeroed. Returns the job manifest, also written to
    jobs/manifest.json."""
    root = Path(out_dir) / "jobs"
    root.mkdir(parents=True, exist_ok=True)
    by_id = {}
    for rec in ar.iter_samples(archive_path):
        by_id[rec.sample_id] = rec.input.shape if rec.input is not None else None
    entries = []
    for cam in cams:
        shape = by_id.get(cam.sample_id)
        if shape is None:
            raise EvalError(f"sample {cam.sample_id} has no stored input")
        _, h_in, w_in = shape
        resized = cp.resize_spatial(cam.map, h_in, w_in)
        rect = np.maximum(resized, 0.0)
        hi, lo = rect.max(), rect.min()
        norm = (rect - lo) / (hi - lo) if hi > lo else np.zeros_like(rect)
        if threshold > 0:
            norm = np.where(norm < threshold, 0.0, norm)
        mask_path = root / f"{cam.sample_id:08d}.maskf32"
        cp.write_cam(
            cp.CamResult(
                sample_id=cam.sample_id,
                class_id=cam.class_id,
                scheme=cam.scheme,
                scale_mode="raw",
                map=norm,
                sum=float(norm.sum()),
            ),
            mask_path,
        )
        entries.append(
            {"sample_id": cam.sample_id, "class_id": cam.class_id, "mask": mask_path.name}
        )
    manifest = {"jobs": entries, "threshold": threshold}
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(root / "manifest.json")
    return manifest


@dataclass
class IncDropReport:
    average_increase: float  # % of samples whose confidence rose
    average_drop: float  # mean of max(0, Y - O) / Y * 100
    n: int

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "average_increase": self.average_increase,
            "average_drop": self.average_drop,
        }


def collect_inc_drop(pairs: Iterable[tuple]) -> IncDropReport:
    """pairs of (Y, O): original and masked-input confidences per sample."""
    drops = []
    increases = []
    for y, o in pairs:
        if y <= 0:
            raise EvalError(f"original confidence must be positive, got {y}")
        drops.append(max(0.0, y - o) / y)
        increases.append(1.0 if o > y else 0.0)
    n = len(drops)
    if n == 0:
        raise EvalError("no confidence pairs supplied")
    return IncDropReport(
        average_increase=100.0 * sum(increases) / n,
        average_drop=100.0 * sum(drops) / n,
        n=n,
    )


def load_job_results(path) -> list:
    """results.json: array of {sample_id, Y, O} -> list of (Y, O) pairs."""
    doc = json.loads(Path(path).read_text())
    return [(float(e["Y"]), float(e["O"])) for e in doc]
