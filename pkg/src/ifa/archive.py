"""Binary feature-archive container: manifest + one record file per sample.

An archive is a directory holding ``manifest.json`` and
``samples/<sample_id, zero padded to 8 digits>.rec``. All tensor payloads
are little-endian float32, feature-major then row-major spatial, so
archives interchange bit-exactly across languages.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

MAGIC = b"IFR1"
FORMAT_VERSION = 1

DATASET_SPLITS = ("train", "validation", "test", "other")
HEAD_KINDS = ("gap_linear", "flatten_linear", "external")


class ArchiveError(Exception):
    """Base class for archive format and validation errors."""


class BadMagicError(ArchiveError):
    pass


class BadVersionError(ArchiveError):
    pass


class ManifestError(ArchiveError):
    pass


class ShapeMismatchError(ArchiveError):
    pass


class DuplicateSampleError(ArchiveError):
    pass


class CorruptRecordError(ArchiveError):
    def __init__(self, sample_id, message):
        super().__init__(f"sample {sample_id}: {message}")
        self.sample_id = sample_id


@dataclass
class HeadSpec:
    """Classifier head description enabling logit replay without a framework.

    gap_linear: logits = weights @ spatial_mean(features) + bias, weights C x F.
    flatten_linear: logits = weights @ flatten(features) + bias,
    weights C x (F * prod(spatial dims)). kind="external" carries no weights.
    """

    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ManifestError(f"unknown head kind {self.kind!r}")
        if self.kind == "external":
            if self.weights is not None or self.bias is not None:
                raise ManifestError("external head carries no weights")
        else:
            if self.weights is None or self.bias is None:
                raise ManifestError(f"{self.kind} head requires weights and bias")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.weights.ndim != 2 or self.bias.ndim != 1:
                raise ManifestError("head weights must be a matrix, bias a vector")
            if self.weights.shape[0] != self.bias.shape[0]:
                raise ManifestError("head weights/bias class dimension mismatch")

    def to_json(self) -> dict:
        doc = {"kind": self.kind}
        if self.kind != "external":
            doc["weights"] = self.weights.tolist()
            doc["bias"] = self.bias.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "HeadSpec":
        kind = doc.get("kind")
        if kind == "external":
            return cls(kind="external")
        return cls(kind=kind, weights=doc.get("weights"), bias=doc.get("bias"))


@dataclass
class Manifest:
    archive_id: str
    model_id: str
    layer_id: str
    num_features: int
    num_classes: int
    class_names: list
    spatial_rank: int
    dataset_split: str
    head: Optional[HeadSpec] = None
    sample_count: int = 0

    def validate(self):
        if self.num_features < 1:
            raise ManifestError(f"num_features must be >= 1, got {self.num_features}")
        if self.num_classes < 2:
            raise ManifestError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ManifestError(
                f"class_names has {len(self.class_names)} entries, expected {self.num_classes}"
            )
        if self.spatial_rank not in (2, 3):
            raise ManifestError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.dataset_split not in DATASET_SPLITS:
            raise ManifestError(f"unknown dataset_split {self.dataset_split!r}")
        if self.sample_count < 0:
            raise ManifestError("sample_count must be non-negative")

    def to_json(self) -> dict:
        doc = {
            "archive_id": self.archive_id,
            "model_id": self.model_id,
            "layer_id": self.layer_id,
            "num_features": self.num_features,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "spatial_rank": self.spatial_rank,
            "dataset_split": self.dataset_split,
            "sample_count": self.sample_count,
        }
        if self.head is not None:
            doc["head"] = self.head.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Manifest":
        try:
            head = HeadSpec.from_json(doc["head"]) if doc.get("head") else None
            m = cls(
                archive_id=doc["archive_id"],
                model_id=doc["model_id"],
                layer_id=doc["layer_id"],
                num_features=int(doc["num_features"]),
                num_classes=int(doc["num_classes"]),
                class_names=list(doc["class_names"]),
                spatial_rank=int(doc["spatial_rank"]),
                dataset_split=doc["dataset_split"],
                head=head,
                sample_count=int(doc.get("sample_count", 0)),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest missing field {exc}") from exc
        m.validate()
        if m.head is not None and m.head.kind == "gap_linear":
            if m.head.weights.shape != (m.num_classes, m.num_features):
                raise ManifestError(
                    f"gap_linear head weights {m.head.weights.shape} do not match "
                    f"(C={m.num_classes}, F={m.num_features})"
                )
        return m


@dataclass
class SampleRecord:
    sample_id: int
    true_class: int  # -1 = unknown
    logits: np.ndarray  # (C,)
    dims: tuple  # spatial dims (H, W[, D])
    features: np.ndarray  # (F, prod(dims))
    grads: dict = field(default_factory=dict)  # class id -> (F, prod(dims))
    input: Optional[np.ndarray] = None  # (channels, H_in, W_in)

    def feature_maps(self) -> np.ndarray:
        """Features reshaped to (F, *dims)."""
        return self.features.reshape((self.features.shape[0],) + tuple(self.dims))

    def grad_maps(self, class_id: int) -> np.ndarray:
        g = self.grads[class_id]
        return g.reshape((g.shape[0],) + tuple(self.dims))


def _check_record(manifest: Manifest, rec: SampleRecord):
    spatial = int(np.prod(rec.dims))
    if len(rec.dims) != manifest.spatial_rank:
        raise ShapeMismatchError(
            f"sample {rec.sample_id}: rank {len(rec.dims)} != manifest rank {manifest.spatial_rank}"
        )
    if rec.features.shape != (manifest.num_features, spatial):
        raise ShapeMismatchError(
            f"sample {rec.sample_id}: features shape {rec.features.shape} != "
            f"({manifest.num_features}, {spatial})"
        )
    if rec.logits.shape != (manifest.num_classes,):
        raise ShapeMismatchError(
            f"sample {rec.sample_id}: logits length {rec.logits.shape[0]} != C={manifest.num_classes}"
        )
    for c, g in rec.grads.items():
        if g.shape != rec.features.shape:
            raise ShapeMismatchError(
                f"sample {rec.sample_id}: grads for class {c} shape {g.shape} != "
                f"features shape {rec.features.shape}"
            )


def _record_path(root: Path, sample_id: int) -> Path:
    return root / "samples" / f"{sample_id:08d}.rec"


def _encode_record(rec: SampleRecord) -> bytes:
    parts = [MAGIC, struct.pack("<IQi", FORMAT_VERSION, rec.sample_id, rec.true_class)]
    flags = 1 if rec.input is not None else 0
    logits = np.asarray(rec.logits, dtype="<f4")
    parts.append(struct.pack("<II", flags, logits.shape[0]))
    parts.append(logits.tobytes())
    parts.append(struct.pack("<I", len(rec.dims)))
    parts.append(struct.pack(f"<{len(rec.dims)}I", *rec.dims))
    feats = np.asarray(rec.features, dtype="<f4")
    parts.append(struct.pack("<I", feats.shape[0]))
    parts.append(feats.tobytes())
    parts.append(struct.pack("<I", len(rec.grads)))
    for c in sorted(rec.grads):
        parts.append(struct.pack("<i", c))
        parts.append(np.asarray(rec.grads[c], dtype="<f4").tobytes())
    if rec.input is not None:
        inp = np.asarray(rec.input, dtype="<f4")
        parts.append(struct.pack("<III", *inp.shape))
        parts.append(inp.tobytes())
    return b"".join(parts)


class _RecordReader:
    """Cursor over one .rec file's bytes; raises CorruptRecordError on truncation."""

    def __init__(self, data: bytes, sample_id_hint):
        self.data = data
        self.pos = 0
        self.sid = sample_id_hint

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptRecordError(self.sid, "truncated record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").copy()


def _decode_record(data: bytes, sample_id_hint) -> SampleRecord:
    r = _RecordReader(data, sample_id_hint)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"sample {sample_id_hint}: bad record magic")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise BadVersionError(f"unsupported record version {version}")
    sample_id, true_class = r.unpack("<Qi")
    r.sid = sample_id
    flags, num_classes = r.unpack("<II")
    logits = r.f32(num_classes)
    (rank,) = r.unpack("<I")
    dims = r.unpack(f"<{rank}I")
    spatial = int(np.prod(dims))
    (num_features,) = r.unpack("<I")
    features = r.f32(num_features * spatial).reshape(num_features, spatial)
    (n_grad,) = r.unpack("<I")
    grads = {}
    for _ in range(n_grad):
        (c,) = r.unpack("<i")
        grads[c] = r.f32(num_features * spatial).reshape(num_features, spatial)
    inp = None
    if flags & 1:
        channels, h_in, w_in = r.unpack("<III")
        inp = r.f32(channels * h_in * w_in).reshape(channels, h_in, w_in)
    return SampleRecord(
        sample_id=sample_id,
        true_class=true_class,
        logits=logits,
        dims=tuple(dims),
        features=features,
        grads=grads,
        input=inp,
    )


def write_archive(manifest: Manifest, records: Iterable[SampleRecord], path) -> Path:
    """Write an archive directory; returns its path.

    The manifest's sample_count is replaced by the number of records written.
    """
    manifest.validate()
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    seen = set()
    count = 0
    for rec in records:
        if rec.sample_id in seen:
            raise DuplicateSampleError(f"duplicate sample_id {rec.sample_id}")
        _check_record(manifest, rec)
        seen.add(rec.sample_id)
        _record_path(root, rec.sample_id).write_bytes(_encode_record(rec))
        count += 1
    manifest.sample_count = count
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_json(), indent=2))
    tmp.replace(root / "manifest.json")
    return root


def read_manifest(path) -> Manifest:
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.exists():
        raise ManifestError(f"no manifest.json under {root}")
    try:
        doc = json.loads(mf.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest JSON: {exc}") from exc
    return Manifest.from_json(doc)


def read_record(path, sample_id_hint=None) -> SampleRecord:
    return _decode_record(Path(path).read_bytes(), sample_id_hint)


def _sample_ids(root: Path) -> list:
    ids = []
    sdir = root / "samples"
    if sdir.exists():
        for p in sdir.iterdir():
            if p.suffix == ".rec":
                try:
                    ids.append(int(p.stem))
                except ValueError:
                    continue
    return sorted(ids)


def iter_samples(
    path,
    true_class: Optional[int] = None,
    id_range: Optional[tuple] = None,
) -> Iterator[SampleRecord]:
    """Yield records in ascending sample_id order.

    true_class filters by ground-truth label; id_range=(lo, hi) keeps
    lo <= sample_id < hi.
    """
    root = Path(path)
    for sid in _sample_ids(root):
        if id_range is not None and not (id_range[0] <= sid < id_range[1]):
            continue
        rec = read_record(_record_path(root, sid), sid)
        if true_class is not None and rec.true_class != true_class:
            continue
        yield rec


@dataclass
class Finding:
    sample_id: int
    check: str
    detail: str


@dataclass
class ValidationReport:
    findings: list
    sample_count: int
    grads_coverage: float  # fraction of samples with at least one grads entry

    @property
    def ok(self) -> bool:
        return not self.findings


def validate_archive(path) -> ValidationReport:
    """Check every sample for shape, finiteness and grads coverage.

    Problems are reported, not raised; the archive is never modified.
    """
    root = Path(path)
    manifest = read_manifest(root)
    findings = []
    n = 0
    n_with_grads = 0
    for sid in _sample_ids(root):
        n += 1
        try:
            rec = read_record(_record_path(root, sid), sid)
        except ArchiveError as exc:
            findings.append(Finding(sid, "decode", str(exc)))
            continue
        try:
            _check_record(manifest, rec)
        except ShapeMismatchError as exc:
            findings.append(Finding(sid, "shape", str(exc)))
        if not np.isfinite(rec.features).all():
            findings.append(Finding(sid, "finite", "non-finite value in features"))
        if not np.isfinite(rec.logits).all():
            findings.append(Finding(sid, "finite", "non-finite value in logits"))
        for c, g in rec.grads.items():
            if not np.isfinite(g).all():
                findings.append(Finding(sid, "finite", f"non-finite value in grads[{c}]"))
        if rec.input is not None and not np.isfinite(rec.input).all():
            findings.append(Finding(sid, "finite", "non-finite value in input"))
        if rec.true_class >= manifest.num_classes:
            findings.append(Finding(sid, "label", f"true_class {rec.true_class} out of range"))
        if rec.grads:
            n_with_grads += 1
    if n != manifest.sample_count:
        findings.append(
            Finding(-1, "count", f"manifest says {manifest.sample_count} samples, found {n}")
        )
    coverage = n_with_grads / n if n else 0.0
    return ValidationReport(findings=findings, sample_count=n, grads_coverage=coverage)
