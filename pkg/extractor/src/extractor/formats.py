"""Standalone readers/writers for the analysis side's file formats.

Deliberately framework-free and independent of the analysis package: the
adapter's only contract with it is these bytes.

Archive: a directory with manifest.json and samples/<id, 8 digits>.rec.
Record layout (all little-endian, tensor payloads float32):
  magic "IFR1", version u32, sample_id u64, true_class i32,
  flags u32 (bit 0 = input present), C u32, logits f32[C],
  rank u32, dims u32[rank], F u32, features f32[F * prod(dims)],
  n_grads u32, then per class (class_id i32, grads f32[F * prod(dims)]),
  then optionally (channels u32, H u32, W u32, input f32[...]).

Mask files (.maskf32) share the CAM layout:
  magic "ICM1", sample_id u64, class i32, scale-mode u8, H u32, W u32, f32[H*W].
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

ARCHIVE_MAGIC = b"IFR1"
ARCHIVE_VERSION = 1
MASK_MAGIC = b"ICM1"


class FormatError(Exception):
    pass


def encode_record(
    sample_id: int,
    true_class: int,
    logits: np.ndarray,
    dims: tuple,
    features: np.ndarray,
    grads: dict,
    input_image: np.ndarray = None,
) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack("<IQi", ARCHIVE_VERSION, sample_id, true_class)]
    flags = 1 if input_image is not None else 0
    logits = np.asarray(logits, dtype="<f4")
    parts.append(struct.pack("<II", flags, logits.shape[0]))
    parts.append(logits.tobytes())
    parts.append(struct.pack("<I", len(dims)))
    parts.append(struct.pack(f"<{len(dims)}I", *dims))
    feats = np.asarray(features, dtype="<f4")
    parts.append(struct.pack("<I", feats.shape[0]))
    parts.append(feats.tobytes())
    parts.append(struct.pack("<I", len(grads)))
    for c in sorted(grads):
        parts.append(struct.pack("<i", c))
        parts.append(np.asarray(grads[c], dtype="<f4").tobytes())
    if input_image is not None:
        inp = np.asarray(input_image, dtype="<f4")
        parts.append(struct.pack("<III", *inp.shape))
        parts.append(inp.tobytes())
    return b"".join(parts)


def write_manifest(root: Path, doc: dict):
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2))
    tmp.replace(root / "manifest.json")


def record_path(root: Path, sample_id: int) -> Path:
    return root / "samples" / f"{sample_id:08d}.rec"


def read_input(path) -> np.ndarray:
    """Stored input image (channels, H, W) of one record, or None."""
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"bad record magic in {path}")
    pos = 4 + struct.calcsize("<IQi")
    flags, num_classes = struct.unpack_from("<II", data, pos)
    pos += 8 + 4 * num_classes
    if not flags & 1:
        return None
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    spatial = int(np.prod(dims))
    (num_features,) = struct.unpack_from("<I", data, pos)
    pos += 4 + 4 * num_features * spatial
    (n_grads,) = struct.unpack_from("<I", data, pos)
    pos += 4
    pos += n_grads * (4 + 4 * num_features * spatial)
    channels, h, w = struct.unpack_from("<III", data, pos)
    pos += 12
    return (
        np.frombuffer(data, dtype="<f4", count=channels * h * w, offset=pos)
        .reshape(channels, h, w)
        .astype(np.float64)
    )


def read_mask(path) -> tuple:
    """(sample_id, class_id, mask (H, W) float64) from a .maskf32 file."""
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise FormatError(f"bad mask magic in {path}")
    sample_id, class_id, _mode = struct.unpack_from("<QiB", data, 4)
    h, w = struct.unpack_from("<II", data, 17)
    mask = np.frombuffer(data, dtype="<f4", count=h * w, offset=25).reshape(h, w)
    return sample_id, class_id, mask.astype(np.float64)


def write_results(path, entries: list):
    """results.json: [{sample_id, Y, O}, ...] consumed by the collect step."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(json.dumps(entries, indent=2))
    tmp.replace(p)
