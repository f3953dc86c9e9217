"""CAM composition: masked feature sum, spatial resize, intensity scaling.

Pipeline order is fixed: mask -> sum over features -> resize -> scale.
The common scale sigma(x) = tanh(alpha*x + beta) is anchored so that
dataset percentiles map to sigma(P10) = 0.1 and sigma(P90) = 0.9; unlike
min-max clipping it never saturates at finite inputs and keeps the sign
of negative contributions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import archive as ar
from . import schemes as sc
from .distribution import DistributionStats

CAM_MAGIC = b"ICM1"
SCALE_MODES = ("raw", "individual", "common")
_SCALE_MODE_CODES = {"raw": 0, "individual": 1, "common": 2}
_SCALE_MODE_NAMES = {v: k for k, v in _SCALE_MODE_CODES.items()}

_ATANH_09 = math.atanh(0.9)
_ATANH_01 = math.atanh(0.1)


class CamError(ValueError):
    pass


class DegeneratePercentilesError(CamError):
    pass


@dataclass
class SigmaParams:
    p10: float
    p90: float
    alpha: float
    beta: float


def sigma_from_percentiles(p10: float, p90: float) -> SigmaParams:
    """Solve tanh(alpha*P10 + beta) = 0.1 and tanh(alpha*P90 + beta) = 0.9."""
    if not p90 > p10:
        raise DegeneratePercentilesError(f"P90 ({p90}) must exceed P10 ({p10})")
    alpha = (_ATANH_09 - _ATANH_01) / (p90 - p10)
    beta = (p10 * _ATANH_09 - p90 * _ATANH_01) / (p10 - p90)
    return SigmaParams(p10=p10, p90=p90, alpha=alpha, beta=beta)


def apply_sigma(values: np.ndarray, params: SigmaParams) -> np.ndarray:
    """Elementwise tanh(alpha*x + beta); strictly increasing, range (-1, 1)."""
    return np.tanh(params.alpha * np.asarray(values, dtype=np.float64) + params.beta)


def compose_raw(stack: sc.WeightedFeatureStack, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Raw map sum_f m_f * W^f, flattened spatial layout. mask defaults to all-ones."""
    maps = stack.maps
    if mask is None:
        return maps.sum(axis=0)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (maps.shape[0],):
        raise CamError(f"mask length {mask.shape} does not match F={maps.shape[0]}")
    return (mask[:, None] * maps).sum(axis=0)


def resize_spatial(map2d: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers.

    Source coordinate for output index i is (i + 0.5) * H / H' - 0.5,
    clamped to [0, H-1]; output values stay within [min, max] of the input.
    """
    map2d = np.asarray(map2d, dtype=np.float64)
    if map2d.ndim != 2:
        raise CamError(f"resize_spatial expects a 2D map, got rank {map2d.ndim}")
    h, w = map2d.shape
    if (h, w) == (target_h, target_w):
        return map2d.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ry0, ry1, fy = axis_coords(h, target_h)
    rx0, rx1, fx = axis_coords(w, target_w)
    top = map2d[ry0][:, rx0] * (1 - fx) + map2d[ry0][:, rx1] * fx
    bot = map2d[ry1][:, rx0] * (1 - fx) + map2d[ry1][:, rx1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def scale_individual(map_values: np.ndarray) -> np.ndarray:
    """Classic per-image scale: ReLU then min-max; constant result maps to zeros."""
    y = np.maximum(np.asarray(map_values, dtype=np.float64), 0.0)
    lo, hi = y.min(), y.max()
    if hi == lo:
        return np.zeros_like(y)
    return (y - lo) / (hi - lo)


@dataclass
class CamResult:
    sample_id: int
    class_id: int
    scheme: str
    scale_mode: str
    map: np.ndarray  # (H', W')
    sum: float
    mask_provenance: Optional[dict] = None

    @property
    def label(self) -> str:
        """Naming convention: S- for common scale, FS- prefix when masked."""
        base = sc.scheme_cli_name(self.scheme)
        name = f"S-{base}" if self.scale_mode == "common" else base
        if self.mask_provenance is not None:
            name = f"FS-{name}"
        return name


def generate(
    archive_path,
    scheme: str,
    class_id,
    scale_mode: str,
    stats: Optional[DistributionStats] = None,
    mask: Optional[np.ndarray] = None,
    target_dims: Optional[tuple] = None,
    mask_provenance: Optional[dict] = None,
) -> Iterator[CamResult]:
    """Generate CAMs for every sample carrying gradients for the class.

    class_id is an integer or "gt" (per-true-class). Common mode needs
    stats holding P10/P90; raw mode skips scaling so the decomposition
    identity (map sum = logit - bias for gap_linear heads) holds exactly.
    """
    if scale_mode not in SCALE_MODES:
        raise CamError(f"unknown scale mode {scale_mode!r}")
    scheme = sc.parse_scheme(scheme)
    params = None
    if scale_mode == "common":
        if stats is None:
            raise CamError("common scale mode requires distribution stats (P10/P90)")
        params = sigma_from_percentiles(stats.p10, stats.p90)
    manifest = ar.read_manifest(archive_path)
    for rec in ar.iter_samples(archive_path):
        c = rec.true_class if class_id == "gt" else class_id
        if c is None or c < 0 or c not in rec.grads:
            continue
        stack = sc.weighted_features(scheme, rec.features, rec.grads[c], rec.sample_id, c)
        raw = compose_raw(stack, mask)
        if manifest.spatial_rank == 2:
            raw2d = raw.reshape(rec.dims)
            if target_dims is not None:
                raw2d = resize_spatial(raw2d, target_dims[0], target_dims[1])
        else:
            if target_dims is not None:
                raise CamError("spatial resizing is only supported for 2D archives")
            raw2d = raw.reshape(rec.dims)
        if scale_mode == "raw":
            out = raw2d
        elif scale_mode == "individual":
            out = scale_individual(raw2d)
        else:
            out = apply_sigma(raw2d, params)
        yield CamResult(
            sample_id=rec.sample_id,
            class_id=c,
            scheme=scheme,
            scale_mode=scale_mode,
            map=out,
            sum=float(out.sum()),
            mask_provenance=mask_provenance,
        )


def write_cam(result: CamResult, path):
    """Binary CAM file: magic ICM1, sample_id u64, class i32, mode u8, dims, f32 payload."""
    m = np.asarray(result.map, dtype="<f4")
    if m.ndim != 2:
        raise CamError("only 2D CAMs are serialized")
    payload = b"".join(
        [
            CAM_MAGIC,
            struct.pack(
                "<QiB", result.sample_id, result.class_id, _SCALE_MODE_CODES[result.scale_mode]
            ),
            struct.pack("<II", *m.shape),
            m.tobytes(),
        ]
    )
    Path(path).write_bytes(payload)


def read_cam(path) -> CamResult:
    data = Path(path).read_bytes()
    if data[:4] != CAM_MAGIC:
        raise CamError(f"bad CAM magic in {path}")
    sample_id, class_id, mode_code = struct.unpack_from("<QiB", data, 4)
    h, w = struct.unpack_from("<II", data, 4 + 13)
    offset = 4 + 13 + 8
    m = np.frombuffer(data, dtype="<f4", count=h * w, offset=offset).reshape(h, w).copy()
    return CamResult(
        sample_id=sample_id,
        class_id=class_id,
        scheme="grad_cam",  # scheme lives in the index, not the binary record
        scale_mode=_SCALE_MODE_NAMES[mode_code],
        map=m.astype(np.float64),
        sum=float(m.astype(np.float64).sum()),
    )


def write_cam_dir(results, out_dir, scheme: str, scale_mode: str) -> Path:
    """Write one .camf32 per sample plus an index.json with per-sample sums."""
    out = Path(out_dir)
    (out / "cams").mkdir(parents=True, exist_ok=True)
    index = {"scheme": scheme, "scale_mode": scale_mode, "samples": []}
    for res in results:
        write_cam(res, out / "cams" / f"{res.sample_id:08d}.camf32")
        index["samples"].append(
            {
                "sample_id": res.sample_id,
                "class_id": res.class_id,
                "sum": res.sum,
                "label": res.label,
            }
        )
    tmp = out / "index.json.tmp"
    tmp.write_text(json.dumps(index, indent=2))
    tmp.replace(out / "index.json")
    return out
