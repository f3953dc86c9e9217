"""Masked-input job execution for the confidence increase/drop metric.

Each job masks a stored input with its emitted soft mask, runs the model on
both versions and records the softmax confidence pair (Y original,
O masked) in the results format the analysis side collects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .hook import ExtractorError


@dataclass
class JobSummary:
    n_done: int
    n_failed: int
    failures: list = field(default_factory=list)  # (sample_id, reason)


def run_jobs(
    model: torch.nn.Module,
    jobs_dir,
    archive_dir,
    out_path,
    device: str = "cpu",
) -> JobSummary:
    """Execute jobs/manifest.json against the archive's stored inputs.

    Per-sample model failures are recorded and skipped, not fatal; the
    summary lists them. Masks are elementwise in [0, 1] at input size and
    broadcast over channels."""
    jobs_root = Path(jobs_dir)
    manifest_path = jobs_root / "manifest.json"
    if not manifest_path.exists():
        raise ExtractorError(f"no manifest.json under {jobs_root}")
    manifest = json.loads(manifest_path.read_text())
    dev = torch.device(device)
    model = model.to(dev).eval()
    entries = []
    failures = []
    with torch.no_grad():
        for job in manifest["jobs"]:
            sid = job["sample_id"]
            class_id = job["class_id"]
            try:
                rec_file = formats.record_path(Path(archive_dir), sid)
                if not rec_file.exists():
                    raise ExtractorError(f"archive has no record for sample {sid}")
                image = formats.read_input(rec_file)
                if image is None:
                    raise ExtractorError(f"sample {sid} has no stored input")
                mask_sid, _mask_class, mask = formats.read_mask(jobs_root / job["mask"])
                if mask_sid != sid:
                    raise ExtractorError(
                        f"mask file {job['mask']} belongs to sample {mask_sid}, job says {sid}"
                    )
                if mask.shape != image.shape[1:]:
                    raise ExtractorError(
                        f"sample {sid}: mask {mask.shape} does not match input {image.shape[1:]}"
                    )
                x = torch.as_tensor(image, dtype=torch.float32, device=dev)
                masked = x * torch.as_tensor(mask, dtype=torch.float32, device=dev)
                probs_orig = torch.softmax(model(x[None])[0], dim=0)
                probs_masked = torch.softmax(model(masked[None])[0], dim=0)
                entries.append(
                    {
                        "sample_id": sid,
                        "Y": float(probs_orig[class_id]),
                        "O": float(probs_masked[class_id]),
                    }
                )
            except Exception as exc:  # per-job isolation: record and move on
                failures.append((sid, str(exc)))
    formats.write_results(out_path, entries)
    return JobSummary(n_done=len(entries), n_failed=len(failures), failures=failures)
