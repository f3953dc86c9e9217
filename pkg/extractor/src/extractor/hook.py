"""Archive dumping: hook a layer of a torch model and export features,
per-class gradients, logits, inputs and (when replayable) the head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import torch

from . import formats


class ExtractorError(Exception):
    pass


class MissingLayerError(ExtractorError):
    pass


class ShapeDriftError(ExtractorError):
    pass


@dataclass
class HookSpec:
    """Where and what to extract.

    layer is the dotted module name producing the target activation
    (rank 3 or 4 per batch: (B, F, S) or (B, F, H, W)). classes is
    "true-class" (default; one gradient per record, enough for the
    single-pass importance matrix) or an explicit sequence of class ids.
    """

    layer: str
    classes: Union[str, Sequence[int]] = "true-class"
    batch_size: int = 32
    device: str = "cpu"

    def classes_for(self, label: int) -> tuple:
        if self.classes == "true-class":
            return (int(label),)
        return tuple(int(c) for c in self.classes)


def _resolve_layer(model: torch.nn.Module, name: str) -> torch.nn.Module:
    module = model
    for part in name.split("."):
        children = dict(module.named_children())
        if part not in children:
            raise MissingLayerError(
                f"layer {name!r} not found; available at this level: {sorted(children)}"
            )
        module = children[part]
    return module


def _head_spec_json(head: Optional[torch.nn.Linear]) -> dict:
    """Export a global-average-pool + single affine classifier as gap_linear."""
    if head is None:
        return {"kind": "external"}
    if not isinstance(head, torch.nn.Linear):
        raise ExtractorError(f"replayable head must be a Linear module, got {type(head).__name__}")
    return {
        "kind": "gap_linear",
        "weights": head.weight.detach().cpu().double().numpy().tolist(),
        "bias": (
            head.bias.detach().cpu().double().numpy().tolist()
            if head.bias is not None
            else [0.0] * head.weight.shape[0]
        ),
    }


def dump(
    model: torch.nn.Module,
    dataset: Iterable,
    hook: HookSpec,
    out_path,
    *,
    archive_id: str = "extracted",
    model_id: str = "torch-model",
    dataset_split: str = "other",
    class_names: Optional[Sequence[str]] = None,
    gap_head: Optional[torch.nn.Linear] = None,
    store_inputs: bool = True,
) -> Path:
    """Write one record per (input, label) pair; returns the archive path.

    Inputs are stored as given (pre-normalization, expected in [0, 1]) so
    masked-input jobs can re-normalize identically. Gradients come from one
    scalar backward pass per requested class.
    """
    device = torch.device(hook.device)
    model = model.to(device).eval()
    layer = _resolve_layer(model, hook.layer)

    captured = {}

    def grab(_module, _inputs, output):
        captured["activation"] = output

    handle = layer.register_forward_hook(grab)
    root = Path(out_path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    num_features = num_classes = None
    dims = None
    count = 0
    try:
        for image, label in dataset:
            x = torch.as_tensor(np.asarray(image), dtype=torch.float32, device=device)
            if x.ndim != 3:
                raise ExtractorError(f"expected (channels, H, W) inputs, got shape {tuple(x.shape)}")
            captured.clear()
            logits = model(x[None])
            if "activation" not in captured:
                raise MissingLayerError(f"layer {hook.layer!r} did not fire during forward")
            act = captured["activation"]
            if act.ndim not in (3, 4):
                raise ExtractorError(
                    f"target activation must be rank 3 or 4, got rank {act.ndim}"
                )
            if logits.ndim != 2 or logits.shape[0] != 1:
                raise ExtractorError(f"model must return (1, C) logits, got {tuple(logits.shape)}")
            sample_dims = tuple(act.shape[2:]) if act.ndim == 4 else (act.shape[2],)
            f_count = act.shape[1]
            c_count = logits.shape[1]
            if num_features is None:
                num_features, num_classes, dims = f_count, c_count, sample_dims
            elif (f_count, c_count, sample_dims) != (num_features, num_classes, dims):
                raise ShapeDriftError(
                    f"sample {count}: activation/logit shapes drifted from "
                    f"({num_features}, {num_classes}, {dims})"
                )
            grads = {}
            for c in hook.classes_for(label):
                if not 0 <= c < c_count:
                    raise ExtractorError(f"class {c} out of range [0, {c_count})")
                (g,) = torch.autograd.grad(logits[0, c], act, retain_graph=True)
                grads[c] = g[0].detach().cpu().double().numpy().reshape(f_count, -1)
            formats.record_path(root, count).write_bytes(
                formats.encode_record(
                    sample_id=count,
                    true_class=int(label),
                    logits=logits[0].detach().cpu().numpy(),
                    dims=dims,
                    features=act[0].detach().cpu().numpy().reshape(f_count, -1),
                    grads=grads,
                    input_image=x.cpu().numpy() if store_inputs else None,
                )
            )
            count += 1
    finally:
        handle.remove()
    if count == 0:
        raise ExtractorError("dataset yielded no samples")
    names = list(class_names) if class_names else [f"class_{i}" for i in range(num_classes)]
    formats.write_manifest(
        root,
        {
            "archive_id": archive_id,
            "model_id": model_id,
            "layer_id": hook.layer,
            "num_features": int(num_features),
            "num_classes": int(num_classes),
            "class_names": names,
            "spatial_rank": len(dims),
            "dataset_split": dataset_split,
            "sample_count": count,
            "head": _head_spec_json(gap_head),
        },
    )
    return root
