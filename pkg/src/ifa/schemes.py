"""CAM weight schemes: per-feature weighted maps W^f from features and gradients.

Weighted maps keep their sign; rectification (if any) happens later in the
scaling stage, so negative contributions survive into the analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMES = ("grad_cam", "grad_cam_pp", "xgrad_cam", "pixelwise_grad")

# CLI spellings
_SCHEME_ALIASES = {
    "grad-cam": "grad_cam",
    "grad-cam++": "grad_cam_pp",
    "xgrad-cam": "xgrad_cam",
    "pixelwise-grad": "pixelwise_grad",
}

XGRAD_EPS = 1e-12  # dead (all-zero) ReLU channels get weight 0


class SchemeError(ValueError):
    pass


def parse_scheme(name: str) -> str:
    """Accepts both CLI spellings (grad-cam++) and internal names."""
    key = _SCHEME_ALIASES.get(name, name)
    if key not in SCHEMES:
        raise SchemeError(f"unknown scheme {name!r}; expected one of {sorted(_SCHEME_ALIASES)}")
    return key


def scheme_cli_name(scheme: str) -> str:
    for cli, internal in _SCHEME_ALIASES.items():
        if internal == scheme:
            return cli
    raise SchemeError(f"unknown scheme {scheme!r}")


@dataclass
class WeightedFeatureStack:
    sample_id: int
    class_id: int
    scheme: str
    maps: np.ndarray  # (F, S), same layout as the source features


def weighted_features(
    scheme: str, features: np.ndarray, grads: np.ndarray, sample_id: int = -1, class_id: int = -1
) -> WeightedFeatureStack:
    """Compute W^f for one sample and class.

    features/grads are (F, S) with S the flattened spatial size. grad_cam,
    grad_cam_pp and xgrad_cam pool the gradients into one scalar weight per
    feature; pixelwise_grad multiplies elementwise without pooling.
    """
    scheme = parse_scheme(scheme)
    features = np.asarray(features, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if features.shape != grads.shape or features.ndim != 2:
        raise SchemeError(
            f"features {features.shape} and grads {grads.shape} must be equal (F, S) shapes"
        )

    if scheme == "grad_cam":
        w = grads.mean(axis=1)
        maps = w[:, None] * features
    elif scheme == "xgrad_cam":
        denom = features.sum(axis=1)
        num = (grads * features).sum(axis=1)
        w = np.where(np.abs(denom) > XGRAD_EPS, num / np.where(denom == 0, 1.0, denom), 0.0)
        maps = w[:, None] * features
    elif scheme == "pixelwise_grad":
        maps = grads * features
    else:  # grad_cam_pp
        g2 = grads * grads
        g3 = g2 * grads
        denom = 2.0 * g2 + (features * g3).sum(axis=1, keepdims=True)
        alpha = np.divide(g2, denom, out=np.zeros_like(g2), where=denom != 0)
        w = (alpha * np.maximum(grads, 0.0)).sum(axis=1)
        maps = w[:, None] * features

    return WeightedFeatureStack(sample_id=sample_id, class_id=class_id, scheme=scheme, maps=maps)
