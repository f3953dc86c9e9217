"""PNG rendering of CAMs and overlays with bit-specified colormaps.

Common-scale maps are signed, so they use a diverging blue-white-red map
(negative contributions stay visible); individual-scale maps use a
black-to-red sequential map. Channel quantization is round-half-up so
goldens are byte-identical across runs.
"""

from __future__ import annotations

import io
from typing import Optional

import numpy as np
from PIL import Image

from . import campipe as cp


class RenderError(ValueError):
    pass


def _quantize(channels: np.ndarray) -> np.ndarray:
    return np.floor(channels + 0.5).clip(0, 255).astype(np.uint8)


def diverging_rgb(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> float RGB: -1 blue, 0 white, +1 red, linear per channel."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    rgb = np.empty(v.shape + (3,))
    neg = v < 0
    t = np.abs(v)
    # toward red for positive values, toward blue for negative
    rgb[..., 0] = np.where(neg, 255.0 * (1.0 - t), 255.0)
    rgb[..., 1] = 255.0 * (1.0 - t)
    rgb[..., 2] = np.where(neg, 255.0, 255.0 * (1.0 - t))
    return rgb


def sequential_rgb(values: np.ndarray) -> np.ndarray:
    """[0, 1] -> float RGB: 0 black, 1 red."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.zeros(v.shape + (3,))
    rgb[..., 0] = 255.0 * v
    return rgb


def colormap_for_mode(scale_mode: str):
    return diverging_rgb if scale_mode == "common" else sequential_rgb


def _encode_png(rgb_float: np.ndarray) -> bytes:
    img = Image.fromarray(_quantize(rgb_float), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def render_cam(cam: cp.CamResult, colormap=None) -> bytes:
    """8-bit RGB PNG, one pixel per map cell."""
    if cam.map.ndim != 2:
        raise RenderError(f"can only render 2D maps, got rank {cam.map.ndim}")
    cmap = colormap or colormap_for_mode(cam.scale_mode)
    return _encode_png(cmap(cam.map))


def overlay(cam: cp.CamResult, input_image: np.ndarray, alpha: float, colormap=None) -> bytes:
    """Blend the colormapped CAM over the grayscale input.

    input_image is (channels, H, W) in [0, 1]; the CAM is resized to the
    input size first. alpha=0 reproduces the grayscale input, alpha=1 the
    pure CAM rendering."""
    if input_image is None:
        raise RenderError("sample has no stored input image")
    if not 0.0 <= alpha <= 1.0:
        raise RenderError(f"alpha must be in [0, 1], got {alpha}")
    input_image = np.asarray(input_image, dtype=np.float64)
    _, h_in, w_in = input_image.shape
    resized = cp.resize_spatial(cam.map, h_in, w_in)
    cmap = colormap or colormap_for_mode(cam.scale_mode)
    cam_rgb = cmap(resized)
    gray = input_image.mean(axis=0) * 255.0
    blended = alpha * cam_rgb + (1.0 - alpha) * gray[..., None]
    return _encode_png(blended)


def output_name(sample_id: int, class_id: int, scheme: str, scale_mode: str) -> str:
    return f"{sample_id}_{class_id}_{scheme}_{scale_mode}.png"
