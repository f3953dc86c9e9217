"""Self-contained reference CNN on a synthetic two-class shapes task.

Two conv blocks (conv 3x3 same-padding -> ReLU -> 2x2 max-pool) take a
1x32x32 image to a 16x8x8 activation, which a gap_linear or
flatten_linear head maps to two logits. Everything (dataset generation,
init, training) is driven by an explicit 64-bit LCG so runs reproduce
exactly; the gradients needed by the CAM schemes are analytic.

LCG: state' = state * 6364136223846793005 + 1442695040888963407 (mod 2^64),
uniform double = (state' >> 11) / 2^53.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import archive as ar

MODEL_MAGIC = b"IRN1"
MODEL_VERSION = 1

_LCG_A = np.uint64(6364136223846793005)
_LCG_C = np.uint64(1442695040888963407)
_HEAD_CODES = {"gap_linear": 0, "flatten_linear": 1}
_HEAD_NAMES = {v: k for k, v in _HEAD_CODES.items()}

IMAGE_SIZE = 32
TARGET_FEATURES = 16
TARGET_SPATIAL = 8  # 32 -> pool -> 16 -> pool -> 8


class Lcg:
    """64-bit linear congruential generator with vectorized block draws."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed)

    def uniform_block(self, n: int) -> np.ndarray:
        """n consecutive uniforms in [0, 1), advancing the state by n."""
        # s_k = A[k]*s0 + C[k] with A[k] = a*A[k-1], C[k] = a*C[k-1] + c
        with np.errstate(over="ignore"):
            a_pow = np.empty(n, dtype=np.uint64)
            c_sum = np.empty(n, dtype=np.uint64)
            a_pow[0] = _LCG_A
            c_sum[0] = _LCG_C
            for k in range(1, n):
                a_pow[k] = _LCG_A * a_pow[k - 1]
                c_sum[k] = _LCG_A * c_sum[k - 1] + _LCG_C
            states = a_pow * self.state + c_sum
        self.state = states[-1]
        return (states >> np.uint64(11)).astype(np.float64) / float(1 << 53)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * float(self.uniform_block(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        u = self.uniform_block(n)
        return np.argsort(u, kind="stable")


@dataclass
class ShapesDataset:
    seed: int
    images: np.ndarray  # (n, 1, 32, 32) in [0, 1]
    labels: np.ndarray  # (n,), 0 = rectangle, 1 = disc

    def __len__(self):
        return self.images.shape[0]


def gen_dataset(seed: int, n: int) -> ShapesDataset:
    """Deterministic shapes dataset: alternating filled rectangles (label 0)
    and discs (label 1), randomized position, size 4-10 px, intensity
    0.6-1.0, additive uniform noise of amplitude 0.1, clamped to [0, 1]."""
    if n < 2:
        raise ValueError(f"dataset needs at least 2 samples, got {n}")
    rng = Lcg(seed)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.arange(n) % 2
    for i in range(n):
        draws = rng.uniform_block(4 + IMAGE_SIZE * IMAGE_SIZE)
        size = 4.0 + 6.0 * draws[0]
        cy = size + (IMAGE_SIZE - 1 - 2 * size) * draws[1]
        cx = size + (IMAGE_SIZE - 1 - 2 * size) * draws[2]
        intensity = 0.6 + 0.4 * draws[3]
        noise = 0.1 * draws[4:].reshape(IMAGE_SIZE, IMAGE_SIZE)
        if labels[i] == 0:
            inside = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
        else:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= size * size
        img = np.where(inside, intensity, 0.0) + noise
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return ShapesDataset(seed=seed, images=images, labels=labels)


@dataclass
class RefNetModel:
    head_kind: str
    conv1_w: np.ndarray  # (8, 1, 3, 3)
    conv1_b: np.ndarray  # (8,)
    conv2_w: np.ndarray  # (16, 8, 3, 3)
    conv2_b: np.ndarray  # (16,)
    head_w: np.ndarray  # gap: (2, 16); flatten: (2, 1024)
    head_b: np.ndarray  # (2,)

    def param_items(self):
        return [
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]

    def head_spec(self) -> ar.HeadSpec:
        return ar.HeadSpec(kind=self.head_kind, weights=self.head_w, bias=self.head_b)


def init_model(head_kind: str, seed: int) -> RefNetModel:
    """Uniform init in +-3*sqrt(1/fan_in), drawn from the seeded LCG.

    The 3x gain keeps early activations large enough for gradient signal to
    reach the conv layers; with +-sqrt(1/fan_in) training stalls at chance."""
    if head_kind not in _HEAD_CODES:
        raise ValueError(f"unknown head kind {head_kind!r}")
    rng = Lcg(seed)

    def init(shape, fan_in):
        bound = 3.0 * np.sqrt(1.0 / fan_in)
        u = rng.uniform_block(int(np.prod(shape)))
        return (2.0 * u - 1.0).reshape(shape) * bound

    head_in = TARGET_FEATURES if head_kind == "gap_linear" else TARGET_FEATURES * 64
    return RefNetModel(
        head_kind=head_kind,
        conv1_w=init((8, 1, 3, 3), 9),
        conv1_b=np.zeros(8),
        conv2_w=init((16, 8, 3, 3), 8 * 9),
        conv2_b=np.zeros(16),
        head_w=init((2, head_in), head_in),
        head_b=np.zeros(2),
    )


def _im2col(x: np.ndarray, k: int = 3) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*k*k) with zero padding 1 (same output size)."""
    b, c, h, w = x.shape
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(pad, (k, k), axis=(2, 3))
    # (B, C, H, W, k, k) -> (B, H, W, C, k, k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * k * k)


def _conv_forward(x, weight, bias):
    b, _, h, w = x.shape
    cols = _im2col(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.transpose(0, 2, 1).reshape(b, weight.shape[0], h, w), cols


def _conv_backward(dout, cols, weight, x_shape):
    b, c_out, h, w = dout.shape
    dflat = dout.reshape(b, c_out, h * w).transpose(0, 2, 1)  # (B, HW, C_out)
    w_mat = weight.reshape(c_out, -1)
    dw = np.einsum("bpo,bpk->ok", dflat, cols).reshape(weight.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = dflat @ w_mat  # (B, HW, C_in*9)
    dx = _col2im(dcols, x_shape)
    return dx, dw, db


def _col2im(dcols, x_shape, k: int = 3):
    b, c, h, w = x_shape
    dpad = np.zeros((b, c, h + 2, w + 2))
    dcols = dcols.reshape(b, h, w, c, k, k)
    for di in range(k):
        for dj in range(k):
            dpad[:, :, di : di + h, dj : dj + w] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dpad[:, :, 1 : 1 + h, 1 : 1 + w]


def _maxpool_forward(x):
    b, c, h, w = x.shape
    r = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, c, h // 2, w // 2, 4
    )
    idx = r.argmax(axis=-1)  # first max in row-major window order on ties
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout, idx, x_shape):
    b, c, h, w = x_shape
    dr = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dr, idx[..., None], dout[..., None], axis=-1)
    return (
        dr.reshape(b, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )


@dataclass
class _ForwardState:
    x: np.ndarray
    cols1: np.ndarray
    z1: np.ndarray
    p1: np.ndarray
    idx1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    features: np.ndarray  # (B, 16, 8, 8) target activation
    idx2: np.ndarray
    logits: np.ndarray


def _forward_batch(model: RefNetModel, x: np.ndarray) -> _ForwardState:
    z1, cols1 = _conv_forward(x, model.conv1_w, model.conv1_b)
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _maxpool_forward(a1)
    z2, cols2 = _conv_forward(p1, model.conv2_w, model.conv2_b)
    a2 = np.maximum(z2, 0.0)
    feats, idx2 = _maxpool_forward(a2)
    if model.head_kind == "gap_linear":
        pooled = feats.mean(axis=(2, 3))
        logits = pooled @ model.head_w.T + model.head_b
    else:
        logits = feats.reshape(feats.shape[0], -1) @ model.head_w.T + model.head_b
    return _ForwardState(x, cols1, z1, p1, idx1, cols2, z2, feats, idx2, logits)


def forward(model: RefNetModel, image: np.ndarray):
    """Single-image forward pass: (features 16x8x8, logits length 2)."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected input shape (1, 32, 32), got {image.shape}")
    state = _forward_batch(model, image[None])
    return state.features[0], state.logits[0]


def grad_target(model: RefNetModel, image: np.ndarray, class_id: int) -> np.ndarray:
    """Exact gradient of logit_c wrt the 16x8x8 target activation.

    The head is affine in the target activation, so the gradient does not
    depend on the image content (gap: w/(8*8) broadcast; flatten: the head
    row reshaped)."""
    if not 0 <= class_id < model.head_b.shape[0]:
        raise ValueError(f"class {class_id} out of range")
    if model.head_kind == "gap_linear":
        per_feature = model.head_w[class_id] / (TARGET_SPATIAL * TARGET_SPATIAL)
        return np.broadcast_to(
            per_feature[:, None, None], (TARGET_FEATURES, TARGET_SPATIAL, TARGET_SPATIAL)
        ).copy()
    return model.head_w[class_id].reshape(TARGET_FEATURES, TARGET_SPATIAL, TARGET_SPATIAL).copy()


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(model: RefNetModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch plus gradients for every parameter."""
    state = _forward_batch(model, x)
    b = x.shape[0]
    probs = _softmax(state.logits)
    loss = float(-np.log(probs[np.arange(b), y] + 1e-300).mean())
    dlogits = probs.copy()
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b

    if model.head_kind == "gap_linear":
        pooled = state.features.mean(axis=(2, 3))
        d_head_w = dlogits.T @ pooled
        dpooled = dlogits @ model.head_w
        dfeats = np.broadcast_to(
            dpooled[:, :, None, None] / (TARGET_SPATIAL * TARGET_SPATIAL),
            state.features.shape,
        ).copy()
    else:
        flat = state.features.reshape(b, -1)
        d_head_w = dlogits.T @ flat
        dfeats = (dlogits @ model.head_w).reshape(state.features.shape)
    d_head_b = dlogits.sum(axis=0)

    da2 = _maxpool_backward(dfeats, state.idx2, state.z2.shape)
    dz2 = da2 * (state.z2 > 0)
    dp1, d_conv2_w, d_conv2_b = _conv_backward(dz2, state.cols2, model.conv2_w, state.p1.shape)
    da1 = _maxpool_backward(dp1, state.idx1, state.z1.shape)
    dz1 = da1 * (state.z1 > 0)
    _, d_conv1_w, d_conv1_b = _conv_backward(dz1, state.cols1, model.conv1_w, state.x.shape)

    grads = {
        "conv1_w": d_conv1_w,
        "conv1_b": d_conv1_b,
        "conv2_w": d_conv2_w,
        "conv2_b": d_conv2_b,
        "head_w": d_head_w,
        "head_b": d_head_b,
    }
    return loss, grads, state


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


def train(
    dataset: ShapesDataset,
    head_kind: str = "gap_linear",
    epochs: int = 10,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
    momentum: float = 0.9,
) -> RefNetModel:
    """Momentum SGD with cross-entropy; deterministic given (dataset, seed).

    Momentum is needed: the GAP head scales target-layer gradients by 1/64,
    and plain SGD at this scale never leaves the chance-accuracy plateau."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = init_model(head_kind, seed)
    velocity = {name: np.zeros_like(param) for name, param in model.param_items()}
    shuffle_rng = Lcg(seed ^ 0x5DEECE66D)
    n = len(dataset)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            loss, grads, _ = loss_and_grads(model, x, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            for name, param in model.param_items():
                velocity[name] = momentum * velocity[name] - lr * grads[name]
                param += velocity[name]
    return model


def accuracy(model: RefNetModel, dataset: ShapesDataset, batch_size: int = 128) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        state = _forward_batch(model, x)
        correct += int((state.logits.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return correct / len(dataset)


def save_model(model: RefNetModel, path):
    parts = [MODEL_MAGIC, struct.pack("<IB", MODEL_VERSION, _HEAD_CODES[model.head_kind])]
    for _, param in model.param_items():
        t = np.asarray(param, dtype="<f4")
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(t.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> RefNetModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"bad model magic in {path}")
    version, head_code = struct.unpack_from("<IB", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    offset = 9
    tensors = []
    for _ in range(6):
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        count = int(np.prod(shape))
        t = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensors.append(t.astype(np.float64))
    return RefNetModel(_HEAD_NAMES[head_code], *tensors)


def dump_archive(
    model: RefNetModel,
    dataset: ShapesDataset,
    out_path,
    grads: str = "all",
    archive_id: str = "refnet",
    dataset_split: str = "train",
) -> Path:
    """Write one record per dataset item, with the head in the manifest.

    grads="all" stores gradients for both classes; "true-class" stores only
    each sample's own class."""
    if grads not in ("all", "true-class"):
        raise ValueError(f"grads must be 'all' or 'true-class', got {grads!r}")
    manifest = ar.Manifest(
        archive_id=archive_id,
        model_id=f"refnet-{model.head_kind}",
        layer_id="block2.pool",
        num_features=TARGET_FEATURES,
        num_classes=2,
        class_names=["rectangle", "disc"],
        spatial_rank=2,
        dataset_split=dataset_split,
        head=model.head_spec(),
    )

    def records():
        for i in range(len(dataset)):
            feats, logits = forward(model, dataset.images[i])
            gt = int(dataset.labels[i])
            classes = (gt,) if grads == "true-class" else (0, 1)
            rec_grads = {
                c: grad_target(model, dataset.images[i], c).reshape(TARGET_FEATURES, -1)
                for c in classes
            }
            yield ar.SampleRecord(
                sample_id=i,
                true_class=gt,
                logits=logits,
                dims=(TARGET_SPATIAL, TARGET_SPATIAL),
                features=feats.reshape(TARGET_FEATURES, -1),
                grads=rec_grads,
                input=dataset.images[i],
            )

    return ar.write_archive(manifest, records(), out_path)
