"""
Per-pixel segmentation model small enough to train with plain numpy.

For every pixel the model sees five fixed features (intensity, 3x3 local
mean, horizontal and vertical gradient, distance from the image centre)
plus the responses of a learnable 3x3 convolution bank. A tanh hidden layer
and a linear head produce one score per class.

Layers (each packed as weight matrix then bias):
    conv    (K, 9)      + (K,)
    hidden  (H, 5 + K)  + (H,)
    head    (C, H)      + (C,)
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import uniform_filter

from app.core.errors import EmptyInput, LayoutMismatch
from app.services.fedstyle import StyleStats, image_stats
from app.services.params import FlatParams

logger = logging.getLogger(__name__)

N_FEATURES = 5
PATCH = 9
LAYERS = ("conv", "hidden", "head")


@dataclass(frozen=True)
class ModelShape:
    conv_filters: int = 4
    hidden_units: int = 8
    n_classes: int = 3

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "conv": (self.conv_filters, PATCH),
            "hidden": (self.hidden_units, N_FEATURES + self.conv_filters),
            "head": (self.n_classes, self.hidden_units),
        }


@dataclass(frozen=True, eq=False)
class ToyModel:
    params: FlatParams
    shape: ModelShape

    def __post_init__(self):
        expected = {name: rows * cols + rows for name, (rows, cols) in self.shape.layer_shapes().items()}
        actual = {slot.name: slot.length for slot in self.params.layout}
        if actual != expected:
            raise LayoutMismatch(f"parameters {actual} do not fit model shape {expected}")

    def weights(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return unpack(self.shape, self.params.values)

    def with_params(self, params: FlatParams) -> "ToyModel":
        return ToyModel(params, self.shape)


def unpack(shape: ModelShape, values: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out, offset = {}, 0
    for name, (rows, cols) in shape.layer_shapes().items():
        w = values[offset:offset + rows * cols].reshape(rows, cols)
        offset += rows * cols
        b = values[offset:offset + rows]
        offset += rows
        out[name] = (w, b)
    return out


def pack(shape: ModelShape, layers: dict[str, tuple[np.ndarray, np.ndarray]], sample_count: int = 0) -> FlatParams:
    return FlatParams.from_layers(
        {name: np.concatenate([np.ravel(layers[name][0]), np.ravel(layers[name][1])]) for name in LAYERS},
        sample_count,
    )


def init_model(shape: ModelShape, seed: int, scale: float = 0.5) -> ToyModel:
    rng = np.random.default_rng(seed)
    layers = {}
    for name, (rows, cols) in shape.layer_shapes().items():
        layers[name] = (rng.standard_normal((rows, cols)) * scale / np.sqrt(cols), np.zeros(rows))
    return ToyModel(pack(shape, layers), shape)


def zero_model(shape: ModelShape) -> ToyModel:
    layers = {name: (np.zeros((r, c)), np.zeros(r)) for name, (r, c) in shape.layer_shapes().items()}
    return ToyModel(pack(shape, layers), shape)


# ─── Forward / backward ───────────────────────────────────────────────────────

def _as_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images[None] if images.ndim == 2 else images


def pixel_features(images: np.ndarray) -> np.ndarray:
    """(B, S, S) → (B*S*S, 5) fixed features."""
    images = _as_images(images)
    b, s, _ = images.shape
    local_mean = uniform_filter(images, size=(1, 3, 3), mode="nearest")
    vertical, horizontal = np.gradient(images, axis=(1, 2))
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    centre = (s - 1) / 2.0
    radial = np.hypot(yy - centre, xx - centre) / (np.sqrt(2.0) * max(centre, 1e-12))
    radial = np.broadcast_to(radial, images.shape)
    stacked = np.stack([images, local_mean, horizontal, vertical, radial], axis=-1)
    return stacked.reshape(b * s * s, N_FEATURES)


def pixel_patches(images: np.ndarray) -> np.ndarray:
    """(B, S, S) → (B*S*S, 9) edge-padded 3x3 neighbourhoods."""
    images = _as_images(images)
    b, s, _ = images.shape
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)), mode="edge")
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))
    return windows.reshape(b * s * s, PATCH)


def _scores(shape: ModelShape, values: np.ndarray, images: np.ndarray):
    w = unpack(shape, values)
    feats = pixel_features(images)
    patches = pixel_patches(images)
    conv = patches @ w["conv"][0].T + w["conv"][1]
    z = np.concatenate([feats, conv], axis=1)
    h = np.tanh(z @ w["hidden"][0].T + w["hidden"][1])
    scores = h @ w["head"][0].T + w["head"][1]
    return scores, (w, patches, z, h)


def forward(model: ToyModel, image: np.ndarray) -> np.ndarray:
    """Class scores shaped (C, S, S)."""
    image = np.asarray(image, dtype=np.float64)
    scores, _ = _scores(model.shape, model.params.values, image)
    s = image.shape[-1]
    return scores.reshape(s, s, model.shape.n_classes).transpose(2, 0, 1)


def predict(model: ToyModel, image: np.ndarray) -> np.ndarray:
    # argmax picks the lowest class index on ties
    return np.argmax(forward(model, image), axis=0).astype(np.uint8)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def loss_and_grad(shape: ModelShape, values: np.ndarray, images: np.ndarray, masks: np.ndarray):
    """Mean per-pixel cross-entropy and its gradient w.r.t. the flat parameters."""
    scores, (w, patches, z, h) = _scores(shape, values, images)
    labels = np.asarray(masks).reshape(-1).astype(np.int64)
    n = labels.size
    probs = _softmax(scores)
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), labels], 1e-300, None))))

    d_scores = probs
    d_scores[np.arange(n), labels] -= 1.0
    d_scores /= n
    grads = {"head": (d_scores.T @ h, d_scores.sum(axis=0))}
    d_pre = (d_scores @ w["head"][0]) * (1.0 - h ** 2)
    grads["hidden"] = (d_pre.T @ z, d_pre.sum(axis=0))
    d_conv = (d_pre @ w["hidden"][0])[:, N_FEATURES:]
    grads["conv"] = (d_conv.T @ patches, d_conv.sum(axis=0))
    grad = np.concatenate([np.concatenate([grads[k][0].ravel(), grads[k][1]]) for k in LAYERS])
    return loss, grad


def cross_entropy(model: ToyModel, data: Sequence) -> float:
    if not data:
        raise EmptyInput("no samples")
    images = np.stack([s.image for s in data])
    masks = np.stack([s.mask for s in data])
    scores, _ = _scores(model.shape, model.params.values, images)
    labels = masks.reshape(-1).astype(np.int64)
    probs = _softmax(scores)
    return float(-np.mean(np.log(np.clip(probs[np.arange(labels.size), labels], 1e-300, None))))


# ─── Local training ───────────────────────────────────────────────────────────

def train_local(
    model: ToyModel,
    data: Sequence,
    epochs: int,
    lr: float,
    batch_size: int,
    mixer: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    rng: Optional[np.random.Generator] = None,
    style_buffer: Optional[list[StyleStats]] = None,
) -> ToyModel:
    """
    Mini-batch SGD on per-pixel cross-entropy.

    `mixer` sees each batch as (B, 1, S, S) before the forward pass.
    `style_buffer`, when given, ends up holding the raw statistics of every
    image of the last epoch, which is what a client publishes to partners.
    """
    if not data:
        raise EmptyInput("local training needs at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    images = np.stack([s.image for s in data])
    masks = np.stack([s.mask for s in data])
    values = model.params.values.copy()
    n = len(data)

    for _ in range(epochs):
        if style_buffer is not None:
            style_buffer.clear()
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx]
            if style_buffer is not None:
                style_buffer.extend(image_stats(batch[:, None]))
            if mixer is not None:
                batch = mixer(batch[:, None])[:, 0]
            _, grad = loss_and_grad(model.shape, values, batch, masks[idx])
            values -= lr * grad

    return ToyModel(FlatParams(values, model.params.layout, n), model.shape)
