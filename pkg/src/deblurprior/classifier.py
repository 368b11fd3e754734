"""The blur classifier used as an image prior.

Eleven layers: CR1 CR2 M3 CR4 M5 CR6 M7 CR8 C9 G10 S11 (CR = 3x3 conv + ReLU,
M = 2x2 max pool, C = 3x3 conv, G = global average pool, S = sigmoid). The
output is P(image is blurred), so a low value means "looks sharp".
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .imaging import resize_bilinear, scaled_shape, to_luma, write_bytes

log = logging.getLogger(__name__)

MIN_SIZE = 16
WIDTH = 64

CR, C, M, G, S = 1, 2, 3, 4, 5
ARCHITECTURE = (
    ("CR1", CR, (WIDTH, 1)),
    ("CR2", CR, (WIDTH, WIDTH)),
    ("M3", M, None),
    ("CR4", CR, (WIDTH, WIDTH)),
    ("M5", M, None),
    ("CR6", CR, (WIDTH, WIDTH)),
    ("M7", M, None),
    ("CR8", CR, (WIDTH, WIDTH)),
    ("C9", C, (1, WIDTH)),
    ("G10", G, None),
    ("S11", S, None),
)


class ImageSizeError(ValueError):
    pass


@dataclass
class Layer:
    name: str
    kind: int
    params: nn.ConvParams | None = None


@dataclass
class Model:
    layers: list
    seed: int = 0
    epochs: int = 0
    in_channels: int = 1

    def conv_params(self):
        return [l.params for l in self.layers if l.params is not None]

    def parameters(self):
        """Flat list of the trainable arrays (weights, bias per conv layer)."""
        out = []
        for p in self.conv_params():
            out += [p.weights, p.bias]
        return out

    def n_parameters(self):
        return sum(a.size for a in self.parameters())

    @property
    def dtype(self):
        return self.conv_params()[0].weights.dtype

    def astype(self, dtype):
        layers = [Layer(l.name, l.kind, None if l.params is None else l.params.astype(dtype)) for l in self.layers]
        return Model(layers, self.seed, self.epochs, self.in_channels)

    def copy(self):
        return self.astype(self.dtype)

    def to_bytes(self):
        return nn.pack_layers([(l.kind, l.params) for l in self.layers], self.seed, self.epochs, self.in_channels)

    @classmethod
    def from_bytes(cls, buf):
        raw, seed, epochs, in_ch = nn.unpack_layers(buf)
        if len(raw) != len(ARCHITECTURE):
            raise ValueError(f"expected {len(ARCHITECTURE)} layers, file has {len(raw)}")
        layers = []
        for (name, kind, _), (tag, params) in zip(ARCHITECTURE, raw):
            if tag != kind:
                raise ValueError(f"layer {name}: tag {tag} != expected {kind}")
            layers.append(Layer(name, kind, params))
        return cls(layers, seed, epochs, in_ch)

    def save(self, path):
        write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def build_model(seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    layers = []
    for name, kind, io in ARCHITECTURE:
        params = None
        if io is not None:
            out_c, in_c = io
            params = nn.xavier_init((out_c, in_c, 3, 3), rng, stride=1, padding=1, dtype=dtype)
        layers.append(Layer(name, kind, params))
    return Model(layers, seed=seed)


def forward(model, x, keep_cache=True):
    """Batch forward. ``x`` is N x 1 x H x W; returns (probabilities (N,), cache)."""
    if x.shape[2] < MIN_SIZE or x.shape[3] < MIN_SIZE:
        raise ImageSizeError(f"input {x.shape[2]}x{x.shape[3]} below the minimum size {MIN_SIZE}x{MIN_SIZE}")
    cache = []
    # channels-last internally; with one input channel this is a reshape
    a = x.astype(model.dtype, copy=False).reshape(x.shape[0], x.shape[2], x.shape[3], 1)
    for layer in model.layers:
        if layer.kind == CR:
            z = nn.conv_forward_nhwc(a, layer.params)
            entry = (a, z)
            a = nn.relu_forward(z)
        elif layer.kind == C:
            entry = (a,)
            a = nn.conv_forward_nhwc(a, layer.params)
        elif layer.kind == M:
            # odd sizes: the last row/column never reaches the pool
            in_shape = a.shape
            a = nn.crop_even(a, axes=(1, 2))
            cropped = a.shape
            a, idx = nn.maxpool_nhwc(a)
            entry = (in_shape, cropped, idx)
        elif layer.kind == G:
            entry = (a.shape,)
            a = a.mean(axis=(1, 2))[:, 0]
        else:
            a = np.asarray(nn.sigmoid(a), dtype=model.dtype)
            entry = (a,)
        if keep_cache:
            cache.append(entry)
    return a, (cache if keep_cache else None)


def backward(model, cache, d_prob, weight_grads=True):
    """Back-propagate dL/dprob through a cached forward pass.

    Returns (parameter gradients aligned with ``model.parameters()``, or None
    when ``weight_grads`` is False, and the gradient w.r.t. the N x 1 x H x W
    input batch).
    """
    grads = []
    d = None
    for layer, entry in zip(reversed(model.layers), reversed(cache)):
        if layer.kind == S:
            (p,) = entry
            d = (np.asarray(d_prob) * p * (1 - p)).astype(model.dtype)
        elif layer.kind == G:
            n, h, w, c = entry[0]
            d = np.broadcast_to((d / (h * w))[:, None, None, None], (n, h, w, c)).astype(model.dtype)
        elif layer.kind == M:
            in_shape, cropped, idx = entry
            d = nn.maxpool_backward_nhwc(idx, d)
            if cropped != in_shape:
                full = np.zeros(in_shape, dtype=d.dtype)
                full[:, : cropped[1], : cropped[2]] = d
                d = full
        else:
            a_in = entry[0]
            if layer.kind == CR:
                d = nn.relu_backward(entry[1], d)
            if weight_grads:
                d_w, d_b = nn.conv_backward_weights_nhwc(a_in, layer.params, d)
                grads = [d_w, d_b] + grads
            d = nn.conv_backward_input_nhwc(a_in.shape, layer.params, d)
    n, h, w, _ = d.shape
    return (grads if weight_grads else None), d.reshape(n, 1, h, w)


def _as_batch(image):
    img = np.asarray(image)
    if img.ndim == 3:
        img = to_luma(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ImageSizeError(f"image {img.shape[0]}x{img.shape[1]} below the minimum size {MIN_SIZE}x{MIN_SIZE}")
    return img[None, None]


def f(model, image):
    """P(blurred | image) for one H x W image (colour is converted to luma)."""
    prob, _ = forward(model, _as_batch(image), keep_cache=False)
    return float(prob[0])


def f_and_input_gradient(model, image):
    x = _as_batch(image)
    prob, cache = forward(model, x)
    _, dx = backward(model, cache, np.ones(1, dtype=model.dtype), weight_grads=False)
    return float(prob[0]), dx[0, 0]


def input_gradient(model, image):
    """d f / d pixel, same shape as ``image`` (2-D only)."""
    return f_and_input_gradient(model, image)[1]


def predict(model, images, batch_size=32):
    """f for a list of 2-D images; equal-shaped images are batched together."""
    out = np.empty(len(images))
    by_shape = {}
    for i, im in enumerate(images):
        by_shape.setdefault(np.shape(im), []).append(i)
    for shape, idxs in by_shape.items():
        if shape[0] < MIN_SIZE or shape[1] < MIN_SIZE:
            raise ImageSizeError(f"image {shape[0]}x{shape[1]} below the minimum size {MIN_SIZE}x{MIN_SIZE}")
        for s in range(0, len(idxs), batch_size):
            chunk = idxs[s:s + batch_size]
            x = np.stack([images[i] for i in chunk])[:, None]
            prob, _ = forward(model, x, keep_cache=False)
            out[chunk] = prob
    return out


# --- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 1e-3
    lr_decay_factor: float = 5.0
    lr_decay_every: int = 50
    patch: int = 200
    rescale_range: tuple = (0.25, 1.0)

    def __post_init__(self):
        lo, hi = self.rescale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"rescale_range must lie in (0, 1], got {self.rescale_range}")
        for name in ("batch_size", "lr", "lr_decay_factor", "lr_decay_every", "patch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")

    def lr_at(self, epoch):
        return self.lr / self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)  # one dict per epoch

    @property
    def losses(self):
        return [row["mean_loss"] for row in self.history]


def random_crop(img, size, rng):
    """size x size crop; images smaller than ``size`` are reflect-padded first."""
    h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        img = np.pad(img, ((ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)), mode="reflect" if min(h, w) > 1 else "edge")
        h, w = img.shape
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    return img[i:i + size, j:j + size]


def make_batch(samples, cfg, rng):
    """Crop every sample, then rescale the whole batch by one random factor."""
    crops = [random_crop(s.image, cfg.patch, rng) for s in samples]
    lo, hi = cfg.rescale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else hi
    side = max(MIN_SIZE, int(round(cfg.patch * scale)))
    x = np.stack(crops)
    if side != cfg.patch:
        x = resize_bilinear(x, (side, side))
    y = np.array([s.label for s in samples], dtype=np.float64)
    return x[:, None].astype(np.float32), y


def _check_labels(samples):
    labels = {int(s.label) for s in samples}
    if labels != {0, 1}:
        raise ValueError(f"training set needs both labels 0 and 1, found {sorted(labels)}")


def train(model, dataset, cfg=None, epochs=1, seed=0, val_set=None, start_epoch=0, callback=None):
    """Minibatch SGD on binary cross-entropy. Mutates and returns ``model``."""
    cfg = cfg or TrainConfig()
    samples = list(dataset)
    if not samples:
        raise ValueError("empty training set")
    _check_labels(samples)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    state = None
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(samples))
        losses, correct = [], 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[s:s + cfg.batch_size]]
            x, y = make_batch(batch, cfg, rng)
            prob, cache = forward(model, x)
            loss, d_prob = nn.bce_loss(prob, y, with_grad=True)
            grads, _ = backward(model, cache, d_prob)
            _, state = nn.sgd_step(params, grads, lr, cfg.momentum, cfg.weight_decay, state)
            losses.append(loss * len(batch))
            correct += int(np.sum((prob >= 0.5) == (y >= 0.5)))
        row = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": float(np.sum(losses) / len(samples)),
            "train_acc": correct / len(samples),
            "val_acc": evaluate_accuracy(model, val_set, 1.0) if val_set else float("nan"),
        }
        history.append(row)
        log.info("epoch %d lr %.2e loss %.4f train_acc %.3f val_acc %.3f", epoch, lr, row["mean_loss"], row["train_acc"], row["val_acc"])
        if callback is not None:
            callback(row)
    model.epochs = start_epoch + epochs
    return TrainResult(model, history)


def evaluate_accuracy(model, dataset, downscale=1.0, threshold=0.5):
    """Fraction of samples classified correctly after bilinear downscaling."""
    if not 0 < downscale <= 1:
        raise ValueError(f"downscale must be in (0, 1], got {downscale}")
    samples = list(dataset)
    if not samples:
        raise ValueError("empty evaluation set")
    images = []
    for s in samples:
        shape = scaled_shape(s.image.shape, downscale)
        if min(shape) < MIN_SIZE:
            raise ImageSizeError(
                f"downscale {downscale} turns a {s.image.shape[0]}x{s.image.shape[1]} image into "
                f"{shape[0]}x{shape[1]}, below the minimum {MIN_SIZE}"
            )
        images.append(resize_bilinear(s.image, shape) if downscale != 1 else s.image)
    prob = predict(model, images)
    labels = np.array([s.label for s in samples])
    return float(np.mean((prob >= threshold) == (labels >= 0.5)))
