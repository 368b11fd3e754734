"""Small numpy CNN engine: conv / relu / 2x2 max-pool / global average pool /
sigmoid, binary cross-entropy, momentum SGD and Xavier init.

Activations are N x C x H x W arrays. Every op keeps the dtype of its input,
so the same code runs in float32 (training) and float64 (gradient checks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


@dataclass
class ConvParams:
    weights: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    padding: int = 0

    @property
    def shape(self):
        return self.weights.shape

    def astype(self, dtype):
        return ConvParams(self.weights.astype(dtype), self.bias.astype(dtype), self.stride, self.padding)


@dataclass
class LayerGrad:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, params):
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    oc, ic, kh, kw = params.weights.shape
    if x.shape[1] != ic:
        raise ShapeError(f"input shape {x.shape} does not match conv weights {params.weights.shape}")
    p = params.padding
    if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
        raise ShapeError(f"input shape {x.shape} smaller than kernel {params.weights.shape} after padding {p}")


# The kernels below work channels-last (N x H x W x C). For stride 1 the
# padded input is flattened to rows of C values; kernel tap (i, j) then reads
# the contiguous row block shifted by i * padded_width + j, so a conv is kh*kw
# plain GEMMs with no im2col copy. Rows that straddle the padding are garbage
# and are sliced off. Other strides fall back to im2col. The public
# N x C x H x W functions further down are thin wrappers.


def _pad_hw(x, p):
    if not p:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    return xp


def _taps(weights):
    # (out, in, kh, kw) -> contiguous (kh, kw, in, out)
    return np.ascontiguousarray(weights.transpose(2, 3, 1, 0))


def _shift_conv(x, weights, padding):
    oc, ic, kh, kw = weights.shape
    xp = _pad_hw(x, padding)
    n, hp, wp, c = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    rows = xp.reshape(-1, c)
    r = n * hp * wp - (kh - 1) * wp - (kw - 1)
    taps = _taps(weights)
    out = np.zeros((n * hp * wp, oc), dtype=x.dtype)
    tmp = np.empty((r, oc), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            s = i * wp + j
            np.matmul(rows[s:s + r], taps[i, j], out=tmp)
            out[:r] += tmp
    return out.reshape(n, hp, wp, oc)[:, :ho, :wo]


def _im2col(x, kh, kw, stride, padding):
    xp = _pad_hw(x, padding)
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c), ho, wo


def conv_forward_nhwc(x, params):
    oc, ic, kh, kw = params.weights.shape
    if params.stride == 1:
        out = _shift_conv(x, params.weights, params.padding)
    else:
        cols, ho, wo = _im2col(x, kh, kw, params.stride, params.padding)
        out = (cols @ _taps(params.weights).reshape(-1, oc)).reshape(x.shape[0], ho, wo, oc)
    return out + params.bias


def conv_backward_input_nhwc(x_shape, params, d_out):
    oc, ic, kh, kw = params.weights.shape
    p, st = params.padding, params.stride
    n, h, w, _ = x_shape
    if st == 1 and p <= kh - 1 and p <= kw - 1:
        # full correlation of d_out with the flipped, in/out-swapped kernel
        flipped = params.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dp = np.zeros((n, h + kh - 1, w + kw - 1, oc), dtype=d_out.dtype)
        dp[:, kh - 1 - p:kh - 1 - p + d_out.shape[1], kw - 1 - p:kw - 1 - p + d_out.shape[2]] = d_out
        return _shift_conv(dp, flipped, 0)
    ho, wo = d_out.shape[1], d_out.shape[2]
    dcols = (d_out.reshape(-1, oc) @ _taps(params.weights).reshape(-1, oc).T).reshape(n, ho, wo, kh, kw, ic)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, ic), dtype=d_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + st * ho:st, j:j + st * wo:st, :] += dcols[:, :, :, i, j, :]
    return dxp[:, p:p + h, p:p + w]


def conv_backward_weights_nhwc(x, params, d_out):
    oc, ic, kh, kw = params.weights.shape
    dy = d_out.reshape(-1, oc)
    d_b = dy.sum(axis=0)
    if params.stride != 1:
        cols, _, _ = _im2col(x, kh, kw, params.stride, params.padding)
        d_w = (cols.T @ dy).reshape(kh, kw, ic, oc)
    else:
        xp = _pad_hw(x, params.padding)
        n, hp, wp, c = xp.shape
        rows = xp.reshape(-1, c)
        grid = np.zeros((n, hp, wp, oc), dtype=d_out.dtype)
        grid[:, : d_out.shape[1], : d_out.shape[2]] = d_out
        r = n * hp * wp - (kh - 1) * wp - (kw - 1)
        g = grid.reshape(-1, oc)[:r]
        d_w = np.empty((kh, kw, ic, oc), dtype=d_out.dtype)
        for i in range(kh):
            for j in range(kw):
                s = i * wp + j
                np.matmul(rows[s:s + r].T, g, out=d_w[i, j])
    return np.ascontiguousarray(d_w.transpose(3, 2, 0, 1)), d_b


def maxpool_nhwc(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {x.shape}; crop first")
    quads = np.stack([x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]], axis=-1)
    idx = quads.argmax(axis=-1)
    return np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward_nhwc(idx, d_out):
    n, ho, wo, c = d_out.shape
    d_x = np.zeros((n, 2 * ho, 2 * wo, c), dtype=d_out.dtype)
    for q, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        d_x[:, di::2, dj::2] = np.where(idx == q, d_out, 0)
    return d_x


def _nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x):
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d_forward(x, params):
    """Cross-correlation of ``x`` (N x C x H x W) with ``params.weights`` plus bias."""
    _check_conv(x, params)
    return _nchw(conv_forward_nhwc(_nhwc(x), params))


def conv2d_backward(x, params, d_out):
    """Gradients of a conv layer w.r.t. weights, bias and input."""
    _check_conv(x, params)
    oc, ic, kh, kw = params.weights.shape
    ho = conv_output_size(x.shape[2], kh, params.stride, params.padding)
    wo = conv_output_size(x.shape[3], kw, params.stride, params.padding)
    expected = (x.shape[0], oc, ho, wo)
    if d_out.shape != expected:
        raise ShapeError(f"d_output shape {d_out.shape} != forward output shape {expected}")
    xh, dh = _nhwc(x), _nhwc(d_out)
    d_w, d_b = conv_backward_weights_nhwc(xh, params, dh)
    d_x = conv_backward_input_nhwc(xh.shape, params, dh)
    return LayerGrad(d_w, d_b, _nchw(d_x))


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, d_out):
    return np.where(x > 0, d_out, 0).astype(d_out.dtype, copy=False)


def maxpool2x2_forward(x):
    """2x2 / stride 2 max pool on N x C x H x W. Returns (output, argmax 0..3 per window)."""
    out, idx = maxpool_nhwc(_nhwc(x))
    return _nchw(out), _nchw(idx)


def maxpool2x2_backward(idx, d_out):
    return _nchw(maxpool_backward_nhwc(_nhwc(idx), _nhwc(d_out)))


def crop_even(x, axes=(2, 3)):
    """Drop the last row/column so both spatial dims are even."""
    sl = [slice(None)] * x.ndim
    for a in axes:
        sl[a] = slice(0, x.shape[a] - x.shape[a] % 2)
    return x[tuple(sl)]


def global_avg_pool_forward(x):
    if x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"empty feature map {x.shape}")
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dims, d_out):
    n, c, h, w = dims
    d = (d_out / (h * w)).astype(d_out.dtype, copy=False)
    return np.broadcast_to(d[:, :, None, None], (n, c, h, w)).copy()


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    pos = x >= 0
    z = np.exp(np.where(pos, -x, x))
    out = np.where(pos, 1 / (1 + z), z / (1 + z))
    return out if out.ndim else float(out)


def bce_loss(pred, labels, with_grad=False):
    """Mean binary cross-entropy. With ``with_grad`` also returns dL/dpred."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("bce_loss on an empty batch")
    if pred.shape != labels.shape:
        raise ShapeError(f"predictions {pred.shape} vs labels {labels.shape}")
    p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
    loss = float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))
    if not with_grad:
        return loss
    grad = (p - labels) / (p * (1 - p)) / pred.size
    return loss, grad


def sgd_step(params, grads, lr, momentum=0.9, weight_decay=0.0, state=None):
    """In-place momentum SGD over matching lists of arrays.

    v <- momentum * v - lr * (grad + weight_decay * param); param <- param + v
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, velocity {v.shape} differ")
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v
    return params, state


def xavier_init(shape, rng, stride=1, padding=0, dtype=np.float32):
    """Uniform Xavier/Glorot weights for an (out_c, in_c, kh, kw) conv, zero bias."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    oc, ic, kh, kw = shape
    bound = np.sqrt(6.0 / (ic * kh * kw + oc * kh * kw))
    w = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ConvParams(w, np.zeros(oc, dtype=dtype), stride, padding)


# --- weights file -----------------------------------------------------------
#
# "DPRI" | u16 version | u16 layer count | u64 seed | u32 epochs | u16 in_channels
# per layer: u8 tag | u8 stride | u8 padding | u8 ndim | ndim x u32 dims |
#            f32 weights | u32 bias length | f32 bias          (all little endian)

MAGIC = b"DPRI"
FORMAT_VERSION = 1


def pack_layers(layers, seed=0, epochs=0, in_channels=1):
    """Serialize ``[(tag, ConvParams | None), ...]`` to bytes."""
    out = [MAGIC, struct.pack("<HHQIH", FORMAT_VERSION, len(layers), seed, epochs, in_channels)]
    for tag, p in layers:
        if p is None:
            out.append(struct.pack("<BBBB", tag, 0, 0, 0))
            continue
        w = np.asarray(p.weights, dtype="<f4")
        b = np.asarray(p.bias, dtype="<f4")
        out.append(struct.pack("<BBBB", tag, p.stride, p.padding, w.ndim))
        out.append(struct.pack(f"<{w.ndim}I", *w.shape))
        out.append(w.tobytes())
        out.append(struct.pack("<I", b.size))
        out.append(b.tobytes())
    return b"".join(out)


def unpack_layers(buf):
    """Inverse of :func:`pack_layers`. Returns (layers, seed, epochs, in_channels)."""
    if buf[:4] != MAGIC:
        raise ValueError("not a DPRI weights file")
    pos = 4
    version, n_layers, seed, epochs, in_ch = struct.unpack_from("<HHQIH", buf, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    pos += struct.calcsize("<HHQIH")
    layers = []
    for _ in range(n_layers):
        tag, stride, padding, ndim = struct.unpack_from("<BBBB", buf, pos)
        pos += 4
        if ndim == 0:
            layers.append((tag, None))
            continue
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(dims))
        w = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
        (nb,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        b = np.frombuffer(buf, dtype="<f4", count=nb, offset=pos).astype(np.float32)
        pos += 4 * nb
        layers.append((tag, ConvParams(w, b, stride, padding)))
    if pos != len(buf):
        raise ValueError(f"trailing bytes in weights file ({len(buf) - pos})")
    return layers, seed, epochs, in_ch
