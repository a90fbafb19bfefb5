"""Dense numerical kernels with explicit forward and backward passes.

Arrays are plain ``numpy.ndarray`` in float64. Feature maps are channels-first
``(C, H, W)`` with no batch axis; point features are ``(N, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class LinearParams:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class Conv2dParams:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray  # (out_c,)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> LinearParams:
    bound = np.sqrt(6.0 / n_in)
    return LinearParams(rng.uniform(-bound, bound, (n_out, n_in)), np.zeros(n_out))


def init_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int,
              stride=1, padding=0) -> Conv2dParams:
    kh, kw = _pair(k)
    bound = np.sqrt(6.0 / (c_in * kh * kw))
    return Conv2dParams(rng.uniform(-bound, bound, (c_out, c_in, kh, kw)),
                        np.zeros(c_out), _pair(stride), _pair(padding))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def _check_linear(x: np.ndarray, p: LinearParams) -> None:
    if x.ndim != 2 or p.weight.ndim != 2 or x.shape[1] != p.weight.shape[1]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weight shape {p.weight.shape}")
    if p.bias.shape != (p.weight.shape[0],):
        raise DimensionError(
            f"linear: bias shape {p.bias.shape} incompatible with weight shape {p.weight.shape}")


def linear_forward(x: np.ndarray, p: LinearParams, activated: bool = False) -> np.ndarray:
    """Row-wise ``W @ x_i + b``, optionally rectified."""
    _check_linear(x, p)
    y = x @ p.weight.T + p.bias
    return relu(y) if activated else y


def linear_backward(x: np.ndarray, p: LinearParams, upstream: np.ndarray,
                    activated: bool = False):
    """Gradients ``(grad_x, grad_weight, grad_bias)`` of :func:`linear_forward`."""
    _check_linear(x, p)
    if upstream.shape != (x.shape[0], p.weight.shape[0]):
        raise DimensionError(
            f"linear: upstream shape {upstream.shape} does not match output "
            f"shape {(x.shape[0], p.weight.shape[0])}")
    if activated:
        upstream = upstream * ((x @ p.weight.T + p.bias) > 0)
    return upstream @ p.weight, upstream.T @ x, upstream.sum(axis=0)


# ---------------------------------------------------------------------------
# conv2d (cross-correlation)
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, s: int, pad: int) -> int:
    return (n + 2 * pad - k) // s + 1


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, kh, kw, ho, wo), strides=(s0, s1, s2, s1 * sh, s2 * sw),
        writeable=False)


def _conv_forward_cached(x: np.ndarray, p: Conv2dParams):
    if x.ndim != 3 or p.weight.ndim != 4 or x.shape[0] != p.weight.shape[1]:
        raise DimensionError(
            f"conv2d: input shape {x.shape} incompatible with weight shape {p.weight.shape}")
    c, h, w = x.shape
    o, _, kh, kw = p.weight.shape
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(
            f"conv2d: kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho, wo = _conv_out_size(h, kh, sh, ph), _conv_out_size(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    cols = _windows(np.ascontiguousarray(xp), kh, kw, sh, sw, ho, wo).reshape(c * kh * kw, ho * wo)
    y = (p.weight.reshape(o, -1) @ cols).reshape(o, ho, wo) + p.bias[:, None, None]
    return y, (x.shape, xp.shape, cols)


def _conv_backward_cached(upstream: np.ndarray, p: Conv2dParams, cache):
    x_shape, xp_shape, cols = cache
    o, c, kh, kw = p.weight.shape
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.padding)
    _, ho, wo = upstream.shape
    g = upstream.reshape(o, ho * wo)
    grad_w = (g @ cols.T).reshape(p.weight.shape)
    grad_b = g.sum(axis=1)
    dcols = (p.weight.reshape(o, -1).T @ g).reshape(c, kh, kw, ho, wo)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, i, j]
    h, w = x_shape[1], x_shape[2]
    return dxp[:, ph:ph + h, pw:pw + w], grad_w, grad_b


def conv2d_forward(x: np.ndarray, p: Conv2dParams, activated: bool = False) -> np.ndarray:
    """2D cross-correlation of a ``(C, H, W)`` map."""
    y, _ = _conv_forward_cached(x, p)
    return relu(y) if activated else y


def conv2d_backward(x: np.ndarray, p: Conv2dParams, upstream: np.ndarray,
                    activated: bool = False):
    """Gradients ``(grad_x, grad_weight, grad_bias)`` of :func:`conv2d_forward`."""
    y, cache = _conv_forward_cached(x, p)
    if upstream.shape != y.shape:
        raise DimensionError(f"conv2d: upstream shape {upstream.shape} != output shape {y.shape}")
    if activated:
        upstream = upstream * (y > 0)
    return _conv_backward_cached(upstream, p, cache)


# ---------------------------------------------------------------------------
# transposed conv2d
# ---------------------------------------------------------------------------

def _deconv_geometry(x: np.ndarray, p: Conv2dParams):
    if x.ndim != 3 or p.weight.ndim != 4 or x.shape[0] != p.weight.shape[1]:
        raise DimensionError(
            f"deconv2d: input shape {x.shape} incompatible with weight shape {p.weight.shape}")
    _, h, w = x.shape
    _, _, kh, kw = p.weight.shape
    sh, sw = _pair(p.stride)
    ph, pw = _pair(p.padding)
    ho = (h - 1) * sh - 2 * ph + kh
    wo = (w - 1) * sw - 2 * pw + kw
    if ho < 1 or wo < 1:
        raise DimensionError(f"deconv2d: non-positive output extent {(ho, wo)} for input {x.shape}")
    return h, w, kh, kw, sh, sw, ph, pw, ho, wo


def deconv2d_forward(x: np.ndarray, p: Conv2dParams, activated: bool = False) -> np.ndarray:
    """Transposed convolution; weight layout ``(out_c, in_c, kh, kw)``."""
    h, w, kh, kw, sh, sw, ph, pw, ho, wo = _deconv_geometry(x, p)
    o = p.weight.shape[0]
    full = np.zeros((o, (h - 1) * sh + kh, (w - 1) * sw + kw))
    xf = x.reshape(x.shape[0], -1)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + sh * h:sh, j:j + sw * w:sw] += (p.weight[:, :, i, j] @ xf).reshape(o, h, w)
    y = full[:, ph:ph + ho, pw:pw + wo] + p.bias[:, None, None]
    return relu(y) if activated else y


def deconv2d_backward(x: np.ndarray, p: Conv2dParams, upstream: np.ndarray,
                      activated: bool = False, out: np.ndarray | None = None):
    """Gradients ``(grad_x, grad_weight, grad_bias)`` of :func:`deconv2d_forward`.

    ``out`` may carry the forward output to skip recomputing the activation mask.
    """
    h, w, kh, kw, sh, sw, ph, pw, ho, wo = _deconv_geometry(x, p)
    o, c = p.weight.shape[:2]
    if upstream.shape != (o, ho, wo):
        raise DimensionError(f"deconv2d: upstream shape {upstream.shape} != output shape {(o, ho, wo)}")
    if activated:
        if out is None:
            out = deconv2d_forward(x, p)
        upstream = upstream * (out > 0)
    full = np.zeros((o, (h - 1) * sh + kh, (w - 1) * sw + kw))
    full[:, ph:ph + ho, pw:pw + wo] = upstream
    xf = x.reshape(c, -1)
    grad_x = np.zeros((c, h * w))
    grad_w = np.zeros_like(p.weight)
    for i in range(kh):
        for j in range(kw):
            g = full[:, i:i + sh * h:sh, j:j + sw * w:sw].reshape(o, -1)
            grad_x += p.weight[:, :, i, j].T @ g
            grad_w[:, :, i, j] = g @ xf.T
    return grad_x.reshape(x.shape), grad_w, upstream.sum(axis=(1, 2))


class ConvLayer:
    """A conv or deconv with rectification flag; caches what backward needs."""

    def __init__(self, name: str, stride=1, padding=0, activated: bool = True,
                 transposed: bool = False):
        self.name = name
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        self.activated = activated
        self.transposed = transposed

    def params(self, store: dict) -> Conv2dParams:
        return Conv2dParams(store[self.name + ".weight"], store[self.name + ".bias"],
                            self.stride, self.padding)

    def forward(self, store: dict, x: np.ndarray):
        p = self.params(store)
        if self.transposed:
            y = deconv2d_forward(x, p)
            cache = x
        else:
            y, cache = _conv_forward_cached(x, p)
        if self.activated:
            y = relu(y)
        return y, (cache, y)

    def backward(self, store: dict, upstream: np.ndarray, cache, grads: dict) -> np.ndarray:
        inner, y = cache
        p = self.params(store)
        if self.activated:
            upstream = upstream * (y > 0)
        if self.transposed:
            gx, gw, gb = deconv2d_backward(inner, p, upstream)
        else:
            gx, gw, gb = _conv_backward_cached(upstream, p, inner)
        accumulate(grads, self.name + ".weight", gw)
        accumulate(grads, self.name + ".bias", gb)
        return gx


def accumulate(grads: dict, key: str, value: np.ndarray) -> None:
    """Add ``value`` into ``grads[key]``, creating the entry if missing."""
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value

