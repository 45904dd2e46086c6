"""Differentiable primitives used by the counting network.

Image tensors are channels-first, either ``(C, H, W)`` or batched
``(N, C, H, W)``. There is no general broadcasting: binary ops require
identical shapes.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import DomainError, ShapeError
from .tensor import Tensor, make_output


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _to4d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 3:
        return a[None]
    if a.ndim == 4:
        return a
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {a.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    batched = x.data.ndim == 4
    xd = _to4d(x.data)
    wd, bd = weight.data, bias.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"weight must be (Cout, Cin, k, k), got {wd.shape}")
    if wd.shape[2] % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {wd.shape[2]}")
    n, c, h, w = xd.shape
    cout, cin, k, _ = wd.shape
    if cin != c:
        raise ShapeError(f"channel mismatch: input has {c}, weight expects {cin}")
    if bd.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bd.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"non-positive output extent ({ho}, {wo}) for input {h}x{w}, kernel {k}")

    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(n, c, h * w)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        cols = cols.reshape(n, c * k * k, ho * wo)
    w2 = wd.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols)
    out += bd[:, None]
    out = out.reshape(n, cout, ho, wo)
    if not batched:
        out = out[0]

    def backward_fn(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = sum(g3[b] @ cols[b].T for b in range(n)).reshape(wd.shape)
        if bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g3)
            if pointwise:
                gx = dcols.reshape(n, c, h, w)
            else:
                dcols = dcols.reshape(n, c, k, k, ho, wo)
                dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=xd.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
                gx = dxp[:, :, padding:padding + h, padding:padding + w]
            if not batched:
                gx = gx[0]
        return gx, gw, gb

    return make_output(out, "conv2d", (x, weight, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_output(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return make_output(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient flows only where the input was inside."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return make_output(out, "clamp", (x,), lambda g: (g * inside,))


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling. Ties go to the first maximum in row-major order."""
    x = _as_tensor(x)
    if window != stride:
        raise ShapeError("only non-overlapping pooling (window == stride) is supported")
    batched = x.data.ndim == 4
    xd = _to4d(x.data)
    n, c, h, w = xd.shape
    s = stride
    if h % s or w % s:
        raise ShapeError(f"extent {h}x{w} not divisible by pooling stride {s}")
    ho, wo = h // s, w // s
    blocks = xd.reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * s)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if not batched:
        out = out[0]

    def backward_fn(g):
        g4 = _to4d(g)
        gb = np.zeros((n, c, ho, wo, s * s), dtype=xd.dtype)
        np.put_along_axis(gb, idx[..., None], g4[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx if batched else gx[0],)

    return make_output(out, "maxpool2d", (x,), backward_fn)


@lru_cache(maxsize=64)
def _upsample_matrix(size: int, dtype_str: str) -> np.ndarray:
    """(2*size, size) bilinear interpolation matrix, half-pixel centres, edge clamp."""
    m = np.zeros((2 * size, size), dtype=np.float64)
    for i in range(2 * size):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), size - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, size - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def bilinear_upsample2x(x: Tensor, preserve_integral: bool = True) -> Tensor:
    """2x bilinear up-sampling along H and W.

    With ``preserve_integral`` the result is divided by 4 so a constant map
    keeps its pixel sum exactly.
    """
    x = _as_tensor(x)
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] < 1 or xd.shape[-2] < 1:
        raise ShapeError(f"cannot upsample shape {xd.shape}")
    h, w = xd.shape[-2:]
    uh = _upsample_matrix(h, xd.dtype.str)
    uw = _upsample_matrix(w, xd.dtype.str)
    factor = 0.25 if preserve_integral else 1.0
    out = np.matmul(np.matmul(uh, xd), uw.T)
    if preserve_integral:
        out *= factor

    def backward_fn(g):
        gx = np.matmul(np.matmul(uh.T, g), uw)
        if preserve_integral:
            gx *= factor
        return (gx,)

    return make_output(out, "upsample2x", (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[-3]
    out = np.concatenate([a.data, b.data], axis=-3)

    def backward_fn(g):
        return g[..., :ca, :, :], g[..., ca:, :, :]

    return make_output(out, "concat", (a, b), backward_fn)


def _check_same(a: Tensor, b: Tensor, kind: str):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return make_output(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return make_output(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def pointwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return make_output((x.data * c).astype(x.dtype, copy=False), "scale", (x,), lambda g: (g * c,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log of non-positive value (min {x.data.min()!r})")
    xd = x.data
    return make_output(np.log(xd), "log", (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError(f"sqrt of negative value (min {x.data.min()!r})")
    y = np.sqrt(x.data)
    return make_output(y, "sqrt", (x,), lambda g: (g * 0.5 / y,))


def _sample_axes(ndim: int, per_sample: bool):
    return tuple(range(1, ndim)) if per_sample else None


def sum_all(x: Tensor, per_sample: bool = False) -> Tensor:
    """Sum of every element, or of every element per leading index."""
    x = _as_tensor(x)
    shape = x.shape
    axes = _sample_axes(x.data.ndim, per_sample)
    out = np.asarray(x.data.sum(axis=axes))

    def backward_fn(g):
        if per_sample:
            g = np.asarray(g).reshape((-1,) + (1,) * (len(shape) - 1))
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return make_output(out, "sum", (x,), backward_fn)


def frobenius_norm(x: Tensor, per_sample: bool = False) -> Tensor:
    """sqrt(sum x^2); the gradient at an all-zero input is taken as zero."""
    x = _as_tensor(x)
    xd = x.data
    axes = _sample_axes(xd.ndim, per_sample)
    norm = np.asarray(np.sqrt((xd * xd).sum(axis=axes)))

    def backward_fn(g):
        nb, gb = norm, np.asarray(g)
        if per_sample:
            nb = nb.reshape((-1,) + (1,) * (xd.ndim - 1))
            gb = gb.reshape(nb.shape)
        safe = np.where(nb > 0, nb, 1)
        return (np.where(nb > 0, gb * xd / safe, 0).astype(xd.dtype),)

    return make_output(norm, "frobenius", (x,), backward_fn)
