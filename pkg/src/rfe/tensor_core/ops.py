"""Differentiable operations.

Every op accepts unbatched inputs in the shapes the model uses and, where it
is cheap to do so, a leading batch axis as well.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, EmptySupportError, InvalidTargetError
from .tensor import Tensor, as_tensor, current_tape


def _result(arr: np.ndarray, inputs, backward) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=track)
    if track:
        tape.record(out, inputs, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu`` or ``sigmoid``."""
    table = {"add": add, "mul": mul, "relu": relu, "sigmoid": sigmoid}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (in,) or (batch, in); weight is (in, out)."""
    squeeze = x.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2 or weight.ndim != 2 or xd.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = g[None, :] if squeeze else g
        gx = g2 @ wd.T
        gx = gx[0] if squeeze else gx
        gw = xd.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading batch axis."""
    return reshape(a, (a.shape[0], -1))


def index_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


# ---------------------------------------------------------------- convolution and pooling

def _batched(x: Tensor, ndim: int, op: str):
    if x.ndim == ndim - 1:
        return x.data[None], True
    if x.ndim == ndim:
        return x.data, False
    raise DimensionError(f"{op}: expected rank {ndim - 1} or {ndim}, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C_in, H, W) or (N, C_in, H, W) input with a
    (C_out, C_in, kh, kw) kernel."""
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    xd, squeeze = _batched(x, 4, "conv2d")
    if kernel.ndim != 4 or kernel.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} incompatible with input {x.shape}")
    c_out, _, kh, kw = kernel.shape
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    n, c_in, h, w = xd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    kd = kernel.data
    out = np.einsum("nchwij,ocij->nohw", cols, kd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g4 = g[None] if squeeze else g
        gk = np.einsum("nchwij,nohw->ocij", cols, g4, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                    "nohw,oc->nchw", g4, kd[:, :, i, j], optimize=True
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gx = gx[0] if squeeze else gx
        if bias is None:
            return gx, gk
        return gx, gk, g4.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out[0] if squeeze else out, inputs, backward)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum. Gradient flows to the first maximal element in
    row-major window order."""
    stride = window if stride is None else stride
    xd, squeeze = _batched(x, 4, "maxpool2d")
    n, c, h, w = xd.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} exceeds spatial extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // window
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % window
        nn_ = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(nn_, arg.shape), np.broadcast_to(cc, arg.shape), rows, cols), g4)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    xd, squeeze = _batched(x, 4, "global_avgpool")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def backward(g):
        g2 = g[None] if squeeze else g
        gx = np.broadcast_to(g2[:, :, None, None] / (h * w), xd.shape).copy()
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), backward)


# ---------------------------------------------------------------- losses

def masked_softmax_cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Cross-entropy with softmax restricted to unmasked units.

    ``logits`` is (M,) or (B, M); ``target`` an index or (B,) indices;
    ``mask`` a boolean (M,) or (B, M) array where True marks units that take
    part. Returns the batch mean. Masked positions get exactly zero gradient.
    """
    squeeze = logits.ndim == 1
    z = logits.data[None, :] if squeeze else logits.data
    if z.ndim != 2:
        raise DimensionError(f"cross entropy: logits must be rank 1 or 2, got {logits.shape}")
    b, m = z.shape
    tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if tgt.shape != (b,):
        raise DimensionError(f"cross entropy: {tgt.shape[0]} targets for {b} rows")
    if np.any(tgt < 0) or np.any(tgt >= m):
        raise InvalidTargetError(f"cross entropy: target outside [0, {m})")
    if mask is None:
        keep = np.ones((b, m), dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape == (m,):
            keep = np.broadcast_to(keep, (b, m))
        elif keep.shape != (b, m):
            raise DimensionError(f"cross entropy: mask {keep.shape} does not match logits {z.shape}")
    if not keep.any(axis=1).all():
        raise EmptySupportError("cross entropy: every unit is masked")
    rows = np.arange(b)
    if not keep[rows, tgt].all():
        raise InvalidTargetError("cross entropy: target unit is masked")
    zm = np.where(keep, z, -np.inf)
    zmax = zm.max(axis=1, keepdims=True)
    ex = np.where(keep, np.exp(zm - zmax), 0.0)
    denom = ex.sum(axis=1, keepdims=True)
    p = ex / denom
    logp_t = (z[rows, tgt] - zmax[:, 0]) - np.log(denom[:, 0])
    loss = -logp_t.mean()

    def backward(g):
        gz = p.copy()
        gz[rows, tgt] -= 1.0
        gz *= float(g) / b
        gz[~keep] = 0.0
        return (gz[0] if squeeze else gz,)

    return _result(np.asarray(loss), (logits,), backward)


def masked_softmax(logits: np.ndarray, mask=None) -> np.ndarray:
    """Plain-array softmax over unmasked units; masked entries are 0."""
    z = np.asarray(logits, dtype=np.float64)
    keep = np.ones(z.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if not keep.any(axis=-1).all():
        raise EmptySupportError("softmax: every unit is masked")
    zm = np.where(keep, z, -np.inf)
    ex = np.where(keep, np.exp(zm - zm.max(axis=-1, keepdims=True)), 0.0)
    return ex / ex.sum(axis=-1, keepdims=True)


def mse_sum(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance, averaged over the leading batch axis when present."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mse_sum")
    diff = a.data - b.data
    count = diff.shape[0] if diff.ndim > 1 else 1
    value = np.asarray((diff * diff).sum() / count)

    def backward(g):
        ga = (2.0 * float(g) / count) * diff
        return ga, -ga

    return _result(value, (a, b), backward)


def mean(tensors) -> Tensor:
    """Average of same-shape tensors (used to combine loss terms)."""
    tensors = list(tensors)
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(tensors))
