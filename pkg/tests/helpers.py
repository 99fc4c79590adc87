"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from rfe.tensor_core import Tape, Tensor


def vjp(fn, arrays, cotangent=None):
    """Analytic gradients of ``sum(fn(*inputs) * cotangent)`` via the tape."""
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*inputs)
    seed = np.ones_like(out.data) if cotangent is None else cotangent
    tape.backward(out, seed=seed)
    return out.data, [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, inputs)]


def numeric_grad(fn, arrays, cotangent=None, h=1e-5):
    """Central differences of ``sum(fn(*arrays) * cotangent)`` w.r.t. every input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def scalar():
        out = fn(*[Tensor(a) for a in arrays]).data
        return float(np.sum(out * (1.0 if cotangent is None else cotangent)))

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = scalar()
            a[i] = old - h
            down = scalar()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn, arrays, rng=None, h=1e-5):
    """Largest per-input relative error between tape and finite-difference gradients."""
    rng = np.random.default_rng(0) if rng is None else rng
    out = fn(*[Tensor(a) for a in arrays]).data
    cot = rng.normal(size=out.shape)
    _, analytic = vjp(fn, arrays, cot)
    numeric = numeric_grad(fn, arrays, cot, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def conv2d_loops(x, k, b=None, stride=1, padding=0):
    """Direct nested-loop cross-correlation for a single (C, H, W) input."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[c, i * stride + u, j * stride + v] * k[o, c, u, v]
                out[o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def maxpool_loops(x, window, stride):
    """Nested-loop max pool plus the (c, row, col) of each window's first maximum."""
    c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((c, ho, wo))
    where = {}
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                best, pos = -np.inf, None
                for u in range(window):
                    for v in range(window):
                        val = x[ch, i * stride + u, j * stride + v]
                        if val > best:
                            best, pos = val, (ch, i * stride + u, j * stride + v)
                out[ch, i, j] = best
                where[ch, i, j] = pos
    return out, where


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def tiny_stream(n_tasks=2, seed=0, drift=0.5, samples=60, dim=6, separation=3.0):
    from rfe.data import make_blob_stream
    return make_blob_stream(n_tasks, 2, dim, samples, separation, drift, seed).standardize()


def tiny_model(dim=6, seed=0, retrospector="gated", dim_f=8, dim_h=4, d=4):
    from rfe.model import ContinualModel, ModelConfig
    cfg = ModelConfig((dim,), dim_f=dim_f, dim_h=dim_h, joint_dim=d, hidden=(8,), retrospector=retrospector)
    return ContinualModel(cfg, seed)


def tiny_trainer(kind="rfe", capacity=0, alpha=1.0, epochs=3, seed=0, end_to_end=False, lr=5e-3):
    from rfe.engine import StrategyConfig, TrainConfig, Trainer
    return Trainer(StrategyConfig(kind, capacity, alpha, end_to_end),
                   TrainConfig(epochs=epochs, aux_epochs=epochs, retro_epochs=epochs, lr=lr, seed=seed))


ACCEPTANCE_LINES: list = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record one acceptance verdict and fail the calling test if it did not pass."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
