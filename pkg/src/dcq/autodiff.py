"""Minimal reverse-mode differentiable tensor core.

Dense numpy-backed tensors with a dynamic tape: each op records a backward
closure and its parent tensors, and ``backward`` walks the graph in reverse
topological order. Ops compute in the dtype of their inputs, so the same
network runs in float32 for training and float64 for gradient verification.
Forward passes are deterministic for fixed inputs (fixed reduction order,
no threading assumptions beyond numpy's own).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Reverse-accumulate gradients from a scalar loss tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise and structural ops ----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


residual_add = add


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    def bw(g):
        _accumulate(a, g * s)

    return _result(a.data * s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _result(np.where(mask, a.data, 0), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g / (2.0 * out_data))

    return _result(out_data, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (numerically stabilized)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _result(y, (a,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def index_select(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.int64)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, indices, g)
            _accumulate(a, buf)

    return _result(a.data[indices], (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with x [N, in] and w [out, in]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear shapes incompatible: x {x.shape}, w {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data

    def bw(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, D, H, W] -> [N, C], averaging the spatial axes."""
    if x.data.ndim != 5:
        raise ShapeError(f"global_avg_pool expects [N,C,D,H,W], got {x.shape}")
    n_spatial = x.shape[2] * x.shape[3] * x.shape[4]

    def bw(g):
        _accumulate(
            x,
            np.broadcast_to(g[:, :, None, None, None] / n_spatial, x.shape).copy(),
        )

    return _result(x.data.mean(axis=(2, 3, 4)), (x,), bw)


# --- 3D convolution ----------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    return tuple(int(i) for i in v)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of [N,C,D,H,W] with [K,C,kd,kh,kw] kernels."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape}, weight {w.shape}")
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    kd, kh, kw = w.shape[2:]
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    if kd > xp.shape[2] or kh > xp.shape[3] or kw > xp.shape[4]:
        raise ShapeError(
            f"kernel {w.shape} exceeds padded input extent {xp.shape[2:]}"
        )
    win = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    # win: [N, C, Do, Ho, Wo, kd, kh, kw]
    y = np.tensordot(win, w.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.ascontiguousarray(y.transpose(0, 4, 1, 2, 3))
    if b is not None:
        y = y + b.data[None, :, None, None, None]
    do, ho, wo = y.shape[2:]

    def bw(g):
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
            _accumulate(w, gw)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            # scatter g * w back through every kernel offset
            t = np.tensordot(g, w.data, axes=([1], [0]))  # [N,Do,Ho,Wo,C,kd,kh,kw]
            gxp = np.zeros_like(xp)
            for a in range(kd):
                for c in range(kh):
                    for e in range(kw):
                        gxp[:, :, a : a + sd * do : sd, c : c + sh * ho : sh, e : e + sw * wo : sw] += (
                            t[:, :, :, :, :, a, c, e].transpose(0, 4, 1, 2, 3)
                        )
            if pd or ph or pw:
                gxp = gxp[:, :, pd : gxp.shape[2] - pd, ph : gxp.shape[3] - ph, pw : gxp.shape[4] - pw]
            _accumulate(x, gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _result(y, parents, bw)


# --- losses ------------------------------------------------------------------

RMSE_EPS = 1e-12


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        _accumulate(pred, g * 2.0 * diff / n)
        _accumulate(target, g * (-2.0) * diff / n)

    return _result(np.mean(diff * diff), (pred, target), bw)


def rmse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """sqrt(mse + 1e-12); the epsilon keeps the gradient finite at zero error."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    r = math.sqrt(np.mean(diff * diff) + RMSE_EPS)

    def bw(g):
        _accumulate(pred, g * diff / (n * r))
        _accumulate(target, g * (-diff) / (n * r))

    return _result(np.asarray(r, dtype=pred.dtype), (pred, target), bw)


# --- parameters and Adam -----------------------------------------------------


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True


def zero_grads(params) -> None:
    for p in params:
        p.tensor.grad = None


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """Textbook Adam with bias correction; frozen params are skipped."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.tensor.data)
            state.v[p.name] = np.zeros_like(p.tensor.data)
        m = state.m[p.name]
        v = state.v[p.name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.tensor.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


def step_decay_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * 0.5^floor(3 * epoch / total_epochs)."""
    return lr0 * 0.5 ** ((3 * epoch) // total_epochs)


# --- finite-difference gradient checking -------------------------------------


def grad_check(build_loss, wrt, h_scale: float = 1e-5, max_elements: int | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` re-runs the forward pass from the current tensor data and
    returns the scalar loss; ``wrt`` lists the tensors to check. Run in
    float64 for meaningful tolerances. For large tensors ``max_elements``
    checks an evenly strided subset instead of every element.
    """
    for t in wrt:
        t.grad = None
    loss = build_loss()
    backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in wrt]

    worst = 0.0
    for t, g in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        ga = np.zeros_like(flat) if g is None else g.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            sel = np.linspace(0, n - 1, max_elements).astype(np.int64)
        else:
            sel = np.arange(n)
        for i in sel:
            x0 = flat[i]
            h = h_scale * max(1.0, abs(float(x0)))
            flat[i] = x0 + h
            lp = float(build_loss().data)
            flat[i] = x0 - h
            lm = float(build_loss().data)
            flat[i] = x0
            fd = (lp - lm) / (2.0 * h)
            a = float(ga[i])
            rel = abs(a - fd) / max(1e-8, abs(a), abs(fd))
            if rel > worst:
                worst = rel
    return worst
