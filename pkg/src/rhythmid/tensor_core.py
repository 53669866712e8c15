"""Small dense-tensor core with reverse-mode automatic differentiation.

Only the operations the rhythm encoder, fusion heads and their tests need are
provided. Every forward op checks its result for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating garbage.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf values."""


class ShapeError(ValueError):
    """Raised on incompatible operand shapes."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """An ndarray plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray | None) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data)
    out.op = name
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward, "permute")


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_dim: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, backward, "concat_last_dim")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def backward(g):
        return (g * pos,)

    return _make(x.data * pos, (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward(g):
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, (x,), backward, "gelu")


def row_softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding ``mask`` (0 or -inf entries).

    Positions carrying ``-inf`` get exactly zero weight. Every row must keep at
    least one finite entry.
    """
    z = x.data
    if mask is not None:
        try:
            np.broadcast_shapes(mask.shape, x.shape)
        except ValueError:
            raise ShapeError(f"row_softmax: mask shape {mask.shape} does not broadcast to {x.shape}") from None
        z = z + mask.astype(x.dtype, copy=False)
    zmax = z.max(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "row_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: parameter shapes {gain.shape}, {bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: token id out of range for table of {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) * x.dtype.type(1.0 / (1.0 - rate))

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


def mean_pool_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average ``x`` (batch, time, dim) over the time positions where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise ShapeError(f"mean_pool_masked: mask shape {mask.shape} does not match {x.shape}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("mean_pool_masked: a row has no valid positions")
    w = (mask / counts[:, None]).astype(x.dtype)[..., None]

    def backward(g):
        return (g[:, None, :] * w,)

    return _make((x.data * w).sum(axis=1), (x,), backward, "mean_pool_masked")


def _pad_time(x: np.ndarray, radius: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[-2] = (radius, radius)
    return np.pad(x, pad)


def band_scores(q: Tensor, k: Tensor, radius: int) -> Tensor:
    """Dot products of each query with the keys at offsets ``-radius..radius``.

    ``q`` and ``k`` are (..., time, dim); the result is (..., time, 2 * radius + 1)
    with entry ``[..., i, o]`` equal to ``q_i . k_{i + o - radius}`` and 0 where
    that key index falls outside the sequence.
    """
    if q.shape != k.shape:
        raise ShapeError(f"band_scores: incompatible shapes {q.shape} and {k.shape}")
    t = q.shape[-2]
    width = 2 * radius + 1
    kp = _pad_time(k.data, radius)
    out = np.empty(q.shape[:-1] + (width,), dtype=np.result_type(q.dtype, k.dtype))
    for o in range(width):
        out[..., o] = (q.data * kp[..., o : o + t, :]).sum(axis=-1)

    def backward(g):
        gq = np.zeros_like(q.data) if q.requires_grad else None
        gkp = np.zeros_like(kp) if k.requires_grad else None
        for o in range(width):
            go = g[..., o, None]
            if gq is not None:
                gq += go * kp[..., o : o + t, :]
            if gkp is not None:
                gkp[..., o : o + t, :] += go * q.data
        gk = gkp[..., radius : radius + t, :] if gkp is not None else None
        return gq, gk

    return _make(out, (q, k), backward, "band_scores")


def band_mix(weights: Tensor, v: Tensor, radius: int) -> Tensor:
    """Weighted sum of values at offsets ``-radius..radius``; inverse layout of :func:`band_scores`."""
    t = v.shape[-2]
    width = 2 * radius + 1
    if weights.shape != v.shape[:-1] + (width,):
        raise ShapeError(f"band_mix: incompatible shapes {weights.shape} and {v.shape}")
    vp = _pad_time(v.data, radius)
    out = np.zeros(v.shape, dtype=np.result_type(weights.dtype, v.dtype))
    for o in range(width):
        out += weights.data[..., o, None] * vp[..., o : o + t, :]

    def backward(g):
        gw = np.empty_like(weights.data) if weights.requires_grad else None
        gvp = np.zeros_like(vp) if v.requires_grad else None
        for o in range(width):
            if gw is not None:
                gw[..., o] = (g * vp[..., o : o + t, :]).sum(axis=-1)
            if gvp is not None:
                gvp[..., o : o + t, :] += weights.data[..., o, None] * g
        gv = gvp[..., radius : radius + t, :] if gvp is not None else None
        return gw, gv

    return _make(out, (weights, v), backward, "band_mix")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of (batch, classes) logits against integer targets."""
    targets = np.atleast_1d(np.asarray(targets))
    data = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    if data.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= data.shape[1]:
        raise IndexError("cross_entropy: target class out of range")
    n = data.shape[0]
    logp = log_softmax_np(data)
    rows = np.arange(n)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _make(np.asarray(-logp[rows, targets].mean()), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# Backpropagation
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with ``requires_grad``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    Inputs should be 64-bit tensors with ``requires_grad`` set.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = flat[i]
                up = fn(*inputs).item()
                flat[i] = orig - epsilon
                lo = flat[i]
                down = fn(*inputs).item()
                flat[i] = orig
                # divide by the step actually taken, not the nominal one
                numeric = (up - down) / (hi - lo)
                if not np.isfinite(numeric):
                    raise NonFiniteError("grad_check: non-finite finite-difference estimate")
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Parameter arrays are modified in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: state shape {m.shape} != param shape {p.shape} for {name}")
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


class Adam:
    """Adam over a name -> Tensor parameter mapping."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float, clip_norm: float | None = None) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {k}")
        if clip_norm is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > clip_norm:
                grads = {k: g * (clip_norm / total) for k, g in grads.items()}
        adam_step(
            {k: p.data for k, p in self.params.items()},
            grads,
            self.state,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )
