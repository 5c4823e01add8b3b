"""Minimal dense f64 tensor engine with reverse-mode differentiation.

A Tape records operations in construction order (already topological); its
backward pass walks the records once in reverse. Ops are free functions over
Tensors; inputs without a tape are constants and cost nothing. Every op
output is checked finite, and reductions run in numpy's row-major order so
identical inputs give bit-identical results.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import EmptyGroup, NonFiniteInput

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense f64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.node is not None})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)


class Tape:
    """Append-only record of ops; backward visits each node exactly once."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._backward: list = []
        self._grads: list = []

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteInput("leaf tensor contains NaN/Inf")
        if not requires_grad:
            return Tensor(data)
        node = len(self._parents)
        self._parents.append(())
        self._backward.append(None)
        return Tensor(data, tape=self, node=node)

    def _record(self, data, parents: list[Tensor], backward) -> Tensor:
        node = len(self._parents)
        self._parents.append(tuple(p.node for p in parents if p.node is not None))
        self._backward.append(backward)
        return Tensor(data, tape=self, node=node)

    def backward(self, loss: Tensor):
        if loss.tape is not self or loss.node is None:
            raise ValueError("loss is not tracked on this tape")
        if loss.data.shape != ():
            raise ValueError("backward needs a scalar loss")
        n = len(self._parents)
        self._grads = [None] * n
        self._grads[loss.node] = np.ones(())
        for node in range(n - 1, -1, -1):
            g = self._grads[node]
            if g is None or self._backward[node] is None:
                continue
            parent_grads = self._backward[node](g)
            for pid, pg in zip(self._parents[node], parent_grads):
                if pg is None:
                    continue
                if self._grads[pid] is None:
                    self._grads[pid] = pg
                else:
                    self._grads[pid] = self._grads[pid] + pg

    def grad(self, t: Tensor) -> np.ndarray:
        if t.tape is not self or t.node is None:
            raise ValueError("tensor is not tracked on this tape")
        g = self._grads[t.node] if self._grads else None
        return np.zeros_like(t.data) if g is None else np.asarray(g)


@dataclass
class GroupSpec:
    """Group id per token; ids run 0..num_groups-1."""

    ids: np.ndarray
    num_groups: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError("group ids must be a 1-d array")
        if self.num_groups < 1:
            raise ValueError("need at least one group")
        if len(self.ids) and (self.ids.min() < 0 or self.ids.max() >= self.num_groups):
            raise ValueError("group ids must lie in 0..num_groups-1")


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def _tape_of(*tensors: Tensor):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("tensors live on different tapes")
    return tape


def _finish(data, parents, backward):
    if not np.all(np.isfinite(data)):
        raise NonFiniteInput("op produced NaN/Inf")
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    tracked = [p for p in parents if p.node is not None]
    return tape._record(data, tracked, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        grads = []
        if a.node is not None:
            grads.append(g @ b.data.T)
        if b.node is not None:
            grads.append(a.data.T @ g)
        return grads

    return _finish(out, [a, b], backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        bias_mode = False
    elif b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]:
        bias_mode = True
    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g):
        grads = []
        if a.node is not None:
            grads.append(g)
        if b.node is not None:
            grads.append(g.sum(axis=0) if bias_mode else g)
        return grads

    return _finish(out, [a, b], backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish(a.data * s, [a], lambda g: [g * s])


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.node is not None:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                grads.append(g[tuple(index)])
        return grads

    return _finish(out, list(tensors), backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return [full]

    return _finish(out, [x], backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _finish(out, [x], lambda g: [np.transpose(g, inv)])


def gelu(x: Tensor) -> Tensor:
    # Exact Gaussian-CDF form, not the tanh approximation.
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return [g * (cdf + x.data * pdf)]

    return _finish(out, [x], backward)


def _softmax_backward(y, g):
    inner = (g * y).sum(axis=1, keepdims=True)
    return y * (g - inner)


def row_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("row_softmax expects a rank-2 tensor")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("row_softmax input contains NaN/Inf")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _finish(y, [x], lambda g: [_softmax_backward(y, g)])


def masked_row_softmax(x: Tensor, key_mask: np.ndarray) -> Tensor:
    """Row softmax over unmasked columns only; masked columns get exactly 0."""
    if x.data.ndim != 2:
        raise ValueError("masked_row_softmax expects a rank-2 tensor")
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.shape != (x.shape[1],):
        raise ValueError("key_mask must have one entry per column")
    if not key_mask.any():
        raise EmptyGroup("all keys masked")
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteInput("masked_row_softmax input contains NaN/Inf")
    logits = np.where(key_mask[None, :], x.data, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly
    y = e / e.sum(axis=1, keepdims=True)
    return _finish(y, [x], lambda g: [_softmax_backward(y, g)])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("layer_norm expects a rank-2 tensor")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError("gain/bias must match the last axis")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        grads = []
        if x.node is not None:
            dxhat = g * gain.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            grads.append(dx)
        if gain.node is not None:
            grads.append((g * xhat).sum(axis=0))
        if bias.node is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _finish(out, [x, gain, bias], backward)


def group_max_pool(x: Tensor, groups: GroupSpec) -> Tensor:
    """Per-group per-channel max; gradient goes to the argmax token only
    (ties to the lowest token index)."""
    if x.data.ndim != 2:
        raise ValueError("group_max_pool expects tokens x channels")
    if len(groups.ids) != x.shape[0]:
        raise ValueError("group ids must cover every token")
    members = [np.flatnonzero(groups.ids == g) for g in range(groups.num_groups)]
    for g, idx in enumerate(members):
        if len(idx) == 0:
            raise EmptyGroup(f"group {g} has no tokens; mask it instead")
    c = x.shape[1]
    out = np.empty((groups.num_groups, c))
    argmax_rows = np.empty((groups.num_groups, c), dtype=np.int64)
    for g, idx in enumerate(members):
        sub = x.data[idx]
        am = np.argmax(sub, axis=0)  # first occurrence == lowest token index
        argmax_rows[g] = idx[am]
        out[g] = sub[am, np.arange(c)]

    def backward(g):
        dx = np.zeros_like(x.data)
        cols = np.arange(c)
        for gi in range(groups.num_groups):
            np.add.at(dx, (argmax_rows[gi], cols), g[gi])
        return [dx]

    return _finish(out, [x], backward)


def group_broadcast(y: Tensor, groups: GroupSpec) -> Tensor:
    """Copy each group's row to all its tokens (reverse of pooling)."""
    if y.data.ndim != 2 or y.shape[0] != groups.num_groups:
        raise ValueError("group_broadcast expects groups x channels")
    return gather_rows(y, groups.ids)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 1:
        raise ValueError("indices must be a 1-d array")
    if len(indices) and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ValueError("row index out of range")
    out = x.data[indices]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, indices, g)
        return [dx]

    return _finish(out, [x], backward)


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out rows where mask is False (mask is constant data)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError("mask must have one entry per row")
    m = mask.astype(np.float64)[:, None]
    return _finish(x.data * m, [x], lambda g: [g * m])


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("need logits (n x k) and one label per row")
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    losses = lse - logits.data[np.arange(n), labels]
    out = np.asarray(losses.mean())

    def backward(g):
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return [p * (float(g) / n)]

    return _finish(out, [logits], backward)


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    out = np.asarray(x.data.mean())
    return _finish(out, [x], lambda g: [np.full_like(x.data, float(g) / size)])


def grad_check(build_loss, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Central-difference check of the tape gradient.

    Args:
        build_loss: callable(dict name -> Tensor) returning a scalar Tensor;
            it is re-invoked for every probe, so it must be deterministic.
        params: named f64 arrays to differentiate with respect to.
        eps: central-difference step, within [1e-7, 1e-3].

    Returns:
        max over all coordinates of |analytic - numeric| /
        max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput(f"parameter {k!r} contains NaN/Inf")

    tape = Tape()
    tensors = {k: tape.leaf(v, requires_grad=True) for k, v in params.items()}
    loss = build_loss(tensors)
    tape.backward(loss)
    analytic = {k: tape.grad(t) for k, t in tensors.items()}

    def value_only() -> float:
        consts = {k: constant(v) for k, v in params.items()}
        return float(build_loss(consts).data)

    worst = 0.0
    for name, arr in params.items():
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value_only()
            flat[i] = orig - eps
            fm = value_only()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise NonFiniteInput("non-finite numeric gradient probe")
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
