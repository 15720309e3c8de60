"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

A single module-level tape records every differentiable operation in creation
order. ``backward`` walks the tape in reverse, accumulating gradients into the
``grad`` buffer of leaf tensors (parameters). Intermediate tensors receive the
gradient of the most recent backward pass for inspection.

Binary elementwise operations require exactly equal shapes; the only broadcast
entry points are ``scale`` (scalar factor) and the explicit ``add_bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_FINITE_CHECKS = True
_GRAD_ENABLED = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied after every forward operation."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


class Tensor:
    """Row-major float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def grad_array(self) -> np.ndarray:
        """Gradient buffer, or zeros when this tensor was unused by the loss."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return _reduce_sum(self)

    def mean(self) -> "Tensor":
        return _reduce_mean(self)

    def abs(self) -> "Tensor":
        return _abs(self)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    pullback: object  # callable(grad_out) -> tuple of parent grads (or None)


@dataclass
class Tape:
    """Recorded operations in creation order (which is a topological order)."""

    nodes: list[_Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    """Drop all recorded operations, freeing saved activations."""
    _TAPE.nodes.clear()


class no_grad:
    """Context manager that disables tape recording (evaluation mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def apply_op(data: np.ndarray, parents: tuple[Tensor, ...], pullback) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are needed.

    ``pullback`` maps the output gradient to one gradient (or None) per parent.
    Other modules use this hook to define custom differentiable operations.
    """
    data = np.asarray(data, dtype=np.float64)
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("forward operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.tape_id = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.tape_id = len(_TAPE.nodes)
        _TAPE.nodes.append(_Node(out, tuple(parents), pullback))
    return out


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(tensor) for every tensor feeding the loss.

    Leaf tensors (no tape_id) accumulate into ``grad`` across calls; op outputs
    get the gradient of this call only.
    """
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if loss.tape_id is None:
        raise UsageError("loss is not recorded on the active tape")
    nodes = _TAPE.nodes
    buffers: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    for idx in range(loss.tape_id, -1, -1):
        g = buffers.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        node.out.grad = g
        for parent, pg in zip(node.parents, node.pullback(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tape_id is not None:
                acc = buffers.get(parent.tape_id)
                buffers[parent.tape_id] = pg if acc is None else acc + pg
            else:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return apply_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return apply_op(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return apply_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return apply_op(a.data * factor, (a,), lambda g: (g * factor,))


def mul_const(x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise product with a non-differentiated constant array.

    The constant may broadcast against ``x`` but must not expand its shape.
    """
    c = np.asarray(const, dtype=np.float64)
    out = x.data * c
    if out.shape != x.data.shape:
        raise DimensionError(
            f"mul_const: constant {c.shape} expands input {x.data.shape}"
        )
    return apply_op(out, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # overflow-safe: exp of a non-positive argument only
    t = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return apply_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return apply_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _flat_matmul(ad: np.ndarray, bd: np.ndarray) -> np.ndarray:
    """ad (..., m, k) @ bd (k, n) as one flattened product."""
    lead = ad.shape[:-1]
    return (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(lead + (bd.shape[-1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires rank >= 2 operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents {a.data.shape[-1]} and {b.data.shape[-2]} differ"
        )
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # batched rows against one weight matrix: a single flattened product
        # avoids looping tiny per-batch GEMMs
        def pull(g):
            ga = _flat_matmul(g, bd.T)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return apply_op(_flat_matmul(ad, bd), (a, b), pull)

    def pull(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return apply_op(ad @ bd, (a, b), pull)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis; leading extents must agree."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(
            f"concat_channels: leading extents {a.data.shape[:-1]} and "
            f"{b.data.shape[:-1]} differ"
        )
    c1 = a.data.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return apply_op(out, (a, b), lambda g: (g[..., :c1], g[..., c1:]))


def select_step(x: Tensor, t: int) -> Tensor:
    """Pick index ``t`` along the leading axis (a single time step)."""
    if x.data.ndim < 1 or not 0 <= t < x.data.shape[0]:
        raise DimensionError(f"select_step: index {t} out of range")

    def pull(g):
        z = np.zeros_like(x.data)
        z[t] = g
        return (z,)

    return apply_op(np.ascontiguousarray(x.data[t]), (x,), pull)


def stack_steps(steps: list[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading (time) axis."""
    if not steps:
        raise UsageError("stack_steps needs at least one step")
    out = np.stack([s.data for s in steps], axis=0)
    return apply_op(out, tuple(steps), lambda g: tuple(g[i] for i in range(len(steps))))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along the node axis (second to last); scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim < 2:
        raise DimensionError("gather_rows requires rank >= 2 input")

    def pull(g):
        z = np.zeros_like(x.data)
        zv = np.moveaxis(z, -2, 0)
        np.add.at(zv, index, np.moveaxis(g, -2, 0))
        return (z,)

    return apply_op(np.take(x.data, index, axis=-2), (x,), pull)


def _segment_members(segments: np.ndarray, n: int):
    from .errors import PartitionError

    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (n,):
        raise DimensionError(f"segment map length {segments.shape} != node count {n}")
    n_seg = int(segments.max()) + 1 if n else 0
    members = [np.flatnonzero(segments == s) for s in range(n_seg)]
    for s, idx in enumerate(members):
        if idx.size == 0:
            raise PartitionError(f"segment {s} is empty")
    return members


def segment_reduce(x: Tensor, segments: np.ndarray, mode: str) -> Tensor:
    """Per-segment reduction over the node axis (second to last).

    ``mode='mean'`` spreads the gradient uniformly over members; ``mode='max'``
    routes it to the first attaining member in node-index order.
    """
    if mode not in ("max", "mean"):
        raise UsageError(f"unknown segment_reduce mode {mode!r}")
    n = x.data.shape[-2]
    members = _segment_members(segments, n)
    xd = x.data
    if mode == "mean":
        out = np.stack([xd[..., idx, :].mean(axis=-2) for idx in members], axis=-2)

        def pull(g):
            z = np.zeros_like(xd)
            for s, idx in enumerate(members):
                z[..., idx, :] += g[..., s : s + 1, :] / idx.size
            return (z,)

    else:
        out = np.stack([xd[..., idx, :].max(axis=-2) for idx in members], axis=-2)

        def pull(g):
            z = np.zeros_like(xd)
            for s, idx in enumerate(members):
                sub = xd[..., idx, :]
                am = np.argmax(sub, axis=-2)  # first occurrence = lowest node id
                block = np.zeros_like(sub)
                np.put_along_axis(
                    block, am[..., None, :], g[..., s : s + 1, :], axis=-2
                )
                z[..., idx, :] += block
            return (z,)

    return apply_op(out, (x,), pull)


_LN_EPS = 1e-5


def layer_norm(h: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each row across the last axis (population variance), then
    apply the per-channel affine gain and bias."""
    c = h.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError("layer_norm gain/bias must match the channel count")
    mu = h.data.mean(axis=-1, keepdims=True)
    centered = h.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def pull(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dh = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dh, dgain, dbias

    return apply_op(out, (h, gain, bias), pull)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Explicitly broadcast a length-C vector over the leading axes of x."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError("add_bias: bias length must equal the channel count")
    c = b.data.shape[0]
    return apply_op(
        x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, c).sum(axis=0))
    )


def _reduce_sum(x: Tensor) -> Tensor:
    return apply_op(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape),)
    )


def _reduce_mean(x: Tensor) -> Tensor:
    inv = 1.0 / x.data.size
    return apply_op(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.broadcast_to(g * inv, x.data.shape),),
    )


def _abs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)  # subgradient 0 at exactly 0
    return apply_op(np.abs(x.data), (x,), lambda g: (g * sign,))


def glorot_init(shape: tuple[int, ...], seed: int) -> Tensor:
    """Uniform init in +-sqrt(6/(fan_in+fan_out)), deterministic per seed."""
    return glorot_from(np.random.default_rng(seed), shape)


def glorot_from(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """Glorot-uniform draw consuming the given generator stream.

    fan for rank 1 is the length on both sides; rank 2 uses the two extents;
    rank 3 kernels (K, C_out, C_in) use K*C_in / K*C_out.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise UsageError(f"glorot_init: non-positive extent in {shape}")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape[1], shape[0]
    elif len(shape) == 3:
        k, c_out, c_in = shape
        fan_in, fan_out = k * c_in, k * c_out
    else:
        raise UsageError(f"glorot_init: unsupported rank {len(shape)}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True)


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for Adam."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params/grads/state lengths differ")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise DimensionError("adam_step: gradient shape mismatch")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients down so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm <= 0 or total <= max_norm:
        return grads
    factor = max_norm / total
    return [g * factor for g in grads]
