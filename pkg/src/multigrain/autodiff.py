"""Dense-tensor math with reverse-mode differentiation on an explicit tape.

The engine is deliberately small: float64 numpy arrays (float32 optional),
a flat list of executed primitive ops (the tape), and one hand-derived
vector-Jacobian product per primitive.  There is no broadcasting beyond
bias-style trailing-dimension adds; everything else must be reshaped
explicitly so that shape bugs surface at the call site.

Ops record onto the active tape only when at least one input requires
gradients, so evaluation-only forward passes pay no tracing cost.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_COEFF = 0.044715

_debug_checks = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(ValueError):
    """A tensor contains NaN or Inf values."""


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-value checking of every op output (slow, for debugging)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Immutable dense array with shape metadata and a requires_grad flag.

    Values are validated to be finite at construction.  Op outputs skip the
    check unless debug mode is on.  Tensors hash by identity, which the tape
    relies on; never define __eq__ here.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        if _debug_checks and not np.all(np.isfinite(data)):
            raise NonFiniteError("op produced non-finite values (debug check)")
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class OpRecord:
    """One executed primitive: inputs, output, and the vjp closure."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple, output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Ordered record of executed ops; replayed in reverse by backward()."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[OpRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> dict:
        return backward(loss, self)


_ACTIVE_TAPE: Optional[Tape] = None


class record:
    """Context manager activating a fresh (or given) tape for the block."""

    def __init__(self, tape: Optional[Tape] = None):
        self.tape = tape if tape is not None else Tape()
        self._prev: Optional[Tape] = None

    def __enter__(self) -> Tape:
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self.tape
        return self.tape

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


def _emit(op: str, inputs: tuple, out_data: np.ndarray, vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_data, needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.records.append(OpRecord(op, inputs, out, vjp))
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse sweep over `tape`; returns {leaf Tensor: gradient array}.

    Also populates `.grad` on every requires_grad leaf reached from `loss`.
    Gradients of tensors produced by the tape are accumulated internally but
    only leaves (tensors not produced by any record) appear in the result.
    """
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("backward called with an empty tape")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise ValueError("loss is not an output of this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        in_grads = rec.vjp(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[t] = grads[key]
    for t, g in leaves.items():
        t.grad = g
    return leaves


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (x,), x.data * s, lambda g: (g * s,))


def add_broadcast(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b matches the trailing dims of x (bias-style broadcast)."""
    k = b.ndim
    if k > x.ndim or x.shape[x.ndim - k:] != b.shape:
        raise ShapeError(f"add_broadcast: {b.shape} is not a trailing slice of {x.shape}")
    lead = tuple(range(x.ndim - k))

    def vjp(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _emit("add_broadcast", (x, b), x.data + b.data, vjp)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable constant; c may broadcast but must not enlarge x."""
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_const: constant {np.shape(c)} enlarges {x.shape}")
    return _emit("add_const", (x,), out, lambda g: (g,))


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-differentiable constant (dropout masks etc.)."""
    out = x.data * c
    if out.shape != x.shape:
        raise ShapeError(f"mul_const: constant {np.shape(c)} enlarges {x.shape}")
    return _emit("mul_const", (x,), out, lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    in_shape = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape),
                 lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inv),))


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data, False)


def tsum(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.size
    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; N-d inputs are batched with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks {a.shape} and {b.shape} are incompatible")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, vjp)


def kron(c: Tensor, d: Tensor) -> Tensor:
    """Kronecker product of two matrices: out[i*s+u, j*t+v] = c[i,j]*d[u,v]."""
    if c.ndim != 2 or d.ndim != 2:
        raise ShapeError(f"kron: expects matrices, got {c.shape} and {d.shape}")
    p, q = c.shape
    s, t = d.shape

    def vjp(g):
        g4 = g.reshape(p, s, q, t)
        gc = np.einsum("iujv,uv->ij", g4, d.data)
        gd = np.einsum("iujv,ij->uv", g4, c.data)
        return gc, gd

    return _emit("kron", (c, d), np.kron(c.data, d.data), vjp)


def apply_kron_factored(c: Tensor, d: Tensor, x: Tensor) -> Tensor:
    """x @ kron(c, d) without materializing the product.

    c: [p, q], d: [s, t], x: [batch, p*s] -> [batch, q*t], via the
    reshape-multiply-reshape route; gradients come from the primitives.
    """
    if c.ndim != 2 or d.ndim != 2 or x.ndim != 2:
        raise ShapeError(f"apply_kron_factored: bad ranks {c.shape}, {d.shape}, {x.shape}")
    p, q = c.shape
    s, t = d.shape
    n = x.shape[0]
    if x.shape[1] != p * s:
        raise ShapeError(
            f"apply_kron_factored: input width {x.shape[1]} != {p}*{s} from factors "
            f"{c.shape} x {d.shape}")
    h = reshape(x, (n * p, s))
    h = matmul(h, d)                        # [n*p, t]
    h = reshape(h, (n, p, t))
    h = transpose(h, (0, 2, 1))             # [n, t, p]
    h = reshape(h, (n * t, p))
    h = matmul(h, c)                        # [n*t, q]
    h = reshape(h, (n, t, q))
    h = transpose(h, (0, 2, 1))             # [n, q, t]
    return reshape(h, (n, q * t))


# ---------------------------------------------------------------------------
# gather / scatter


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]; grad scatter-adds."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", (table,), table.data[ids], vjp)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    idx = np.asarray(idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit("take_rows", (x,), x.data[idx], vjp)


def scatter_rows(x: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Place rows of x at positions idx in a zero tensor of num_rows rows."""
    idx = np.asarray(idx)
    if len(idx) != x.shape[0]:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for {x.shape[0]} rows")
    out = np.zeros((num_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, idx, x.data)
    return _emit("scatter_rows", (x,), out, lambda g: (g[idx],))


def gather_bs(x: Tensor, b_idx: np.ndarray, s_idx: np.ndarray) -> Tensor:
    """x[B, S, D] -> [M, D] at (b_idx[m], s_idx[m]); grad scatter-adds."""
    if x.ndim != 3:
        raise ShapeError(f"gather_bs: expects [B, S, D], got {x.shape}")
    b_idx = np.asarray(b_idx)
    s_idx = np.asarray(s_idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (b_idx, s_idx), g)
        return (gx,)

    return _emit("gather_bs", (x,), x.data[b_idx, s_idx], vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x: Tensor) -> Tensor:
    return _emit("relu", (x,), np.maximum(x.data, 0.0),
                 lambda g: (g * (x.data > 0.0),))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite-difference checks are clean)."""
    v = x.data
    v2 = v * v
    th = np.tanh(_SQRT_2_OVER_PI * v * (1.0 + _GELU_COEFF * v2))
    out = 0.5 * v * (1.0 + th)

    def vjp(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_COEFF * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * (v - v * th * th) * du),)

    return _emit("gelu", (x,), out, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ShapeError(
            f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} must be ({dim},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead) if lead else g
        ggamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dxhat = g * gamma.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _emit("layer_norm", (x, gamma, beta), out, vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), s, vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(lsm) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), lsm, vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under logits [N, C].

    An empty target set contributes a constant zero (no gradient), so callers
    can feed batches with no scored positions.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [N, C], got {logits.shape}")
    targets = np.asarray(targets)
    n = targets.shape[0]
    if logits.shape[0] != n:
        raise ShapeError(
            f"cross_entropy: {logits.shape[0]} logit rows vs {n} targets")
    if n == 0:
        return Tensor._from_op(np.asarray(0.0, dtype=logits.data.dtype), False)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError(f"cross_entropy: target outside [0, {logits.shape[1]})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -lsm[np.arange(n), targets].mean()

    def vjp(g):
        d = np.exp(lsm)
        d[np.arange(n), targets] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", (logits,), np.asarray(loss), vjp)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean KL(softmax(p) || softmax(q)) over rows; differentiable in both.

    Zero exactly when the logit arrays are identical; nonnegative up to the
    usual 1e-12 numerical floor.
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeError(
            f"kl_divergence: shapes {p_logits.shape} and {q_logits.shape} differ")
    if p_logits.ndim != 2:
        raise ShapeError(f"kl_divergence: logits must be [N, C], got {p_logits.shape}")
    n = p_logits.shape[0]

    def _lsm(v):
        z = v - v.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    lp = _lsm(p_logits.data)
    lq = _lsm(q_logits.data)
    p = np.exp(lp)
    row_kl = (p * (lp - lq)).sum(axis=-1)
    out = np.asarray(row_kl.mean())

    def vjp(g):
        gp = (g / n) * p * ((lp - lq) - row_kl[:, None])
        gq = (g / n) * (np.exp(lq) - p)
        return gp, gq

    return _emit("kl_divergence", (p_logits, q_logits), out, vjp)
