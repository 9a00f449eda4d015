"""Reverse-mode automatic differentiation over dense float tensors.

A small numpy-backed engine. Every operation records its parent tensors
and a vector-Jacobian closure; :func:`backward` replays the recorded
graph once in reverse topological order. Gradients are themselves
tensors built from the same primitives, so a second backward pass (used
for exact Hessian-vector products) works when ``create_graph=True``.

Storage is 32-bit by default. Finite-difference oracles in the test
suite instantiate the same operations in 64-bit, which the engine
supports via an explicit dtype.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Clamp floor inside KL divergences; keeps log() off exact zeros.
KL_EPS = 1e-8

# Step-size constants for central-difference Hessian-vector products.
HVP_EPS0 = 1e-2
HVP_DELTA = 1e-8


class NonFiniteError(ArithmeticError):
    """A tensor operation produced NaN or Inf values."""


class GradientError(RuntimeError):
    """The backward pass was asked for something the graph cannot give."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording inside its body."""

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc: object) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class enable_grad:
    """Context manager that re-enables graph recording inside its body."""

    def __enter__(self) -> "enable_grad":
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = True
        return self

    def __exit__(self, *exc: object) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _ensure_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{where}'")


class Tensor:
    """Dense float array plus an optional handle into the recorded graph."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_op")

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | type | None = None,
    ) -> None:
        arr = np.asarray(data)
        # astype rather than ascontiguousarray: the latter promotes 0-d to 1-d.
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        _ensure_finite(arr, name or "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple[Tensor | None, ...]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._vjp = None
        out._op = "detach"
        return out

    def __repr__(self) -> str:
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.shape}, dtype={self.data.dtype})"

    # Operator sugar. Scalars and ndarrays lift to constant tensors.
    def __add__(self, other: object) -> "Tensor":
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other: object) -> "Tensor":
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other: object) -> "Tensor":
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other: object) -> "Tensor":
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other: object) -> "Tensor":
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other: object) -> "Tensor":
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other: object) -> "Tensor":
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other: object) -> "Tensor":
        return div(_lift(other, self.dtype), self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)


def _lift(x: object, dtype: np.dtype | type) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x: object, dtype: np.dtype | type | None = None) -> Tensor:
    """Wrap a value as a non-differentiable tensor."""
    return Tensor(x, requires_grad=False, dtype=dtype)


def _from_op(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    vjp: Callable[[Tensor], tuple[Tensor | None, ...]],
    op: str,
) -> Tensor:
    arr = np.asarray(data)
    _ensure_finite(arr, op)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.name = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to the originating shape."""
    if g.shape == shape:
        return g
    out = g
    while out.ndim > len(shape):
        out = tsum(out, axis=0)
    for ax, (have, want) in enumerate(zip(out.shape, shape)):
        if want == 1 and have != 1:
            out = tsum(out, axis=ax, keepdims=True)
    if out.shape != shape:
        out = reshape(out, shape)
    return out


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g: Tensor) -> tuple[Tensor, Tensor]:
        da = div(g, b)
        db = neg(div(mul(g, a), mul(b, b)))
        return _sum_to(da, a.shape), _sum_to(db, b.shape)

    return _from_op(a.data / b.data, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (neg(g),), "neg")


def pow_const(a: Tensor, p: float) -> Tensor:
    def vjp(g: Tensor) -> tuple[Tensor]:
        return (mul(g, mul(constant(np.asarray(p, dtype=a.dtype)), pow_const(a, p - 1.0))),)

    return _from_op(a.data**p, (a,), vjp, "pow")


def exp(a: Tensor) -> Tensor:
    out = _from_op(np.exp(a.data), (a,), lambda g: (mul(g, out),), "exp")
    return out


def log(a: Tensor) -> Tensor:
    return _from_op(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a: Tensor) -> Tensor:
    out = _from_op(
        np.sqrt(a.data),
        (a,),
        lambda g: (div(g, mul(constant(np.asarray(2.0, dtype=a.dtype)), out)),),
        "sqrt",
    )
    return out


def relu(a: Tensor) -> Tensor:
    mask = constant((a.data > 0).astype(a.dtype.type))
    return _from_op(np.maximum(a.data, 0), (a,), lambda g: (mul(g, mask),), "relu")


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; gradient passes only where the input was untouched."""
    passthrough = np.ones(a.shape, dtype=bool)
    if lo is not None:
        passthrough &= a.data >= lo
    if hi is not None:
        passthrough &= a.data <= hi
    mask = constant(passthrough.astype(a.dtype.type))
    return _from_op(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),), "clip")


# ---------------------------------------------------------------------------
# shape and linear-algebra primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def vjp(g: Tensor) -> tuple[Tensor, Tensor]:
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _from_op(a.data @ b.data, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if axis not in (0, 1):
        raise ValueError("narrow supports axis 0 or 1")
    idx: tuple[slice, ...] = (slice(start, start + length),)
    if axis == 1:
        idx = (slice(None), slice(start, start + length))
    return _from_op(
        np.ascontiguousarray(a.data[idx]),
        (a,),
        lambda g: (_embed(g, a.shape, axis, start),),
        "narrow",
    )


def _embed(g: Tensor, shape: tuple[int, ...], axis: int, start: int) -> Tensor:
    """Place a slice gradient into a zero tensor of the original shape."""
    data = np.zeros(shape, dtype=g.dtype)
    idx: tuple[slice, ...] = (slice(start, start + g.shape[axis]),)
    if axis == 1:
        idx = (slice(None), slice(start, start + g.shape[axis]))
    data[idx] = g.data
    length = g.shape[axis]
    return _from_op(data, (g,), lambda gg: (narrow(gg, axis, start, length),), "embed")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)

    def vjp(g: Tensor) -> tuple[Tensor, ...]:
        outs = []
        offset = 0
        for t in ts:
            outs.append(narrow(g, axis, offset, t.shape[axis]))
            offset += t.shape[axis]
        return tuple(outs)

    return _from_op(data, tuple(ts), vjp, "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    ts = list(tensors)
    rows = [reshape(t, (1,) + t.shape) for t in ts]
    return concat(rows, axis=0)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Tensor) -> tuple[Tensor]:
        gg = g
        if axis is not None and not keepdims:
            kept = list(a.shape)
            kept[axis] = 1
            gg = reshape(gg, tuple(kept))
        elif axis is None:
            gg = reshape(gg, (1,) * a.ndim)
        return (broadcast_to(gg, a.shape),)

    return _from_op(data, (a,), vjp, "sum")


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(np.asarray(1.0 / n, dtype=a.dtype)))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if a.shape == shape:
        return a
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _from_op(data, (a,), lambda g: (_sum_to(g, a.shape),), "broadcast")


def gather_rows(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer index."""
    idx = np.asarray(ids, dtype=np.int64)
    num_rows = table.shape[0]
    return _from_op(
        table.data[idx],
        (table,),
        lambda g: (scatter_rows(g, idx, num_rows),),
        "gather_rows",
    )


def scatter_rows(g: Tensor, ids: np.ndarray, num_rows: int) -> Tensor:
    """Add rows of ``g`` into a zero table at the given indices."""
    idx = np.asarray(ids, dtype=np.int64)
    data = np.zeros((num_rows,) + g.shape[1:], dtype=g.dtype)
    np.add.at(data, idx, g.data)
    return _from_op(data, (g,), lambda gg: (gather_rows(gg, idx),), "scatter_rows")


# ---------------------------------------------------------------------------
# softmax family and losses


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Tensor) -> tuple[Tensor]:
        inner = tsum(mul(g, out), axis=axis if axis >= 0 else out.ndim + axis, keepdims=True)
        return (mul(sub(g, inner), out),)

    out = _from_op(y, (a,), vjp, "softmax")
    return out


def logsumexp(a: Tensor) -> Tensor:
    """log(sum(exp(a))) for a vector, computed against a constant shift."""
    m = float(a.data.max())
    shift = constant(np.asarray(m, dtype=a.dtype))
    return add(log(tsum(exp(sub(a, shift)))), shift)


def cross_entropy(logits: Tensor, target: int | Tensor) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    An integer target selects one class; a tensor target is a probability
    vector (soft labels).
    """
    if logits.ndim != 1:
        raise ValueError(f"cross_entropy expects a logit vector, got shape {logits.shape}")
    lse = logsumexp(logits)
    if isinstance(target, Tensor):
        return sub(lse, tsum(mul(target, logits)))
    idx = int(target)
    if not 0 <= idx < logits.shape[0]:
        raise ValueError(f"target {idx} out of range for {logits.shape[0]} classes")
    picked = reshape(narrow(logits, 0, idx, 1), ())
    return sub(lse, picked)


def kl_divergence(p: Tensor, q: Tensor, eps: float = KL_EPS) -> Tensor:
    """KL(p || q) for probability vectors, with q clamped below by eps.

    Terms where p == 0 contribute exactly zero.
    """
    if p.shape != q.shape:
        raise ValueError(f"KL shape mismatch: {p.shape} vs {q.shape}")
    p_safe = clip(p, lo=eps)
    q_safe = clip(q, lo=eps)
    return tsum(mul(p, sub(log(p_safe), log(q_safe))))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    d = sub(pred, target)
    return tmean(mul(d, d))


# ---------------------------------------------------------------------------
# sparsemax


def sparsemax_project(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(z)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("sparsemax expects a non-empty vector")
    order = np.argsort(-v, kind="stable")
    zs = v[order]
    k = np.arange(1, v.size + 1)
    cumulative = np.cumsum(zs)
    support = 1.0 + k * zs > cumulative
    k_max = int(k[support][-1])
    tau = (cumulative[k_max - 1] - 1.0) / k_max
    return np.maximum(v - tau, 0.0).astype(v.dtype)


def sparsemax(z: Tensor) -> Tensor:
    p = sparsemax_project(z.data)
    support = constant((p > 0).astype(z.dtype.type))
    size = float((p > 0).sum())

    def vjp(g: Tensor) -> tuple[Tensor]:
        # J = Diag(m) - m m^T / |S| on the support indicator m.
        masked = mul(g, support)
        total = tsum(masked)
        correction = mul(support, mul(total, constant(np.asarray(1.0 / size, dtype=z.dtype))))
        return (sub(masked, correction),)

    return _from_op(p, (z,), vjp, "sparsemax")


# ---------------------------------------------------------------------------
# backward pass and Hessian-vector products


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar loss with respect to each tensor in ``wrt``.

    The recorded graph is traversed exactly once. Parameters the loss
    does not reach get a zero gradient and a logged warning. With
    ``create_graph=True`` the returned gradients are themselves graph
    nodes, so they can be differentiated again.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tracked tensor")

    order = _toposort(loss)
    grads: dict[int, Tensor] = {
        id(loss): constant(np.ones(loss.shape, dtype=loss.dtype))
    }
    wrt_ids = {id(t) for t in wrt}

    mode: no_grad | enable_grad = enable_grad() if create_graph else no_grad()
    with mode:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            try:
                parent_grads = node._vjp(g)
            except NonFiniteError as err:
                raise NonFiniteError(
                    f"non-finite gradient while differentiating '{node._op}': {err}"
                ) from err
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = pg if held is None else add(held, pg)
            if id(node) not in wrt_ids:
                del grads[id(node)]

    out: list[Tensor] = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            logger.warning("parameter %r is not reached by the loss; gradient is zero", t)
            g = constant(np.zeros(t.shape, dtype=t.dtype))
        out.append(g)
    return out


def _flat_norm(vs: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((v.astype(np.float64) ** 2).sum()) for v in vs)))


def hvp(
    loss_fn: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    v: Sequence[np.ndarray],
    mode: str = "central",
    eps0: float = HVP_EPS0,
    delta: float = HVP_DELTA,
) -> list[np.ndarray]:
    """Hessian-vector product of ``loss_fn`` at ``params`` with vector ``v``.

    ``central`` evaluates the gradient at symmetric perturbations along v
    with step eps0 / max(||v||, delta); ``exact`` differentiates through
    a backward pass built with ``create_graph=True``.
    """
    params = list(params)
    vs = [np.asarray(x, dtype=p.dtype) for x, p in zip(v, params)]
    if len(vs) != len(params):
        raise ValueError("direction does not match parameter structure")
    for p, x in zip(params, vs):
        if p.shape != x.shape:
            raise ValueError(f"direction shape {x.shape} does not match parameter {p.shape}")

    if mode == "central":
        eps = eps0 / max(_flat_norm(vs), delta)
        sides = []
        for sign in (1.0, -1.0):
            shifted = [
                Tensor(p.data + sign * eps * x, requires_grad=True, name=p.name, dtype=p.dtype)
                for p, x in zip(params, vs)
            ]
            grads = backward(loss_fn(shifted), shifted)
            sides.append([g.data.astype(np.float64) for g in grads])
        return [
            ((gp - gm) / (2.0 * eps)).astype(params[i].dtype)
            for i, (gp, gm) in enumerate(zip(sides[0], sides[1]))
        ]

    if mode == "exact":
        loss = loss_fn(params)
        grads = backward(loss, params, create_graph=True)
        if not any(g.requires_grad for g in grads):
            raise GradientError(
                "exact mode needs a graph built with higher-order support; "
                "the first backward produced constant gradients"
            )
        pieces = [
            tsum(mul(g, constant(x, dtype=g.dtype)))
            for g, x in zip(grads, vs)
        ]
        total = pieces[0]
        for piece in pieces[1:]:
            total = add(total, piece)
        second = backward(total, params)
        return [g.data for g in second]

    raise ValueError(f"unknown hvp mode: {mode!r}")
