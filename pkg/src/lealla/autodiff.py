"""Reverse-mode automatic differentiation on numpy arrays.

Operations are recorded on an explicit tape (`Graph`) while one is active;
with no active graph, the same functions run as plain numpy forward passes
(inference mode). All computation is 64-bit. The op set is deliberately
small: exactly what the dual encoder and its training losses need.

Typical use::

    w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    with Graph() as g:
        loss = sq_norm(matmul(w, w))
        backward(g, loss)
    # w.grad now holds d loss / d w; grads accumulate until zeroed.
"""

from __future__ import annotations

import contextvars
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError

# tanh-approximation gelu constants (BERT convention)
_GELU_C = 0.7978845608
_GELU_A = 0.044715

_ACTIVE_GRAPH: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "lealla_active_graph", default=None
)


class Tensor:
    """A shape-tagged float64 array with an optional gradient buffer.

    `grad` is allocated only when `requires_grad` is set (trainable leaves);
    gradients of intermediate values live inside `backward` and are never
    stored on the tensors themselves.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """A fresh constant leaf holding a copy of this tensor's values."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded operation: kind, input tensors, output tensor, vjp."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp  # maps grad-of-output -> tuple of grads-of-inputs


class Graph:
    """Append-only operation tape; insertion order is topological order.

    Used as a context manager: ops called inside the `with` block are
    recorded here. Graph construction is single-threaded; forward passes
    with no active graph are pure and thread-safe.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def record(self, op, inputs, output, vjp) -> None:
        self.nodes.append(Node(op, inputs, output, vjp))

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE_GRAPH.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPH.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    g = _ACTIVE_GRAPH.get()
    if g is not None:
        g.record(op, inputs, out, vjp)
    return out


def backward(graph: Graph, root: Tensor) -> None:
    """Populate `.grad` of every trainable leaf with d root / d leaf.

    One pass visits each recorded node exactly once, in reverse insertion
    order. Repeated calls without zeroing accumulate into leaf grads.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    tensors: dict[int, Tensor] = {id(root): root}
    produced = {id(n.output) for n in graph.nodes}
    for node in reversed(graph.nodes):
        out_grad = pending.pop(id(node.output), None)
        if out_grad is None:
            continue
        for inp, grad in zip(node.inputs, node.vjp(out_grad)):
            if grad is None:
                continue
            key = id(inp)
            tensors[key] = inp
            if key in pending:
                pending[key] = pending[key] + grad
            else:
                pending[key] = grad
    # whatever is left was never produced by a node: these are the leaves
    for key, grad in pending.items():
        t = tensors[key]
        if t.requires_grad and key not in produced:
            t.grad += grad


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def _suffix_reduce(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over leading axes so it matches a suffix-broadcast operand."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may be a trailing-shape (suffix) broadcast."""
    if a.shape != b.shape and a.shape[a.data.ndim - b.data.ndim :] != b.shape:
        raise ShapeError(f"add shapes {a.shape} + {b.shape}")
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (g, _suffix_reduce(g, b.shape)),
    )


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"subtract shapes {a.shape} - {b.shape}")
    return _emit("subtract", (a, b), a.data - b.data, lambda g: (g, -g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply shapes {a.shape} * {b.shape}")
    return _emit(
        "multiply", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data)
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable constant array (broadcast to a's shape)."""
    const = np.asarray(const, dtype=np.float64)
    if np.broadcast_shapes(a.shape, const.shape) != a.shape:
        raise ShapeError(f"constant shape {const.shape} does not broadcast to {a.shape}")
    return _emit("add_constant", (a,), a.data + const, lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D x 2-D, equal-leading-dim stacks, or ND x 2-D.

    Gradient rules: da = g @ b^T, db = a^T @ g (summed over stack dims when
    the operand is a plain 2-D matrix shared across the stack).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    if ad.ndim != bd.ndim and not (ad.ndim > 2 and bd.ndim == 2):
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    if ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, vjp)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return _emit("gelu", (a,), out, vjp)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t**2),))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(
        "mean", (a,), np.asarray(a.data.mean()), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def sq_norm(a: Tensor) -> Tensor:
    """Squared L2 norm of all elements (a scalar)."""
    return _emit("sq_norm", (a,), np.asarray((a.data**2).sum()), lambda g: (2.0 * g * a.data,))


def l2_normalize(a: Tensor) -> Tensor:
    """Normalize along the last axis; zero vectors pass through with a warning."""
    x = a.data
    norms = np.sqrt((x**2).sum(axis=-1, keepdims=True))
    zero = norms == 0.0
    if zero.any():
        warnings.warn("l2_normalize: zero vector left unnormalized", RuntimeWarning)
    safe = np.where(zero, 1.0, norms)
    y = x / safe

    def vjp(g):
        dotted = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * dotted) / safe
        return (np.where(zero, 0.0, gx),)

    return _emit("l2_normalize", (a,), y, vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer id; grads scatter-add back."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"id out of range for table with {table.shape[0]} rows"
        )

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _emit("embedding_lookup", (table,), table.data[ids], vjp)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dotted = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dotted),)

    return _emit("softmax_rows", (a,), y, vjp)


def logsumexp_rows(a: Tensor) -> Tensor:
    """log(sum(exp(x))) along the last axis, stabilized."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    sm = e / s
    return _emit("logsumexp_rows", (a,), out, lambda g: (np.expand_dims(g, -1) * sm,))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-vector zero mean / unit variance over the last axis, then affine."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs d={d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _emit("layer_norm", (a, gain, bias), out, vjp)


def diag_part(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a vector."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def vjp(g):
        gx = np.zeros_like(a.data)
        np.fill_diagonal(gx, g)
        return (gx,)

    return _emit("diag_part", (a,), a.data.diagonal().copy(), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit(
        "reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),)
    )


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit(
        "permute", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),)
    )


def transpose_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return permute(a, axes)


def slice_rows(a: Tensor, n: int) -> Tensor:
    """First n rows along axis 0."""
    if not 0 < n <= a.shape[0]:
        raise ShapeError(f"slice_rows n={n} of {a.shape}")

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[:n] = g
        return (gx,)

    return _emit("slice_rows", (a,), a.data[:n].copy(), vjp)


def take_position(a: Tensor, pos: int) -> Tensor:
    """Select one index along axis 1 (e.g. the CLS slot of N x S x d states)."""
    if a.data.ndim < 2 or not 0 <= pos < a.shape[1]:
        raise ShapeError(f"take_position pos={pos} of {a.shape}")

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[:, pos] = g
        return (gx,)

    return _emit("take_position", (a,), a.data[:, pos].copy(), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing backward grads with central finite differences."""

    max_rel_error: float
    tolerance: float
    passed: bool
    n_checked: int
    worst_param: int = -1

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.1e}, {self.n_checked} elements)"
        )


def finite_diff_check(f, params, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward grads of f() against central finite differences.

    f must be a deterministic zero-argument callable that reads `params`
    (trainable tensors) and returns a scalar Tensor built from autodiff ops.
    Existing grads on params are zeroed. Relative error per element is
    |ad - fd| / max(1, |ad|, |fd|).
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ContractError("finite_diff_check params must have requires_grad")
        p.zero_grad()
    with Graph() as g:
        out = f()
        if out.data.size != 1:
            raise ContractError("finite_diff_check needs a scalar-valued f")
        backward(g, out)
    ad_grads = [p.grad.copy() for p in params]

    max_rel = 0.0
    worst = -1
    n = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ad = ad_grads[pi].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ad[i] - fd) / max(1.0, abs(ad[i]), abs(fd))
            n += 1
            if rel > max_rel:
                max_rel = rel
                worst = pi
    return GradCheckReport(max_rel, tol, max_rel < tol, n, worst)
