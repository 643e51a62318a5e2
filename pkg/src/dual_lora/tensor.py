"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every operation builds its output eagerly and, when any input requires a
gradient, records a closure that maps the upstream gradient to gradients for
each input. ``backward`` walks the recorded graph in reverse topological order
and *accumulates* into ``.grad`` so that two passes over different graphs
(e.g. the anchor flow and the adversarial flow of one training step) sum
naturally before an optimizer update.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap ``data`` as the output of an operation on ``parents``.

        The graph edge is recorded only when some parent requires a gradient.
        """
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ----------------------------------------------------------


@dataclass
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class ComputeGraph:
    """Topologically ordered view of the graph feeding a tensor."""

    nodes: list[GraphNode] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputeGraph":
        order = _topological_order(root)
        index = {id(t): i for i, t in enumerate(order)}
        nodes = [
            GraphNode(t._op, tuple(index[id(p)] for p in t._parents), index[id(t)])
            for t in order
            if t._parents
        ]
        return cls(nodes=nodes, tensors=order)


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Seed d(loss)/d(loss) = 1 and accumulate gradients into the graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            upstream[key] = pg if key not in upstream else upstream[key] + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- primitive operations -----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(out, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor.from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def tensor_sum(a: Tensor) -> Tensor:
    return Tensor.from_op(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return Tensor.from_op(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")
    n = a.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return Tensor.from_op(a.data.mean(axis=axis), (a,), bw, "mean")


def max_over(a: Tensor, axis: int = -1) -> Tensor:
    """Hard max along ``axis``; the gradient goes to the first argmax only."""
    idx = np.argmax(a.data, axis=axis)
    note_branch(idx)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return Tensor.from_op(out, (a,), bw, "max")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[i, j] = sum_k W[j, k] * x[i, k] + b[j]``."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
        parents: tuple[Tensor, ...] = (x, W, b)
    else:
        parents = (x, W)

    def bw(g):
        gx = g @ W.data if x.requires_grad else None
        gW = g.T @ x.data if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g.sum(axis=0) if b.requires_grad else None)

    return Tensor.from_op(out, parents, bw, "linear")


# -- branch tracking ------------------------------------------------------------
# Piecewise ops (relu, hard max, the margin fallback) record which branch they
# took while tracking is on, so a finite-difference probe can tell when its
# stencil straddled a kink.

_branch_log: list[np.ndarray] | None = None


class KinkCrossed(ArithmeticError):
    """A finite-difference stencil crossed a non-differentiable point."""


@contextmanager
def track_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(pattern: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(pattern, copy=True))


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return Tensor.from_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects a matrix, got shape {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    active = norm >= eps
    denom = np.where(active, norm, eps)
    y = x.data / denom

    def bw(g):
        # d(x/|x|) = (g - y <y, g>) / |x| on rows above eps; plain g/eps below.
        proj = np.where(active, (g * y).sum(axis=1, keepdims=True), 0.0)
        return ((g - y * proj) / denom,)

    return Tensor.from_op(y, (x,), bw, "l2_normalize")


def grl(x: Tensor, eta: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-eta``."""
    return Tensor.from_op(x.data.copy(), (x,), lambda g: (g * (-eta),), "grl")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs {targets.shape[0]} targets")
    n, c = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range for {c} classes")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (float(np.reshape(g, -1)[0]) / n),)

    return Tensor.from_op(np.array(loss), (logits,), bw, "softmax_cross_entropy")


# -- finite-difference oracle -------------------------------------------------


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    status: str  # "ok", "fail", "no gradient", "nan"
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return self.status in ("ok", "no gradient")


def _evaluate(g: Callable[[], Tensor], smooth: bool) -> tuple[float, list[np.ndarray] | None]:
    if not smooth:
        return g().item(), None
    with track_branches() as log:
        val = g().item()
    return val, log


def _derivative(g: Callable[[], Tensor], flat: np.ndarray, j: int, h: float, stencil: int,
                base: list[np.ndarray] | None = None) -> float:
    orig = flat[j]
    offsets = (1.0, -1.0) if stencil == 2 else (2.0, 1.0, -1.0, -2.0)
    vals = []
    try:
        for k in offsets:
            flat[j] = orig + k * h
            val, branches = _evaluate(g, base is not None)
            if base is not None and not _same_branches(base, branches):
                raise KinkCrossed(f"stencil at element {j} crosses a kink")
            vals.append(val)
    finally:
        flat[j] = orig
    if stencil == 2:
        return (vals[0] - vals[1]) / (2 * h)
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1e-6,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
    stencil: int = 2,
    numeric_terms: Sequence[tuple[Callable[[], Tensor], Sequence[float]]] | None = None,
    require_smooth: bool = False,
) -> list[GradCheckResult]:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` is re-evaluated after each in-place perturbation of a parameter, so it
    must rebuild its graph from the parameter tensors on every call. The
    relative error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps vanishing gradients from turning rounding noise into huge ratios.
    Parameters with ``requires_grad=False`` are reported as "no gradient".

    ``stencil`` is 2 (central difference) or 4 (five-point, fourth order).
    ``numeric_terms`` replaces the numeric side with ``sum_k c_k[i] * d g_k /
    d p_i`` for pairs ``(g_k, c_k)``; this is how gradients that are not the
    derivative of the forward value (gradient reversal) are checked.
    With ``require_smooth`` a stencil that changes any relu mask, hard-max
    choice or margin branch raises ``KinkCrossed``; central differences are
    meaningless across a kink, so the caller should draw a new point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    terms = [(f, [1.0] * len(params))] if numeric_terms is None else list(numeric_terms)
    bases = [_evaluate(g, require_smooth)[1] for g, _ in terms]
    zero_grads(params)
    loss = f()
    loss.backward()
    reports = []
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        if not p.requires_grad:
            reports.append(GradCheckResult(name, 0.0, "no gradient"))
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        bad = False
        for j in idx:
            numeric = 0.0
            for (g, coef), base in zip(terms, bases):
                if coef[i] != 0.0:
                    numeric += coef[i] * _derivative(g, flat, j, step, stencil, base)
            a = analytic.reshape(-1)[j]
            if not (math.isfinite(numeric) and math.isfinite(a)):
                bad = True
                continue
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        status = "nan" if bad else ("ok" if worst <= tol else "fail")
        reports.append(GradCheckResult(name, worst, status, len(idx)))
    zero_grads(params)
    return reports
