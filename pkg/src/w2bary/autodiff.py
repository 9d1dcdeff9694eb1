"""Small reverse-mode differentiation engine over numpy arrays.

Only the operations needed by dense input-convex potentials are provided.
Every vector-Jacobian product is itself written with :class:`Tensor`
operations, so ``grad(..., create_graph=True)`` returns a differentiable
expression for an input-gradient. A loss that contains such an expression is
then differentiated with respect to parameters by one ordinary reverse pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_RECORDING = True


@contextlib.contextmanager
def no_record():
    """Evaluate without building a graph (results are constants)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class DimensionError(ValueError):
    def __init__(self, expected: int, actual: int, what: str = "input"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what} dimension mismatch: expected D={expected}, got D={actual}")


class NonFiniteError(FloatingPointError):
    """Raised when a loss or an intermediate value is NaN or infinite."""

    def __init__(self, message: str, tag: str | None = None, index=None):
        self.tag = tag
        self.index = index
        super().__init__(message)


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "tag", "grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, tag=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.tag = tag
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tag={self.tag!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_lift(other), self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tsum(self) * (1.0 / max(self.data.size, 1))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def named(self, tag: str) -> "Tensor":
        self.tag = tag
        return self


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def variable(x, tag=None) -> Tensor:
    return Tensor(x, requires_grad=True, tag=tag)


def _node(data, parents, vjp, tag=None) -> Tensor:
    if _RECORDING and any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, True, tag)
    return Tensor(data, tag=tag)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = reshape(tsum(g, axes), shape)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), sa) if a.requires_grad else None,
            _unbroadcast(mul(g, a), sb) if b.requires_grad else None,
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    return _node(
        a.data @ b.data,
        (a, b),
        lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
    )


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (transpose(g),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def tsum(a: Tensor, axis=None) -> Tensor:
    old = a.shape
    if axis is None:
        keep = (1,) * len(old)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(old) for ax in axes)
        keep = tuple(1 if i in axes else n for i, n in enumerate(old))

    def vjp(g):
        return (broadcast_to(reshape(g, keep), old),)

    return _node(np.sum(a.data, axis=axis), (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, old),),
    )


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (mul(g, a) * 2.0,))


def relu(a: Tensor) -> Tensor:
    """Positive part ``[a]_+``; the kink at 0 takes slope 0."""
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, (a,), lambda g: (mul(g, mask),))


def celu(a: Tensor) -> Tensor:
    """CELU with alpha=1: ``x`` for ``x>0`` else ``exp(x)-1``."""
    x = a.data
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    return _node(out, (a,), lambda g: (mul(g, celu_prime(a)),))


def celu_prime(a: Tensor) -> Tensor:
    # right-derivative 1 at exactly 0
    x = a.data
    out = np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))
    return _node(out, (a,), lambda g: (mul(g, celu_second(a)),))


def celu_second(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 0.0, np.exp(np.minimum(x, 0.0)))
    return _node(out, (a,), lambda g: (mul(g, celu_second(a)),))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"celu": celu, "identity": identity}


# ------------------------------------------------------------ reverse pass


def _topo(roots: Sequence[Tensor], stop: set[int] = frozenset()) -> list[Tensor]:
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if id(node) in stop:
            continue
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _depends(order: list[Tensor], targets: set[int]) -> set[int]:
    dep = set(targets)
    for node in order:  # parents precede children
        if id(node) not in dep and any(id(p) in dep for p in node.parents):
            dep.add(id(node))
    return dep


def grad(output: Tensor, wrt: Sequence[Tensor], seed=None, create_graph=False) -> list[Tensor]:
    """Vector-Jacobian product of ``output`` with respect to ``wrt``.

    With ``create_graph=True`` the returned tensors are themselves
    differentiable functions of every variable upstream of ``output``.
    """
    wrt = list(wrt)
    targets = {id(w) for w in wrt}
    if seed is None:
        seed = np.ones_like(output.data)
    seed = _lift(seed)
    if not output.requires_grad:
        return [Tensor(np.zeros_like(w.data)) for w in wrt]

    order = _topo([output], stop=targets)
    dep = _depends(order, targets)
    grads: dict[int, Tensor] = {id(output): seed}
    ctx = contextlib.nullcontext() if create_graph else no_record()
    with ctx:
        for node in reversed(order):
            if id(node) in targets:
                continue
            g = grads.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or id(p) not in dep:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(Tensor(np.zeros_like(w.data)) if g is None else g)
    return out


def backward(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Plain reverse pass; returns arrays of d loss / d leaf."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    check_finite(loss)
    return [g.data for g in grad(loss, leaves)]


def check_finite(loss: Tensor) -> None:
    if np.all(np.isfinite(loss.data)):
        return
    for node in _topo([loss]):
        bad = ~np.isfinite(node.data)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteError(
                f"non-finite value in {node.tag or 'unnamed node'} at {idx}", node.tag, idx
            )
    raise NonFiniteError("non-finite loss", loss.tag)


# -------------------------------------------------------------- parameters


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    start: int
    nonnegative: bool = False

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass
class ParamStore:
    """Flat parameter vector partitioned into named, shaped slots."""

    slots: list[Slot]
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        size = sum(s.size for s in self.slots)
        if self.values is None:
            self.values = np.zeros(size)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        pos = 0
        for s in self.slots:
            if s.start != pos:
                raise ValueError(f"slot {s.name} starts at {s.start}, expected {pos}")
            pos = s.stop
        if pos != self.values.size:
            raise ValueError(f"slots cover {pos} scalars but store has {self.values.size}")

    @classmethod
    def from_shapes(cls, shapes: Iterable[tuple[str, tuple[int, ...], bool]]) -> "ParamStore":
        slots, pos = [], 0
        for name, shape, nonneg in shapes:
            s = Slot(name, tuple(int(n) for n in shape), pos, bool(nonneg))
            slots.append(s)
            pos = s.stop
        return cls(slots)

    @property
    def size(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        s = self._slot(name)
        return self.values[s.start : s.stop].reshape(s.shape)

    def _slot(self, name: str) -> Slot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)

    def nonnegative_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for s in self.slots:
            if s.nonnegative:
                mask[s.start : s.stop] = True
        return mask

    def project(self) -> None:
        mask = self.nonnegative_mask()
        np.maximum(self.values, 0.0, out=self.values, where=mask)

    def tensors(self, requires_grad=True) -> dict[str, Tensor]:
        return {
            s.name: Tensor(self.values[s.start : s.stop].reshape(s.shape), requires_grad=requires_grad, tag=s.name)
            for s in self.slots
        }

    def copy(self) -> "ParamStore":
        return ParamStore(list(self.slots), self.values.copy())


class Bound:
    """A ParamStore exposed as leaf tensors for one graph construction."""

    def __init__(self, store: ParamStore, requires_grad=True):
        self.store = store
        self.leaves = store.tensors(requires_grad)

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def flat_grad(self, loss: Tensor) -> np.ndarray:
        order = [self.leaves[s.name] for s in self.store.slots]
        return np.concatenate([g.ravel() for g in backward(loss, order)])


# ------------------------------------------------------------- public ops


def _as_batch(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.size else x.reshape(0, dim)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(dim, x.shape[-1] if x.ndim else 0)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("batch contains non-finite entries", "batch")
    return x


def eval_scalar(net, params: ParamStore, x) -> np.ndarray:
    """psi(x_k) for each row of ``x``."""
    x = _as_batch(x, net.input_dim)
    if x.shape[0] == 0:
        return np.zeros(0)
    with no_record():
        return net.build(Bound(params, False), Tensor(x)).data.copy()


def grad_input(net, params: ParamStore, x) -> np.ndarray:
    """Rows are grad_x psi(x_k)."""
    x = _as_batch(x, net.input_dim)
    if x.shape[0] == 0:
        return np.zeros((0, net.input_dim))
    xt = variable(x)
    out = net.build(Bound(params, False), xt)
    return grad(out, [xt])[0].data.copy()


def input_gradient(net, bound: Bound, x: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable (psi(x), grad_x psi(x)) for use inside a loss."""
    if x.shape[1] != net.input_dim:
        raise DimensionError(net.input_dim, x.shape[1])
    if not x.requires_grad:
        x = Tensor(x.data, requires_grad=True, tag=x.tag)
    val = net.build(bound, x)
    (g,) = grad(val, [x], create_graph=True)
    return val, g


def grad_params(loss: Tensor, *bounds: Bound) -> np.ndarray:
    """d loss / d params, concatenated over ``bounds`` in order."""
    check_finite(loss)
    leaves = [b.leaves[s.name] for b in bounds for s in b.store.slots]
    gs = backward(loss, leaves)
    return np.concatenate([g.ravel() for g in gs]) if gs else np.zeros(0)


@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    worst_index: int
    numeric: np.ndarray
    analytic: np.ndarray


def finite_diff_check(
    loss_fn: Callable[[], float],
    stores: Sequence[ParamStore],
    analytic: np.ndarray,
    h: float = 1e-4,
    tol: float = 1e-5,
    floor: float = 1e-8,
) -> FDReport:
    """Compare ``analytic`` against central differences of ``loss_fn``.

    ``loss_fn`` re-evaluates the loss from the current values of ``stores``;
    entries are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    numeric = []
    for store in stores:
        for i in range(store.size):
            old = store.values[i]
            store.values[i] = old + h
            up = loss_fn()
            store.values[i] = old - h
            down = loss_fn()
            store.values[i] = old
            numeric.append((up - down) / (2 * h))
    numeric = np.asarray(numeric)
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    rel = np.abs(numeric - analytic) / denom
    # tiny entries on both sides are judged on absolute error
    rel = np.where(np.abs(numeric - analytic) <= floor, 0.0, rel)
    worst = int(np.argmax(rel)) if rel.size else -1
    err = float(rel[worst]) if rel.size else 0.0
    return FDReport(err, err <= tol, worst, numeric, analytic)


# ------------------------------------------------------- tiny test networks


class QuadraticNet:
    """psi(x) = theta * ||x||^2 / 2 with a single scalar parameter."""

    def __init__(self, input_dim: int):
        self.input_dim = input_dim

    def new_params(self, theta: float = 1.0) -> ParamStore:
        p = ParamStore.from_shapes([("theta", (1,), False)])
        p.values[:] = theta
        return p

    def build(self, p: Bound, x: Tensor) -> Tensor:
        return tsum(square(x), 1) * (p["theta"] * 0.5)


class AffineNet:
    """act(x @ W.T + b) summed over outputs; ``W`` has one row per unit."""

    def __init__(self, input_dim: int, units: int = 1, activation: str = "identity"):
        self.input_dim = input_dim
        self.units = units
        self.activation = ACTIVATIONS[activation]

    def new_params(self, W=None, b=None) -> ParamStore:
        p = ParamStore.from_shapes([("W", (self.units, self.input_dim), False), ("b", (self.units,), False)])
        if W is not None:
            p["W"][...] = W
        if b is not None:
            p["b"][...] = b
        return p

    def build(self, p: Bound, x: Tensor) -> Tensor:
        return tsum(self.activation(x @ transpose(p["W"]) + p["b"]), 1)
