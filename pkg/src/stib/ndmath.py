"""Dense float64 linear algebra and a small reverse-mode differentiation tape.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The tape
records every operation applied during a forward pass; ``Tape.backward``
walks the records in reverse index order and accumulates adjoints.

Every differentiable primitive needed by the bottleneck losses lives here,
including a Cholesky-backed log-determinant and a sample-correlation op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class DegenerateColumnError(ValueError):
    def __init__(self, column: int):
        super().__init__(f"column {column} has zero sample variance")
        self.column = column


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(a) -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array (scalars become 1x1, vectors a row)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def cholesky(a, jitter: float = 0.0) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a + jitter * I``.

    Raises NotPositiveDefiniteError when a pivot is not strictly positive.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise ShapeError(f"cholesky needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("cholesky input has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-9:
        raise ShapeError("cholesky input is not symmetric within 1e-9")
    L = np.zeros_like(a)
    for j in range(n):
        row = L[j, :j]
        pivot = a[j, j] + jitter - row @ row
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(
                f"matrix not positive definite (pivot {j} = {pivot:.3g}, jitter {jitter:g})"
            )
        L[j, j] = np.sqrt(pivot)
        L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ row) / L[j, j]
    return L


def logdet(a, jitter: float = 0.0) -> float:
    L = cholesky(a, jitter)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def sample_correlation(x) -> np.ndarray:
    """Pearson correlation of the columns of ``x`` (unbiased covariance)."""
    return _standardize(as_matrix(x))[1]


def _standardize(x: np.ndarray):
    # returns (u, R, scale): u = centred/scale so that u.T @ u / (B-1) == R
    b, d = x.shape
    if b < 2:
        raise ShapeError(f"correlation needs at least 2 rows, got {b}")
    xc = x - x.mean(axis=0, keepdims=True)
    scale = np.sqrt(np.sum(xc * xc, axis=0) / (b - 1))
    for j in range(d):
        if not scale[j] > 0.0:
            raise DegenerateColumnError(j)
    u = xc / scale
    r = (u.T @ u) / (b - 1)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return u, np.clip(r, -1.0, 1.0), scale


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    adjoint: np.ndarray | None = None


@dataclass(frozen=True)
class _OpDef:
    arity: int  # -1 for variadic
    forward: Callable
    vjp: Callable


_OPS: dict[str, _OpDef] = {}


def _register(name, arity):
    def deco(cls):
        _OPS[name] = _OpDef(arity, cls.forward, cls.vjp)
        return cls

    return deco


def _fail_shapes(op, *shapes):
    raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def _check_rowwise(op, a, b):
    if a.shape == b.shape:
        return
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return
    _fail_shapes(op, a.shape, b.shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


@_register("matmul", 2)
class _MatMul:
    def forward(a, b):
        if a.shape[1] != b.shape[0]:
            _fail_shapes("matmul", a.shape, b.shape)
        return a @ b

    def vjp(g, out, a, b):
        return g @ b.T, a.T @ g


@_register("add", 2)
class _Add:
    def forward(a, b):
        _check_rowwise("add", a, b)
        return a + b

    def vjp(g, out, a, b):
        return g, _unbroadcast(g, b.shape)


@_register("sub", 2)
class _Sub:
    def forward(a, b):
        _check_rowwise("sub", a, b)
        return a - b

    def vjp(g, out, a, b):
        return g, -_unbroadcast(g, b.shape)


@_register("mul", 2)
class _Mul:
    def forward(a, b):
        if a.shape != b.shape:
            _fail_shapes("mul", a.shape, b.shape)
        return a * b

    def vjp(g, out, a, b):
        return g * b, g * a


@_register("scale", 1)
class _Scale:
    def forward(a, *, c):
        return a * c

    def vjp(g, out, a, *, c):
        return (g * c,)


@_register("tanh", 1)
class _Tanh:
    def forward(a):
        return np.tanh(a)

    def vjp(g, out, a):
        return (g * (1.0 - out * out),)


@_register("exp", 1)
class _Exp:
    def forward(a):
        return np.exp(a)

    def vjp(g, out, a):
        return (g * out,)


@_register("log", 1)
class _Log:
    def forward(a):
        if np.any(a <= 0.0):
            raise DomainError("log of non-positive entry")
        return np.log(a)

    def vjp(g, out, a):
        return (g / a,)


@_register("square", 1)
class _Square:
    def forward(a):
        return a * a

    def vjp(g, out, a):
        return (2.0 * g * a,)


@_register("clip", 1)
class _Clip:
    def forward(a, *, lo, hi):
        return np.clip(a, lo, hi)

    def vjp(g, out, a, *, lo, hi):
        return (g * ((a >= lo) & (a <= hi)),)


@_register("sum", 1)
class _Sum:
    def forward(a):
        return np.array([[a.sum()]])

    def vjp(g, out, a):
        return (np.full_like(a, g[0, 0]),)


@_register("mean", 1)
class _Mean:
    def forward(a):
        return np.array([[a.mean()]])

    def vjp(g, out, a):
        return (np.full_like(a, g[0, 0] / a.size),)


@_register("concat", -1)
class _Concat:
    def forward(*xs):
        rows = {x.shape[0] for x in xs}
        if len(rows) != 1:
            _fail_shapes("concat", *(x.shape for x in xs))
        return np.concatenate(xs, axis=1)

    def vjp(g, out, *xs):
        edges = np.cumsum([0] + [x.shape[1] for x in xs])
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))


@_register("slice", 1)
class _Slice:
    def forward(a, *, start, stop):
        if not 0 <= start <= stop <= a.shape[1]:
            raise ShapeError(f"slice: columns [{start}, {stop}) out of range for {a.shape}")
        return a[:, start:stop]

    def vjp(g, out, a, *, start, stop):
        full = np.zeros_like(a)
        full[:, start:stop] = g
        return (full,)


@_register("transpose", 1)
class _Transpose:
    def forward(a):
        return a.T.copy()

    def vjp(g, out, a):
        return (g.T,)


@_register("logdet", 1)
class _LogDet:
    # the input is symmetrized first so that the gradient is A^{-T} for any
    # perturbation, and symmetric whenever A is
    def forward(a, *, jitter=0.0):
        if a.shape[0] != a.shape[1]:
            _fail_shapes("logdet", a.shape)
        return np.array([[logdet(0.5 * (a + a.T), jitter)]])

    def vjp(g, out, a, *, jitter=0.0):
        s = 0.5 * (a + a.T)
        L = cholesky(s, jitter)
        linv = solve_triangular(L, np.eye(len(L)), lower=True)
        inv = linv.T @ linv
        return (g[0, 0] * 0.5 * (inv + inv.T),)


@_register("corr", 1)
class _Corr:
    def forward(a):
        return _standardize(a)[1]

    def vjp(g, out, a):
        b = a.shape[0]
        u, _, scale = _standardize(a)
        gs = 0.5 * (g + g.T)
        gu = (2.0 / (b - 1)) * (u @ gs)
        gc = (gu - u * (np.sum(u * gu, axis=0, keepdims=True) / (b - 1))) / scale
        return (gc - gc.mean(axis=0, keepdims=True),)


OPS = frozenset(_OPS)


class Tape:
    """Linear record of a forward computation.

    Build one per minibatch: create leaves with :meth:`leaf`, apply
    operations with :meth:`apply` (or the named shortcuts), then call
    :meth:`backward` on a 1x1 root.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, parents, value, attrs):
        node = Node(len(self.nodes), op, tuple(parents), value, attrs)
        self.nodes.append(node)
        return node.id

    def leaf(self, value) -> int:
        value = as_matrix(value)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError("leaf value has non-finite entries")
        return self._push("leaf", (), value, {})

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        try:
            spec = _OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if spec.arity >= 0 and len(inputs) != spec.arity:
            raise ValueError(f"{op} takes {spec.arity} inputs, got {len(inputs)}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise IndexError(f"{op}: node {i} not on tape")
        values = [self.nodes[i].value for i in inputs]
        out = spec.forward(*values, **attrs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        return self._push(op, inputs, out, attrs)

    # shortcuts
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def sub(self, a, b):
        return self.apply("sub", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def scale(self, a, c):
        return self.apply("scale", a, c=float(c))

    def tanh(self, a):
        return self.apply("tanh", a)

    def exp(self, a):
        return self.apply("exp", a)

    def log(self, a):
        return self.apply("log", a)

    def square(self, a):
        return self.apply("square", a)

    def clip(self, a, lo, hi):
        return self.apply("clip", a, lo=lo, hi=hi)

    def sum(self, a):
        return self.apply("sum", a)

    def mean(self, a):
        return self.apply("mean", a)

    def concat(self, *xs):
        return self.apply("concat", *xs)

    def slice(self, a, start, stop):
        return self.apply("slice", a, start=start, stop=stop)

    def transpose(self, a):
        return self.apply("transpose", a)

    def logdet(self, a, jitter=0.0):
        return self.apply("logdet", a, jitter=jitter)

    def corr(self, a):
        return self.apply("corr", a)

    def backward(self, root: int) -> dict[int, np.ndarray]:
        """Reverse sweep from a 1x1 ``root``; returns adjoints keyed by node id.

        Nodes the root does not depend on get zero adjoints.
        """
        rv = self.nodes[root].value
        if rv.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) root, got {rv.shape}")
        for node in self.nodes:
            node.adjoint = None
        self.nodes[root].adjoint = np.ones((1, 1))
        for node in reversed(self.nodes[: root + 1]):
            g = node.adjoint
            if g is None or not node.parents:
                continue
            spec = _OPS[node.op]
            parent_vals = [self.nodes[p].value for p in node.parents]
            grads = spec.vjp(g, node.value, *parent_vals, **node.attrs)
            for p, gp in zip(node.parents, grads):
                parent = self.nodes[p]
                parent.adjoint = gp if parent.adjoint is None else parent.adjoint + gp
        out = {}
        for node in self.nodes:
            if node.adjoint is None:
                node.adjoint = np.zeros_like(node.value)
            out[node.id] = node.adjoint
        return out
