"""Array-valued computation tape with second-order input jets.

Every :class:`Node` holds a numpy array (a whole batch of points at once).
Elementwise operations store their local partials; structured operations
(matmul, the fused jet layers) store a vector-Jacobian closure instead.
A reverse sweep from a scalar root fills in the adjoint of every node.

Input derivatives are propagated *forward* as part of the recorded values:
a jet stack is an array of shape ``(K, N, width)`` whose leading slots hold

    slot 0            value
    slot 1            d/dt
    slots 2..1+d      d/dx_i
    slots 2+d..       d2/dx_i dx_j for i <= j (packed upper triangle)

so ``K = 2 + d + d(d+1)/2``.  Because the derivative slots are ordinary tape
values, the parameter gradient of any loss built from them costs one reverse
sweep (forward-over-reverse).
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

# compiled kernels for the fused jet layers; the numpy code below is the fallback
USE_KERNELS = _kernels.AVAILABLE

__all__ = [
    "Node",
    "Tape",
    "JetLayout",
    "JetValue",
    "NonFiniteError",
    "first_bad_point",
    "FDReport",
    "grad_params",
    "input_jet",
    "check_against_fd",
    "seed_input",
    "jet_dense",
    "jet_affine",
    "jet_activation",
    "jet_mul",
    "unpack_jet",
    "exp",
    "log",
    "relu",
    "clip",
    "sigmoid",
    "tanh",
    "swish",
    "square",
    "concat",
    "total",
    "constant_of",
    "value_of",
]


class NonFiniteError(FloatingPointError):
    """A NaN/inf appeared while evaluating at a specific space-time point."""

    def __init__(self, message: str, point=None):
        super().__init__(message if point is None else f"{message} at point {point}")
        self.point = point


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Node:
    """One recorded value on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "tag", "parents", "partials", "vjp", "requires_grad", "__weakref__")
    __array_priority__ = 1000.0

    def __init__(self, tape, index, value, tag, parents, partials, vjp, requires_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.tag = tag
        self.parents = parents
        self.partials = partials
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, {self.tag}, shape={self.value.shape})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _binary(self, other, "add")

    def __radd__(self, other):
        return _binary(other, self, "add")

    def __sub__(self, other):
        return _binary(self, other, "sub")

    def __rsub__(self, other):
        return _binary(other, self, "sub")

    def __mul__(self, other):
        return _binary(self, other, "mul")

    def __rmul__(self, other):
        return _binary(other, self, "mul")

    def __truediv__(self, other):
        return _binary(self, other, "div")

    def __rtruediv__(self, other):
        return _binary(other, self, "div")

    def __neg__(self):
        return self.tape.record("neg", [self], -self.value, partials=(-1.0,))

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("only constant exponents are supported")
        v = self.value
        return self.tape.record("pow", [self], v**p, partials=(p * v ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        v = self.value
        out = v[idx]

        basic = all(isinstance(i, (int, slice)) for i in (idx if isinstance(idx, tuple) else (idx,)))

        def vjp(g):
            z = np.zeros_like(v)
            if basic:
                z[idx] = g
            else:
                np.add.at(z, idx, g)
            return (z,)

        return self.tape.record("getitem", [self], np.asarray(out), vjp=vjp)

    def sum(self, axis=None):
        return total(self, axis)

    def reshape(self, *shape):
        v = self.value
        return self.tape.record(
            "reshape", [self], v.reshape(*shape), vjp=lambda g: (g.reshape(v.shape),)
        )


class Tape:
    """Append-only record of array operations; parents precede children.

    Nodes point at their tape, so the tape keeps only weak references: an
    unreachable graph is freed by refcounting instead of waiting for the
    cycle collector, which matters when every node holds a batch array.
    A live root keeps all of its ancestors alive through ``parents``.
    """

    def __init__(self):
        self._refs: list = []
        self._adjoints: list | None = None

    def __len__(self):
        return len(self._refs)

    @property
    def nodes(self) -> list:
        """Recorded nodes that are still alive, in recording order."""
        return [n for n in (r() for r in self._refs) if n is not None]

    def record(self, tag, parents, value, partials=None, vjp=None) -> Node:
        """Append a node.

        ``partials`` gives one local partial per parent (elementwise ops);
        alternatively ``vjp`` maps the output adjoint to one adjoint per parent.
        """
        value = np.asarray(value, dtype=np.float64)
        parents = list(parents)
        rg = any(p.requires_grad for p in parents) if parents else tag != "const"
        node = Node(self, len(self._refs), value, tag, parents, partials, vjp, rg)
        self._refs.append(weakref.ref(node))
        return node

    def leaf(self, value, tag="leaf") -> Node:
        """Differentiable input (e.g. a network parameter)."""
        return self.record(tag, [], np.array(value, dtype=np.float64, copy=True))

    def constant(self, value) -> Node:
        """Input that the reverse sweep never differentiates through."""
        return self.record("const", [], value)

    def backward(self, root: Node) -> list:
        """Reverse sweep from a scalar root; returns adjoints indexed by node."""
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if root.value.size != 1:
            raise ValueError(f"reverse sweep needs a scalar root, got shape {root.shape}")
        adj: list = [None] * (root.index + 1)
        adj[root.index] = np.ones_like(root.value)
        refs = self._refs
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            # reached from the root, hence alive
            node = refs[i]()
            if not node.parents or not node.requires_grad:
                continue
            if node.vjp is not None:
                contribs = node.vjp(g)
            else:
                contribs = [
                    None
                    if not par.requires_grad
                    else _unbroadcast(g, par.value.shape)
                    if _is_one(p)
                    else _unbroadcast(g * p, par.value.shape)
                    for p, par in zip(node.partials, node.parents)
                ]
            for par, c in zip(node.parents, contribs):
                if c is None or not par.requires_grad:
                    continue
                j = par.index
                adj[j] = c if adj[j] is None else adj[j] + c
        self._adjoints = adj
        return adj

    def adjoint(self, node: Node) -> np.ndarray:
        """Adjoint of ``node`` from the most recent sweep (zero if unreached)."""
        if self._adjoints is None:
            raise RuntimeError("no reverse sweep has been run on this tape")
        if node.index < len(self._adjoints) and self._adjoints[node.index] is not None:
            return self._adjoints[node.index]
        return np.zeros_like(node.value)


def _is_one(p):
    return isinstance(p, float) and p == 1.0


def _binary(a, b, op):
    an, bn = isinstance(a, Node), isinstance(b, Node)
    tape = a.tape if an else b.tape
    if an and bn and a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    av = a.value if an else np.asarray(a, dtype=np.float64)
    bv = b.value if bn else np.asarray(b, dtype=np.float64)
    if op == "add":
        value, pa, pb = av + bv, 1.0, 1.0
    elif op == "sub":
        value, pa, pb = av - bv, 1.0, -1.0
    elif op == "mul":
        value, pa, pb = av * bv, bv, av
    elif op == "div":
        value = av / bv
        pa, pb = 1.0 / bv, -value / bv
    else:  # pragma: no cover
        raise ValueError(op)
    parents, partials = [], []
    if an:
        parents.append(a)
        partials.append(pa)
    if bn:
        parents.append(b)
        partials.append(pb)
    return tape.record(op, parents, value, partials=tuple(partials))


# ---------------------------------------------------------------------------
# elementwise functions that accept either Nodes or plain arrays


def _sigmoid_np(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _unary(x, tag, f, df):
    if isinstance(x, Node):
        v = x.value
        return x.tape.record(tag, [x], f(v), partials=(df(v),))
    return f(np.asarray(x, dtype=np.float64))


def exp(x):
    if isinstance(x, Node):
        e = np.exp(x.value)
        return x.tape.record("exp", [x], e, partials=(e,))
    return np.exp(x)


def log(x):
    return _unary(x, "log", np.log, lambda v: 1.0 / v)


def square(x):
    return _unary(x, "square", np.square, lambda v: 2.0 * v)


def relu(x):
    """Positive part ``(x)^+``."""
    return _unary(x, "relu", lambda v: np.maximum(v, 0.0), lambda v: (v > 0).astype(np.float64))


def sigmoid(x):
    def df(v):
        s = _sigmoid_np(v)
        return s * (1 - s)

    return _unary(x, "sigmoid", _sigmoid_np, df)


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda v: 1.0 - np.tanh(v) ** 2)


def swish(x):
    def f(v):
        return v * _sigmoid_np(v)

    def df(v):
        s = _sigmoid_np(v)
        return s + v * s * (1 - s)

    return _unary(x, "swish", f, df)


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; the derivative is 1 strictly inside, else 0."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)

    def f(v):
        return np.minimum(np.maximum(v, lo), hi)

    def df(v):
        return ((v > lo) & (v < hi)).astype(np.float64)

    return _unary(x, "clip", f, df)


def total(x, axis=None):
    """Sum (of all entries by default)."""
    if not isinstance(x, Node):
        return np.sum(x, axis=axis)
    v = x.value
    out = v.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), v.shape).copy(),)

    return x.tape.record("sum", [x], out, vjp=vjp)


def matmul(a, b):
    an, bn = isinstance(a, Node), isinstance(b, Node)
    tape = a.tape if an else b.tape
    av = a.value if an else np.asarray(a, dtype=np.float64)
    bv = b.value if bn else np.asarray(b, dtype=np.float64)
    if bv.ndim != 2:
        raise ValueError("right operand of matmul must be a matrix")
    out = av @ bv

    def vjp(g):
        res = []
        if an:
            res.append(g @ bv.T)
        if bn:
            res.append(av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        return res

    return tape.record("matmul", [n for n in (a, b) if isinstance(n, Node)], out, vjp=vjp)


def concat(nodes: Sequence[Node], axis=-1) -> Node:
    tape = nodes[0].tape
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return np.split(g, splits, axis=axis)

    return tape.record("concat", list(nodes), out, vjp=vjp)


def value_of(x):
    """Plain array behind a Node (or the array itself)."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def constant_of(tape: Tape, x) -> Node:
    """Copy a value onto ``tape`` as a constant, cutting any gradient path."""
    return tape.constant(value_of(x))


def grad_params(loss: Node, params: Sequence[Node]) -> list[np.ndarray]:
    """Gradient of a scalar ``loss`` with respect to each parameter node."""
    if not isinstance(loss, Node):
        raise TypeError("loss must be a tape node")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    adj = tape.backward(loss)
    out = []
    for p in params:
        g = adj[p.index] if p.index < len(adj) else None
        out.append(np.zeros_like(p.value) if g is None else np.asarray(g).reshape(p.value.shape))
    return out


# ---------------------------------------------------------------------------
# jet stacks


class JetLayout:
    """Slot bookkeeping for jets over time plus ``d`` spatial inputs."""

    def __init__(self, d: int, derivatives: bool = True):
        self.d = d
        self.derivatives = derivatives
        if derivatives:
            self.pairs = [(i, j) for i in range(d) for j in range(i, d)]
            self.n_grad = 1 + d  # d/dt then d/dx_i
        else:
            self.pairs = []
            self.n_grad = 0
        self.K = 1 + self.n_grad + len(self.pairs)
        # stack rows holding d/dx_i and d/dx_j for each Hessian pair
        self.pair_rows_i = np.array([2 + i for i, _ in self.pairs], dtype=np.int64)
        self.pair_rows_j = np.array([2 + j for _, j in self.pairs], dtype=np.int64)

    @property
    def hess_start(self):
        return 1 + self.n_grad

    def pair_index(self, i, j):
        if i > j:
            i, j = j, i
        return self.pairs.index((i, j))

    def __repr__(self):
        return f"JetLayout(d={self.d}, K={self.K})"


def seed_input(tape: Tape, t, x, layout: JetLayout) -> Node:
    """Constant jet stack of the raw inputs ``(t, x)``; shape ``(K, N, 1+d)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
    n, d = x.shape
    if d != layout.d:
        raise ValueError(f"expected {layout.d} spatial coordinates, got {d}")
    J = np.zeros((layout.K, n, 1 + d))
    J[0, :, 0] = t
    J[0, :, 1:] = x
    for k in range(layout.n_grad):
        J[1 + k, :, k] = 1.0
    return tape.constant(J)


def jet_dense(J: Node, W: Node, b: Node | None = None, skip: Node | None = None) -> Node:
    """Affine map applied slot-wise; the bias only enters the value slot.

    ``skip`` (same shape as the output) is added as an identity connection.
    """
    return jet_affine([(J, W)], b, skip)


def jet_affine(terms, b: Node | None = None, skip: Node | None = None) -> Node:
    """``sum_k J_k @ W_k (+ b on the value slot) (+ skip)`` as one tape node."""
    J0, W0 = terms[0]
    K, N = J0.value.shape[:2]

    def mm(J, W):
        # 2-D products hit BLAS; stacked 3-D matmul does not
        return J.value.reshape(K * N, -1) @ W.value

    out = mm(J0, W0)
    for J, W in terms[1:]:
        out += mm(J, W)
    out = out.reshape(K, N, -1)
    if b is not None:
        out[0] += b.value
    if skip is not None:
        out += skip.value
    parents = [n for JW in terms for n in JW]
    if b is not None:
        parents.append(b)
    if skip is not None:
        parents.append(skip)

    def vjp(g):
        res = []
        g2 = g.reshape(-1, g.shape[-1])
        for J, W in terms:
            jv = J.value
            res.append((g2 @ W.value.T).reshape(jv.shape) if J.requires_grad else None)
            res.append(jv.reshape(-1, jv.shape[-1]).T @ g2 if W.requires_grad else None)
        if b is not None:
            res.append(g[0].sum(axis=0))
        if skip is not None:
            res.append(g)
        return res

    return J0.tape.record("jet_affine", parents, out, vjp=vjp)


def _act_derivs(kind, z):
    """Value and first three derivatives of a scalar activation."""
    if kind == "swish":
        s = _sigmoid_np(z)
        q = s * (1.0 - s)
        c = 1.0 - 2.0 * s
        return z * s, s + z * q, q * (2.0 + z * c), q * (3.0 * c + z * c * c - 2.0 * z * q)
    if kind == "tanh":
        y = np.tanh(z)
        r = 1.0 - y * y
        return y, r, -2.0 * y * r, r * (6.0 * y * y - 2.0)
    if kind == "sigmoid":
        s = _sigmoid_np(z)
        q = s * (1.0 - s)
        c = 1.0 - 2.0 * s
        return s, q, q * c, q * (c * c - 2.0 * q)
    raise ValueError(f"unknown activation {kind!r}")


def jet_activation(J: Node, kind: str, layout: JetLayout) -> Node:
    """Fused elementwise activation on a jet stack (chain rule to order 2)."""
    if USE_KERNELS:
        return _jet_activation_compiled(J, kind, layout)
    jv = J.value
    z = jv[0]
    f0, f1, f2, f3 = _act_derivs(kind, z)
    ng, hs = layout.n_grad, layout.hess_start
    G = jv[1:hs]
    Hs = jv[hs:]
    Ii, Jj = layout.pair_rows_i - 1, layout.pair_rows_j - 1
    out = np.empty_like(jv)
    out[0] = f0
    if ng:
        out[1:hs] = f1 * G
    if len(layout.pairs):
        GI, GJ = G[Ii], G[Jj]
        out[hs:] = f2 * GI * GJ + f1 * Hs

    def vjp(g):
        gz = f1 * g[0]
        gin = np.empty_like(jv)
        if ng:
            gG = g[1:hs]
            gz += f2 * np.einsum("knw,knw->nw", gG, G)
            gin_G = f1 * gG
        if len(layout.pairs):
            gH = g[hs:]
            gz += f3 * np.einsum("pnw,pnw->nw", gH, GI * GJ)
            gz += f2 * np.einsum("pnw,pnw->nw", gH, Hs)
            f2gH = f2 * gH
            for p in range(len(layout.pairs)):
                gin_G[Ii[p]] += f2gH[p] * GJ[p]
                gin_G[Jj[p]] += f2gH[p] * GI[p]
            gin[hs:] = f1 * gH
        gin[0] = gz
        if ng:
            gin[1:hs] = gin_G
        return (gin,)

    return J.tape.record(f"jet_{kind}", [J], out, vjp=vjp)


def _jet_activation_compiled(J, kind, layout):
    jv = np.ascontiguousarray(J.value)
    f0, f1, f2, f3 = _act_derivs(kind, jv[0])
    out = np.empty_like(jv)
    out[0] = f0
    pi, pj = layout.pair_rows_i, layout.pair_rows_j
    _kernels.act_forward(jv, layout.n_grad, pi, pj, f1, f2, out)

    def vjp(g):
        gin = np.empty_like(jv)
        _kernels.act_backward(np.ascontiguousarray(g), jv, layout.n_grad, pi, pj, f1, f2, f3, gin)
        return (gin,)

    return J.tape.record(f"jet_{kind}", [J], out, vjp=vjp)


def _jet_mul_compiled(A, B, layout):
    av, bv = np.ascontiguousarray(A.value), np.ascontiguousarray(B.value)
    out = np.empty_like(av)
    pi, pj = layout.pair_rows_i, layout.pair_rows_j
    _kernels.mul_forward(av, bv, layout.n_grad, pi, pj, out)

    def vjp(g):
        ga, gb = np.empty_like(av), np.empty_like(bv)
        _kernels.mul_backward(np.ascontiguousarray(g), av, bv, layout.n_grad, pi, pj, ga, gb)
        return ga, gb

    return A.tape.record("jet_mul", [A, B], out, vjp=vjp)


def jet_mul(A: Node, B: Node, layout: JetLayout) -> Node:
    """Product of two jet stacks (Leibniz rule to order 2)."""
    if A.value.shape != B.value.shape:
        raise ValueError("jet_mul operands must have equal shapes")
    if USE_KERNELS:
        return _jet_mul_compiled(A, B, layout)
    av, bv = A.value, B.value
    hs = layout.hess_start
    Ii, Jj = layout.pair_rows_i, layout.pair_rows_j
    a0, b0 = av[0], bv[0]
    out = np.empty_like(av)
    out[0] = a0 * b0
    out[1:hs] = av[1:hs] * b0 + a0 * bv[1:hs]
    if len(layout.pairs):
        out[hs:] = av[hs:] * b0 + av[Ii] * bv[Jj] + av[Jj] * bv[Ii] + a0 * bv[hs:]

    def vjp(g):
        ga = np.empty_like(av)
        gb = np.empty_like(bv)
        gG = g[1:hs]
        ga[0] = g[0] * b0 + np.einsum("knw,knw->nw", gG, bv[1:hs])
        gb[0] = g[0] * a0 + np.einsum("knw,knw->nw", gG, av[1:hs])
        ga[1:hs] = gG * b0
        gb[1:hs] = gG * a0
        if len(layout.pairs):
            gH = g[hs:]
            ga[0] += np.einsum("pnw,pnw->nw", gH, bv[hs:])
            gb[0] += np.einsum("pnw,pnw->nw", gH, av[hs:])
            ga[hs:] = gH * b0
            gb[hs:] = gH * a0
            for p in range(len(layout.pairs)):
                ga[Ii[p]] += gH[p] * bv[Jj[p]]
                ga[Jj[p]] += gH[p] * bv[Ii[p]]
                gb[Jj[p]] += gH[p] * av[Ii[p]]
                gb[Ii[p]] += gH[p] * av[Jj[p]]
        return ga, gb

    return A.tape.record("jet_mul", [A, B], out, vjp=vjp)


@dataclass
class JetValue:
    """A scalar field with its time derivative, spatial gradient and Hessian.

    Entries are tape nodes (or plain arrays for analytic jets), one value per
    batch point.  ``dxx[i][j]`` and ``dxx[j][i]`` are the same object.
    """

    v: object
    dt: object
    dx: list
    dxx: list
    params: list = field(default_factory=list)

    @property
    def d(self):
        return len(self.dx)

    def numpy(self) -> dict:
        d = self.d
        return {
            "v": value_of(self.v),
            "dt": value_of(self.dt),
            "dx": np.stack([value_of(g) for g in self.dx], axis=-1),
            "dxx": np.stack(
                [np.stack([value_of(self.dxx[i][j]) for j in range(d)], axis=-1) for i in range(d)],
                axis=-2,
            ),
        }

    def detached(self) -> "JetValue":
        """Plain-array copy (no gradient path)."""
        d = self.d
        dxx = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(i, d):
                dxx[i][j] = dxx[j][i] = value_of(self.dxx[i][j])
        return JetValue(value_of(self.v), value_of(self.dt), [value_of(g) for g in self.dx], dxx)

    @classmethod
    def from_arrays(cls, v, dt, dx, dxx) -> "JetValue":
        """Build from ``v (N,)``, ``dt (N,)``, ``dx (N,d)``, ``dxx (N,d,d)``.

        ``dx`` may also be a list of d arrays and ``dxx`` a nested d x d list.
        """
        if isinstance(dx, (list, tuple)):
            dx = np.stack([np.asarray(c, dtype=np.float64) for c in dx], axis=-1)
        if isinstance(dxx, (list, tuple)):
            dxx = np.stack([np.stack([np.asarray(c, dtype=np.float64) for c in row], axis=-1) for row in dxx], axis=-2)
        dx = np.asarray(dx, dtype=np.float64)
        dxx = np.asarray(dxx, dtype=np.float64)
        d = dx.shape[-1]
        h = [[None] * d for _ in range(d)]
        for i in range(d):
            for j in range(i, d):
                h[i][j] = h[j][i] = dxx[..., i, j]
        return cls(np.asarray(v, dtype=np.float64), np.asarray(dt, dtype=np.float64), [dx[..., i] for i in range(d)], h)


def unpack_jet(J: Node, layout: JetLayout, column: int = 0) -> JetValue:
    """Split one output column of a jet stack into a :class:`JetValue`."""
    d = layout.d
    v = J[0, :, column]
    dt = J[1, :, column]
    dx = [J[2 + i, :, column] for i in range(d)]
    dxx = [[None] * d for _ in range(d)]
    for p, (i, j) in enumerate(layout.pairs):
        dxx[i][j] = dxx[j][i] = J[layout.hess_start + p, :, column]
    return JetValue(v, dt, dx, dxx)


def first_bad_point(bad_mask, t, x):
    """``(t, x)`` of the first point flagged in a per-point boolean mask."""
    m = int(np.flatnonzero(bad_mask)[0]) if np.any(bad_mask) else 0
    return (float(t[m]), tuple(float(c) for c in np.atleast_1d(x[m])))


def input_jet(
    network_eval: Callable, t, x, params: Sequence[np.ndarray], tape: Tape | None = None, pnodes=None
) -> JetValue:
    """Jet of a scalar network with respect to its inputs.

    ``network_eval(J, param_nodes, layout)`` must map an input jet stack to an
    output jet stack of width 1.  The returned :class:`JetValue` keeps its
    entries on ``tape`` and lists the parameter leaves in ``.params``.
    Pass ``pnodes`` to reuse parameter leaves already on the tape.
    """
    tape = Tape() if tape is None else tape
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(t.shape[0], -1)
    layout = JetLayout(x.shape[1])
    if pnodes is None:
        pnodes = [tape.leaf(p, "param") for p in params]
    J = network_eval(seed_input(tape, t, x, layout), pnodes, layout)
    if not np.all(np.isfinite(J.value)):
        bad = ~np.isfinite(J.value[:, :, 0]).all(axis=0)
        raise NonFiniteError("non-finite network jet", first_bad_point(bad, t, x))
    jet = unpack_jet(J, layout)
    jet.params = pnodes
    return jet


# ---------------------------------------------------------------------------
# finite-difference audit


@dataclass
class FDReport:
    """Worst relative discrepancy between a jet and finite differences."""

    value: float
    dt: float
    dx: float
    dxx: float
    eps: float
    rtol: float = 1e-5
    atol: float = 1e-8
    worst_abs: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.value, self.dt, self.dx, self.dxx)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= 1.0 + 1e-12

    def __str__(self):
        return (
            f"FD audit eps={self.eps:g}: rel err value={self.value * self.rtol:.2e} "
            f"dt={self.dt * self.rtol:.2e} dx={self.dx * self.rtol:.2e} dxx={self.dxx * self.rtol:.2e} "
            f"-> {'ok' if self.passed else 'FAIL'}"
        )


def _scaled_err(a, b, rtol, atol):
    # <= 1 means |a - b| <= max(rtol*|b|, atol)
    return float(np.max(np.abs(a - b) / np.maximum(rtol * np.abs(b), atol)))


def check_against_fd(jet_fn: Callable, value_fn: Callable, t: float, x, eps: float = 1e-4, rtol=1e-5, atol=1e-8) -> FDReport:
    """Compare a jet at one point against central finite differences.

    ``jet_fn(t, x)`` returns a :class:`JetValue` (or its ``numpy()`` dict) for a
    single point; ``value_fn(t, x)`` evaluates the plain function and may use
    extended precision.  The reported numbers are scaled errors: each is the
    worst ``|jet - fd| / max(rtol*|fd|, atol)``, so 1.0 is the pass threshold.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    jet = jet_fn(t, x)
    if isinstance(jet, JetValue):
        jet = jet.numpy()
    jv = float(np.ravel(jet["v"])[0])
    jdt = float(np.ravel(jet["dt"])[0])
    jdx = np.asarray(jet["dx"], dtype=np.float64).reshape(d)
    jdxx = np.asarray(jet["dxx"], dtype=np.float64).reshape(d, d)

    ld = np.longdouble
    h = ld(eps)
    tt = ld(t)
    xx = x.astype(ld)

    def f(tv, xv):
        return ld(np.ravel(value_fn(tv, xv))[0])

    f0 = f(tt, xx)
    fdt = (f(tt + h, xx) - f(tt - h, xx)) / (2 * h)
    fdx = np.empty(d, dtype=ld)
    fdxx = np.empty((d, d), dtype=ld)
    E = np.eye(d, dtype=ld) * h
    for i in range(d):
        fp, fm = f(tt, xx + E[i]), f(tt, xx - E[i])
        fdx[i] = (fp - fm) / (2 * h)
        fdxx[i, i] = (fp - 2 * f0 + fm) / (h * h)
        for j in range(i + 1, d):
            fpp = f(tt, xx + E[i] + E[j])
            fpm = f(tt, xx + E[i] - E[j])
            fmp = f(tt, xx - E[i] + E[j])
            fmm = f(tt, xx - E[i] - E[j])
            fdxx[i, j] = fdxx[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    ref = {"value": float(f0), "dt": float(fdt), "dx": fdx.astype(np.float64), "dxx": fdxx.astype(np.float64)}
    got = {"value": jv, "dt": jdt, "dx": jdx, "dxx": jdxx}
    errs = {k: _scaled_err(np.asarray(got[k]), np.asarray(ref[k]), rtol, atol) for k in ref}
    worst = {k: float(np.max(np.abs(np.asarray(got[k]) - np.asarray(ref[k])))) for k in ref}
    return FDReport(errs["value"], errs["dt"], errs["dx"], errs["dxx"], eps, rtol, atol, worst)
