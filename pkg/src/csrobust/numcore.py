"""Numerical substrate: a small reverse-mode autodiff engine over numpy arrays.

Values are plain ``float64`` numpy arrays. A :class:`Tape` records whole
array primitives (matmul, relu, abs, reductions, ...) so that gradients of a
scalar loss with respect to the network parameters can be obtained by a single
reverse sweep. Every op in this module also accepts bare arrays and then just
computes the value, so the same code path serves fast evaluation and training.

Conventions fixed here and relied on elsewhere:

* ``relu'(0) = 0``
* ``d|v|/dv`` at ``v = 0`` is ``0``
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Var",
    "Tape",
    "Rng",
    "matvec",
    "matvec_t",
    "relu",
    "absolute",
    "l1norm",
    "exp",
    "log",
    "total",
    "logsumexp",
    "stable_log1p_sum_exp",
    "where",
    "grad",
    "value_and_grad",
    "finite_diff",
    "branch_signature",
    "value_and_signature",
    "note_branch",
    "check_finite",
    "value_of",
]


class NumericalError(ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what}")
    return arr


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """A node on a :class:`Tape`: an array value plus how to push gradients back."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __slots__ = ("value", "tape", "parents", "backward", "kind")

    def __init__(self, value, tape, parents=(), backward=None, kind="leaf"):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward = backward
        self.kind = kind

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(kind={self.kind!r}, shape={self.value.shape})"

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(other, self)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _sub(other, self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(other, self)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _div(other, self)

    def __neg__(self):
        return _record(-self.value, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __getitem__(self, idx):
        value = self.value[idx]
        shape = self.value.shape

        basic = all(i is None or i is Ellipsis or isinstance(i, (int, slice))
                    for i in (idx if isinstance(idx, tuple) else (idx,)))

        def back(g):
            out = np.zeros(shape)
            if basic:
                out[idx] += g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return _record(value, (self,), back, "index")

    def reshape(self, *shape):
        orig = self.value.shape
        return _record(self.value.reshape(*shape), (self,), lambda g: (g.reshape(orig),), "reshape")

    @property
    def T(self):
        return _record(self.value.T, (self,), lambda g: (g.T,), "transpose")

    def sum(self, axis=None, keepdims=False):
        return total(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records primitive ops in creation order (which is a topological order).

    A tape belongs to one thread of execution; create a fresh one per loss
    evaluation.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self.branches: list[np.ndarray] = []

    def var(self, value) -> Var:
        node = Var(np.asarray(value, dtype=np.float64), self)
        self.nodes.append(node)
        return node

    def note_branch(self, mask):
        """Remember a data-dependent branch decision (used by gradient checks)."""
        self.branches.append(np.asarray(mask, dtype=bool))

    def gradient(self, out: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if out.value.size != 1:
            raise ValueError("gradient requires a scalar output")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
        wanted = {id(w) for w in wrt}
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                kept[id(node)] = g
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if not isinstance(parent, Var) or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out_grads = [kept.get(id(w), np.zeros_like(w.value)) for w in wrt]
        # non-finite values propagate, so checking the results is enough
        for w, g in zip(wrt, out_grads):
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for a {w.value.shape} parameter")
        return out_grads


def note_branch(x, mask):
    """Record ``mask`` on the tape of ``x`` when ``x`` is being traced."""
    if isinstance(x, Var):
        x.tape.note_branch(mask)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _record(value, parents, backward, kind):
    tape = _tape_of(*parents)
    node = Var(value, tape, parents, backward, kind)
    tape.nodes.append(node)
    return node


def _add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def _sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def _mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def back(g):
        ga = _unbroadcast(g * bv, sa) if isinstance(a, Var) else None
        gb = _unbroadcast(g * av, sb) if isinstance(b, Var) else None
        return ga, gb

    return _record(out, (a, b), back, "mul")


def _div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)

    def back(g):
        ga = _unbroadcast(g / bv, sa) if isinstance(a, Var) else None
        gb = _unbroadcast(-g * out / bv, sb) if isinstance(b, Var) else None
        return ga, gb

    return _record(out, (a, b), back, "div")


def _gemm(a, b):
    # stacked @ 2-D: fold the stack into rows so BLAS sees one large GEMM
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def _matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = _gemm(av, bv)
    if _tape_of(a, b) is None:
        return out

    def back(g):
        # promote 1-D operands the way numpy does, then undo it
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if isinstance(a, Var):
            ga = _gemm(g2, np.swapaxes(b2, -1, -2))
            if av.ndim == 1:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, av.shape)
        if isinstance(b, Var):
            if b2.ndim == 2 and a2.ndim > 2:
                # fold batch dims into rows: one GEMM instead of a batched one
                gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            if bv.ndim == 1:
                gb = gb[..., 0]
        return ga, gb

    return _record(out, (a, b), back, "matmul")


def matvec(W, v):
    """``W @ v`` with a dimension check."""
    if np.shape(value_of(W))[-1] != np.shape(value_of(v))[0]:
        raise ValueError(f"dimension mismatch: {np.shape(value_of(W))} @ {np.shape(value_of(v))}")
    return _matmul(W, v)


def matvec_t(W, v):
    """``W.T @ v`` with a dimension check."""
    if np.shape(value_of(W))[0] != np.shape(value_of(v))[0]:
        raise ValueError(f"dimension mismatch: {np.shape(value_of(W))}.T @ {np.shape(value_of(v))}")
    return _matmul(v, W)


def relu(x):
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    if not isinstance(x, Var):
        return out
    return _record(out, (x,), lambda g: (g * (xv > 0),), "relu")


def absolute(x):
    xv = value_of(x)
    out = np.abs(xv)
    if not isinstance(x, Var):
        return out
    return _record(out, (x,), lambda g: (g * np.sign(xv),), "abs")


def l1norm(v, axis=-1):
    """Sum of absolute values along ``axis``; subgradient 0 at 0."""
    vv = value_of(v)
    out = np.abs(vv).sum(axis=axis)
    if not isinstance(v, Var):
        return out

    def back(g):
        s = np.sign(vv)
        s *= np.expand_dims(g, axis)
        return (s,)

    return _record(out, (v,), back, "l1norm")


def exp(x):
    out = np.exp(value_of(x))
    if not isinstance(x, Var):
        return out
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    if not isinstance(x, Var):
        return out
    return _record(out, (x,), lambda g: (g / xv,), "log")


def total(x, axis=None, keepdims=False):
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = xv.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), back, "sum")


def where(mask, a, b):
    """Elementwise select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    if _tape_of(a, b) is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), sa), _unbroadcast(np.where(mask, 0.0, g), sb)),
        "where",
    )


def logsumexp(x, axis=-1):
    xv = value_of(x)
    top = np.max(xv, axis=axis, keepdims=True)
    shifted = np.exp(xv - top)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.squeeze(top + np.log(s), axis=axis)
    if not isinstance(x, Var):
        return out
    soft = shifted / s
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def stable_log1p_sum_exp(weights, exponents, axis=-1):
    """``log(1 + sum_i w_i * exp(t_i))`` along ``axis``, safe for |t| up to 1e4.

    ``weights`` are constants and must be nonnegative; zero-weight terms are
    dropped entirely, so their exponents may be arbitrarily large. Gradients
    flow to ``exponents`` only.
    """
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    tv = value_of(exponents)
    w = np.broadcast_to(w, np.shape(tv))
    active = w > 0
    safe_t = np.where(active, tv, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        # direct form where it cannot overflow: exact for small sums, monotone
        direct = np.where(active, w * np.exp(safe_t), 0.0)
        dsum = direct.sum(axis=axis, keepdims=True)
        use_direct = dsum < 1e300
        masked = np.where(active, tv, -np.inf)
        if masked.size:
            top = np.maximum(np.max(masked, axis=axis, keepdims=True), 0.0)
        else:
            top = np.zeros(np.shape(dsum))
        top = np.where(use_direct, 0.0, top)
        shifted = np.where(active, w * np.exp(safe_t - top), 0.0)
        s = np.exp(-top) + shifted.sum(axis=axis, keepdims=True)
        res = np.where(use_direct, np.log1p(np.where(use_direct, dsum, 0.0)), top + np.log(s))
        share = np.where(use_direct, direct / (1.0 + dsum), shifted / s)
    out = np.squeeze(res, axis=axis)
    if not isinstance(exponents, Var):
        return out
    return _record(out, (exponents,), lambda g: (np.expand_dims(g, axis) * share,), "log1p_sum_exp")


def value_and_grad(fn: Callable, params: Sequence[np.ndarray]):
    """Evaluate scalar ``fn(*vars)`` on a fresh tape and return (value, grads)."""
    tape = Tape()
    xs = [tape.var(p) for p in params]
    out = fn(*xs)
    if not isinstance(out, Var):
        # fn did not depend on the parameters at all
        return float(out), [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    check_finite(out.value, "loss")
    return float(out.value), tape.gradient(out, xs)


def grad(fn: Callable, params: Sequence[np.ndarray]) -> list[np.ndarray]:
    return value_and_grad(fn, params)[1]


def finite_diff(fn: Callable, params: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn(*params))
            flat[i] = orig - h
            lo = float(fn(*params))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * h)
        out.append(g)
    return out


def value_and_signature(fn: Callable, params: Sequence[np.ndarray]) -> tuple[float, bytes]:
    """Value of ``fn`` plus a fingerprint of every kink-side decision it took.

    Two parameter points with equal signatures lie in the same smooth piece of
    a piecewise-smooth function, which is what a finite-difference check needs.
    """
    tape = Tape()
    out = fn(*[tape.var(p) for p in params])
    h = hashlib.sha256()
    for node in tape.nodes:
        if node.kind in ("relu", "abs", "l1norm"):
            (parent,) = node.parents
            h.update(np.packbits(value_of(parent) > 0).tobytes())
            h.update(np.packbits(value_of(parent) < 0).tobytes())
    for mask in tape.branches:
        h.update(np.packbits(mask).tobytes())
    return float(value_of(out)), h.digest()


def branch_signature(fn: Callable, params: Sequence[np.ndarray]) -> bytes:
    return value_and_signature(fn, params)[1]


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class Rng:
    """Seeded, splittable random stream backed by the counter-based Philox generator.

    ``Rng(s).child("shuffle")`` always yields the same substream, independent of
    how much of the parent stream has been consumed.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        ss = np.random.SeedSequence(self.seed, spawn_key=_path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._path + (_name_key(name),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)
