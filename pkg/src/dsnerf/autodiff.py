"""A small reverse-mode differentiation tape over numpy arrays.

Every operation appends one node to the tape it was called on, so the
recording order is already a topological order and ``backward`` is a single
reverse sweep. Several backward passes can run over one recording (for
instance an input-gradient pass for normals followed by the parameter pass
for the loss); gradients are returned, never stored on the nodes.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import UsageError

Vjp = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class Var:
    __slots__ = ("value", "_tape", "index", "parents", "vjp", "constant", "name")

    def __init__(self, tape, value, parents=(), vjp=None, constant=False, name=None):
        self.value = value
        # weak, so a dropped tape and its nodes are freed without the cycle collector
        self._tape = weakref.ref(tape)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.constant = constant
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise UsageError("the tape this variable was recorded on no longer exists")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Gradients(dict):
    """Maps variables to their gradients; missing entries are zero."""

    def __getitem__(self, var: Var):
        return super().__getitem__(var.index)

    def get(self, var: Var, default=None):
        return super().get(var.index, default)

    def __contains__(self, var):
        return super().__contains__(var.index)


class Tape:
    __slots__ = ("nodes", "__weakref__")

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, name=None) -> Var:
        """A differentiable leaf."""
        return Var(self, np.asarray(value, dtype=np.float64), name=name)

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64), constant=True)

    def backward(self, root: Var, seed=None, wrt: Iterable[Var] | None = None) -> Gradients:
        """Reverse sweep from ``root``.

        Without ``seed`` the root must hold a single element. With ``wrt``
        only the listed leaves receive gradients and branches that cannot
        reach them are skipped; otherwise every non-constant leaf does.
        """
        if root.tape is not self:
            raise UsageError("root belongs to a different tape")
        if seed is None:
            if root.value.size != 1:
                raise UsageError("backward without a seed needs a scalar root")
            seed = np.ones_like(root.value)
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), root.value.shape)

        n = root.index + 1
        needed = np.zeros(n, dtype=bool)
        targets = None if wrt is None else {v.index for v in wrt}
        for node in self.nodes[:n]:
            if node.vjp is None:
                needed[node.index] = (not node.constant) if targets is None else node.index in targets
            else:
                needed[node.index] = any(needed[p.index] for p in node.parents)

        grads: dict[int, np.ndarray] = {root.index: np.array(seed)}
        out = Gradients()
        for node in reversed(self.nodes[:n]):
            g = grads.pop(node.index, None)
            if g is None or not needed[node.index]:
                continue
            if node.vjp is None:
                out[node.index] = g
                continue
            need = [bool(needed[p.index]) for p in node.parents]
            for parent, pg, flag in zip(node.parents, node.vjp(g, need), need):
                if not flag or pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return out


# --------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("operation needs at least one tape variable")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise UsageError("mixing variables from different tapes")
        return x
    return tape.const(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _unary(x: Var, value, local):
    """Elementwise op with derivative ``local`` (same shape as x)."""
    return Var(x.tape, value, (x,), lambda g, need: (g * local,))


# --------------------------------------------------------------------------
# operations


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return Var(t, a.value + b.value, (a, b), lambda g, need: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return Var(t, a.value - b.value, (a, b), lambda g, need: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value

    def vjp(g, need):
        return (
            _unbroadcast(g * bv, av.shape) if need[0] else None,
            _unbroadcast(g * av, bv.shape) if need[1] else None,
        )

    return Var(t, av * bv, (a, b), vjp)


def scale(x: Var, c: float) -> Var:
    return Var(x.tape, x.value * c, (x,), lambda g, need: (g * c,))


def square(x: Var) -> Var:
    return _unary(x, x.value**2, 2.0 * x.value)


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    return _unary(x, y, y)


def sin(x: Var) -> Var:
    return _unary(x, np.sin(x.value), np.cos(x.value))


def cos(x: Var) -> Var:
    return _unary(x, np.cos(x.value), -np.sin(x.value))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return Var(x.tape, np.where(mask, x.value, 0.0), (x,), lambda g, need: (g * mask,))


def softplus(x: Var) -> Var:
    return _unary(x, np.logaddexp(0.0, x.value), expit(x.value))


def sigmoid(x: Var) -> Var:
    y = expit(x.value)
    return _unary(x, y, y * (1.0 - y))


def sum_all(x: Var) -> Var:
    shape = x.shape
    return Var(x.tape, np.asarray(x.value.sum()), (x,), lambda g, need: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x: Var) -> Var:
    """Sum over the last axis, keeping it as length 1."""
    shape = x.shape
    return Var(x.tape, x.value.sum(axis=-1, keepdims=True), (x,), lambda g, need: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Var) -> Var:
    n = x.value.size
    return scale(sum_all(x), 1.0 / n)


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """``x @ W + b`` with ``W`` stored (in, out)."""
    xv, Wv = x.value, W.value
    y = xv @ Wv
    if b is not None:
        y = y + b.value

    def vjp(g, need):
        gx = g @ Wv.T if need[0] else None
        gW = xv.T @ g if need[1] else None
        if b is None:
            return gx, gW
        return gx, gW, (g.sum(axis=0) if need[2] else None)

    parents = (x, W) if b is None else (x, W, b)
    return Var(x.tape, y, parents, vjp)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, need):
        return [p if n else None for p, n in zip(np.split(g, splits, axis=axis), need)]

    return Var(t, np.concatenate([x.value for x in xs], axis=axis), xs, vjp)


def broadcast_rows(x: Var, n: int) -> Var:
    """Repeat a (1, d) row ``n`` times."""
    return Var(x.tape, np.broadcast_to(x.value, (n,) + x.shape[1:]).copy(), (x,), lambda g, need: (g.sum(axis=0, keepdims=True),))


def take_row(table: Var, i: int) -> Var:
    shape = table.shape

    def vjp(g, need):
        out = np.zeros(shape)
        out[i] = g[0]
        return (out,)

    return Var(table.tape, table.value[i : i + 1].copy(), (table,), vjp)


def scatter_rows(x: Var, index: np.ndarray, n: int) -> Var:
    """Place rows of ``x`` at ``index`` inside an ``n``-row zero array."""
    index = np.asarray(index)
    out = np.zeros((n,) + x.shape[1:])
    out[index] = x.value
    return Var(x.tape, out, (x,), lambda g, need: (g[index],))


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return Var(x.tape, x.value.reshape(shape), (x,), lambda g, need: (g.reshape(old),))


def normalize_rows(x: Var, eps: float = 0.0) -> Var:
    v = x.value
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True) + eps)
    y = v / norm

    def vjp(g, need):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Var(x.tape, y, (x,), vjp)


def positional_encoding(x: Var, freqs: int, include_input: bool = True) -> Var:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for ``k < freqs``, laid out per frequency."""
    if freqs == 0:
        return x
    v = x.value
    n, d = v.shape
    scales = np.pi * 2.0 ** np.arange(freqs)
    arg = v[:, None, :] * scales[:, None]  # (n, L, d)
    s, c = np.sin(arg), np.cos(arg)
    parts = np.stack([s, c], axis=2).reshape(n, 2 * freqs * d)
    value = np.concatenate([v, parts], axis=1) if include_input else parts

    def vjp(g, need):
        off = d if include_input else 0
        gp = g[:, off:].reshape(n, freqs, 2, d)
        gx = ((gp[:, :, 0] * c - gp[:, :, 1] * s) * scales[:, None]).sum(axis=1)
        if include_input:
            gx = gx + g[:, :d]
        return (gx,)

    return Var(x.tape, value, (x,), vjp)


def composite(sigma: Var, color: Var, delta: np.ndarray, background) -> Var:
    """Alpha compositing along rows: sigma (R, K), color (R, K, 3) -> (R, 3)."""
    sv, cv = sigma.value, color.value
    bg = np.asarray(background, dtype=np.float64)
    tau = sv * delta
    cum = np.cumsum(tau, axis=1)
    trans_next = np.exp(-cum)  # T_{k+1}
    trans = np.concatenate([np.ones((len(sv), 1)), trans_next[:, :-1]], axis=1)
    weight = trans - trans_next
    t_end = trans_next[:, -1:]
    value = (weight[..., None] * cv).sum(axis=1) + t_end * bg

    def vjp(g, need):
        gs = gc = None
        if need[1]:
            gc = weight[..., None] * g[:, None, :]
        if need[0]:
            wc = weight[..., None] * cv
            tail = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1]
            suffix = np.concatenate([tail[:, 1:], np.zeros_like(tail[:, :1])], axis=1) + (t_end * bg)[:, None, :]
            dtau = ((trans_next[..., None] * cv - suffix) * g[:, None, :]).sum(axis=2)
            gs = dtau * delta
        return gs, gc

    return Var(sigma.tape, value, (sigma, color), vjp)


def composite_weights(sigma: np.ndarray, delta: np.ndarray):
    """Numpy-only transmittance bookkeeping: (weights, T_k, final transmittance)."""
    tau = sigma * delta
    trans_next = np.exp(-np.cumsum(tau, axis=1))
    trans = np.concatenate([np.ones((len(sigma), 1)), trans_next[:, :-1]], axis=1)
    return trans - trans_next, trans, trans_next[:, -1]


def mse_loss(pred: Var, target) -> Var:
    """Mean over rows of the squared L2 error."""
    target = np.asarray(target, dtype=np.float64)
    diff = pred.value - target
    n = len(diff)
    value = np.asarray((diff * diff).sum() / n)
    return Var(pred.tape, value, (pred,), lambda g, need: (g * 2.0 * diff / n,))
