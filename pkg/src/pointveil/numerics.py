"""Dense linear algebra helpers and a small reverse-mode tape.

The tape covers a closed set of array primitives, which is all the flows,
encoder and classifiers in this package need. Values are float64 numpy
arrays; batches are stored row-wise (one point or one cloud per row), and
weight matrices are ``(out, in)`` so a dense layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, TapeError

__all__ = [
    "Node",
    "Tape",
    "dense_forward",
    "backward",
    "grad_check",
    "random_orthogonal",
    "Adam",
    "glorot",
]


class Node:
    """One recorded value on a :class:`Tape`."""

    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


def _unbroadcast(grad, shape):
    # sum out the axes that numpy broadcasting expanded
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _offsets(counts):
    counts = np.asarray(counts, dtype=np.int64)
    return np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)


def _segment_sum(x: np.ndarray, counts) -> np.ndarray:
    """Sum of each contiguous segment of rows; empty segments sum to zero."""
    counts = np.asarray(counts, dtype=np.int64)
    out = np.zeros((len(counts),) + x.shape[1:], dtype=np.result_type(x, np.float64))
    nonempty = counts > 0
    if nonempty.any():
        # reduceat misreads zero-length segments, so reduce over the non-empty ones only
        out[nonempty] = np.add.reduceat(x, _offsets(counts)[nonempty], axis=0)
    return out


class Tape:
    """Records primitive operations so gradients can be replayed backward.

    A tape is single-owner. Build a fresh one per forward pass.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._named: dict[str, Node] = {}
        self._grads: dict[int, np.ndarray] | None = None

    def __len__(self):
        return len(self._nodes)

    # -- leaves -----------------------------------------------------------

    def variable(self, value, name: str | None = None) -> Node:
        """Register a differentiable leaf. Named leaves are reused by name."""
        if name is not None and name in self._named:
            return self._named[name]
        node = Node(np.asarray(value, dtype=np.float64), True, name)
        self._nodes.append(node)
        if name is not None:
            self._named[name] = node
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), False)

    def _record(self, value, parents, backward_fn) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(value, requires, None, parents, backward_fn if requires else None)
        if requires:
            self._nodes.append(node)
        return node

    # -- primitives -------------------------------------------------------

    def dense(self, x: Node, W: Node, b: Node, activation: str = "identity") -> Node:
        if x.value.shape[-1] != W.value.shape[1]:
            raise ConfigError(
                f"dense layer expects input width {W.value.shape[1]}, got {x.value.shape[-1]}"
            )
        pre = x.value @ W.value.T + b.value
        if activation == "tanh":
            out = np.tanh(pre)
        elif activation == "identity":
            out = pre
        else:
            raise ConfigError(f"unknown activation {activation!r}")

        def back(g):
            if activation == "tanh":
                g = g * (1.0 - out * out)
            gx = g @ W.value
            gW = g.T @ x.value if x.value.ndim == 2 else np.outer(g, x.value)
            gb = g.sum(axis=0) if g.ndim == 2 else g
            return gx, gW, gb

        return self._record(out, (x, W, b), back)

    def tanh(self, x: Node) -> Node:
        out = np.tanh(x.value)
        return self._record(out, (x,), lambda g: (g * (1.0 - out * out),))

    def exp(self, x: Node) -> Node:
        out = np.exp(x.value)
        return self._record(out, (x,), lambda g: (g * out,))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = av * bv
        return self._record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def div(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        out = av / bv
        return self._record(
            out,
            (a, b),
            lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        )

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.value.shape, b.value.shape
        return self._record(
            a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        )

    def sub(self, a: Node, b: Node) -> Node:
        sa, sb = a.value.shape, b.value.shape
        return self._record(
            a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
        )

    def scale(self, x: Node, c: float) -> Node:
        return self._record(x.value * c, (x,), lambda g: (g * c,))

    def abs(self, x: Node) -> Node:
        sign = np.sign(x.value)
        return self._record(np.abs(x.value), (x,), lambda g: (g * sign,))

    def sum(self, x: Node, axis: int | None = None) -> Node:
        shape = x.value.shape
        out = x.value.sum(axis=axis)

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._record(out, (x,), back)

    def mean(self, x: Node, axis: int | None = None) -> Node:
        n = x.value.size if axis is None else x.value.shape[axis]
        return self.scale(self.sum(x, axis), 1.0 / n)

    def concat(self, parts: Sequence[Node], axis: int = 1) -> Node:
        sizes = [p.value.shape[axis] for p in parts]
        cuts = np.cumsum(sizes)[:-1]
        out = np.concatenate([p.value for p in parts], axis=axis)
        return self._record(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))

    def columns(self, x: Node, index) -> Node:
        """Gather columns ``x[:, index]``; also used to permute columns."""
        index = np.asarray(index, dtype=np.int64)
        shape = x.value.shape
        unique = len(np.unique(index)) == len(index)

        def back(g):
            gx = np.zeros(shape)
            if unique:
                gx[:, index] = g
            else:
                np.add.at(gx, (slice(None), index), g)
            return (gx,)

        return self._record(x.value[:, index], (x,), back)

    def rows(self, x: Node, index) -> Node:
        index = np.asarray(index, dtype=np.int64)
        shape = x.value.shape

        def back(g):
            gx = np.zeros(shape)
            np.add.at(gx, index, g)
            return (gx,)

        return self._record(x.value[index], (x,), back)

    def repeat_rows(self, x: Node, counts) -> Node:
        """Row ``j`` of ``x`` repeated ``counts[j]`` times (contiguous segments)."""
        counts = np.asarray(counts, dtype=np.int64)
        return self._record(
            np.repeat(x.value, counts, axis=0),
            (x,),
            lambda g: (_segment_sum(g, counts),),
        )

    def segment_mean(self, x: Node, counts) -> Node:
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 1):
            raise TapeError("segment_mean needs non-empty segments")
        c = counts.reshape((-1,) + (1,) * (x.value.ndim - 1)).astype(np.float64)
        out = _segment_sum(x.value, counts) / c
        return self._record(out, (x,), lambda g: (np.repeat(g / c, counts, axis=0),))

    def segment_max(self, x: Node, counts) -> Node:
        """Column-wise max over each contiguous segment of rows.

        The gradient goes to the argmax row only; ties resolve to the lowest
        row index.
        """
        counts = np.asarray(counts, dtype=np.int64)
        starts = _offsets(counts)
        xv = x.value
        ncols = xv.shape[1]
        arg = np.empty((len(counts), ncols), dtype=np.int64)
        for j, (s, c) in enumerate(zip(starts, counts)):
            arg[j] = s + np.argmax(xv[s : s + c], axis=0)
        cols = np.arange(ncols)
        out = xv[arg, cols]

        def back(g):
            gx = np.zeros_like(xv)
            np.add.at(gx, (arg, np.broadcast_to(cols, arg.shape)), g)
            return (gx,)

        return self._record(out, (x,), back)

    def rowdot(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._record(
            np.einsum("ij,ij->i", av, bv),
            (a, b),
            lambda g: (g[:, None] * bv, g[:, None] * av),
        )

    def rownorm(self, x: Node) -> Node:
        """Euclidean norm of each row. Gradient is zero at a zero row."""
        xv = x.value
        out = np.sqrt(np.einsum("ij,ij->i", xv, xv))
        safe = np.where(out > 0.0, out, 1.0)

        def back(g):
            return ((g / safe)[:, None] * xv,)

        return self._record(out, (x,), back)

    def cross_entropy(self, logits: Node, labels) -> Node:
        """Mean negative log-softmax of the labelled class."""
        labels = np.asarray(labels, dtype=np.int64)
        lv = logits.value
        shift = lv - lv.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shift).sum(axis=1, keepdims=True))
        logp = shift - logz
        n = lv.shape[0]
        out = np.asarray(-logp[np.arange(n), labels].mean())

        def back(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            return (g * p / n,)

        return self._record(out, (logits,), back)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Replay the tape backward from a scalar ``loss``.

        Returns gradients for every named variable. Gradients for any other
        node are available afterwards through :meth:`grad`.
        """
        if not self._nodes:
            raise TapeError("backward called before any forward computation")
        if np.ndim(loss.value) != 0:
            raise TapeError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.value)
            for node in reversed(self._nodes):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        self._grads = grads
        return {
            name: grads.get(id(node), np.zeros_like(node.value))
            for name, node in self._named.items()
        }

    def grad(self, node: Node) -> np.ndarray:
        if self._grads is None:
            raise TapeError("call backward() first")
        return self._grads.get(id(node), np.zeros_like(node.value))


def dense_forward(tape: Tape, x, W, b, activation: str = "identity") -> Node:
    """Record ``activation(x @ W.T + b)`` on ``tape``.

    ``x``, ``W`` and ``b`` may be nodes or plain arrays (arrays become
    constants).
    """
    x, W, b = (v if isinstance(v, Node) else tape.constant(v) for v in (x, W, b))
    return tape.dense(x, W, b, activation)


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point,
    step: float = 1e-5,
) -> float:
    """Compare an analytic gradient with central differences.

    ``f(x)`` returns ``(value, gradient)``. The result is the maximum over
    coordinates of ``|analytic - numeric| / max(1, |analytic|)``; a
    non-finite probe returns ``inf`` instead of raising.
    """
    x = np.array(point, dtype=np.float64)
    try:
        _, analytic = f(x.copy())
    except (FloatingPointError, OverflowError, ValueError):
        return math.inf
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        try:
            fp = float(f(xp.reshape(x.shape))[0])
            fm = float(f(xm.reshape(x.shape))[0])
        except (FloatingPointError, OverflowError, ValueError):
            return math.inf
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return math.inf
        numeric = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[i]
        if not math.isfinite(a):
            return math.inf
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def random_orthogonal(dim: int, seed=None) -> np.ndarray:
    """Haar-random proper rotation of size ``dim``.

    QR of a standard-normal matrix with the triangular factor's diagonal
    made positive, then one row negated if the determinant is -1.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if int(dim) < 1:
        raise ConfigError(f"dimension must be >= 1, got {dim}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d
    if np.linalg.det(q) < 0:
        q[0] = -q[0]
    return q


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.standard_normal((rows, cols)) * math.sqrt(1.0 / cols)


@dataclass
class Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Apply one update. Returns False (and warns) if any gradient is non-finite."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                warnings.warn(f"non-finite gradient for {name}; step skipped", RuntimeWarning)
                return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def optimizer_step(state: Adam, params, gradients) -> dict[str, np.ndarray]:
    state.step(params, gradients)
    return params


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


class DenseStack:
    """A stack of dense layers sharing one hidden activation.

    Parameters live in ``self.params`` under ``{prefix}W{i}`` / ``{prefix}b{i}``;
    the optimizer updates those arrays in place.
    """

    def __init__(self, sizes, prefix="", hidden_activation="tanh", final_activation="identity",
                 rng=None, zero_last=False):
        self.sizes = tuple(int(s) for s in sizes)
        self.prefix = prefix
        self.hidden_activation = hidden_activation
        self.final_activation = final_activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if zero_last and i == last:
                W = np.zeros((fan_out, fan_in))
            else:
                W = glorot(rng, fan_out, fan_in)
            self.params[f"{prefix}W{i}"] = W
            self.params[f"{prefix}b{i}"] = np.zeros(fan_out)

    @property
    def depth(self):
        return len(self.sizes) - 1

    def forward(self, tape: Tape, x: Node) -> Node:
        h = x
        for i in range(self.depth):
            act = self.final_activation if i == self.depth - 1 else self.hidden_activation
            W = tape.variable(self.params[f"{self.prefix}W{i}"], f"{self.prefix}W{i}")
            b = tape.variable(self.params[f"{self.prefix}b{i}"], f"{self.prefix}b{i}")
            h = tape.dense(h, W, b, act)
        return h

    def __call__(self, x) -> np.ndarray:
        tape = Tape()
        return self.forward(tape, tape.constant(x)).value

    @staticmethod
    def count(sizes) -> int:
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
