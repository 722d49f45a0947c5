"""Affine coupling flows and identity-covariance Gaussian mixtures."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, TrainingError
from .numerics import DenseStack, Node, Tape

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GmmSpec:
    """Mixture of unit-covariance Gaussians; one row of ``means`` per component."""

    means: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "means", means)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def logpdf(self, z, components) -> np.ndarray:
        """Row-wise log N(z | mean[component], I)."""
        z = np.atleast_2d(z)
        diff = z - self.means[np.asarray(components)]
        return -0.5 * self.dim * LOG_2PI - 0.5 * np.einsum("ij,ij->i", diff, diff)

    def nearest(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        d2 = ((z[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)

    def min_separation(self) -> float:
        return min_pairwise_distance(self.means)

    def rotated(self, R, center=None, target=None) -> "GmmSpec":
        """Means moved by ``mu -> (mu - c) R + t``; ``t`` defaults to ``c R``."""
        c = np.zeros(self.dim) if center is None else np.asarray(center, dtype=np.float64)
        t = c @ R if target is None else np.asarray(target, dtype=np.float64)
        return GmmSpec((self.means - c) @ R + t)


def gmm_logpdf(z, gmm: GmmSpec, component: int) -> float:
    if not 0 <= component < gmm.K:
        raise ConfigError(f"component {component} out of range for K={gmm.K}")
    return float(gmm.logpdf(np.asarray(z, dtype=np.float64)[None, :], [component])[0])


def min_pairwise_distance(means) -> float:
    means = np.atleast_2d(means)
    if means.shape[0] < 2:
        return math.inf
    d = np.sqrt(((means[:, None, :] - means[None, :, :]) ** 2).sum(axis=2))
    return float(d[np.triu_indices(means.shape[0], 1)].min())


def gmm_means_init(K: int, dim: int, radius: float = 5.0, candidates: int = 1000,
                   seed=0) -> GmmSpec:
    """Best-of-``candidates`` mean sets drawn from N(0, radius^2 I).

    The kept set maximizes the minimum pairwise distance between means.
    """
    if K < 1 or dim < 1 or radius <= 0 or candidates < 1:
        raise ConfigError("gmm_means_init needs K >= 1, dim >= 1, radius > 0, candidates >= 1")
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((candidates, K, dim)) * radius
    if K == 1:
        return GmmSpec(draws[0])
    scores = candidate_separations(draws)
    return GmmSpec(draws[int(np.argmax(scores))])


def candidate_separations(draws) -> np.ndarray:
    """Minimum pairwise distance of each candidate mean set in ``draws``."""
    K = draws.shape[1]
    iu = np.triu_indices(K, 1)
    diff = draws[:, :, None, :] - draws[:, None, :, :]
    dist = np.sqrt((diff**2).sum(axis=3))
    return dist[:, iu[0], iu[1]].min(axis=1)


class CouplingLayer:
    """RealNVP affine coupling with an optional external condition.

    Coordinates where ``mask`` is true pass through; the rest are scaled by
    ``exp(s)`` and shifted by ``t``, both computed from the pass-through part
    concatenated with the condition. ``s = bound * tanh(raw)`` keeps the
    exponent finite. Final layers start at zero, so a fresh layer is the
    identity.
    """

    def __init__(self, mask, hidden: int, cond_dim: int = 0, bound: float = 2.0,
                 rng=None, prefix: str = ""):
        mask = np.asarray(mask, dtype=bool)
        if mask.all() or not mask.any():
            raise ConfigError("coupling mask needs at least one pass-through and one transformed entry")
        self.mask = mask
        self.hidden = int(hidden)
        self.cond_dim = int(cond_dim)
        self.prefix = prefix
        self.a_idx = np.flatnonzero(mask)
        self.b_idx = np.flatnonzero(~mask)
        self._unperm = np.argsort(np.concatenate([self.a_idx, self.b_idx]))
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (len(self.a_idx) + self.cond_dim, self.hidden, self.hidden, len(self.b_idx))
        self.s_net = DenseStack(sizes, prefix + "s.", rng=rng, zero_last=True)
        self.t_net = DenseStack(sizes, prefix + "t.", rng=rng, zero_last=True)
        self.params = {**self.s_net.params, **self.t_net.params,
                       prefix + "bound": np.array([float(bound)])}

    @property
    def dim(self) -> int:
        return self.mask.size

    @staticmethod
    def count(pass_dims: int, trans_dims: int, cond_dim: int, hidden: int) -> int:
        sizes = (pass_dims + cond_dim, hidden, hidden, trans_dims)
        return 2 * DenseStack.count(sizes) + 1

    def _net_input(self, tape: Tape, xa: Node, cond: Node | None) -> Node:
        if self.cond_dim:
            if cond is None or cond.value.shape[-1] != self.cond_dim:
                raise ConfigError(f"coupling layer needs a condition of width {self.cond_dim}")
            return tape.concat([xa, cond], axis=1)
        return xa

    def _scale_shift(self, tape: Tape, xa: Node, cond: Node | None):
        inp = self._net_input(tape, xa, cond)
        bound = tape.variable(self.params[self.prefix + "bound"], self.prefix + "bound")
        s = tape.mul(bound, tape.tanh(self.s_net.forward(tape, inp)))
        t = self.t_net.forward(tape, inp)
        if not np.all(np.isfinite(s.value)) or not np.all(np.isfinite(t.value)):
            worst = {k: float(np.max(np.abs(v))) for k, v in self.params.items()}
            raise TrainingError(f"non-finite coupling output in {self.prefix or 'layer'}; "
                                f"max |param| = {worst}")
        return s, t

    def forward(self, tape: Tape, x: Node, cond: Node | None = None):
        """Returns ``(y, logdet)`` nodes; ``logdet`` has one entry per row."""
        if x.value.shape[-1] != self.dim:
            raise ConfigError(f"coupling layer expects width {self.dim}, got {x.value.shape[-1]}")
        xa = tape.columns(x, self.a_idx)
        xb = tape.columns(x, self.b_idx)
        s, t = self._scale_shift(tape, xa, cond)
        yb = tape.add(tape.mul(xb, tape.exp(s)), t)
        y = tape.columns(tape.concat([xa, yb], axis=1), self._unperm)
        return y, tape.sum(s, axis=1)

    def inverse(self, y, cond=None) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        tape = Tape()
        ya = y[:, self.a_idx]
        s, t = self._scale_shift(tape, tape.constant(ya),
                                 None if cond is None else tape.constant(cond))
        xb = (y[:, self.b_idx] - t.value) * np.exp(-s.value)
        return np.concatenate([ya, xb], axis=1)[:, self._unperm]


class FlowStack:
    """Ordered couplings; forward sums log-determinants, inverse runs in reverse."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            self.params.update(layer.params)

    def forward(self, tape: Tape, x: Node, cond: Node | None = None, per_layer=False):
        n = x.value.shape[0]
        logdet = tape.constant(np.zeros(n))
        parts = []
        for layer in self.layers:
            x, ld = layer.forward(tape, x, cond)
            parts.append(ld)
            logdet = tape.add(logdet, ld)
        if per_layer:
            return x, logdet, parts
        return x, logdet

    def inverse(self, y, cond=None) -> np.ndarray:
        x = np.asarray(y, dtype=np.float64)
        for layer in reversed(self.layers):
            x = layer.inverse(x, cond)
        return x


def alternating_masks(dim: int, n_layers: int):
    """Half/half masks for a shape flow, flipped every layer."""
    first = np.arange(dim) < dim // 2
    return [first if i % 2 == 0 else ~first for i in range(n_layers)]


def point_flow_masks(blocks: int, single_coupling: bool = False):
    """Masks for the 3D point flow.

    Block ``j`` passes coordinate ``j % 3`` through, then its complement, so
    every coordinate is transformed once per block. ``single_coupling``
    gives one coupling that passes coordinate 0 through untouched.
    """
    if single_coupling:
        return [np.array([True, False, False])]
    masks = []
    for j in range(blocks):
        m = np.zeros(3, dtype=bool)
        m[j % 3] = True
        masks.extend([m, ~m])
    return masks


def build_stack(masks, hidden, cond_dim=0, bound=2.0, rng=None, prefix="") -> FlowStack:
    rng = rng if rng is not None else np.random.default_rng(0)
    return FlowStack(
        CouplingLayer(m, hidden, cond_dim, bound, rng, prefix=f"{prefix}{i}.")
        for i, m in enumerate(masks)
    )


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v, v.ndim == 1


def coupling_forward(x, layer: CouplingLayer, cond=None):
    """Numpy convenience wrapper: returns ``(y, logdet)`` for a vector or a batch."""
    xb, single = _as_batch(x)
    tape = Tape()
    c = None
    if cond is not None:
        cb, _ = _as_batch(cond)
        c = tape.constant(np.broadcast_to(cb, (xb.shape[0], cb.shape[1])))
    y, ld = layer.forward(tape, tape.constant(xb), c)
    if single:
        return y.value[0], float(ld.value[0])
    return y.value, ld.value


def coupling_inverse(y, layer: CouplingLayer, cond=None):
    yb, single = _as_batch(y)
    c = None
    if cond is not None:
        cb, _ = _as_batch(cond)
        c = np.broadcast_to(cb, (yb.shape[0], cb.shape[1]))
    x = layer.inverse(yb, c)
    return x[0] if single else x


def stack_forward(v, stack: FlowStack, cond=None):
    vb, single = _as_batch(v)
    tape = Tape()
    c = None
    if cond is not None:
        cb, _ = _as_batch(cond)
        c = tape.constant(np.broadcast_to(cb, (vb.shape[0], cb.shape[1])))
    y, ld = stack.forward(tape, tape.constant(vb), c)
    if single:
        return y.value[0], float(ld.value[0])
    return y.value, ld.value


def stack_inverse(v, stack: FlowStack, cond=None):
    vb, single = _as_batch(v)
    c = None
    if cond is not None:
        cb, _ = _as_batch(cond)
        c = np.broadcast_to(cb, (vb.shape[0], cb.shape[1]))
    x = stack.inverse(vb, c)
    return x[0] if single else x
