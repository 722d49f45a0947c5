"""Shape representation: a permutation-invariant point encoder followed by a shape flow."""
from __future__ import annotations

import numpy as np

from .data import PointCloud
from .errors import InputError
from .flow import FlowStack, alternating_masks, build_stack
from .numerics import DenseStack, Node, Tape

POINT_WIDTHS = (3, 64, 128)
HEAD_WIDTHS = (128, 64)


class ShapeEncoder:
    """Pointwise tanh MLP (3 -> 64 -> 128), max-pool over points, head (128 -> 64 -> m)."""

    def __init__(self, m: int = 32, rng=None, prefix: str = "h."):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.m = int(m)
        self.pointwise = DenseStack(POINT_WIDTHS, prefix + "p.", final_activation="tanh", rng=rng)
        self.head = DenseStack(HEAD_WIDTHS + (self.m,), prefix + "o.", rng=rng)
        self.params = {**self.pointwise.params, **self.head.params}

    @staticmethod
    def count(m: int) -> int:
        return DenseStack.count(POINT_WIDTHS) + DenseStack.count(HEAD_WIDTHS + (m,))

    def forward(self, tape: Tape, points: Node, counts) -> Node:
        """``points`` stacks clouds row-wise; ``counts`` gives each cloud's size."""
        if np.any(np.asarray(counts) < 1):
            raise InputError("cannot encode an empty cloud")
        feats = self.pointwise.forward(tape, points)
        pooled = tape.segment_max(feats, counts)
        return self.head.forward(tape, pooled)


def make_shape_flow(m: int, hidden: int, bound: float = 2.0, rng=None) -> FlowStack:
    return build_stack(alternating_masks(m, 2), hidden, 0, bound, rng, prefix="G.")


def encode_shape(cloud: PointCloud | np.ndarray, encoder: ShapeEncoder) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise InputError("cannot encode an empty cloud")
    tape = Tape()
    return encoder.forward(tape, tape.constant(pts), [len(pts)]).value[0]


def shape_to_latent(w, flow: FlowStack):
    """``(e, logdet)`` for one shape feature vector."""
    w = np.asarray(w, dtype=np.float64)
    tape = Tape()
    e, ld = flow.forward(tape, tape.constant(w[None, :]))
    return e.value[0], float(ld.value[0])


def latent_to_shape(e, flow: FlowStack) -> np.ndarray:
    return flow.inverse(np.asarray(e, dtype=np.float64)[None, :])[0]
