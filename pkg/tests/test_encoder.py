import numpy as np

from pointveil.encoder import (ShapeEncoder, encode_shape, latent_to_shape, make_shape_flow,
                               shape_to_latent)
from pointveil.numerics import Tape, grad_check


def test_encoder_output_length_and_permutation_invariance(rng):
    enc = ShapeEncoder(32, rng)
    pts = rng.normal(size=(50, 3))
    w = encode_shape(pts, enc)
    assert w.shape == (32,)
    np.testing.assert_array_equal(encode_shape(pts[rng.permutation(50)], enc), w)


def test_encoder_batches_clouds_independently(rng):
    enc = ShapeEncoder(8, rng)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(7, 3))
    tape = Tape()
    both = enc.forward(tape, tape.constant(np.vstack([a, b])), [10, 7]).value
    np.testing.assert_allclose(both[0], encode_shape(a, enc), atol=1e-14)
    np.testing.assert_allclose(both[1], encode_shape(b, enc), atol=1e-14)


def test_encoder_gradient_wrt_points(rng):
    enc = ShapeEncoder(4, rng)
    head = rng.normal(size=4)
    pts0 = rng.normal(size=(6, 3))

    def f(p):
        tape = Tape()
        x = tape.variable(p, "pts")
        out = tape.sum(tape.mul(enc.forward(tape, x, [6]), tape.constant(head)))
        return float(out.value), tape.backward(out)["pts"]

    assert grad_check(f, pts0, step=1e-5) < 1e-4


def test_fresh_shape_flow_is_identity_and_invertible(rng):
    G = make_shape_flow(32, 16, rng=rng)
    w = rng.normal(size=32)
    e, ld = shape_to_latent(w, G)
    np.testing.assert_array_equal(e, w)
    assert ld == 0.0
    for v in G.params.values():
        v += 0.2 * rng.standard_normal(v.shape)
    e, _ = shape_to_latent(w, G)
    assert np.abs(latent_to_shape(e, G) - w).max() < 1e-8
