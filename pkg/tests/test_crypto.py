import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pointveil import binfmt
from pointveil.crypto import (KEY_MAGIC, KEY_VERSION, ProtectedCloud, RotationKey, decrypt,
                              encrypt, key_from_bytes, key_to_bytes, keygen, load_key,
                              load_protected, protected_from_bytes, protected_to_bytes,
                              rotated_gmm, save_key, save_protected, validate_rotation,
                              check_shape_latent)
from pointveil.errors import (ChecksumError, FormatError, InputError, KeyValidationError,
                              MismatchError, TruncatedError)
from pointveil.flow import GmmSpec
from pointveil.model import LatentCloud

ROT_Z = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])  # (1,0,0) @ R = (0,1,0)


def latent(z, m=4):
    z = np.asarray(z, dtype=np.float64)
    return LatentCloud(z, np.arange(m, dtype=np.float64), np.zeros(len(z), dtype=np.int64))


def test_keygen_is_deterministic_and_valid():
    key = keygen(7)
    validate_rotation(key.R_p)
    validate_rotation(key.R_c)
    assert key_to_bytes(key) == key_to_bytes(keygen(7))
    assert key_to_bytes(key) != key_to_bytes(keygen(8))


def test_keygen_entry_means_are_near_zero():
    mean = np.mean([keygen(s).R_p for s in range(1000)], axis=0)
    assert np.abs(mean).max() < 0.05


def test_identity_key_is_a_no_op():
    z = np.random.default_rng(0).normal(size=(9, 3))
    np.testing.assert_allclose(encrypt(latent(z), RotationKey.identity()).z_hat, z, atol=1e-15)


def test_point_rotation_example():
    key = RotationKey(ROT_Z, np.eye(3))
    out = encrypt(latent([[1, 0, 0], [-1, 0, 0]]), key).z_hat
    np.testing.assert_allclose(out, [[0, 1, 0], [0, -1, 0]], atol=1e-15)


def test_center_rotation_example_and_its_inverse():
    key = RotationKey(np.eye(3), ROT_Z)
    prot = encrypt(latent([[2, 0, 0], [4, 0, 0]]), key)
    np.testing.assert_allclose(prot.z_hat, [[-1, 3, 0], [1, 3, 0]], atol=1e-15)
    np.testing.assert_allclose(prot.z_hat.mean(axis=0), [0, 3, 0], atol=1e-15)
    np.testing.assert_allclose(decrypt(prot, key).z, [[2, 0, 0], [4, 0, 0]], atol=1e-15)


finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=finite),
       st.integers(0, 2**32 - 1))
def test_round_trip_is_exact(z, seed):
    key = keygen(seed)
    back = decrypt(encrypt(latent(z), key), key)
    assert np.abs(back.z - z).max() < 1e-9


def test_round_trip_many_random_cases():
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(1000):
        z = rng.normal(scale=rng.uniform(0.1, 10), size=(rng.integers(1, 64), 3)) + rng.normal(size=3) * 5
        key = keygen(i)
        worst = max(worst, np.abs(decrypt(encrypt(latent(z), key), key).z - z).max())
    assert worst < 1e-9


def test_shape_latent_rotation_extension():
    key = keygen(3, m=4)
    lat = latent(np.random.default_rng(0).normal(size=(5, 3)))
    prot = encrypt(lat, key, rotate_e=True)
    assert not np.allclose(prot.e, lat.e)
    np.testing.assert_allclose(decrypt(prot, key, rotate_e=True).e, lat.e, atol=1e-12)
    np.testing.assert_array_equal(encrypt(lat, key).e, lat.e)
    with pytest.raises(KeyValidationError):
        encrypt(lat, keygen(3), rotate_e=True)


def test_per_part_mode_round_trip():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(30, 3))
    groups = rng.integers(0, 3, size=30)
    key = keygen(2)
    prot = encrypt(latent(z), key, groups=groups)
    assert not np.allclose(prot.z_hat, encrypt(latent(z), key).z_hat)
    np.testing.assert_allclose(decrypt(prot, key, groups=groups).z, z, atol=1e-12)


def test_distribution_is_preserved_under_rotated_mixture():
    rng = np.random.default_rng(0)
    gmm = GmmSpec(rng.normal(scale=5, size=(3, 3)))
    z = gmm.means[1] + rng.standard_normal((200, 3))
    key = keygen(11)
    prot = encrypt(latent(z), key)
    moved = rotated_gmm(gmm, key, z.mean(axis=0))
    ones = np.ones(len(z), dtype=np.int64)
    assert np.abs(moved.logpdf(prot.z_hat, ones) - gmm.logpdf(z, ones)).max() < 1e-9


def test_keys_move_points_and_wrong_rotation_never_recovers():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(20, 3))
    key = keygen(1)
    prot = encrypt(latent(z), key)
    assert np.linalg.norm(prot.z_hat - z, axis=1).mean() > 0
    for s in range(2, 12):
        wrong = RotationKey(keygen(s).R_p, key.R_c)
        assert np.abs(decrypt(prot, wrong).z - z).max() > 1e-3


def test_validation_errors():
    with pytest.raises(KeyValidationError):
        RotationKey(np.eye(3) * 1.01, np.eye(3))
    with pytest.raises(KeyValidationError):
        RotationKey(np.diag([1.0, 1.0, -1.0]), np.eye(3))
    with pytest.raises(KeyValidationError):
        RotationKey(np.eye(2), np.eye(3))
    with pytest.raises(InputError):
        ProtectedCloud(np.zeros((0, 3)), np.zeros(4))
    with pytest.raises(InputError):
        ProtectedCloud(np.full((2, 3), np.nan), np.zeros(4))
    with pytest.raises(InputError):
        encrypt(latent(np.zeros((0, 3))), keygen(0))


@pytest.mark.parametrize("m", [None, 5])
def test_key_file_round_trip(tmp_path, m):
    key = keygen(4, m=m)
    path = tmp_path / "k.pfk"
    save_key(path, key)
    back = load_key(path)
    assert key_to_bytes(back) == key_to_bytes(key)
    np.testing.assert_array_equal(back.R_p, key.R_p)
    assert path.read_bytes()[:4] == b"PFK1"


def test_key_file_errors():
    data = key_to_bytes(keygen(4, m=3))
    with pytest.raises(FormatError):
        key_from_bytes(b"PFE1" + data[4:])
    with pytest.raises(TruncatedError):
        key_from_bytes(data[:-9])
    flipped = bytearray(data)
    flipped[30] ^= 1
    with pytest.raises(ChecksumError):
        key_from_bytes(bytes(flipped))
    body = bytearray(data[6:-4])
    body[1:9] = np.float64(1.5).tobytes()
    with pytest.raises(KeyValidationError):
        key_from_bytes(binfmt.seal(KEY_MAGIC, KEY_VERSION, bytes(body)))


def test_protected_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    prot = ProtectedCloud(rng.normal(size=(17, 3)), rng.normal(size=32))
    path = tmp_path / "c.pfe"
    save_protected(path, prot)
    back = load_protected(path)
    np.testing.assert_array_equal(back.z_hat, prot.z_hat.astype(np.float32))
    np.testing.assert_array_equal(back.e, prot.e.astype(np.float32))
    data = protected_to_bytes(prot)
    assert len(data) == 4 + 2 + 8 + 4 * (32 + 51) + 4
    with pytest.raises(TruncatedError):
        protected_from_bytes(data[:-20])
    with pytest.raises(FormatError):
        protected_from_bytes(b"PFK1" + data[4:])


def test_shape_latent_check():
    gmm = GmmSpec(np.zeros((2, 8)))
    check_shape_latent(np.ones(8), gmm)
    with pytest.raises(MismatchError):
        check_shape_latent(np.ones(9), gmm)
    with pytest.raises(MismatchError):
        check_shape_latent(np.full(8, 10.0), gmm)
    check_shape_latent(np.full(8, 10.0), gmm, e_radius=20.0)
