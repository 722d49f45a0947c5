"""Key-based rotation of latent clouds.

Points are row vectors and a rotation acts as ``v' = v @ R``. Encryption
rotates the latent cloud about its own centroid with ``R_p`` and moves the
centroid itself with ``R_c``:

    T1 = mean(Z),  T2 = T1 @ R_c,  Z_hat = (Z - T1) @ R_p + T2

Decryption recovers ``T2`` as the centroid of ``Z_hat`` (rotation about the
centroid keeps it fixed) and undoes both steps.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import binfmt
from .errors import FormatError, InputError, KeyValidationError, MismatchError
from .flow import GmmSpec
from .model import LatentCloud
from .numerics import random_orthogonal

KEY_MAGIC = b"PFK1"
KEY_VERSION = 1
PROTECTED_MAGIC = b"PFE1"
PROTECTED_VERSION = 1
ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RotationKey:
    R_p: np.ndarray
    R_c: np.ndarray
    R_e: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("R_p", "R_c"):
            if np.shape(getattr(self, name)) != (3, 3):
                raise KeyValidationError(f"{name} must be 3x3")
        validate_rotation(self.R_p, "R_p")
        validate_rotation(self.R_c, "R_c")
        if self.R_e is not None:
            validate_rotation(self.R_e, "R_e")

    @classmethod
    def identity(cls, m: int | None = None) -> RotationKey:
        return cls(np.eye(3), np.eye(3), None if m is None else np.eye(m))


@dataclass
class ProtectedCloud:
    """Ciphertext: rotated latent points plus the (optionally rotated) shape latent."""

    z_hat: np.ndarray
    e: np.ndarray
    version: int = PROTECTED_VERSION

    def __post_init__(self):
        self.z_hat = np.asarray(self.z_hat, dtype=np.float64)
        self.e = np.asarray(self.e, dtype=np.float64)
        if self.z_hat.ndim != 2 or self.z_hat.shape[1] != 3 or len(self.z_hat) < 1:
            raise InputError("protected cloud needs at least one 3-d point")
        if not (np.all(np.isfinite(self.z_hat)) and np.all(np.isfinite(self.e))):
            raise InputError("protected cloud contains non-finite values")

    def __len__(self):
        return len(self.z_hat)


def validate_rotation(R, name: str = "matrix") -> None:
    """Raise :class:`KeyValidationError` unless ``R`` is a proper rotation."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or not np.all(np.isfinite(R)):
        raise KeyValidationError(f"{name} is not a finite square matrix")
    err = np.abs(R @ R.T - np.eye(len(R))).max()
    if err >= ORTHO_TOL:
        raise KeyValidationError(f"{name} is not orthogonal (max |R R^T - I| = {err:.3g})")
    if np.linalg.det(R) < 0:
        raise KeyValidationError(f"{name} is a reflection (det = -1)")


def keygen(seed: int, m: int | None = None) -> RotationKey:
    """Haar-random ``R_p`` and ``R_c``; with ``m`` also an ``m x m`` ``R_e``."""
    rng = np.random.default_rng(seed)
    R_p = random_orthogonal(3, rng)
    R_c = random_orthogonal(3, rng)
    R_e = random_orthogonal(m, rng) if m else None
    return RotationKey(R_p, R_c, R_e, seed)


def rotate_points(Z, R_p, R_c) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    t1 = Z.mean(axis=0)
    return (Z - t1) @ R_p + t1 @ R_c


def unrotate_points(Z_hat, R_p, R_c) -> np.ndarray:
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    t2 = Z_hat.mean(axis=0)
    return (Z_hat - t2) @ R_p.T + t2 @ R_c.T


def encrypt(latent: LatentCloud, key: RotationKey, rotate_e: bool = False,
            groups=None) -> ProtectedCloud:
    """Rotate a latent cloud with ``key``.

    Parameters
    ----------
    rotate_e : bool
        Also rotate the shape latent with ``key.R_e`` (extension; off by default).
    groups : array of int, optional
        Per-part mode: each group of points is rotated about its own centroid.
        The protected file format cannot record groups, so this mode is
        library-only.
    """
    Z = np.asarray(latent.z, dtype=np.float64)
    if Z.ndim != 2 or len(Z) < 1:
        raise InputError("cannot encrypt an empty latent cloud")
    if groups is None:
        z_hat = rotate_points(Z, key.R_p, key.R_c)
    else:
        z_hat = _per_group(Z, groups, lambda part: rotate_points(part, key.R_p, key.R_c))
    return ProtectedCloud(z_hat, _rotate_e(latent.e, key, rotate_e, forward=True))


def decrypt(protected: ProtectedCloud, key: RotationKey, rotate_e: bool = False,
            groups=None) -> LatentCloud:
    """Exact inverse of :func:`encrypt`; a wrong key silently gives a wrong cloud.

    Component labels are not part of the ciphertext, so the returned
    ``LatentCloud.k`` is all zeros.
    """
    if groups is None:
        z = unrotate_points(protected.z_hat, key.R_p, key.R_c)
    else:
        z = _per_group(protected.z_hat, groups,
                       lambda part: unrotate_points(part, key.R_p, key.R_c))
    e = _rotate_e(protected.e, key, rotate_e, forward=False)
    return LatentCloud(z, e, np.zeros(len(z), dtype=np.int64))


def _per_group(Z, groups, fn) -> np.ndarray:
    groups = np.asarray(groups)
    if groups.shape != (len(Z),):
        raise InputError("groups must give one index per point")
    out = np.empty_like(Z)
    for g in np.unique(groups):
        sel = groups == g
        out[sel] = fn(Z[sel])
    return out


def _rotate_e(e, key: RotationKey, enabled: bool, forward: bool) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64).copy()
    if not enabled:
        return e
    if key.R_e is None or key.R_e.shape != (len(e), len(e)):
        raise KeyValidationError("key carries no R_e matching the shape latent")
    return e @ key.R_e if forward else e @ key.R_e.T


def rotated_gmm(gmm: GmmSpec, key: RotationKey, center) -> GmmSpec:
    """The mixture a latent cloud centred at ``center`` is distributed under after encryption."""
    center = np.asarray(center, dtype=np.float64)
    return gmm.rotated(key.R_p, center, center @ key.R_c)


def check_shape_latent(e, gmm_e: GmmSpec, e_radius: float | None = None) -> None:
    """Reject a shape latent that the model could not have produced.

    Under the unit-covariance prior ``||e - mu||^2`` is chi-square with ``m``
    degrees of freedom, so ``sqrt(m + 10 sqrt(2m))`` bounds the distance to
    the nearest mean for any well-trained model. ``e_radius`` (the model's
    own largest training distance) widens the bound for models that have
    not converged. Beyond it the ciphertext came from a different model.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (gmm_e.dim,):
        raise MismatchError(
            f"shape latent has dimension {e.size}, the model expects {gmm_e.dim}")
    dist = math.sqrt(np.min(np.sum((gmm_e.means - e) ** 2, axis=1)))
    limit = math.sqrt(gmm_e.dim + 10.0 * math.sqrt(2.0 * gmm_e.dim))
    if e_radius is not None:
        limit = max(limit, 2.0 * e_radius)
    if dist > limit:
        raise MismatchError(
            f"shape latent is {dist:.2f} from every model mean (limit {limit:.2f}); "
            "the ciphertext was produced by a different model")


# -- key files ----------------------------------------------------------------

def key_to_bytes(key: RotationKey) -> bytes:
    flags = 1 if key.R_e is not None else 0
    body = struct.pack("<B", flags)
    body += np.ascontiguousarray(key.R_p, dtype="<f8").tobytes()
    body += np.ascontiguousarray(key.R_c, dtype="<f8").tobytes()
    if key.R_e is not None:
        body += struct.pack("<I", len(key.R_e))
        body += np.ascontiguousarray(key.R_e, dtype="<f8").tobytes()
    return binfmt.seal(KEY_MAGIC, KEY_VERSION, body)


def _key_len(body) -> int | None:
    if len(body) < 1:
        return None
    fixed = 6 + 1 + 18 * 8 + 4
    if not body[0] & 1:
        return fixed
    if len(body) < 1 + 18 * 8 + 4:
        return None
    m = struct.unpack_from("<I", body, 1 + 18 * 8)[0]
    return fixed + 4 + 8 * m * m


def key_from_bytes(data: bytes) -> RotationKey:
    body = binfmt.unseal(data, KEY_MAGIC, KEY_VERSION, _key_len)
    flags = body[0]
    mats = np.frombuffer(body, "<f8", 18, 1).reshape(2, 3, 3).copy()
    R_e = None
    if flags & 1:
        m = struct.unpack_from("<I", body, 1 + 18 * 8)[0]
        R_e = np.frombuffer(body, "<f8", m * m, 1 + 18 * 8 + 4).reshape(m, m).copy()
    return RotationKey(mats[0], mats[1], R_e)


def save_key(path, key: RotationKey) -> None:
    binfmt.write_file(path, key_to_bytes(key))


def load_key(path) -> RotationKey:
    return key_from_bytes(binfmt.read_file(path))


# -- protected-cloud files ------------------------------------------------------

def protected_to_bytes(protected: ProtectedCloud) -> bytes:
    n, m = len(protected.z_hat), len(protected.e)
    body = struct.pack("<II", n, m)
    body += np.ascontiguousarray(protected.e, dtype="<f4").tobytes()
    body += np.ascontiguousarray(protected.z_hat, dtype="<f4").tobytes()
    return binfmt.seal(PROTECTED_MAGIC, PROTECTED_VERSION, body)


def _protected_len(body) -> int | None:
    if len(body) < 8:
        return None
    n, m = struct.unpack_from("<II", body, 0)
    return 6 + 8 + 4 * (m + 3 * n) + 4


def protected_from_bytes(data: bytes) -> ProtectedCloud:
    body = binfmt.unseal(data, PROTECTED_MAGIC, PROTECTED_VERSION, _protected_len)
    n, m = struct.unpack_from("<II", body, 0)
    if n < 1:
        raise FormatError("protected cloud holds no points")
    e = np.frombuffer(body, "<f4", m, 8).astype(np.float64)
    z_hat = np.frombuffer(body, "<f4", 3 * n, 8 + 4 * m).reshape(n, 3).astype(np.float64)
    return ProtectedCloud(z_hat, e)


def save_protected(path, protected: ProtectedCloud) -> None:
    binfmt.write_file(path, protected_to_bytes(protected))


def load_protected(path) -> ProtectedCloud:
    return protected_from_bytes(binfmt.read_file(path))
