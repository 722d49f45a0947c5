"""The assembled model: shape encoder + shape flow G + conditional point flow F."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import binfmt
from .data import PointCloud
from .encoder import ShapeEncoder, make_shape_flow
from .errors import ConfigError, FormatError, InputError, TruncatedError
from .flow import CouplingLayer, FlowStack, GmmSpec, build_stack, gmm_means_init, point_flow_masks
from .numerics import Node, Tape

MODEL_MAGIC = b"PFM1"
MODEL_VERSION = 1
TASKS = ("classification", "segmentation")


@dataclass
class ModelConfig:
    task: str = "classification"
    K: int = 4
    K_z: int = 4
    m: int = 32
    hidden: int = 512
    blocks: int = 1
    faithful_single_coupling: bool = False
    bound: float = 2.0
    mean_radius: float = 5.0
    candidates: int = 1000
    # e is divided by this before it conditions F; keeps tanh units out of saturation
    cond_scale: float = 5.0
    # a trainable bound lets the encoder-collapse / flow-expansion mode run away
    learn_bound: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.task in ("cls", "seg"):
            self.task = {"cls": "classification", "seg": "segmentation"}[self.task]
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.blocks < 1 or self.m < 2 or self.hidden < 1 or self.K < 1 or self.K_z < 1:
            raise ConfigError("blocks, hidden, K, K_z must be >= 1 and m >= 2")
        if self.task == "classification" and self.K_z != self.K:
            raise ConfigError("classification models need K_z == K")


@dataclass
class LatentCloud:
    z: np.ndarray
    e: np.ndarray
    k: np.ndarray

    def __len__(self):
        return len(self.z)


@dataclass
class ModelBundle:
    config: ModelConfig
    encoder: ShapeEncoder
    G: FlowStack
    F: FlowStack
    gmm_e: GmmSpec
    gmm_z: GmmSpec
    version: int = MODEL_VERSION
    # largest distance from a training shape latent to its assigned mean
    e_radius: float | None = None
    params: dict = field(init=False)

    def __post_init__(self):
        if self.gmm_e.dim != self.config.m or self.gmm_z.dim != 3:
            raise ConfigError("gmm dimensions do not match the model")
        self.params = {**self.encoder.params, **self.G.params, **self.F.params}

    @property
    def task(self) -> str:
        return self.config.task

    def condition(self, tape: Tape, e: Node) -> Node:
        return tape.scale(e, 1.0 / self.config.cond_scale)

    def encode(self, tape: Tape, points: Node, counts):
        """Shape latents ``e`` (one row per cloud) and the G log-determinants."""
        w = self.encoder.forward(tape, points, counts)
        return self.G.forward(tape, w)

    def point_forward(self, tape: Tape, points: Node, e_rows: Node):
        return self.F.forward(tape, points, self.condition(tape, e_rows))

    def point_inverse(self, z, e) -> np.ndarray:
        cond = np.broadcast_to(np.asarray(e) / self.config.cond_scale, (len(z), self.config.m))
        return self.F.inverse(z, cond)


def build_model(config: ModelConfig) -> ModelBundle:
    """Fresh bundle: random encoder, identity flows, max-separated GMM means."""
    rng = np.random.default_rng([config.seed, 1])
    encoder = ShapeEncoder(config.m, rng)
    G = make_shape_flow(config.m, config.hidden, config.bound, rng)
    F = build_stack(point_flow_masks(config.blocks, config.faithful_single_coupling),
                    config.hidden, config.m, config.bound, rng, prefix="F.")
    gmm_e = gmm_means_init(config.K, config.m, config.mean_radius, config.candidates,
                           seed=[config.seed, 2])
    gmm_z = gmm_means_init(config.K_z, 3, config.mean_radius, config.candidates,
                           seed=[config.seed, 3])
    return ModelBundle(config, encoder, G, F, gmm_e, gmm_z)


def project(cloud: PointCloud, bundle: ModelBundle, labelled: bool = False) -> LatentCloud:
    """Map a normalized cloud to its latent cloud ``z_i = F(x_i, e)``, ``e = G(h(X))``.

    With ``labelled`` the component assignments come from the cloud's labels
    (shape label for classification, part labels for segmentation);
    otherwise from the nearest latent mean (of the cloud centroid for
    classification, of each point for segmentation).
    """
    pts = cloud.points
    if len(pts) == 0:
        raise InputError("cannot project an empty cloud")
    tape = Tape()
    x = tape.constant(pts)
    e, _ = bundle.encode(tape, x, [len(pts)])
    z, _ = bundle.point_forward(tape, x, tape.constant(np.repeat(e.value, len(pts), axis=0)))
    z = z.value
    K_z = bundle.config.K_z
    if labelled:
        if bundle.task == "classification":
            k = np.full(len(pts), int(cloud.shape_label))
        else:
            if cloud.part_labels is None:
                raise InputError("segmentation projection with labelled=True needs part labels")
            k = np.asarray(cloud.part_labels, dtype=np.int64)
        if np.any(k >= K_z) or np.any(k < 0):
            raise InputError(f"label index out of range for K_z={K_z}")
    elif bundle.task == "classification":
        k = np.full(len(pts), int(bundle.gmm_z.nearest(z.mean(axis=0))[0]))
    else:
        k = bundle.gmm_z.nearest(z)
    return LatentCloud(z, e.value[0].copy(), k)


def unproject(latent: LatentCloud, bundle: ModelBundle) -> PointCloud:
    """Invert the point flow: ``x_i = F^{-1}(z_i, e)``."""
    e = np.asarray(latent.e, dtype=np.float64)
    if e.shape != (bundle.config.m,) or not np.all(np.isfinite(e)):
        raise InputError("latent cloud carries no valid shape latent for this model")
    return PointCloud(bundle.point_inverse(np.asarray(latent.z, dtype=np.float64), e),
                      normalized=True)


# -- parameter accounting ----------------------------------------------------

def point_flow_param_count(config: ModelConfig, blocks: int | None = None) -> int:
    blocks = config.blocks if blocks is None else blocks
    if blocks < 1:
        raise ConfigError("blocks must be >= 1")
    masks = point_flow_masks(blocks, config.faithful_single_coupling)
    if config.faithful_single_coupling:
        masks = masks * blocks
    return sum(CouplingLayer.count(int(m.sum()), int((~m).sum()), config.m, config.hidden)
               for m in masks)


def shape_param_count(config: ModelConfig) -> int:
    half = config.m // 2
    g = CouplingLayer.count(half, config.m - half, 0, config.hidden) + \
        CouplingLayer.count(config.m - half, half, 0, config.hidden)
    return ShapeEncoder.count(config.m) + g


def param_count(bundle: ModelBundle | ModelConfig, blocks: int = 1) -> int:
    """Learnable parameters of the whole model if F had ``blocks`` coupling blocks."""
    config = bundle.config if isinstance(bundle, ModelBundle) else bundle
    return shape_param_count(config) + point_flow_param_count(config, blocks)


# -- serialization -------------------------------------------------------------

def _descriptor(bundle: ModelBundle) -> dict:
    return {
        "config": asdict(bundle.config),
        "e_radius": bundle.e_radius,
        "params": [[name, list(arr.shape)] for name, arr in bundle.params.items()],
    }


def model_to_bytes(bundle: ModelBundle) -> bytes:
    cfg = bundle.config
    desc = json.dumps(_descriptor(bundle), sort_keys=True).encode("utf-8")
    head = struct.pack("<BIII", TASKS.index(cfg.task), cfg.K, cfg.K_z, cfg.m)
    head += struct.pack("<I", len(desc)) + desc
    arrays = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in bundle.params.values()]
    arrays.append(np.ascontiguousarray(bundle.gmm_e.means, dtype="<f8").tobytes())
    arrays.append(np.ascontiguousarray(bundle.gmm_z.means, dtype="<f8").tobytes())
    return binfmt.seal(MODEL_MAGIC, MODEL_VERSION, head + b"".join(arrays))


def _expected_len(body) -> int | None:
    if len(body) < 17:
        return None
    dlen = struct.unpack_from("<I", body, 13)[0]
    if len(body) < 17 + dlen:
        return None
    try:
        desc = json.loads(bytes(body[17:17 + dlen]).decode("utf-8"))
        cfg = desc["config"]
        n = sum(int(np.prod(shape)) for _, shape in desc["params"])
        n += cfg["K"] * cfg["m"] + cfg["K_z"] * 3
    except (ValueError, KeyError, TypeError):
        return None
    return 6 + 17 + dlen + 8 * n + 4


def model_from_bytes(data: bytes) -> ModelBundle:
    body = binfmt.unseal(data, MODEL_MAGIC, MODEL_VERSION, _expected_len)
    task_id, K, K_z, m = struct.unpack_from("<BIII", body, 0)
    dlen = struct.unpack_from("<I", body, 13)[0]
    desc = json.loads(bytes(body[17:17 + dlen]).decode("utf-8"))
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in desc["config"].items() if k in known})
    if (TASKS.index(config.task), config.K, config.K_z, config.m) != (task_id, K, K_z, m):
        raise FormatError("model header disagrees with its architecture descriptor")
    bundle = build_model(config)
    offset = 17 + dlen
    for name, shape in desc["params"]:
        if name not in bundle.params or list(bundle.params[name].shape) != list(shape):
            raise FormatError(f"parameter {name} does not match the architecture")
        n = int(np.prod(shape))
        bundle.params[name][...] = np.frombuffer(body, "<f8", n, offset).reshape(shape)
        offset += 8 * n
    means_e = np.frombuffer(body, "<f8", K * m, offset).reshape(K, m).copy()
    offset += 8 * K * m
    means_z = np.frombuffer(body, "<f8", K_z * 3, offset).reshape(K_z, 3).copy()
    return ModelBundle(config, bundle.encoder, bundle.G, bundle.F, GmmSpec(means_e),
                       GmmSpec(means_z), e_radius=desc.get("e_radius"))


def save_model(path, bundle: ModelBundle) -> None:
    binfmt.write_file(path, model_to_bytes(bundle))


def load_model(path) -> ModelBundle:
    return model_from_bytes(binfmt.read_file(path))
