"""Losses and the joint training loop for the shape and point flows."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PointCloud
from .errors import ConfigError, InputError, TrainingDiverged
from .flow import LOG_2PI, FlowStack, GmmSpec
from .model import ModelBundle, ModelConfig, build_model
from .numerics import Adam, Node, Tape, clip_by_global_norm

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    lambda_s: float = 1.0
    lambda_p: float = 1.0
    lambda_as: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    hidden: int = 512
    blocks: int = 1
    faithful_single_coupling: bool = False
    seed: int = 0
    mean_radius: float = 5.0
    candidates: int = 1000
    m: int = 32
    bound: float = 2.0
    cond_scale: float = 5.0
    learn_bound: bool = False
    clip: float = 10.0
    task: str = "classification"

    def __post_init__(self):
        if min(self.lambda_s, self.lambda_p, self.lambda_as) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.task in ("cls", "seg"):
            self.task = {"cls": "classification", "seg": "segmentation"}[self.task]

    def model_config(self, K: int, K_z: int) -> ModelConfig:
        return ModelConfig(task=self.task, K=K, K_z=K_z, m=self.m, hidden=self.hidden,
                           blocks=self.blocks,
                           faithful_single_coupling=self.faithful_single_coupling,
                           bound=self.bound, mean_radius=self.mean_radius,
                           candidates=self.candidates, cond_scale=self.cond_scale,
                           learn_bound=self.learn_bound, seed=self.seed)


# -- per-point angle targets -----------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x):
    with np.errstate(over="ignore"):
        z = (np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class BetaAssignment:
    """Fixed uniform[-1, 1] target per (cloud id, point index), from a seeded hash."""

    seed: int = 0

    def __call__(self, cloud_id, point_index) -> np.ndarray:
        cid = np.asarray(cloud_id, dtype=np.uint64)
        pid = np.asarray(point_index, dtype=np.uint64)
        h = _splitmix64(_splitmix64(_splitmix64(np.uint64(self.seed)) ^ cid) ^ pid)
        u = (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return 2.0 * u - 1.0

    def for_cloud(self, cloud_id: int, n: int) -> np.ndarray:
        return self(np.full(n, cloud_id), np.arange(n))


# -- losses on the tape ------------------------------------------------------------

def gaussian_nll(tape: Tape, z: Node, means: np.ndarray, logdet: Node) -> Node:
    """Row-wise ``-log N(z | means_row, I) - logdet``."""
    diff = tape.sub(z, tape.constant(means))
    sq = tape.sum(tape.mul(diff, diff), axis=1)
    const = 0.5 * z.value.shape[1] * LOG_2PI
    return tape.sub(tape.add(tape.scale(sq, 0.5), tape.constant(np.full(len(sq.value), const))),
                    logdet)


def angular_terms(tape: Tape, z: Node, v_orig: np.ndarray, latent_centers: np.ndarray,
                  beta: np.ndarray) -> Node:
    """Row-wise ``|cos(v_orig, z - latent_center) - beta|``.

    Rows where either vector has (near) zero norm contribute zero.
    """
    v_lat = tape.sub(z, tape.constant(latent_centers))
    n_orig = np.linalg.norm(v_orig, axis=1)
    n_lat = tape.rownorm(v_lat)
    ok = (n_orig > DEGENERATE_NORM) & (n_lat.value > DEGENERATE_NORM)
    unit_orig = np.where(ok[:, None], v_orig / np.where(ok, n_orig, 1.0)[:, None], 0.0)
    denom = tape.add(n_lat, tape.constant(np.where(ok, 0.0, 1.0)))
    cos = tape.div(tape.rowdot(tape.constant(unit_orig), v_lat), denom)
    gap = tape.abs(tape.sub(cos, tape.constant(beta)))
    return tape.mul(gap, tape.constant(ok.astype(np.float64)))


@dataclass
class Batch:
    points: np.ndarray
    counts: np.ndarray
    shape_labels: np.ndarray
    point_labels: np.ndarray
    centers: np.ndarray  # per point: centroid of its part in the original cloud
    betas: np.ndarray
    cloud_ids: np.ndarray


def part_centroids(points: np.ndarray, labels: np.ndarray) -> np.ndarray:
    centers = np.empty_like(points)
    for k in np.unique(labels):
        sel = labels == k
        centers[sel] = points[sel].mean(axis=0)
    return centers


def point_labels(cloud: PointCloud, task: str) -> np.ndarray:
    if task == "classification":
        return np.full(len(cloud), int(cloud.shape_label), dtype=np.int64)
    if cloud.part_labels is None:
        raise InputError(f"segmentation training needs part labels (cloud {cloud.name!r})")
    return np.asarray(cloud.part_labels, dtype=np.int64)


def make_batch(clouds, cloud_ids, task: str, betas: BetaAssignment) -> Batch:
    pts, kp, centers, beta = [], [], [], []
    for cid, c in zip(cloud_ids, clouds):
        labels = point_labels(c, task)
        pts.append(c.points)
        kp.append(labels)
        centers.append(part_centroids(c.points, labels))
        beta.append(betas.for_cloud(int(cid), len(c)))
    return Batch(np.concatenate(pts), np.array([len(c) for c in clouds]),
                 np.array([int(c.shape_label) for c in clouds]), np.concatenate(kp),
                 np.concatenate(centers), np.concatenate(beta), np.asarray(cloud_ids))


@dataclass
class LossTerms:
    total: Node
    shape: float
    point: float
    angular: float


def batch_loss(tape: Tape, bundle: ModelBundle, batch: Batch, config: TrainConfig,
               points: Node | None = None) -> LossTerms:
    """Weighted loss, averaged over the clouds in ``batch``.

    Per cloud: ``l_s * L_s + l_p * mean_i L_p^i + l_as * mean_i L_as^i``.
    """
    x = points if points is not None else tape.constant(batch.points)
    e, ld_g = bundle.encode(tape, x, batch.counts)
    ls = gaussian_nll(tape, e, bundle.gmm_e.means[batch.shape_labels], ld_g)
    e_rows = tape.repeat_rows(e, batch.counts)
    z, ld_f = bundle.point_forward(tape, x, e_rows)
    mu_z = bundle.gmm_z.means[batch.point_labels]
    lp = tape.segment_mean(gaussian_nll(tape, z, mu_z, ld_f), batch.counts)
    parts = [tape.scale(ls, config.lambda_s), tape.scale(lp, config.lambda_p)]
    las_val = 0.0
    if config.lambda_as > 0:
        las = tape.segment_mean(
            angular_terms(tape, z, batch.points - batch.centers, mu_z, batch.betas), batch.counts)
        parts.append(tape.scale(las, config.lambda_as))
        las_val = float(las.value.mean())
    per_cloud = parts[0]
    for p in parts[1:]:
        per_cloud = tape.add(per_cloud, p)
    return LossTerms(tape.mean(per_cloud), float(ls.value.mean()), float(lp.value.mean()), las_val)


# -- single-sample loss functions ----------------------------------------------------

def loss_src(w, G: FlowStack, gmm_e: GmmSpec, k_s: int) -> float:
    """``-log N(G(w) | mu_{k_s}, I) - log|det dG/dw|`` for one shape feature."""
    if not 0 <= k_s < gmm_e.K:
        raise InputError(f"shape label {k_s} out of range for K={gmm_e.K}")
    tape = Tape()
    e, ld = G.forward(tape, tape.constant(np.asarray(w, dtype=np.float64)[None, :]))
    return float(gaussian_nll(tape, e, gmm_e.means[[k_s]], ld).value[0])


def loss_ptc(x, e, bundle: ModelBundle, k_p: int) -> float:
    """``-log N(F(x, e) | mu_{k_p}, I) - log|det dF/dx|`` for one point."""
    if not 0 <= k_p < bundle.gmm_z.K:
        raise InputError(f"point label {k_p} out of range for K_z={bundle.gmm_z.K}")
    tape = Tape()
    z, ld = bundle.point_forward(tape, tape.constant(np.asarray(x, dtype=np.float64)[None, :]),
                                 tape.constant(np.asarray(e, dtype=np.float64)[None, :]))
    return float(gaussian_nll(tape, z, bundle.gmm_z.means[[k_p]], ld).value[0])


def loss_angular(x, z, mu_x, mu_z, beta: float) -> float:
    v_o = np.asarray(x, dtype=np.float64) - np.asarray(mu_x, dtype=np.float64)
    tape = Tape()
    out = angular_terms(tape, tape.constant(np.asarray(z, dtype=np.float64)[None, :]),
                        v_o[None, :], np.asarray(mu_z, dtype=np.float64)[None, :],
                        np.array([beta]))
    return float(out.value[0])


def total_loss(clouds, bundle: ModelBundle, config: TrainConfig, cloud_ids=None,
               betas: BetaAssignment | None = None) -> float:
    clouds = [clouds] if isinstance(clouds, PointCloud) else list(clouds)
    ids = range(len(clouds)) if cloud_ids is None else cloud_ids
    batch = make_batch(clouds, ids, bundle.task, betas or BetaAssignment(config.seed))
    return float(batch_loss(Tape(), bundle, batch, config).total.value)


def loss_and_grads(bundle: ModelBundle, batch: Batch, config: TrainConfig):
    tape = Tape()
    terms = batch_loss(tape, bundle, batch, config)
    grads = tape.backward(terms.total)
    frozen = () if bundle.config.learn_bound else ("bound",)
    return terms, {k: grads[k] for k in bundle.params
                   if k in grads and not k.endswith(frozen or ("\0",))}


# -- training loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    trace: list = field(default_factory=list)  # (epoch, L_s, L_p, L_as, total)
    step_losses: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.step_losses[0]


def dataset_sizes(dataset: Dataset, task: str) -> tuple[int, int]:
    K = max(len(dataset.class_names), int(dataset.labels.max()) + 1)
    if task == "classification":
        return K, K
    labels = [c.part_labels for c in dataset.clouds]
    if any(lab is None for lab in labels):
        raise InputError("segmentation training needs part labels on every cloud")
    return K, int(max(lab.max() for lab in labels)) + 1


def train(dataset: Dataset | list, config: TrainConfig, bundle: ModelBundle | None = None,
          trace_path=None, epoch_callback=None) -> TrainResult:
    """Jointly train encoder, shape flow and point flow.

    Clouds are visited in a seeded shuffle, eight per batch by default, with
    the global gradient norm clipped to ``config.clip``. A loss above 1e6 or a
    non-finite loss raises :class:`TrainingDiverged` carrying the model as of
    the last completed epoch.
    """
    if isinstance(dataset, list):
        dataset = Dataset(dataset, [str(k) for k in sorted({c.shape_label for c in dataset})])
    if not dataset.clouds:
        raise InputError("empty training set")
    K, K_z = dataset_sizes(dataset, config.task)
    if bundle is None:
        bundle = build_model(config.model_config(K, K_z))
    betas = BetaAssignment(config.seed)
    # per-cloud constants computed once
    cached = [make_batch([c], [i], config.task, betas) for i, c in enumerate(dataset.clouds)]
    opt = Adam(lr=config.lr)
    result = TrainResult(bundle)
    checkpoint = copy.deepcopy(bundle)
    n = len(dataset.clouds)
    trace_fh = open(trace_path, "a") if trace_path else None
    try:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, 100 + epoch]).permutation(n)
            sums = np.zeros(4)
            steps = 0
            for start in range(0, n, config.batch_size):
                ids = order[start:start + config.batch_size]
                batch = _join([cached[i] for i in ids])
                terms, grads = loss_and_grads(bundle, batch, config)
                value = float(terms.total.value)
                if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise TrainingDiverged(
                        f"loss {value} at epoch {epoch}, step {steps}", checkpoint, result.trace)
                result.step_losses.append(value)
                clip_by_global_norm(grads, config.clip)
                opt.step(bundle.params, grads)
                sums += (terms.shape, terms.point, terms.angular, value)
                steps += 1
            row = (epoch, *(sums / steps))
            result.trace.append(row)
            if trace_fh:
                trace_fh.write(",".join([str(epoch)] + [f"{v:.10g}" for v in row[1:]]) + "\n")
                trace_fh.flush()
            log.info("epoch %d  L_s %.4f  L_p %.4f  L_as %.4f  total %.4f", *row)
            checkpoint = copy.deepcopy(bundle)
            if epoch_callback is not None:
                epoch_callback(epoch, bundle)
    finally:
        if trace_fh:
            trace_fh.close()
    bundle.e_radius = shape_latent_radius(bundle, _join(cached))
    return result


def shape_latent_radius(bundle: ModelBundle, batch: Batch) -> float:
    """Largest distance from a cloud's shape latent to its assigned mean."""
    tape = Tape()
    e, _ = bundle.encode(tape, tape.constant(batch.points), batch.counts)
    return float(np.linalg.norm(e.value - bundle.gmm_e.means[batch.shape_labels], axis=1).max())


def _join(batches) -> Batch:
    return Batch(*(np.concatenate([getattr(b, f) for b in batches])
                   for f in ("points", "counts", "shape_labels", "point_labels", "centers",
                             "betas", "cloud_ids")))


TRACE_HEADER = "epoch,L_s,L_p,L_as,total"


def latent_cosines(cloud: PointCloud, latent, task: str) -> np.ndarray:
    """Per-point cosine between original and latent offsets from their part centroids.

    Both offsets are taken from empirical centroids, so a latent cloud that
    is a translated, mildly scaled copy of the original scores near 1.
    :func:`latent_cosines_gmm` measures latent offsets from the GMM means
    instead, as the training loss does.
    """
    labels = point_labels(cloud, task)
    v_o = cloud.points - part_centroids(cloud.points, labels)
    v_l = latent.z - part_centroids(latent.z, labels)
    return _cos(v_o, v_l)


def latent_cosines_gmm(cloud: PointCloud, latent, bundle: ModelBundle) -> np.ndarray:
    labels = point_labels(cloud, bundle.task)
    v_o = cloud.points - part_centroids(cloud.points, labels)
    v_l = latent.z - bundle.gmm_z.means[labels]
    return _cos(v_o, v_l)


def _cos(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > DEGENERATE_NORM) & (nb > DEGENERATE_NORM)
    out = np.zeros(len(a))
    out[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return out
