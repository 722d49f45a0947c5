"""Downstream evidence: learning on protected clouds, and an attacker trained on originals.

Every network here maps stacked clouds (``points`` plus per-cloud ``counts``)
to logits and is fitted by the same cross-entropy loop.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .crypto import ProtectedCloud, RotationKey, decrypt, encrypt
from .data import Dataset, PointCloud, laplace_perturb
from .encoder import ShapeEncoder
from .errors import InputError
from .metrics import MetricReport, accuracy, chamfer, emd_entropic, emd_exact, EMD_EXACT_CAP
from .model import ModelBundle, project, unproject
from .numerics import Adam, DenseStack, Tape

log = logging.getLogger(__name__)


@dataclass
class DownstreamConfig:
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 8
    width: int = 64
    seed: int = 0


class _Net:
    """Shared plumbing: coordinate standardization and batched prediction."""

    params: dict

    def __init__(self):
        self.shift = np.zeros(3)
        self.scale = np.ones(3)

    def fit_standardization(self, clouds) -> None:
        pts = np.concatenate(clouds)
        self.shift = pts.mean(axis=0)
        self.scale = pts.std(axis=0) + 1e-12

    def _input(self, tape: Tape, points):
        return tape.constant((np.asarray(points, dtype=np.float64) - self.shift) / self.scale)

    def logits(self, points, counts=None) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        counts = [len(points)] if counts is None else counts
        tape = Tape()
        return self.forward(tape, points, counts).value

    def forward(self, tape: Tape, points, counts):  # pragma: no cover - interface
        raise NotImplementedError


class ProtectedClassifier(_Net):
    """Pointwise tanh stack (3 -> 64 -> 64), mean-pool over points, linear head to K logits."""

    def __init__(self, K: int, width: int = 64, rng=None, prefix: str = "clf."):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = int(K)
        self.pointwise = DenseStack((3, width, width), prefix + "p.", final_activation="tanh", rng=rng)
        self.head = DenseStack((width, self.K), prefix + "o.", rng=rng)
        self.params = {**self.pointwise.params, **self.head.params}

    def forward(self, tape: Tape, points, counts):
        feats = self.pointwise.forward(tape, self._input(tape, points))
        return self.head.forward(tape, tape.segment_mean(feats, counts))

    def predict(self, clouds) -> np.ndarray:
        return np.array([int(np.argmax(self.logits(_coords(c)))) for c in clouds])


class PointSegmenter(_Net):
    """Per-point tanh stack (3 -> 64 -> K_z logits); points are classified independently."""

    def __init__(self, K_z: int, width: int = 64, rng=None, prefix: str = "seg."):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = int(K_z)
        self.net = DenseStack((3, width, self.K), prefix, rng=rng)
        self.params = dict(self.net.params)

    def forward(self, tape: Tape, points, counts):
        return self.net.forward(tape, self._input(tape, points))

    def predict(self, clouds) -> list[np.ndarray]:
        return [np.argmax(self.logits(_coords(c)), axis=1) for c in clouds]


class AttackClassifier(_Net):
    """The shape encoder backbone with its output layer used as a K-way softmax head.

    It is fitted on original (normalized) clouds and applied to whatever
    coordinates it is handed, ciphertext included, without re-normalizing;
    the attacker has no key and sees the protected points as they are.
    """

    def __init__(self, K: int, rng=None, prefix: str = "atk."):
        super().__init__()
        self.K = int(K)
        self.encoder = ShapeEncoder(self.K, rng if rng is not None else np.random.default_rng(0),
                                    prefix=prefix)
        self.params = dict(self.encoder.params)

    def forward(self, tape: Tape, points, counts):
        return self.encoder.forward(tape, tape.constant(np.asarray(points, dtype=np.float64)),
                                    counts)

    def predict(self, clouds) -> np.ndarray:
        return np.array([int(np.argmax(self.logits(_coords(c)))) for c in clouds])


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, ProtectedCloud):
        return cloud.z_hat
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def _require_protected(clouds) -> list[np.ndarray]:
    clouds = list(clouds)
    if not all(isinstance(c, ProtectedCloud) for c in clouds):
        raise InputError("this trainer accepts ProtectedCloud inputs only")
    return [c.z_hat for c in clouds]


def fit(net: _Net, clouds: list[np.ndarray], targets: list, config: DownstreamConfig,
        per_point: bool = False) -> list[float]:
    """Cross-entropy training with Adam; returns the mean loss of each epoch."""
    if len(clouds) != len(targets):
        raise InputError(f"{len(clouds)} clouds but {len(targets)} labels")
    if not clouds:
        raise InputError("empty training set")
    if per_point and any(len(np.ravel(t)) != len(c) for c, t in zip(clouds, targets)):
        raise InputError("per-point labels must match each cloud's size")
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng([config.seed, 7])
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(clouds))
        losses = []
        for start in range(0, len(clouds), config.batch_size):
            ids = order[start:start + config.batch_size]
            points = np.concatenate([clouds[i] for i in ids])
            counts = [len(clouds[i]) for i in ids]
            if per_point:
                y = np.concatenate([np.ravel(targets[i]) for i in ids])
            else:
                y = np.array([targets[i] for i in ids])
            tape = Tape()
            loss = tape.cross_entropy(net.forward(tape, points, counts), y)
            opt.step(net.params, tape.backward(loss))
            losses.append(float(loss.value))
        history.append(float(np.mean(losses)))
    return history


def _labels_in_range(labels, K) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K})")
    return labels


def train_classifier(clouds: list[np.ndarray], labels, K: int | None = None,
                     config: DownstreamConfig | None = None) -> ProtectedClassifier:
    config = config or DownstreamConfig()
    labels = np.asarray(labels, dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    labels = _labels_in_range(labels, K)
    net = ProtectedClassifier(K, config.width, np.random.default_rng([config.seed, 5]))
    net.fit_standardization(clouds)
    fit(net, clouds, list(labels), config)
    return net


def train_protected_classifier(protected, labels, K: int | None = None,
                               config: DownstreamConfig | None = None) -> ProtectedClassifier:
    """Classifier fitted on ciphertexts only (all made with one model and key)."""
    return train_classifier(_require_protected(protected), labels, K, config)


def train_original_classifier(clouds, labels=None, K: int | None = None,
                              config: DownstreamConfig | None = None) -> ProtectedClassifier:
    """Same architecture and schedule as the protected classifier, on original clouds."""
    clouds = list(clouds)
    labels = [c.shape_label for c in clouds] if labels is None else labels
    return train_classifier([c.points for c in clouds], labels, K, config)


def train_segment_net(clouds: list[np.ndarray], part_labels, K_z: int | None = None,
                      config: DownstreamConfig | None = None) -> PointSegmenter:
    config = config or DownstreamConfig()
    part_labels = [np.asarray(p, dtype=np.int64) for p in part_labels]
    if len(part_labels) != len(clouds):
        raise InputError(f"{len(clouds)} clouds but {len(part_labels)} label arrays")
    K_z = int(max(p.max() for p in part_labels)) + 1 if K_z is None else K_z
    for p in part_labels:
        _labels_in_range(p, K_z)
    net = PointSegmenter(K_z, config.width, np.random.default_rng([config.seed, 6]))
    net.fit_standardization(clouds)
    fit(net, clouds, part_labels, config, per_point=True)
    return net


def train_segmenter(protected, part_labels, K_z: int | None = None,
                    config: DownstreamConfig | None = None) -> PointSegmenter:
    """Per-point segmenter fitted on ciphertexts only."""
    return train_segment_net(_require_protected(protected), part_labels, K_z, config)


def train_original_segmenter(clouds, K_z: int | None = None,
                             config: DownstreamConfig | None = None) -> PointSegmenter:
    clouds = list(clouds)
    if any(c.part_labels is None for c in clouds):
        raise InputError("segmentation needs part labels on every cloud")
    return train_segment_net([c.points for c in clouds], [c.part_labels for c in clouds],
                             K_z, config)


def train_attacker(clouds, K: int | None = None,
                   config: DownstreamConfig | None = None) -> AttackClassifier:
    """Attack classifier fitted on original clouds."""
    config = config or DownstreamConfig()
    clouds = list(clouds)
    labels = np.array([c.shape_label for c in clouds], dtype=np.int64)
    K = int(labels.max()) + 1 if K is None else K
    net = AttackClassifier(K, np.random.default_rng([config.seed, 8]))
    fit(net, [c.points for c in clouds], list(_labels_in_range(labels, K)), config)
    return net


def classification_report(net, clouds, labels, K: int | None = None, label: str = "") -> MetricReport:
    overall, avg = accuracy(net.predict(clouds), labels, K)
    return MetricReport(accuracy_overall=overall, accuracy_avg_class=avg, label=label)


def segmentation_report(net: PointSegmenter, clouds, part_labels, label: str = "") -> MetricReport:
    pred = np.concatenate(net.predict(clouds))
    overall, avg = accuracy(pred, np.concatenate([np.ravel(p) for p in part_labels]), net.K)
    return MetricReport(accuracy_overall=overall, accuracy_avg_class=avg, label=label)


def attack_eval(attacker: AttackClassifier, protected, labels, K: int | None = None) -> MetricReport:
    """Accuracy of an original-domain classifier on protected clouds."""
    return classification_report(attacker, list(protected), labels, K, label="attack")


def reconstruct_eval(protected: ProtectedCloud, original: PointCloud, keys: dict,
                     bundle: ModelBundle) -> dict:
    """Chamfer distance to the original of the reconstruction under each candidate key.

    ``keys`` maps a row label to a :class:`RotationKey`.
    """
    table = {}
    for name, key in keys.items():
        recon = unproject(decrypt(protected, key), bundle)
        table[name] = chamfer(recon.points, original.points)
    return table


def protect(clouds, bundle: ModelBundle, key: RotationKey) -> list[ProtectedCloud]:
    """Project and encrypt each cloud with one model and one key."""
    return [encrypt(project(c, bundle), key) for c in clouds]


def similarity(a: np.ndarray, b: np.ndarray, emd_method: str = "exact") -> tuple[float, float, str]:
    """Chamfer and EMD between two clouds; exact EMD falls back to entropic past the cap."""
    cd = chamfer(a, b)
    if emd_method == "exact" and len(a) == len(b) and len(a) <= EMD_EXACT_CAP:
        return cd, emd_exact(a, b), "exact"
    return cd, emd_entropic(a, b).value, "entropic"


def evaluate_corpus(dataset: Dataset, bundle: ModelBundle, key: RotationKey,
                    config: DownstreamConfig | None = None, epsilons=(0.5, 1.0, 5.0, 10.0),
                    emd_method: str = "exact") -> tuple[list[MetricReport], list[MetricReport]]:
    """Privacy and usability reports for one model/key over a split dataset.

    Returns
    -------
    privacy : list of MetricReport
        Similarity to the originals (mean CD/EMD over test clouds) of the
        protected clouds and of Laplace-perturbed clouds per ``epsilons``,
        each with the accuracy of an attacker trained on original clouds.
    usability : list of MetricReport
        Downstream accuracy on protected data and on original data for
        ``bundle.task``.
    """
    config = config or DownstreamConfig()
    train = dataset.subset("train").clouds
    test = dataset.subset("test").clouds
    if not train or not test:
        raise InputError("evaluation needs both a train and a test split")
    K = len(dataset.class_names)
    p_train = protect(train, bundle, key)
    p_test = protect(test, bundle, key)
    y_test = [c.shape_label for c in test]

    attacker = train_attacker(train, K, config)
    privacy = [_privacy_row("original", test, [c.points for c in test], attacker, y_test, K,
                            emd_method),
               _privacy_row("protected", test, [p.z_hat for p in p_test], attacker, y_test, K,
                            emd_method)]
    for i, eps in enumerate(epsilons):
        noisy = [laplace_perturb(c, eps, seed=[config.seed, 9, i, j]).points
                 for j, c in enumerate(test)]
        privacy.append(_privacy_row(f"dp_eps={eps:g}", test, noisy, attacker, y_test, K,
                                    emd_method))

    if bundle.task == "classification":
        y_train = [c.shape_label for c in train]
        prot = train_protected_classifier(p_train, y_train, K, config)
        orig = train_original_classifier(train, y_train, K, config)
        usability = [classification_report(prot, p_test, y_test, K, "protected"),
                     classification_report(orig, test, y_test, K, "original")]
    else:
        K_z = bundle.config.K_z
        seg_p = train_segmenter(p_train, [c.part_labels for c in train], K_z, config)
        seg_o = train_original_segmenter(train, K_z, config)
        parts = [c.part_labels for c in test]
        usability = [segmentation_report(seg_p, p_test, parts, "protected"),
                     segmentation_report(seg_o, test, parts, "original")]
    return privacy, usability


def _privacy_row(label, originals, coords, attacker, labels, K, emd_method) -> MetricReport:
    cds, emds, methods = [], [], set()
    for cloud, pts in zip(originals, coords):
        cd, emd, method = similarity(pts, cloud.points, emd_method)
        cds.append(cd)
        emds.append(emd)
        methods.add(method)
    overall, avg = accuracy(attacker.predict(coords), labels, K)
    return MetricReport(float(np.mean(cds)), float(np.mean(emds)),
                        "exact" if methods == {"exact"} else "entropic", overall, avg, label)
