"""Cloud similarity (Chamfer, Earth Mover's) and classification accuracy."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .data import PointCloud
from .errors import InputError

EMD_EXACT_CAP = 512


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.size == 0:
        raise InputError("metric needs non-empty clouds")
    return pts


def sq_distances(A, B) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer(A, B) -> float:
    """Mean squared nearest-neighbour distance from A to B plus from B to A."""
    A, B = _points(A), _points(B)
    d = sq_distances(A, B)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def emd_exact(A, B) -> float:
    """Optimal one-to-one matching cost, averaged over points.

    Raises
    ------
    InputError
        For clouds of different sizes or larger than 512 points; use
        :func:`emd_entropic` for those.
    """
    A, B = _points(A), _points(B)
    if len(A) != len(B):
        raise InputError(f"emd_exact needs equal sizes, got {len(A)} and {len(B)}; "
                         "use emd_entropic")
    if len(A) > EMD_EXACT_CAP:
        raise InputError(f"emd_exact is capped at {EMD_EXACT_CAP} points; use emd_entropic")
    cost = np.sqrt(sq_distances(A, B))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(A))


@dataclass
class EntropicResult:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def emd_entropic(A, B, reg: float = 0.01, iters: int = 1000, tol: float = 1e-9) -> EntropicResult:
    """Entropy-regularized transport cost by log-domain Sinkhorn iterations.

    Both clouds carry uniform mass and ``reg`` is in distance units. The
    regularization starts at the largest pairwise distance and shrinks
    geometrically to ``reg`` (warm-started potentials), which keeps small
    ``reg`` from stalling. The returned value is the transport cost of the
    final plan without the entropy term, in the same per-point units as
    :func:`emd_exact`. ``converged`` is False when the marginal error at
    ``reg`` is still above ``tol`` after ``iters`` sweeps.
    """
    if reg <= 0:
        raise InputError("reg must be positive")
    A, B = _points(A), _points(B)
    C = np.sqrt(sq_distances(A, B))
    log_a = np.full(len(A), -np.log(len(A)))
    log_b = np.full(len(B), -np.log(len(B)))
    f = np.zeros(len(A))
    g = np.zeros(len(B))
    eps = max(float(C.max()), float(reg))
    converged = False
    it = 0
    for it in range(1, iters + 1):
        eps = max(float(reg), eps * 0.9)
        f = eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        if eps > reg:
            continue
        # columns are exact after the g update; check the rows
        row_mass = np.exp(logsumexp((f[:, None] + g[None, :] - C) / eps, axis=1))
        if np.abs(row_mass - np.exp(log_a)).sum() < tol:
            converged = True
            break
    plan = np.exp((f[:, None] + g[None, :] - C) / eps)
    # unit total mass, so this is already the per-point cost
    return EntropicResult(float((plan * C).sum()), converged, it)


def accuracy(predictions, labels, K: int | None = None) -> tuple[float, float]:
    """Overall accuracy and the mean of per-class recall over classes present in ``labels``."""
    pred = np.asarray(predictions).ravel()
    lab = np.asarray(labels).ravel()
    if lab.size == 0:
        raise InputError("accuracy of an empty set is undefined")
    if pred.shape != lab.shape:
        raise InputError(f"{pred.size} predictions for {lab.size} labels")
    if K is not None and (lab.max() >= K or lab.min() < 0):
        raise InputError(f"labels must lie in [0, {K})")
    correct = pred == lab
    per_class = [correct[lab == k].mean() for k in np.unique(lab)]
    return float(correct.mean()), float(np.mean(per_class))


def confusion_matrix(predictions, labels, K: int) -> np.ndarray:
    out = np.zeros((K, K), dtype=np.int64)
    np.add.at(out, (np.asarray(labels).ravel(), np.asarray(predictions).ravel()), 1)
    return out


@dataclass
class MetricReport:
    cd: float = float("nan")
    emd: float = float("nan")
    emd_method: str = "exact"
    accuracy_overall: float = float("nan")
    accuracy_avg_class: float = float("nan")
    label: str = ""


def report_header() -> list[str]:
    return [f.name for f in fields(MetricReport)]


def write_reports(path_or_fh, reports, header=True) -> None:
    """Write reports as comma-separated rows under a fixed header."""
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        writer = csv.DictWriter(fh, fieldnames=report_header(), lineterminator="\n")
        if header:
            writer.writeheader()
        for rep in reports:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                             for k, v in asdict(rep).items()})
    finally:
        if own:
            fh.close()
