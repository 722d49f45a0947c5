"""Point-cloud containers, synthetic shapes, sampling and file formats."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MissingFileError, ParseError

CATALOG = ("sphere", "cube", "cylinder", "torus", "dumbbell", "rocket")
PART_COUNTS = {"sphere": 1, "cube": 1, "cylinder": 1, "torus": 1, "dumbbell": 2, "rocket": 3}
# normalized coordinates live in [-1, 1]
SENSITIVITY = 2.0


@dataclass
class PointCloud:
    points: np.ndarray
    shape_label: int = 0
    part_labels: np.ndarray | None = None
    normalized: bool = False
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (len(self.points),):
                raise InputError(
                    f"part_labels length {self.part_labels.size} != point count {len(self.points)}"
                )

    def __len__(self):
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        parts = None if self.part_labels is None else self.part_labels[index]
        return replace(self, points=self.points[index], part_labels=parts)


@dataclass
class SynthSpec:
    classes: tuple = ("sphere", "cube", "cylinder", "torus")
    points: int = 256
    clouds_per_class: int = 50
    jitter: float = 0.01
    seed: int = 0
    oversample: int = 2


@dataclass
class Dataset:
    clouds: list
    class_names: list
    splits: list = field(default_factory=list)

    def __len__(self):
        return len(self.clouds)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str) -> "Dataset":
        idx = self.indices(split)
        return Dataset([self.clouds[i] for i in idx], list(self.class_names), [split] * len(idx))

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.shape_label for c in self.clouds], dtype=np.int64)


# -- shape samplers ---------------------------------------------------------
# each returns (points (n, 3), local part labels (n,))

def _sphere_surface(rng, n, radius=1.0, center=(0.0, 0.0, 0.0)):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius + np.asarray(center)


def _sample_sphere(rng, n):
    return _sphere_surface(rng, n), np.zeros(n, dtype=np.int64)


def _balance_on_sphere(pts, iters=30):
    """Move unit-sphere samples so their centroid is the sphere's centre.

    Normalization centres on the centroid; without this a few-hundred-point
    sample sits ~0.05 off-centre and its radii spread by as much.
    """
    for _ in range(iters):
        pts = pts - pts.mean(axis=0)
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return pts


def _sample_cube(rng, n):
    half = 1.0 + rng.uniform(-0.15, 0.15, size=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]).repeat(2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    uv[np.arange(n), axis] = sign
    return uv * half, np.zeros(n, dtype=np.int64)


def _cylinder_side(rng, n, radius, z0, z1):
    theta = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(z0, z1, n)
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _disk(rng, n, radius, z):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2 * math.pi, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, z)], axis=1)


def _sample_cylinder(rng, n):
    radius = rng.uniform(0.5, 0.7)
    height = rng.uniform(1.6, 2.2)
    side = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    counts = rng.multinomial(n, np.array([side, cap, cap]) / (side + 2 * cap))
    pts = np.concatenate([
        _cylinder_side(rng, counts[0], radius, -height / 2, height / 2),
        _disk(rng, counts[1], radius, height / 2),
        _disk(rng, counts[2], radius, -height / 2),
    ])
    return pts, np.zeros(n, dtype=np.int64)


def _sample_torus(rng, n):
    R = 1.0
    r = rng.uniform(0.25, 0.4)
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0.0, 2 * math.pi, 2 * n)
        v = rng.uniform(0.0, 2 * math.pi, 2 * n)
        # area element is proportional to R + r cos v
        keep = rng.uniform(0.0, R + r, 2 * n) < R + r * np.cos(v)
        u, v = u[keep], v[keep]
        out.append(np.stack([(R + r * np.cos(v)) * np.cos(u),
                             (R + r * np.cos(v)) * np.sin(u),
                             r * np.sin(v)], axis=1))
    return np.concatenate(out)[:n], np.zeros(n, dtype=np.int64)


def _sample_dumbbell(rng, n):
    rho = rng.uniform(0.45, 0.55)
    bar = 0.1
    n_ball = int(round(0.4 * n))
    n_bar = n - 2 * n_ball
    left = _sphere_surface(rng, n_ball, rho, (-1.0, 0.0, 0.0))
    right = _sphere_surface(rng, n_ball, rho, (1.0, 0.0, 0.0))
    rod = _cylinder_side(rng, n_bar, bar, -1.0 + rho, 1.0 - rho)[:, [2, 1, 0]]
    pts = np.concatenate([left, right, rod])
    labels = (pts[:, 0] >= 0.0).astype(np.int64)
    return pts, labels


def _sample_rocket(rng, n):
    radius = rng.uniform(0.25, 0.35)
    tube_top = rng.uniform(0.6, 0.9)
    nose = rng.uniform(0.6, 0.9)
    span = rng.uniform(0.35, 0.5)
    fin_h = rng.uniform(0.5, 0.7)
    bottom = -1.0
    counts = rng.multinomial(n, [0.25, 0.45, 0.30])
    # nose cone: lateral surface, area density grows linearly toward the base
    h = nose * (1.0 - np.sqrt(rng.uniform(0.0, 1.0, counts[0])))
    theta = rng.uniform(0.0, 2 * math.pi, counts[0])
    r = radius * (1.0 - h / nose)
    cone = np.stack([r * np.cos(theta), r * np.sin(theta), tube_top + h], axis=1)
    tube = _cylinder_side(rng, counts[1], radius, bottom, tube_top)
    # four triangular fins in the planes through the axis
    k = counts[2]
    a = rng.uniform(0.0, 1.0, k)
    b = rng.uniform(0.0, 1.0, k)
    flip = a + b > 1.0
    a[flip], b[flip] = 1.0 - a[flip], 1.0 - b[flip]
    fr = radius + span * a
    fz = bottom + fin_h * b
    angle = rng.integers(0, 4, k) * (math.pi / 2)
    fins = np.stack([fr * np.cos(angle), fr * np.sin(angle), fz], axis=1)
    pts = np.concatenate([cone, tube, fins])
    labels = np.repeat(np.arange(3), counts)
    return pts, labels


SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "dumbbell": _sample_dumbbell,
    "rocket": _sample_rocket,
}


def generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic corpus of normalized, labelled clouds.

    Each cloud oversamples its surface, keeps ``spec.points`` of them by
    farthest point sampling, adds Gaussian jitter clipped to 1.25 sigma
    per point, then normalizes.
    """
    if spec.points < 8:
        raise ConfigError("points per cloud must be >= 8")
    for name in spec.classes:
        if name not in SAMPLERS:
            raise ConfigError(f"unknown shape class {name!r}; known: {', '.join(CATALOG)}")
    clouds = []
    for label, name in enumerate(spec.classes):
        for j in range(spec.clouds_per_class):
            rng = np.random.default_rng([spec.seed, label, j])
            pts, parts = SAMPLERS[name](rng, spec.points * max(1, spec.oversample))
            keep = farthest_point_sample(pts, spec.points, 0)
            pts, parts = pts[keep], parts[keep]
            if name == "sphere":
                pts = _balance_on_sphere(pts)
            noise = rng.standard_normal(pts.shape) * spec.jitter
            norm = np.linalg.norm(noise, axis=1, keepdims=True)
            limit = 1.25 * spec.jitter
            noise *= np.minimum(1.0, limit / np.maximum(norm, 1e-300))
            cloud = PointCloud(pts + noise, label,
                               parts if PART_COUNTS[name] > 1 else None,
                               name=f"{name}_{j:04d}")
            clouds.append(normalize(cloud))
    return Dataset(clouds, list(spec.classes), split_labels([c.shape_label for c in clouds], seed=spec.seed))


def split_labels(labels, train_fraction=0.8, seed=0) -> list[str]:
    """Per-class random train/test assignment."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 7919])
    splits = np.empty(len(labels), dtype=object)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        splits[idx[:n_train]] = "train"
        splits[idx[n_train:]] = "test"
    return list(splits)


def globalize_parts(dataset: Dataset) -> tuple[Dataset, int]:
    """Renumber per-class part labels into one global index space.

    Clouds without part labels count as a single part of their class.
    Returns the new dataset and the total number of parts.
    """
    offsets, total = {}, 0
    for k, name in enumerate(dataset.class_names):
        offsets[k] = total
        total += PART_COUNTS.get(name, 1)
    clouds = []
    for c in dataset.clouds:
        local = c.part_labels if c.part_labels is not None else np.zeros(len(c), dtype=np.int64)
        clouds.append(replace(c, part_labels=local + offsets[c.shape_label]))
    return Dataset(clouds, list(dataset.class_names), list(dataset.splits)), total


def farthest_point_sample(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection; returns indices in selection order."""
    pts = np.asarray(points, dtype=np.float64)
    if n > len(pts):
        raise InputError(f"cannot sample {n} points from {len(pts)}")
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def normalize(cloud: PointCloud) -> PointCloud:
    """Centroid to the origin, maximum radius to one."""
    pts = cloud.points
    if len(pts) == 0:
        raise InputError("cannot normalize an empty cloud")
    center = pts.mean(axis=0)
    shifted = pts - center
    radius = float(np.sqrt((shifted**2).sum(axis=1)).max())
    if not radius > 1e-12:
        raise InputError("cannot normalize a cloud whose points all coincide")
    return replace(cloud, points=shifted / radius, normalized=True, offset=center, scale=radius)


def is_normalized(cloud: PointCloud, tol: float = 1e-9) -> bool:
    pts = cloud.points
    if len(pts) == 0:
        return False
    radius = np.sqrt((pts**2).sum(axis=1)).max()
    return bool(np.abs(pts.mean(axis=0)).max() <= tol and abs(radius - 1.0) <= tol)


def ensure_normalized(cloud: PointCloud, tol: float = 1e-9) -> tuple[PointCloud, bool]:
    """``(cloud, False)`` if already normalized, else ``(normalize(cloud), True)``."""
    if is_normalized(cloud, tol):
        return replace(cloud, normalized=True), False
    return normalize(cloud), True


def laplace_perturb(cloud: PointCloud, epsilon: float, seed=0) -> PointCloud:
    """Independent Laplace(0, 2/epsilon) noise on every coordinate."""
    if not epsilon > 0:
        raise ConfigError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    noise = rng.laplace(0.0, SENSITIVITY / epsilon, size=cloud.points.shape)
    return replace(cloud, points=cloud.points + noise, normalized=False)


# -- files ------------------------------------------------------------------

def save_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if cloud.part_labels is not None:
                line += f" {int(cloud.part_labels[i])}"
            fh.write(line + "\n")


def load_xyz(path, shape_label: int = 0) -> PointCloud:
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    pts, labels, ncols = [], [], None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise ParseError(f"expected 'x y z [part_label]', got {len(fields)} fields", lineno)
            if ncols is not None and len(fields) != ncols:
                raise ParseError("inconsistent column count", lineno)
            ncols = len(fields)
            try:
                pts.append([float(v) for v in fields[:3]])
                if ncols == 4:
                    labels.append(int(fields[3]))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    if not pts:
        raise ParseError("file contains no points", 1)
    return PointCloud(np.array(pts), shape_label, np.array(labels) if labels else None,
                      name=Path(path).stem)


def load_off(path, shape_label: int = 0) -> PointCloud:
    """Vertex list of an OFF mesh; faces are ignored."""
    with open(path) as fh:
        tokens = []
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.append((lineno, line))
    if not tokens or not tokens[0][1].startswith("OFF"):
        raise ParseError("missing OFF header", 1)
    head = tokens[0][1][3:].strip()
    rest = tokens[1:]
    if not head:
        lineno, head = rest[0]
        rest = rest[1:]
    try:
        n_vert = int(head.split()[0])
    except (ValueError, IndexError):
        raise ParseError("bad OFF counts line", tokens[0][0]) from None
    if len(rest) < n_vert:
        raise ParseError(f"expected {n_vert} vertices, found {len(rest)} lines", tokens[-1][0])
    pts = []
    for lineno, line in rest[:n_vert]:
        try:
            pts.append([float(v) for v in line.split()[:3]])
        except ValueError:
            raise ParseError("bad vertex line", lineno) from None
    return PointCloud(np.array(pts), shape_label, name=Path(path).stem)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def load_ply(path, shape_label: int = 0) -> PointCloud:
    """Vertex x/y/z from an ASCII or little-endian binary PLY file."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ParseError("missing ply magic", 1)
        fmt, n_vert, props, in_vertex, lineno = None, 0, [], False, 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ParseError("unterminated PLY header", lineno)
            parts = raw.decode("ascii", "replace").split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n_vert = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                if parts[1] == "list":
                    raise ParseError("list properties on vertices are not supported", lineno)
                props.append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        names = [p[0] for p in props]
        if not {"x", "y", "z"} <= set(names):
            raise ParseError("vertex element lacks x/y/z", lineno)
        if fmt == "ascii":
            rows = []
            for i in range(n_vert):
                line = fh.readline().split()
                if len(line) < len(props):
                    raise ParseError("short vertex line", lineno + 1 + i)
                rows.append([float(line[names.index(a)]) for a in "xyz"])
            pts = np.array(rows)
        elif fmt == "binary_little_endian":
            dtype = np.dtype([(nm, "<" + t) for nm, t in props])
            buf = fh.read(dtype.itemsize * n_vert)
            if len(buf) < dtype.itemsize * n_vert:
                raise ParseError("truncated vertex data", lineno)
            rec = np.frombuffer(buf, dtype=dtype, count=n_vert)
            pts = np.stack([rec[a].astype(np.float64) for a in "xyz"], axis=1)
        else:
            raise ParseError(f"unsupported PLY format {fmt!r}", 2)
    return PointCloud(pts, shape_label, name=Path(path).stem)


def load_cloud(path, shape_label: int = 0) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if not os.path.exists(path):
        raise MissingFileError(f"no such file: {path}")
    if suffix == ".off":
        return load_off(path, shape_label)
    if suffix == ".ply":
        return load_ply(path, shape_label)
    return load_xyz(path, shape_label)


MANIFEST = "index.csv"


def save_dataset(root, dataset: Dataset) -> None:
    """Write ``<root>/<class>/<id>.xyz`` files plus an ``index.csv`` manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = dataset.splits or ["train"] * len(dataset)
    rows = []
    for i, (cloud, split) in enumerate(zip(dataset.clouds, splits)):
        cname = dataset.class_names[cloud.shape_label]
        rel = Path(cname) / f"{cloud.name or f'{i:05d}'}.xyz"
        (root / cname).mkdir(exist_ok=True)
        save_xyz(root / rel, cloud)
        rows.append((rel.as_posix(), cname, cloud.shape_label, split))
    with open(root / MANIFEST, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "class", "label", "split"])
        w.writerows(rows)


def load_dataset(root, normalize_clouds: bool = True) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise MissingFileError(f"no dataset manifest at {manifest}")
    clouds, splits, names = [], [], {}
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
                cloud = load_cloud(root / row["path"], label)
            except (KeyError, ValueError, TypeError):
                raise ParseError("malformed manifest row", lineno) from None
            if normalize_clouds:
                cloud = normalize(cloud)
            clouds.append(cloud)
            splits.append(row["split"])
            names[label] = row["class"]
    class_names = [names.get(k, f"class{k}") for k in range(max(names) + 1)] if names else []
    return Dataset(clouds, class_names, splits)
