"""Point-cloud generators, affine protocols and file readers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("two_moons", "circle", "square", "triangle", "gaussian", "rectangle")

# noise std used when a ShapeSpec leaves it unset
DEFAULT_NOISE = {"two_moons": 0.05}

# P1: circle translated; P2: rectangle stretched along x and translated
P1_TRANSLATION = (4.0, 0.0)
P2_MATRIX = ((2.0, 0.0), (0.0, 1.0))
P2_TRANSLATION = (4.0, 0.0)


@dataclass
class PointCloud:
    """``N`` points in ``d`` dimensions, uniform weights."""

    points: np.ndarray
    labels: list | None = None
    seed: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("a point cloud needs a (N, d) array with N >= 1")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.labels is not None and len(self.labels) != self.points.shape[0]:
            raise ValueError("labels must match the number of points")

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __len__(self):
        return self.points.shape[0]

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass
class ShapeSpec:
    family: str
    n: int = 2000
    seed: int = 0
    radius: float = 1.0
    noise: float | None = None
    center: tuple = (0.0, 0.0)
    side: float = 2.0
    sides: tuple = (1.0, 1.0)
    gap: float = 0.5
    mean: tuple | None = None
    cov: tuple | None = None
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise must be >= 0")
        if self.side <= 0 or any(s <= 0 for s in self.sides):
            raise ValueError("side lengths must be > 0")
        if self.family == "gaussian":
            mean, cov = self.gaussian_params()
            if np.linalg.eigvalsh(cov).min() <= 0 or not np.allclose(cov, cov.T):
                raise ValueError("gaussian covariance must be symmetric positive definite")
        return self

    @property
    def noise_std(self):
        return DEFAULT_NOISE.get(self.family, 0.0) if self.noise is None else self.noise

    def gaussian_params(self):
        mean = np.asarray(self.mean if self.mean is not None else self.center, dtype=np.float64)
        cov = np.eye(mean.size) if self.cov is None else np.asarray(self.cov, dtype=np.float64)
        return mean, cov

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("center", "sides", "mean"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("cov") is not None:
            d["cov"] = tuple(tuple(row) for row in d["cov"])
        return cls(**d)


def _two_moons(spec, rng):
    n_upper = spec.n // 2
    n_lower = spec.n - n_upper
    r = spec.radius
    t_up = rng.uniform(0.0, np.pi, n_upper)
    t_lo = rng.uniform(0.0, np.pi, n_lower)
    upper = np.column_stack([r * np.cos(t_up), r * np.sin(t_up)])
    lower = np.column_stack([r - r * np.cos(t_lo), spec.gap - r * np.sin(t_lo)])
    pts = np.concatenate([upper, lower])
    pts = pts - np.array([r / 2, spec.gap / 2])
    return pts + spec.noise_std * rng.standard_normal(pts.shape)


def _circle(spec, rng):
    theta = rng.uniform(0.0, 2 * np.pi, spec.n)
    pts = spec.radius * np.column_stack([np.cos(theta), np.sin(theta)])
    return pts + spec.noise_std * rng.standard_normal(pts.shape)


def _box(widths, spec, rng):
    half = np.asarray(widths, dtype=np.float64) / 2
    return rng.uniform(-half, half, size=(spec.n, half.size))


def _triangle(spec, rng):
    # equilateral, centroid at origin, circumradius = radius
    angles = np.pi / 2 + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    verts = spec.radius * np.column_stack([np.cos(angles), np.sin(angles)])
    u = rng.uniform(size=(spec.n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    return verts[0] + u[:, :1] * (verts[1] - verts[0]) + u[:, 1:] * (verts[2] - verts[0])


def generate(spec: ShapeSpec) -> PointCloud:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.family == "gaussian":
        mean, cov = spec.gaussian_params()
        pts = rng.multivariate_normal(mean, cov, size=spec.n)
        return PointCloud(pts, seed=spec.seed)
    if spec.family == "two_moons":
        pts = _two_moons(spec, rng)
    elif spec.family == "circle":
        pts = _circle(spec, rng)
    elif spec.family == "square":
        pts = _box((spec.side, spec.side), spec, rng)
    elif spec.family == "rectangle":
        pts = _box(spec.sides, spec, rng)
    else:
        pts = _triangle(spec, rng)
    return PointCloud(pts + np.asarray(spec.center, dtype=np.float64), seed=spec.seed)


def apply_affine(cloud, A, t) -> PointCloud:
    pts = np.asarray(cloud, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = pts.shape[1]
    if A.shape != (d, d) or t.shape != (d,):
        raise ValueError(f"affine map of shapes {A.shape}, {t.shape} does not fit dimension {d}")
    labels = cloud.labels if isinstance(cloud, PointCloud) else None
    seed = cloud.seed if isinstance(cloud, PointCloud) else None
    return PointCloud(pts @ A.T + t, labels=labels, seed=seed)


def protocol_pair(name, n=2000, seed=0):
    """Source and target clouds for the P1 (circles) or P2 (rectangles) protocol."""
    if name == "P1":
        src = generate(ShapeSpec("circle", n=n, seed=seed, radius=1.0))
        tgt = generate(ShapeSpec("circle", n=n, seed=seed + 1, radius=1.0))
        return src, apply_affine(tgt, np.eye(2), P1_TRANSLATION)
    if name == "P2":
        src = generate(ShapeSpec("rectangle", n=n, seed=seed, sides=(1.0, 1.0)))
        tgt = generate(ShapeSpec("rectangle", n=n, seed=seed + 1, sides=(1.0, 1.0)))
        return src, apply_affine(tgt, P2_MATRIX, P2_TRANSLATION)
    raise ValueError(f"unknown protocol {name!r}")


def random_rotation(d, rng):
    """Haar-distributed rotation (QR of a Gaussian matrix, det fixed to +1)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def mixture_layout(d, rng, n_components=8, spread=6.0, scale=0.6):
    """Means, covariance factors and unequal weights of a Gaussian mixture."""
    means = spread * rng.standard_normal((n_components, d)) / np.sqrt(d)
    factors = scale * rng.standard_normal((n_components, d, d)) / np.sqrt(d)
    weights = np.arange(1, n_components + 1, dtype=np.float64)
    return means, factors, weights / weights.sum()


def mixture_source(n, layout, rng):
    """``n`` draws from the mixture described by ``layout``."""
    means, factors, weights = layout
    labels = rng.choice(len(weights), size=n, p=weights)
    z = rng.standard_normal((n, means.shape[1]))
    return means[labels] + np.einsum("nij,nj->ni", factors[labels], z)


def gen_rotated_embedding_pair(n, d, rotation_seed, noise=0.01, seed=None):
    """Synthetic alignment task: ``y_n = R x_n + eps_n``.

    The rotation and the mixture layout depend on ``rotation_seed`` only;
    ``seed`` (default ``rotation_seed``) drives the point draws and noise,
    so different seeds give independent samples of the same task. Returns
    ``(x, y, pairing, R)`` where ``pairing[n]`` indexes the counterpart of
    ``x[n]`` in ``y``.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    task_rng = np.random.default_rng(rotation_seed)
    R = random_rotation(d, task_rng)
    layout = mixture_layout(d, task_rng)
    data_rng = np.random.default_rng([rotation_seed, rotation_seed if seed is None else seed])
    x = mixture_source(n, layout, data_rng)
    y = x @ R.T + noise * data_rng.standard_normal((n, d))
    return PointCloud(x, seed=seed), PointCloud(y, seed=seed), np.arange(n), R


def load_pointcloud(path) -> PointCloud:
    """CSV reader: one point per line, comma-separated, no header."""
    path = Path(path)
    rows = []
    dim = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                row = [float(f) for f in fields]
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: malformed number ({err})") from None
            if dim is None:
                dim = len(row)
            elif len(row) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} fields, got {len(row)}")
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no points")
    return PointCloud(np.array(rows))


def save_pointcloud(cloud, path):
    pts = np.asarray(cloud, dtype=np.float64)
    with Path(path).open("w") as fh:
        for row in pts:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path, max_words=None) -> PointCloud:
    """word2vec/fastText text format: header ``count dim`` then ``word v1 .. vdim``."""
    path = Path(path)
    words, rows = [], []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}:1: header must be '<count> <dim>'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ValueError(f"{path}:1: header must be two integers") from None
        limit = count if max_words is None else min(count, max_words)
        for lineno, line in enumerate(fh, start=2):
            if len(rows) >= limit:
                break
            fields = line.rstrip("\n").rstrip().split(" ")
            if len(fields) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected word + {dim} values, got {len(fields)} fields")
            try:
                rows.append([float(v) for v in fields[1:]])
            except ValueError as err:
                raise ValueError(f"{path}:{lineno}: malformed number ({err})") from None
            words.append(fields[0])
    if not rows:
        raise ValueError(f"{path}: no embeddings")
    return PointCloud(np.array(rows), labels=words)
