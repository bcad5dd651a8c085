"""Point clouds: data model, coordinate normalization, text I/O and toy datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DEGENERATE_SCALE = 1e-12
GENERATORS = ("uniform_cube", "two_part_shape", "multi_primitive")


class CloudFormatError(ValueError):
    """Raised for malformed point-cloud files."""


@dataclass
class PointCloud:
    coords: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        self.features = np.asarray(self.features)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be n x 3, got {self.coords.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != self.coords.shape[0]:
            raise ValueError(
                f"features {self.features.shape} do not match {self.coords.shape[0]} points")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords contain NaN or Inf")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError(
                    f"labels length {self.labels.shape} does not match n={self.coords.shape[0]}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def c(self) -> int:
        return self.features.shape[1]

    def permuted(self, order: np.ndarray) -> "PointCloud":
        labels = None if self.labels is None else self.labels[order]
        return PointCloud(self.coords[order], self.features[order], labels)


@dataclass
class NormalizedCloud:
    coords_hat: np.ndarray
    features: np.ndarray
    gravity_center: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return self.coords_hat.shape[0]

    def denormalize(self) -> np.ndarray:
        """Invert the recorded affine map back to raw coordinates."""
        return (2.0 * self.coords_hat - 1.0) * self.scale + self.gravity_center

    def with_features(self, features: np.ndarray) -> "NormalizedCloud":
        return NormalizedCloud(self.coords_hat, features, self.gravity_center, self.scale)


def normalize(pc: PointCloud) -> NormalizedCloud:
    """Center on the mean, scale into the unit ball, then map into [0, 1]^3.

    A cloud whose farthest point lies within 1e-12 of the center is treated as
    degenerate: the scale is taken as 1 and every point lands on (0.5, 0.5, 0.5).
    """
    if pc.n == 0:
        raise ValueError("cannot normalize an empty cloud")
    coords = np.asarray(pc.coords, dtype=np.float64)
    center = coords.mean(axis=0)
    centered = coords - center
    scale = float(np.sqrt((centered ** 2).sum(axis=1)).max())
    if scale < DEGENERATE_SCALE:
        scale = 1.0
        centered = np.zeros_like(centered)
    unit = centered / scale
    coords_hat = np.clip(unit / 2.0 + 0.5, 0.0, 1.0)
    return NormalizedCloud(coords_hat, pc.features, center, scale)


# -- text format -------------------------------------------------------------

def _fmt(value: float) -> str:
    return repr(float(value))


def save_cloud(pc: PointCloud, path) -> None:
    labeled = pc.labels is not None
    lines = [f"#pvc n={pc.n} c={pc.c} labeled={int(labeled)}"]
    for i in range(pc.n):
        parts = [_fmt(v) for v in pc.coords[i]] + [_fmt(v) for v in pc.features[i]]
        if labeled:
            parts.append(str(int(pc.labels[i])))
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> tuple[int, int, bool]:
    tokens = line.split()
    if not tokens or tokens[0] != "#pvc":
        raise CloudFormatError("line 1: missing '#pvc' header")
    fields = {}
    for tok in tokens[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise CloudFormatError(f"line 1: bad header field {tok!r}")
        fields[key] = val
    try:
        n, c, labeled = int(fields["n"]), int(fields["c"]), int(fields["labeled"])
    except (KeyError, ValueError) as exc:
        raise CloudFormatError(f"line 1: header needs integer n, c, labeled ({exc})") from None
    if labeled not in (0, 1) or n < 0 or c < 0:
        raise CloudFormatError("line 1: header values out of range")
    return n, c, bool(labeled)


def load_cloud(path) -> PointCloud:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise CloudFormatError("empty cloud")
    if lines[0].lstrip().startswith("#"):
        n, c, labeled = _parse_header(lines[0])
        body = 1
    else:
        # headerless: unlabeled, feature count taken from the first data line
        first = next(line for line in lines if line.strip())
        n, c, labeled, body = None, len(first.split()) - 3, False, 0
        if c < 0:
            raise CloudFormatError(f"line 1: expected at least 3 columns, found {c + 3}")
    width = 3 + c + int(labeled)
    coords, feats, labels = [], [], []
    for lineno, line in enumerate(lines[body:], start=body + 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != width:
            raise CloudFormatError(
                f"line {lineno}: expected {width} columns, found {len(tokens)}")
        try:
            values = [float(t) for t in tokens[:3 + c]]
            if labeled:
                labels.append(int(tokens[-1]))
        except ValueError:
            raise CloudFormatError(f"line {lineno}: malformed value in {line!r}") from None
        coords.append(values[:3])
        feats.append(values[3:])
    if not coords:
        raise CloudFormatError("empty cloud")
    if n is not None and len(coords) != n:
        raise CloudFormatError(f"header declares n={n} but file holds {len(coords)} points")
    return PointCloud(
        np.array(coords, dtype=np.float64),
        np.array(feats, dtype=np.float64).reshape(len(coords), c),
        np.array(labels, dtype=np.int64) if labeled else None,
    )


# -- synthetic data ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    generator: str
    n: int
    seed: int
    num_classes: int = 2

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


def _box_surface(rng, m, size):
    """Uniform samples on the surface of an axis-aligned box with corner at the origin."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=m, p=areas / areas.sum())
    pts = rng.random((m, 3)) * np.array(size)
    axis = face // 2
    pts[np.arange(m), axis] = np.where(face % 2 == 0, 0.0, np.array(size)[axis])
    return pts


def _cylinder_surface(rng, m, radius, height):
    """Lateral surface plus caps of a z-aligned cylinder based at the origin."""
    side, cap = 2 * np.pi * radius * height, np.pi * radius ** 2
    part = rng.choice(3, size=m, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(m) * 2 * np.pi
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.random(m)))
    z = np.where(part == 0, rng.random(m) * height, np.where(part == 1, 0.0, height))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _sphere_surface(rng, m, radius):
    v = rng.standard_normal((m, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _split_counts(rng, n, k):
    weights = 0.5 + rng.random(k)
    counts = rng.multinomial(n, weights / weights.sum())
    return counts


def _two_part_shape(rng, n):
    # a box body with a cylinder floating just above its top face or beside a side face;
    # the gap keeps the two primitives disjoint
    size = rng.uniform([0.6, 0.6, 0.3], [1.0, 1.0, 0.7])
    radius = rng.uniform(0.12, 0.22)
    height = rng.uniform(0.4, 0.8)
    gap = rng.uniform(0.1, 0.2)
    n_box, n_cyl = _split_counts(rng, n, 2)
    box = _box_surface(rng, n_box, size)
    cyl = _cylinder_surface(rng, n_cyl, radius, height)
    if rng.random() < 0.5:
        xy = rng.uniform([radius, radius], [size[0] - radius, size[1] - radius])
        cyl = cyl + np.array([xy[0], xy[1], size[2] + gap])
    else:
        # lay the cylinder along +x beyond the x = size[0] face
        cyl = cyl[:, [2, 1, 0]]
        yz = rng.uniform([radius, radius], [size[1] - radius, max(size[2] - radius, radius)])
        cyl = cyl + np.array([size[0] + gap, yz[0], yz[1]])
    coords = np.concatenate([box, cyl]) @ _rotation_z(rng.uniform(0, 2 * np.pi)).T
    labels = np.concatenate([np.zeros(n_box, np.int64), np.ones(n_cyl, np.int64)])
    return coords, labels


def _multi_primitive(rng, n, k):
    counts = _split_counts(rng, n, k)
    coords, labels = [], []
    anchor = np.zeros(3)
    for cls, m in enumerate(counts):
        kind = cls % 3
        if kind == 0:
            size = rng.uniform(0.3, 0.6, 3)
            pts = _box_surface(rng, m, size) - size / 2
            extent = size / 2
        elif kind == 1:
            r, h = rng.uniform(0.1, 0.2), rng.uniform(0.3, 0.6)
            pts = _cylinder_surface(rng, m, r, h) - np.array([0.0, 0.0, h / 2])
            extent = np.array([r, r, h / 2])
        else:
            r = rng.uniform(0.15, 0.3)
            pts = _sphere_surface(rng, m, r)
            extent = np.full(3, r)
        direction = np.zeros(3)
        direction[rng.integers(3)] = 1.0
        if cls > 0:
            anchor = anchor + direction * (extent + 0.35)
        coords.append(pts + anchor)
        labels.append(np.full(m, cls, np.int64))
        anchor = anchor + direction * extent
    return np.concatenate(coords), np.concatenate(labels)


def generate_synthetic(spec: SyntheticSpec) -> PointCloud:
    """Deterministic toy cloud; features are the raw coordinates (c = 3)."""
    rng = np.random.default_rng(spec.seed)
    if spec.generator == "uniform_cube":
        coords = rng.random((spec.n, 3))
        labels = None
    elif spec.generator == "two_part_shape":
        coords, labels = _two_part_shape(rng, spec.n)
    else:
        coords, labels = _multi_primitive(rng, spec.n, spec.num_classes)
    return PointCloud(coords, coords.copy(), labels)


def synthetic_dataset(generator: str, n: int, count: int, seed: int,
                      num_classes: int = 2) -> list[PointCloud]:
    """``count`` clouds with per-cloud seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [generate_synthetic(SyntheticSpec(generator, n, int(s), num_classes)) for s in seeds]
