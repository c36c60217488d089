"""Labelled point-cloud datasets: binary container, normalization and synthetic generators.

Container layout (all integers little-endian uint32, floats little-endian float32)::

    offset  size  field
    0       12    magic b"FPNN-DATA-1\\0"
    12      4     task kind (0 = classify, 1 = segment)
    16      4     shape count S
    20      4     points per shape N
    24      4     feature dims D
    28      4     class count (classify) or category count (segment)
    32      4     part count (segment; 0 for classify)
    36      ...   segment only: per category, part count P then P part ids
    body          per shape: N*D coordinates, then 1 class id or N part ids
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"FPNN-DATA-1\x00"
TASKS = ("classify", "segment")
_HEADER = struct.Struct("<12s6I")


class DatasetFormatError(ValueError):
    """A dataset file or object is malformed; ``offset`` is the byte position when known."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class LabeledDataset:
    """Point clouds ``[S, N, D]`` with class ids ``[S]`` or part ids ``[S, N]``."""

    task: str
    points: np.ndarray
    labels: np.ndarray
    num_classes: int
    num_parts: int = 0
    category_parts: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype="<f4")
        self.labels = np.ascontiguousarray(self.labels, dtype="<u4")
        self.category_parts = [list(map(int, p)) for p in self.category_parts]
        self.validate()

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def points_per_shape(self) -> int:
        return self.points.shape[1]

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DatasetFormatError(f"unknown task {self.task!r}")
        if self.points.ndim != 3:
            raise DatasetFormatError(f"points must be [S, N, D], got shape {self.points.shape}")
        s, n = self.points.shape[:2]
        if self.task == "classify":
            if self.labels.shape != (s,):
                raise DatasetFormatError(f"classification labels must have shape ({s},), got {self.labels.shape}")
            if s and self.labels.max() >= self.num_classes:
                raise DatasetFormatError(f"class id {self.labels.max()} out of range [0, {self.num_classes})")
            return
        if self.labels.shape != (s, n):
            raise DatasetFormatError(f"part labels must have shape ({s}, {n}), got {self.labels.shape}")
        if len(self.category_parts) != self.num_classes:
            raise DatasetFormatError(f"{self.num_classes} categories declared, {len(self.category_parts)} part lists given")
        seen = [p for parts in self.category_parts for p in parts]
        if len(set(seen)) != len(seen) or any(not 0 <= p < self.num_parts for p in seen):
            raise DatasetFormatError("category part lists must be disjoint ids within [0, num_parts)")
        if s and self.labels.max() >= self.num_parts:
            raise DatasetFormatError(f"part id {self.labels.max()} out of range [0, {self.num_parts})")
        self.categories()

    def part_category(self) -> np.ndarray:
        """Lookup table from part id to category id (-1 for unassigned ids)."""
        table = np.full(self.num_parts, -1, dtype=np.int64)
        for c, parts in enumerate(self.category_parts):
            table[parts] = c
        return table

    def categories(self) -> np.ndarray:
        """Category of every shape; classify datasets return the class ids."""
        if self.task == "classify":
            return self.labels.astype(np.int64)
        table = self.part_category()
        cats = table[self.labels]
        first = cats[:, :1]
        if (cats < 0).any() or (cats != first).any():
            bad = int(np.flatnonzero(((cats < 0) | (cats != first)).any(axis=1))[0])
            raise DatasetFormatError(f"shape {bad} has part labels outside a single category's part set")
        return first[:, 0] if len(self) else np.zeros(0, dtype=np.int64)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.task, self.points[indices], self.labels[indices], self.num_classes,
                              self.num_parts, self.category_parts)


def _record_dtype(n: int, d: int, task: str) -> np.dtype:
    lab = ("lab", "<u4") if task == "classify" else ("lab", "<u4", (n,))
    return np.dtype([("xyz", "<f4", (n, d)), lab])


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    ds.validate()
    s, n, d = ds.points.shape
    head = _HEADER.pack(MAGIC, TASKS.index(ds.task), s, n, d, ds.num_classes, ds.num_parts)
    cmap = b""
    if ds.task == "segment":
        cmap = b"".join(struct.pack(f"<{len(p) + 1}I", len(p), *p) for p in ds.category_parts)
    body = np.empty(s, dtype=_record_dtype(n, d, ds.task))
    body["xyz"] = ds.points
    body["lab"] = ds.labels
    return head + cmap + body.tobytes()


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}", len(buf))
    magic, kind, s, n, d, ncls, nparts = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if kind >= len(TASKS):
        raise DatasetFormatError(f"unknown task kind {kind}", 12)
    task = TASKS[kind]
    pos = _HEADER.size
    cats = []
    if task == "segment":
        for _ in range(ncls):
            if pos + 4 > len(buf):
                raise DatasetFormatError(f"truncated category map: expected {pos + 4} bytes, got {len(buf)}", len(buf))
            (count,) = struct.unpack_from("<I", buf, pos)
            end = pos + 4 + 4 * count
            if end > len(buf):
                raise DatasetFormatError(f"truncated category map: expected {end} bytes, got {len(buf)}", len(buf))
            cats.append(list(struct.unpack_from(f"<{count}I", buf, pos + 4)))
            pos = end
    rec = _record_dtype(n, d, task)
    expected = pos + s * rec.itemsize
    if len(buf) != expected:
        what = "truncated body" if len(buf) < expected else "trailing bytes after body"
        raise DatasetFormatError(f"{what}: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    body = np.frombuffer(buf, dtype=rec, count=s, offset=pos)
    labels = body["lab"]
    limit = ncls if task == "classify" else nparts
    if s and labels.max() >= limit:
        flat = int(np.argmax(labels.reshape(s, -1).max(axis=1) >= limit))
        raise DatasetFormatError(f"label {int(labels.max())} out of range [0, {limit}) in shape {flat}",
                                 pos + flat * rec.itemsize)
    return LabeledDataset(task, body["xyz"].copy(), labels.copy(), ncls, nparts, cats)


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"{path}: {e.strerror or e}") from e
    try:
        return dataset_from_bytes(buf)
    except DatasetFormatError as e:
        raise DatasetFormatError(f"{path}: {e.args[0]}", e.offset) from None


def normalize_unit_sphere(cloud) -> np.ndarray:
    """Centre at the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(cloud)
    x = pts.astype(np.float64)
    x = x - x.mean(axis=0)
    r = np.sqrt((x * x).sum(axis=1)).max()
    if r >= 1e-12:
        x = x / r
    return x.astype(pts.dtype if pts.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------------------
# synthetic shapes. The y axis points up.


@dataclass(frozen=True)
class ShapeSpec:
    """One generator class: a primitive or composite kind, a scale range and surface noise."""

    kind: str
    size: tuple = (0.6, 1.4)
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in PRIMITIVES and self.kind not in COMPOSITES:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _unit(rng, n) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n, r=1.0, center=(0, 0, 0), upper=False):
    v = _unit(rng, n)
    if upper:
        v[:, 1] = np.abs(v[:, 1])
    return v * r + center


def _disk(rng, n, r, y, center=(0, 0, 0)):
    rad = r * np.sqrt(rng.random(n))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([rad * np.cos(th), np.full(n, y), rad * np.sin(th)], axis=1) + center


def _tube(rng, n, r, y0, y1, center=(0, 0, 0)):
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), rng.uniform(y0, y1, n), r * np.sin(th)], axis=1) + center


def _box(rng, n, half, center=(0, 0, 0)):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return pts * half + center


def _split(rng, n, areas) -> np.ndarray:
    """Area-proportional point counts, each component getting at least one point."""
    areas = np.asarray(areas, dtype=np.float64)
    counts = np.ones(len(areas), dtype=np.int64)
    counts += rng.multinomial(n - len(areas), areas / areas.sum())
    return counts


def _cylinder(rng, n, r, h):
    counts = _split(rng, n, [2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
    return np.concatenate([_tube(rng, counts[0], r, -h / 2, h / 2),
                           _disk(rng, counts[1], r, -h / 2), _disk(rng, counts[2], r, h / 2)])


def _torus(rng, n, big, small):
    out = np.empty((0, 3))
    while len(out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        # area element is proportional to big + small*cos(v)
        keep = rng.random(2 * n) * (big + small) < big + small * np.cos(v)
        u, v = u[keep], v[keep]
        ring = big + small * np.cos(v)
        out = np.concatenate([out, np.stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)], axis=1)])
    return out[:n]


def sample_primitive(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform surface samples of a randomly proportioned primitive."""
    if kind == "sphere":
        return _sphere(rng, n)
    if kind == "cube":
        return _box(rng, n, np.full(3, 1.0))
    if kind == "cylinder":
        return _cylinder(rng, n, rng.uniform(0.4, 0.6), rng.uniform(1.6, 2.4))
    if kind == "torus":
        return _torus(rng, n, 1.0, rng.uniform(0.2, 0.4))
    raise ValueError(f"unknown primitive {kind!r}")


def sample_composite(kind: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Surface samples of a two-part composite and their local part index (0 or 1)."""
    if kind == "dumbbell":
        rb, rr = rng.uniform(0.35, 0.5), rng.uniform(0.08, 0.15)
        half = rng.uniform(0.9, 1.2)
        rod_len = 2 * (half - rb)
        c = _split(rng, n, [4 * np.pi * rb * rb, 4 * np.pi * rb * rb, 2 * np.pi * rr * rod_len])
        rod = _tube(rng, c[2], rr, -rod_len / 2, rod_len / 2)[:, [1, 0, 2]]
        pts = [_sphere(rng, c[0], rb, (-half, 0, 0)), _sphere(rng, c[1], rb, (half, 0, 0)), rod]
        labels = [0, 0, 1]
    elif kind == "mushroom":
        rc, rs, hs = rng.uniform(0.7, 1.0), rng.uniform(0.12, 0.25), rng.uniform(0.8, 1.3)
        c = _split(rng, n, [2 * np.pi * rc * rc, np.pi * rc * rc, 2 * np.pi * rs * hs])
        pts = [_sphere(rng, c[0], rc, upper=True), _disk(rng, c[1], rc, 0.0), _tube(rng, c[2], rs, -hs, 0.0)]
        labels = [0, 0, 1]
    elif kind == "table":
        w, d, t = rng.uniform(0.8, 1.2), rng.uniform(0.5, 0.9), rng.uniform(0.05, 0.1)
        rl, hl = rng.uniform(0.05, 0.09), rng.uniform(0.7, 1.1)
        top_area = 8 * (w * d + w * t + d * t)
        leg_area = 2 * np.pi * rl * hl
        c = _split(rng, n, [top_area] + [leg_area] * 4)
        corners = [(sx * (w - 2 * rl), 0, sz * (d - 2 * rl)) for sx in (-1, 1) for sz in (-1, 1)]
        pts = [_box(rng, c[0], np.array([w, t, d]))]
        pts += [_tube(rng, c[i + 1], rl, -t - hl, -t, corners[i]) for i in range(4)]
        labels = [0, 1, 1, 1, 1]
    else:
        raise ValueError(f"unknown composite {kind!r}")
    lab = np.concatenate([np.full(len(p), l) for p, l in zip(pts, labels)])
    return np.concatenate(pts), lab


PRIMITIVES = ("sphere", "cube", "cylinder", "torus")
COMPOSITES = {"dumbbell": 2, "mushroom": 2, "table": 2}


def _place(pts: np.ndarray, spec: ShapeSpec, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    pts = pts @ rot.T * rng.uniform(*spec.size)
    if spec.noise:
        pts = pts + rng.normal(0, spec.noise, pts.shape)
    return pts


def _shuffled(rng, pts, lab=None):
    order = rng.permutation(len(pts))
    return (pts[order], None if lab is None else lab[order])


DEFAULT_CLASSIFY = tuple(ShapeSpec(k) for k in PRIMITIVES)
DEFAULT_SEGMENT = tuple(ShapeSpec(k) for k in COMPOSITES)


def generate_classification_dataset(specs: Sequence[ShapeSpec] = DEFAULT_CLASSIFY, shapes_per_class: int = 200,
                                    points_per_shape: int = 1024, seed: int = 0) -> LabeledDataset:
    """One class per spec; every shape is a normalized, randomly rotated and scaled primitive."""
    if len(specs) < 2:
        raise ValueError("need at least two classes")
    if points_per_shape < 8:
        raise ValueError("points_per_shape must be at least 8")
    rng = np.random.default_rng(seed)
    points, labels = [], []
    for cls, spec in enumerate(specs):
        for _ in range(shapes_per_class):
            pts = _place(sample_primitive(spec.kind, points_per_shape, rng), spec, rng)
            points.append(normalize_unit_sphere(_shuffled(rng, pts)[0]))
            labels.append(cls)
    return LabeledDataset("classify", np.array(points), np.array(labels), len(specs))


def generate_segmentation_dataset(specs: Sequence[ShapeSpec] = DEFAULT_SEGMENT, shapes_per_category: int = 100,
                                  points_per_shape: int = 2048, seed: int = 0) -> LabeledDataset:
    """One category per composite spec with globally numbered, disjoint part ids."""
    if points_per_shape < 8:
        raise ValueError("points_per_shape must be at least 8")
    rng = np.random.default_rng(seed)
    cat_parts, offset = [], 0
    for spec in specs:
        k = COMPOSITES.get(spec.kind)
        if k is None:
            raise ValueError(f"{spec.kind!r} is not a composite shape")
        cat_parts.append(list(range(offset, offset + k)))
        offset += k
    points, labels = [], []
    for cat, spec in enumerate(specs):
        for _ in range(shapes_per_category):
            pts, lab = sample_composite(spec.kind, points_per_shape, rng)
            pts, lab = _shuffled(rng, _place(pts, spec, rng), lab)
            points.append(normalize_unit_sphere(pts))
            labels.append(np.asarray(cat_parts[cat])[lab])
    return LabeledDataset("segment", np.array(points), np.array(labels), len(specs), offset, cat_parts)


def split_indices(ds: LabeledDataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[np.ndarray, ...]:
    """Stratified train/val/test index arrays, deterministic in ``seed``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    cats = ds.categories()
    parts: list[list] = [[], [], []]
    for c in np.unique(cats):
        members = rng.permutation(np.flatnonzero(cats == c))
        a = int(round(fractions[0] * len(members)))
        b = a + int(round(fractions[1] * len(members)))
        for i, chunk in enumerate((members[:a], members[a:b], members[b:])):
            parts[i].extend(chunk.tolist())
    return tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)
