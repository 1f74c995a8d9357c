"""Point clouds, farthest point sampling, ball query, synthetic shapes and the
PCD1 text format."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

SHAPE_CLASSES = ("sphere", "cube", "torus", "cylinder")
# two parts per class, numbered globally
PART_NAMES = {
    "sphere": ("upper", "lower"),
    "cube": ("top_bottom", "sides"),
    "torus": ("inner", "outer"),
    "cylinder": ("caps", "side"),
}
NUM_PARTS = 2 * len(SHAPE_CLASSES)


class FormatError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray                 # (N, 3)
    features: np.ndarray | None = None    # (N, C)
    label: int | None = None              # per-cloud class
    point_labels: np.ndarray | None = None  # (N,) per-point part ids

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("a point cloud needs at least one point")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.positions), -1)
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64).reshape(-1)
            if len(self.point_labels) != len(self.positions):
                raise ValueError("point_labels length differs from point count")

    def __len__(self) -> int:
        return len(self.positions)

    def permute(self, perm: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.positions[perm],
            None if self.features is None else self.features[perm],
            self.label,
            None if self.point_labels is None else self.point_labels[perm],
        )


def _xyz(points) -> np.ndarray:
    return points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)


def normalize(pc: PointCloud) -> PointCloud:
    x = pc.positions - pc.positions.mean(axis=0)
    r = np.sqrt((x * x).sum(axis=1)).max()
    if r <= 1e-12 * (1.0 + np.abs(pc.positions).max()):
        raise ValueError("cannot normalize a degenerate cloud (all points identical)")
    return replace(pc, positions=x / r)


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x - c
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def fps(points, m: int) -> np.ndarray:
    """Greedy farthest point sampling with order-independent tie rules.

    Starts from the lexicographically smallest (x, y, z) point. Each pick
    maximizes the squared distance to the selected set; ties go to the
    lexicographically smallest coordinates, then the smallest index.
    """
    x = _xyz(points)
    n = len(x)
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    order = np.lexsort((x[:, 2], x[:, 1], x[:, 0]))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    picked = np.empty(m, dtype=np.int64)
    picked[0] = order[0]
    dist = _sqdist(x, x[picked[0]])
    dist[picked[0]] = -1.0
    for k in range(1, m):
        cand = np.flatnonzero(dist == dist.max())
        nxt = cand[0] if len(cand) == 1 else cand[np.argmin(rank[cand])]
        picked[k] = nxt
        dist = np.minimum(dist, _sqdist(x, x[nxt]))
        dist[picked[:k + 1]] = -1.0
    return picked


@dataclass
class Group:
    anchor: int
    members: np.ndarray   # anchor first, then ascending distance (ties by index)
    offsets: np.ndarray   # member positions minus anchor position


def ball_query(points, anchors: Sequence[int], radius: float, cap: int, source=None) -> list[Group]:
    """Neighbors within ``radius`` of each anchor, nearest ``cap`` kept.

    Anchors index ``points``; members index ``source`` (defaults to
    ``points``, in which case the anchor itself always leads its group).
    Groups shorter than ``cap`` are left short.
    """
    if radius <= 0 or cap < 1:
        raise ValueError("ball_query needs radius > 0 and cap >= 1")
    x = _xyz(points)
    src = x if source is None else _xyz(source)
    groups = []
    r2 = radius * radius
    idx = np.arange(len(src))
    for a in anchors:
        a = int(a)
        d2 = _sqdist(src, x[a])
        inside = np.flatnonzero(d2 <= r2)
        not_anchor = (inside != a) if source is None else np.ones(len(inside), bool)
        keep = inside[np.lexsort((idx[inside], d2[inside], not_anchor))][:cap]
        groups.append(Group(a, keep, src[keep] - x[a]))
    return groups


def pad_groups(groups: list[Group]) -> tuple[np.ndarray, np.ndarray]:
    """Stack groups into an index array padded with each row's first member,
    plus a validity mask."""
    k = max(len(g.members) for g in groups)
    idx = np.empty((len(groups), k), dtype=np.int64)
    mask = np.zeros((len(groups), k), dtype=bool)
    for i, g in enumerate(groups):
        idx[i] = g.members[0]
        idx[i, :len(g.members)] = g.members
        mask[i, :len(g.members)] = True
    return idx, mask


# --------------------------------------------------------------------------
# synthetic shapes


def _surface(kind: str, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform surface samples and their local part index (0 or 1)."""
    if kind == "sphere":
        p = rng.normal(size=(n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        part = (p[:, 2] < 0).astype(np.int64)
    elif kind == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        p = np.empty((n, 3))
        for a in range(3):
            on = axis == a
            others = [b for b in range(3) if b != a]
            p[on, a] = sign[on]
            p[np.ix_(on, others)] = uv[on]
        part = (axis != 2).astype(np.int64)
    elif kind == "torus":
        big, small = 1.0, 0.4
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        phi = np.empty(n)
        filled = 0
        # rejection on the tube angle: surface density is proportional to big + small*cos(phi)
        while filled < n:
            cand = rng.uniform(0.0, 2 * np.pi, size=2 * (n - filled))
            ok = rng.uniform(0.0, big + small, size=cand.size) < big + small * np.cos(cand)
            take = cand[ok][: n - filled]
            phi[filled:filled + take.size] = take
            filled += take.size
        ring = big + small * np.cos(phi)
        p = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
        part = (ring >= big).astype(np.int64)
    elif kind == "cylinder":
        # side area 4*pi vs caps 2*pi
        on_side = rng.uniform(size=n) < 2.0 / 3.0
        ang = rng.uniform(0.0, 2 * np.pi, size=n)
        rad = np.where(on_side, 1.0, np.sqrt(rng.uniform(size=n)))
        z = np.where(on_side, rng.uniform(-1.0, 1.0, size=n), np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0))
        p = np.stack([rad * np.cos(ang), rad * np.sin(ang), z], axis=1)
        part = on_side.astype(np.int64)
    else:
        raise ValueError(f"unknown shape class {kind!r}")
    return p, part


def sample_shape(kind: str, n_points: int, rng: np.random.Generator, jitter: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Antithetic surface sampling: every shape here is centrally symmetric,
    so drawing half the points and mirroring them keeps each point uniform on
    the surface while pinning the noise-free centroid to the origin."""
    half = (n_points + 1) // 2
    p, part = _surface(kind, half, rng)
    if kind == "sphere":
        mirror_part = 1 - part
    else:
        mirror_part = part  # the other part splits are symmetric under x -> -x
    p = np.concatenate([p, -p])[:n_points]
    part = np.concatenate([part, mirror_part])[:n_points]
    if jitter > 0:
        p = p + rng.normal(0.0, jitter, size=p.shape)
    return p, part


def gen_shapes(classes: Sequence[str], n_points: int, n_samples: int, seed: int,
               jitter: float = 0.02, segmentation: bool = False, offset: int = 0) -> list[PointCloud]:
    """Normalized synthetic clouds; sample ``i`` has class ``i % len(classes)``.

    Each sample draws from its own stream keyed by ``(seed, offset + i)`` so
    that train and test splits can come from disjoint offsets.
    """
    classes = list(classes)
    if not classes:
        raise ValueError("need at least one class")
    for c in classes:
        if c not in SHAPE_CLASSES:
            raise ValueError(f"unknown shape class {c!r}; choose from {SHAPE_CLASSES}")
    if n_points < 1 or n_samples < 0:
        raise ValueError("n_points must be >= 1 and n_samples >= 0")
    out = []
    for i in range(n_samples):
        label = i % len(classes)
        kind = classes[label]
        rng = np.random.default_rng([seed, offset + i])
        p, part = sample_shape(kind, n_points, rng, jitter)
        global_part = 2 * SHAPE_CLASSES.index(kind) + part
        pc = PointCloud(p, label=label, point_labels=global_part if segmentation else None)
        out.append(normalize(pc))
    return out


# --------------------------------------------------------------------------
# PCD1 text format


def write_pc(path, pc: PointCloud) -> None:
    """Header ``PCD1 <N> <C> <mode>``, an optional class line, then one row
    per point: ``x y z``, C feature values, and an optional part label.
    Floats use 17 significant digits so a round trip is exact."""
    n = len(pc)
    c = 0 if pc.features is None else pc.features.shape[1]
    # mode bits: 1 = class line follows the header, 2 = per-point label column
    mode = (1 if pc.label is not None else 0) | (2 if pc.point_labels is not None else 0)
    lines = [f"PCD1 {n} {c} {mode}"]
    if mode & 1:
        lines.append(str(int(pc.label)))
    cols = [pc.positions] if c == 0 else [pc.positions, pc.features]
    body = np.concatenate(cols, axis=1)
    for i in range(n):
        row = " ".join("%.17g" % v for v in body[i])
        if mode & 2:
            row += f" {int(pc.point_labels[i])}"
        lines.append(row)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pc(path) -> PointCloud:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{os.fspath(path)}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "PCD1":
        raise FormatError(f"{os.fspath(path)}: malformed header {lines[0]!r}")
    try:
        n, c, mode = (int(v) for v in head[1:])
    except ValueError:
        raise FormatError(f"{os.fspath(path)}: malformed header {lines[0]!r}") from None
    if n < 1 or c < 0 or mode not in (0, 1, 2, 3):
        raise FormatError(f"{os.fspath(path)}: invalid header values {lines[0]!r}")
    body = lines[1:]
    label = None
    if mode & 1:
        if not body:
            raise FormatError(f"{os.fspath(path)}: missing class line")
        label = int(body[0])
        body = body[1:]
    if len(body) != n:
        raise FormatError(f"{os.fspath(path)}: header says {n} points, body has {len(body)}")
    width = 3 + c + (1 if mode & 2 else 0)
    rows = [ln.split() for ln in body]
    if any(len(r) != width for r in rows):
        raise FormatError(f"{os.fspath(path)}: expected {width} columns per point")
    vals = np.array([[float(v) for v in r[:3 + c]] for r in rows], dtype=np.float64)
    point_labels = np.array([int(r[-1]) for r in rows]) if mode & 2 else None
    return PointCloud(vals[:, :3], vals[:, 3:] if c else None, label, point_labels)
