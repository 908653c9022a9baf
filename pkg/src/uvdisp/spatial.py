"""Exact nearest neighbours, pruned Chamfer distance and convex-hull masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree


class PointIndex:
    """Exact NN over a fixed point set; ties resolve to the lowest index."""

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty point set")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Return ``(indices, squared distances)`` for an (k, 3) array of queries."""
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(q) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        if len(self.points) == 1:
            idx = np.zeros(len(q), dtype=np.int64)
        else:
            d, idx = self._tree.query(q, k=2)
            idx = idx[:, 0].astype(np.int64)
            tied = np.flatnonzero(d[:, 0] == d[:, 1])
            for t in tied:
                # gather every point at the minimal distance and keep the smallest index
                cand = self._tree.query_ball_point(q[t], d[t, 0] * (1 + 1e-12) + 1e-300)
                cand = np.asarray(cand, dtype=np.int64)
                d2 = np.sum((self.points[cand] - q[t]) ** 2, axis=1)
                idx[t] = cand[d2 == d2.min()].min()
        diff = q - self.points[idx]
        return idx, np.einsum("ij,ij->i", diff, diff)

    def nearest(self, q):
        i, d2 = self.query(np.asarray(q, dtype=np.float64)[None])
        return int(i[0]), float(d2[0])


def brute_force_nn(queries, points):
    """O(n*m) scan; first minimum wins, i.e. lowest index on ties."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), 1024):
        diff = q[s:s + 1024, None, :] - p[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        idx[s:s + 1024] = np.argmin(d2, axis=1)
    diff = q - p[idx]
    return idx, np.einsum("ij,ij->i", diff, diff)


@dataclass
class ChamferResult:
    value: float
    forward: float
    backward: float
    # P1 -> P2: nn index per P1 point and survivor mask; likewise P2 -> P1
    fwd_idx: np.ndarray
    fwd_keep: np.ndarray
    bwd_idx: np.ndarray
    bwd_keep: np.ndarray
    empty_direction: bool = False

    @property
    def n_forward(self):
        return int(self.fwd_keep.sum())

    @property
    def n_backward(self):
        return int(self.bwd_keep.sum())


def _direction(d2, threshold, squared):
    keep = d2 <= threshold * threshold if np.isfinite(threshold) else np.ones(len(d2), dtype=bool)
    n = int(keep.sum())
    if n == 0:
        return 0.0, keep, True
    vals = d2[keep] if squared else np.sqrt(d2[keep])
    return float(np.sum(vals) / n), keep, False


def chamfer_pruned(p1, p2, threshold=1.0, squared=True, index1=None, index2=None, brute=False):
    """Symmetric Chamfer with correspondences farther than ``threshold`` dropped.

    Each direction is averaged over its surviving matches only. A direction
    with no survivors contributes 0 and sets ``empty_direction``.
    ``index1``/``index2`` may pass prebuilt :class:`PointIndex` objects.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    p1 = np.asarray(p1, dtype=np.float64).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=np.float64).reshape(-1, 3)
    if len(p1) == 0 or len(p2) == 0:
        raise ValueError("point sets must be non-empty")
    if brute:
        fi, fd2 = brute_force_nn(p1, p2)
        bi, bd2 = brute_force_nn(p2, p1)
    else:
        fi, fd2 = (index2 if index2 is not None else PointIndex(p2)).query(p1)
        bi, bd2 = (index1 if index1 is not None else PointIndex(p1)).query(p2)
    fwd, fk, e1 = _direction(fd2, threshold, squared)
    bwd, bk, e2 = _direction(bd2, threshold, squared)
    return ChamferResult(fwd + bwd, fwd, bwd, fi, fk, bi, bk, e1 or e2)


def chamfer_brute(p1, p2, threshold=np.inf, squared=True) -> float:
    """Independent double-loop reference used by tests and oracles."""
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    total = 0.0
    for a, b in ((p1, p2), (p2, p1)):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1).min(axis=1)
        keep = np.sqrt(d2) <= threshold
        if keep.any():
            vals = d2[keep] if squared else np.sqrt(d2[keep])
            total += vals.sum() / keep.sum()
    return float(total)


# ---------------------------------------------------------------------------
# hull masks


@dataclass
class HullRegion:
    equations: np.ndarray  # (k, 4) outward normals and offsets of the expanded hull
    centroid: np.ndarray
    expansion: float
    vertices: np.ndarray  # unexpanded hull vertex coordinates

    def contains(self, points, tol=1e-9):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all(p @ self.equations[:, :3].T + self.equations[:, 3] <= tol, axis=1)


def build_hull(cloud, expansion=1.5, floor_quantile=0.3, vertical_axis=1) -> HullRegion:
    """Convex hull of the cloud above a quantile floor, scaled about its centre."""
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if floor_quantile > 0:
        floor = np.quantile(pts[:, vertical_axis], floor_quantile)
        pts = pts[pts[:, vertical_axis] >= floor]
    if len(pts) < 4:
        raise ValueError("degenerate hull: fewer than 4 points above the floor")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise ValueError("degenerate hull: points are coplanar or collinear") from exc
    hv = pts[hull.vertices]
    centroid = hv.mean(axis=0)
    eq = hull.equations.copy()
    # y is inside the scaled hull iff n.(c + (y - c)/s) + d <= 0
    normals = eq[:, :3]
    offsets = eq[:, 3]
    nc = normals @ centroid
    new_off = expansion * offsets + (expansion - 1.0) * nc
    eq = np.concatenate([normals, new_off[:, None]], axis=1)
    return HullRegion(eq, centroid, float(expansion), hv)


def build_hull_mask(cloud, vertices, expansion=1.5, floor_quantile=0.3, vertical_axis=1):
    hull = build_hull(cloud, expansion, floor_quantile, vertical_axis)
    return hull.contains(vertices)
