"""Neighbour distances over the Delaunay triangulation of nucleus centers."""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, QhullError

from ..numerics import ContractError


def _collinear(pts: np.ndarray) -> bool:
    centred = pts - pts.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    scale = max(s[0], 1e-300)
    return len(s) < 2 or s[1] <= 1e-10 * scale


def _chain_neighbours(pts: np.ndarray) -> list[set[int]]:
    centred = pts - pts.mean(axis=0)
    direction = np.linalg.svd(centred)[2][0] if len(pts) > 1 else np.array([1.0, 0.0])
    order = np.argsort(centred @ direction, kind="stable")
    nbrs: list[set[int]] = [set() for _ in pts]
    for a, b in zip(order[:-1], order[1:]):
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    return nbrs


def delaunay_neighbours(points) -> list[set[int]]:
    """Index sets of each point's Delaunay neighbours.

    Two points, or a fully collinear set, fall back to chain adjacency along
    the line.  A point that Qhull leaves out of every triangle (an exact
    duplicate) is linked to its nearest other point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ContractError(f"need at least 2 points, got {len(pts)}")
    if len(pts) == 2 or _collinear(pts):
        return _chain_neighbours(pts)
    try:
        tri = Delaunay(pts)
    except QhullError:
        return _chain_neighbours(pts)
    indptr, indices = tri.vertex_neighbor_vertices
    nbrs = [set(int(j) for j in indices[indptr[i] : indptr[i + 1]]) for i in range(len(pts))]
    for i, s in enumerate(nbrs):
        if not s:
            d = np.hypot(*(pts - pts[i]).T)
            d[i] = np.inf
            j = int(np.argmin(d))
            s.add(j)
            nbrs[j].add(i)
    return nbrs


def delaunay_neighbor_distances(points) -> np.ndarray:
    """Per point (max, min, mean) Euclidean distance to its Delaunay neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((len(pts), 3))
    for i, nb in enumerate(delaunay_neighbours(pts)):
        idx = np.fromiter(sorted(nb), dtype=np.int64)
        d = np.hypot(*(pts[idx] - pts[i]).T)
        out[i] = d.max(), d.min(), d.mean()
    return out
