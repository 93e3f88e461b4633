"""Mesh-to-representation conversions.

Image-style models get zero-padded square arrays plus a validity mask;
graph-style models get k-nearest-neighbour graphs over cell centres or mesh
nodes. The unrolling and packing transforms deliberately drop geometry:
graded spacings are ignored by ``unroll_graded`` and node neighbourhoods
are scrambled by ``pack_unstructured``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, InsufficientNodesError, ShapeError, SizeError
from .meshkit import GradedGrid, StructuredGrid, TriMesh
from .solvers import ScalarField

DEFAULT_K = 8
DUPLICATE_TOL = 1e-12


@dataclass(frozen=True)
class PaddedImage:
    data: np.ndarray          # (H, W, C)
    mask: np.ndarray          # (H, W) bool
    source_shape: tuple

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[:2] != self.mask.shape:
            raise ShapeError(f"data {self.data.shape} and mask {self.mask.shape} disagree")

    @property
    def channels(self):
        return self.data.shape[2]

    def chw(self):
        """Channels-first copy for the convolutional models."""
        return np.ascontiguousarray(np.moveaxis(self.data, 2, 0))


FieldLike = Union[ScalarField, np.ndarray]


def _stack(fields, ndim):
    if isinstance(fields, (ScalarField, np.ndarray)):
        fields = [fields]
    arrays = [np.asarray(f.values if isinstance(f, ScalarField) else f, dtype=float) for f in fields]
    if not arrays:
        raise ShapeError("need at least one field")
    shape = arrays[0].shape
    for a in arrays:
        if a.ndim != ndim or a.shape != shape:
            raise ShapeError(f"fields must share one {ndim}-d shape, got {[x.shape for x in arrays]}")
    return np.stack(arrays, axis=-1)


def _place(block, target):
    rows, cols, c = block.shape
    if rows > target or cols > target:
        raise SizeError(f"field {rows}x{cols} does not fit a {target}x{target} image")
    data = np.zeros((target, target, c), dtype=block.dtype)
    mask = np.zeros((target, target), dtype=bool)
    data[:rows, :cols] = block
    mask[:rows, :cols] = True
    return PaddedImage(data, mask, (rows, cols))


def grid_to_image(fields, target: int) -> PaddedImage:
    """Top-left placement of one or more ``(rows, cols)`` fields; channels stack fields."""
    return _place(_stack(fields, 2), target)


def image_to_grid(img: PaddedImage) -> np.ndarray:
    """Inverse of ``grid_to_image``: ``(rows, cols, C)`` block of valid cells."""
    rows, cols = img.source_shape
    return img.data[:rows, :cols].copy()


def unroll_graded(fields, target: int) -> PaddedImage:
    """Treat a graded channel as a plain ``(n_stream, n_cross)`` array and pad it.

    Field arrays on a GradedGrid are already stored stream-major, so the
    unrolling is an index mapping only; the spacings are not carried along.
    """
    return _place(_stack(fields, 2), target)


def roll_graded(img: PaddedImage) -> np.ndarray:
    return image_to_grid(img)


def pack_unstructured(node_values, target: int) -> PaddedImage:
    """Row-major fill of per-node values in mesh node order, zero-padded.

    ``node_values`` is ``(N,)``, ``(N, C)``, or a list of ``(N,)`` fields.
    """
    if isinstance(node_values, np.ndarray) and node_values.ndim == 2:
        vals = np.asarray(node_values, dtype=float)
    else:
        vals = _stack(node_values, 1)
    n, c = vals.shape
    if n > target * target:
        raise SizeError(f"{n} nodes do not fit a {target}x{target} image")
    flat = np.zeros((target * target, c), dtype=vals.dtype)
    flat[:n] = vals
    mask = np.zeros(target * target, dtype=bool)
    mask[:n] = True
    return PaddedImage(flat.reshape(target, target, c), mask.reshape(target, target), (n,))


def unpack_unstructured(img: PaddedImage) -> np.ndarray:
    (n,) = img.source_shape
    h, w, c = img.data.shape
    return img.data.reshape(h * w, c)[:n].copy()


# --- graphs ------------------------------------------------------------------

@dataclass(frozen=True)
class MeshGraph:
    node_pos: np.ndarray      # (N, 2)
    node_feat: np.ndarray     # (N, F)
    edges: np.ndarray         # (E, 2) rows of (src, dst)
    edge_feat: np.ndarray     # (E, 3) rows of (dx, dy, |d|), dst minus src

    @property
    def n_nodes(self):
        return len(self.node_pos)

    @property
    def senders(self):
        return self.edges[:, 0]

    @property
    def receivers(self):
        return self.edges[:, 1]

    def out_degree(self):
        return np.bincount(self.edges[:, 0], minlength=self.n_nodes)

    def permuted(self, perm):
        """Relabel node ``i`` as ``perm[i]``; edge order is preserved."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return MeshGraph(self.node_pos[inv], self.node_feat[inv], perm[self.edges], self.edge_feat.copy())

    def with_features(self, node_feat):
        node_feat = np.asarray(node_feat, dtype=float)
        if node_feat.ndim == 1:
            node_feat = node_feat[:, None]
        if len(node_feat) != self.n_nodes:
            raise ShapeError(f"{len(node_feat)} feature rows for {self.n_nodes} nodes")
        return MeshGraph(self.node_pos, node_feat, self.edges, self.edge_feat)


def _sq_dist(points, i, j):
    d = points[j] - points[i]
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """``(N, k)`` neighbour indices ordered by (distance, index).

    A kd-tree proposes candidates; every point tied with the k-th distance
    is then pulled in by a ball query so the lower-index tie rule is exact.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if k < 1:
        raise InsufficientNodesError(f"k must be at least 1, got {k}")
    if n <= k:
        raise InsufficientNodesError(f"need more than k={k} points, got {n}")
    tree = cKDTree(pts)
    _, cand = tree.query(pts, k=k + 1)
    cand = np.asarray(cand).reshape(n, k + 1)
    d2 = _sq_dist(pts, np.arange(n)[:, None], cand)
    d2_self_excluded = np.where(cand == np.arange(n)[:, None], np.inf, d2)
    nearest = np.min(d2_self_excluded, axis=1)
    if np.any(nearest <= DUPLICATE_TOL ** 2):
        i = int(np.argmin(nearest))
        raise DegenerateInputError(f"point {i} duplicates another point within {DUPLICATE_TOL}")
    kth = np.sort(d2_self_excluded, axis=1)[:, k - 1]
    out = np.empty((n, k), dtype=np.int64)
    radii = np.sqrt(kth) * (1 + 1e-9) + 1e-300
    for i in range(n):
        ball = np.asarray(tree.query_ball_point(pts[i], radii[i]), dtype=np.int64)
        ball = ball[ball != i]
        bd = _sq_dist(pts, i, ball)
        order = np.lexsort((ball, bd))
        out[i] = ball[order[:k]]
    return out


def knn_graph(points: np.ndarray, features: np.ndarray, k: int = DEFAULT_K) -> MeshGraph:
    """Directed graph with an edge from every node to each of its k nearest neighbours."""
    pts = np.asarray(points, dtype=float)
    feat = np.asarray(features, dtype=float)
    if feat.ndim == 1:
        feat = feat[:, None]
    if pts.ndim != 2 or pts.shape[1] != 2 or len(feat) != len(pts):
        raise ShapeError(f"points {pts.shape} and features {feat.shape} disagree")
    nbr = knn_indices(pts, k)
    src = np.repeat(np.arange(len(pts)), k)
    dst = nbr.ravel()
    d = pts[dst] - pts[src]
    dist = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])
    return MeshGraph(pts, feat, np.column_stack([src, dst]), np.column_stack([d, dist]))


def grid_centers(grid) -> np.ndarray:
    """Cell centres in field (row-major) order as ``(N, 2)`` coordinates.

    Structured grids give ``(x, y)``; graded grids give ``(stream, cross)``
    at their true nonuniform positions.
    """
    if isinstance(grid, StructuredGrid):
        x, y = grid.cell_centers()
        return np.column_stack([x.ravel(), y.ravel()])
    if isinstance(grid, GradedGrid):
        s, c = grid.cell_centers()
        return np.column_stack([s.ravel(), c.ravel()])
    raise TypeError(f"unsupported grid type {type(grid).__name__}")


def grid_graph(grid, fields=(), k: int = DEFAULT_K) -> MeshGraph:
    """One node per cell at its centre, features from ``fields``, then ``knn_graph``."""
    pts = grid_centers(grid)
    if isinstance(fields, (ScalarField, np.ndarray)) or len(fields):
        feat = _stack(fields, 2).reshape(len(pts), -1)
    else:
        feat = np.zeros((len(pts), 0))
    return knn_graph(pts, feat, k)


def mesh_graph(mesh: TriMesh, node_values=None, k: int = DEFAULT_K) -> MeshGraph:
    if node_values is None:
        feat = np.zeros((mesh.n_nodes, 0))
    else:
        feat = np.asarray(node_values, dtype=float).reshape(mesh.n_nodes, -1)
    return knn_graph(mesh.nodes, feat, k)
