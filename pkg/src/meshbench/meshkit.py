"""Structured, graded and unstructured (triangle) meshes.

All mesh objects are frozen dataclasses whose array members are made
read-only on construction, so they can be shared freely between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidDimensionError, InvalidGeometryError, InvalidGradingError

DUPLICATE_TOL = 1e-12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform cell grid. Field arrays on it have shape ``(ny, nx)``."""

    nx: int
    ny: int
    spacing: tuple[float, float]
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvalidDimensionError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        if min(self.spacing) <= 0:
            raise InvalidDimensionError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def hx(self):
        return self.spacing[0]

    @property
    def hy(self):
        return self.spacing[1]

    def node_coords(self):
        """Corner coordinates, each array of shape ``(ny + 1, nx + 1)``."""
        x = self.origin[0] + self.hx * np.arange(self.nx + 1)
        y = self.origin[1] + self.hy * np.arange(self.ny + 1)
        return np.meshgrid(x, y)

    def cell_centers(self):
        x = self.origin[0] + self.hx * (np.arange(self.nx) + 0.5)
        y = self.origin[1] + self.hy * (np.arange(self.ny) + 0.5)
        return np.meshgrid(x, y)


def make_structured(nx: int, ny: int) -> StructuredGrid:
    """Unit-square grid of ``nx`` by ``ny`` cells."""
    if nx < 2 or ny < 2:
        raise InvalidDimensionError(f"grid needs at least 2x2 cells, got {nx}x{ny}")
    return StructuredGrid(nx=int(nx), ny=int(ny), spacing=(1.0 / nx, 1.0 / ny))


@dataclass(frozen=True)
class GradedGrid:
    """Straight channel with wall-refined cross spacing.

    Field arrays have shape ``(n_stream, n_cross)``: the streamwise index runs
    down the rows. The cross coordinate spans ``[0, width]`` with walls at both
    ends, the stream coordinate spans ``[0, length]``.
    """

    n_stream: int
    n_cross: int
    cross_spacings: np.ndarray
    stream_spacings: np.ndarray
    ratio: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "cross_spacings", _frozen(self.cross_spacings))
        object.__setattr__(self, "stream_spacings", _frozen(self.stream_spacings))
        if len(self.cross_spacings) != self.n_cross or len(self.stream_spacings) != self.n_stream:
            raise InvalidDimensionError("spacing list lengths do not match cell counts")
        if np.any(self.cross_spacings <= 0) or np.any(self.stream_spacings <= 0):
            raise InvalidGradingError("all spacings must be positive")

    @property
    def shape(self):
        return (self.n_stream, self.n_cross)

    @property
    def width(self):
        return float(self.cross_spacings.sum())

    @property
    def length(self):
        return float(self.stream_spacings.sum())

    def cross_centers(self):
        edges = np.concatenate([[0.0], np.cumsum(self.cross_spacings)])
        return 0.5 * (edges[:-1] + edges[1:])

    def stream_centers(self):
        edges = np.concatenate([[0.0], np.cumsum(self.stream_spacings)])
        return 0.5 * (edges[:-1] + edges[1:])

    def cell_centers(self):
        """``(stream, cross)`` coordinate arrays, each shaped ``(n_stream, n_cross)``."""
        s, c = np.meshgrid(self.stream_centers(), self.cross_centers(), indexing="ij")
        return s, c


def graded_half_spacings(n_half: int, ratio: float, half_width: float = 0.5) -> np.ndarray:
    """Geometric progression from the wall inward, normalized to ``half_width``."""
    powers = ratio ** np.arange(n_half)
    return half_width * powers / powers.sum()


def make_graded(n_stream: int, n_cross: int, ratio: float, length: float = 1.0) -> GradedGrid:
    if n_stream < 2 or n_cross < 2:
        raise InvalidDimensionError(f"graded grid needs at least 2x2 cells, got {n_stream}x{n_cross}")
    if n_cross % 2:
        raise InvalidDimensionError(f"n_cross must be even for symmetric grading, got {n_cross}")
    if not ratio >= 1.0:
        raise InvalidGradingError(f"grading ratio must be >= 1, got {ratio}")
    if length <= 0:
        raise InvalidDimensionError(f"channel length must be positive, got {length}")
    half = graded_half_spacings(n_cross // 2, float(ratio))
    cross = np.concatenate([half, half[::-1]])
    stream = np.full(n_stream, length / n_stream)
    return GradedGrid(n_stream=int(n_stream), n_cross=int(n_cross),
                      cross_spacings=cross, stream_spacings=stream, ratio=float(ratio))


# --- unstructured ----------------------------------------------------------

RegionRule = Callable[[np.ndarray, np.ndarray], np.ndarray]


def uniform_rule(r, theta):
    return np.zeros(np.shape(r), dtype=np.int64)


def angular_split_rule(r, theta):
    return (theta >= 0).astype(np.int64)


def radial_split_rule(r_split: float) -> RegionRule:
    def rule(r, theta):
        return (r >= r_split).astype(np.int64)
    return rule


REGION_RULES = {
    "uniform": uniform_rule,
    "angular_split": angular_split_rule,
}


@dataclass(frozen=True)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    region_id: np.ndarray
    boundary_nodes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen(self.nodes))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        object.__setattr__(self, "region_id", _frozen(self.region_id, np.int64))
        object.__setattr__(self, "boundary_nodes", frozenset(int(b) for b in self.boundary_nodes))
        self.validate()

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def regions(self):
        return sorted(set(self.region_id.tolist()))

    def signed_areas(self):
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)

    def boundary_mask(self):
        m = np.zeros(self.n_nodes, dtype=bool)
        m[sorted(self.boundary_nodes)] = True
        return m

    def validate(self):
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise InvalidGeometryError(f"nodes must be N x 2, got {self.nodes.shape}")
        if not np.all(np.isfinite(self.nodes)):
            raise InvalidGeometryError("node coordinates must be finite")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidGeometryError(f"triangles must be M x 3, got {self.triangles.shape}")
        if len(self.region_id) != len(self.triangles):
            raise InvalidGeometryError("region_id needs one entry per triangle")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.n_nodes):
            raise InvalidGeometryError("triangle index out of range")
        if np.any(self.signed_areas() <= 0):
            raise InvalidGeometryError("triangles must be positively oriented")
        if not self.boundary_nodes:
            raise InvalidGeometryError("mesh needs at least one boundary node")
        if max(self.boundary_nodes) >= self.n_nodes or min(self.boundary_nodes) < 0:
            raise InvalidGeometryError("boundary node index out of range")
        pairs = cKDTree(self.nodes).query_pairs(DUPLICATE_TOL)
        if pairs:
            raise InvalidGeometryError(f"duplicate nodes within {DUPLICATE_TOL}: {sorted(pairs)[:3]}")

    # text serialization: "v x y", "t i j k region", "b i"

    def to_text(self) -> str:
        lines = [f"# trimesh nodes={self.n_nodes} triangles={self.n_triangles}"]
        lines += [f"v {x:.17g} {y:.17g}" for x, y in self.nodes]
        lines += [f"t {i} {j} {k} {r}" for (i, j, k), r in zip(self.triangles.tolist(), self.region_id.tolist())]
        lines += [f"b {b}" for b in sorted(self.boundary_nodes)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TriMesh":
        nodes, tris, regions, bnd = [], [], [], []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    nodes.append((float(rest[0]), float(rest[1])))
                elif tag == "t":
                    tris.append(tuple(int(v) for v in rest[:3]))
                    regions.append(int(rest[3]))
                elif tag == "b":
                    bnd.append(int(rest[0]))
                else:
                    raise ValueError(f"unknown record {tag!r}")
            except (IndexError, ValueError) as exc:
                raise InvalidGeometryError(f"line {lineno}: {exc}") from exc
        return cls(np.array(nodes).reshape(-1, 2), np.array(tris, dtype=np.int64).reshape(-1, 3),
                   np.array(regions, dtype=np.int64), frozenset(bnd))

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TriMesh":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def make_trimesh_annulus_sector(n_radial: int, n_angular: int,
                                region_rule: Union[str, RegionRule] = "uniform",
                                r_inner: float = 0.5, r_outer: float = 1.0,
                                half_angle: float = math.pi / 4) -> TriMesh:
    """Triangulated sector ``r_inner <= r <= r_outer``, ``|theta| <= half_angle``.

    Each polar quad is split along the same diagonal, giving
    ``2 * n_radial * n_angular`` triangles. ``region_rule`` maps centroid
    polar coordinates ``(r, theta)`` to integer region ids.
    """
    if n_radial < 2 or n_angular < 4:
        raise InvalidDimensionError(f"need n_radial >= 2 and n_angular >= 4, got {n_radial}, {n_angular}")
    if not (r_inner > 0 and r_outer > r_inner and math.isfinite(r_outer)):
        raise InvalidGeometryError(f"degenerate radii r_inner={r_inner}, r_outer={r_outer}")
    if not 0 < half_angle < math.pi:
        raise InvalidGeometryError(f"half_angle must lie in (0, pi), got {half_angle}")
    rule = REGION_RULES[region_rule] if isinstance(region_rule, str) else region_rule

    r = np.linspace(r_inner, r_outer, n_radial + 1)
    th = np.linspace(-half_angle, half_angle, n_angular + 1)
    R, TH = np.meshgrid(r, th, indexing="ij")
    nodes = np.column_stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()])

    idx = np.arange((n_radial + 1) * (n_angular + 1)).reshape(n_radial + 1, n_angular + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])

    cen = nodes[tris].mean(axis=1)
    region = np.asarray(rule(np.hypot(cen[:, 0], cen[:, 1]), np.arctan2(cen[:, 1], cen[:, 0])), dtype=np.int64)

    bnd = set(idx[0].tolist()) | set(idx[-1].tolist()) | set(idx[:, 0].tolist()) | set(idx[:, -1].tolist())
    return TriMesh(nodes=nodes, triangles=tris, region_id=region, boundary_nodes=frozenset(bnd))
