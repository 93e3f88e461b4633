"""Sample sets: generation from the solvers, on-disk container, model views.

A set lives in one directory::

    manifest.json   UTF-8 metadata, format version "1"
    samples.bin     per sample: inputs, targets (little-endian float32), mask bytes
    mesh.txt        unstructured sets only (TriMesh text format)

All per-sample arrays share one spatial shape: ``(rows, cols)`` for grids and
``(n_nodes,)`` for triangle meshes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import solvers
from .errors import (ConvergenceError, FormatVersionError, GenerationError, InconsistentSetError, SetupError,
                     ShapeError, TruncatedPayloadError)
from .meshkit import TriMesh, make_graded, make_structured, make_trimesh_annulus_sector
from .trainer import GraphData, ImageData
from .transforms import grid_centers, grid_to_image, knn_graph, pack_unstructured, unroll_graded

FORMAT_VERSION = "1"
KINDS = {"darcy": "structured", "graded": "graded", "magnetostatic": "unstructured"}
STORE_DTYPE = np.dtype("<f4")

DEFAULT_PARAMS = {
    "darcy": {"res": 32, "k_low": 3.0, "k_high": 12.0, "smoothing": 2.0, "source": 1.0},
    "graded": {"n_stream": 32, "n_cross": 16, "ratio_min": 1.0, "ratio_max": 1.2,
               "length_min": 1.0, "length_max": 4.0, "source": 1.0},
    "magnetostatic": {"n_radial": 12, "n_angular": 24, "current_density": 3.0e4,
                      "iron_reluctivity": 1.0e-3, "magnet_reluctivity": 1.0 / 1.05},
}

# region ids of the motor-like layout
IRON, AIR, COIL, MAGNET = 0, 1, 2, 3
MATERIALS = ("iron", "air", "coil", "magnet")


@dataclass
class SampleSet:
    name: str
    kind: str
    inputs: np.ndarray            # (S, Cin, *shape) float32
    targets: np.ndarray           # (S, Cout, *shape) float32
    masks: np.ndarray             # (S, *shape) bool
    input_names: tuple
    target_names: tuple
    seeds: tuple                  # (first, last) inclusive
    params: dict = field(default_factory=dict)
    mesh: Optional[TriMesh] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SetupError(f"unknown dataset kind {self.kind!r}; expected one of {sorted(KINDS)}")
        self.inputs = np.ascontiguousarray(self.inputs, dtype=STORE_DTYPE)
        self.targets = np.ascontiguousarray(self.targets, dtype=STORE_DTYPE)
        self.masks = np.ascontiguousarray(self.masks, dtype=bool)
        s = len(self.inputs)
        if s == 0:
            raise InconsistentSetError("a sample set needs at least one sample")
        shape = self.masks.shape[1:]
        if (self.inputs.shape[2:] != shape or self.targets.shape[2:] != shape
                or len(self.targets) != s or len(self.masks) != s):
            raise InconsistentSetError(
                f"inputs {self.inputs.shape}, targets {self.targets.shape}, masks {self.masks.shape} disagree")
        if self.inputs.shape[1] != len(self.input_names) or self.targets.shape[1] != len(self.target_names):
            raise InconsistentSetError("channel names do not match array channels")
        if (self.topography == "unstructured") != (self.mesh is not None):
            raise InconsistentSetError("a mesh is stored exactly for unstructured sets")
        if self.mesh is not None and shape != (self.mesh.n_nodes,):
            raise InconsistentSetError(f"field shape {shape} does not match {self.mesh.n_nodes} mesh nodes")

    @property
    def topography(self):
        return KINDS[self.kind]

    @property
    def field_shape(self):
        return self.masks.shape[1:]

    def __len__(self):
        return len(self.inputs)

    def manifest(self):
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "kind": self.kind,
            "topography": self.topography,
            "count": len(self),
            "field_shape": list(self.field_shape),
            "inputs": list(self.input_names),
            "targets": list(self.target_names),
            "seeds": list(self.seeds),
            "dtype": "float32-le",
            "params": self.params,
        }

    def equals(self, other: "SampleSet") -> bool:
        """Bitwise comparison of payloads and manifest."""
        return (self.manifest() == other.manifest()
                and self.inputs.tobytes() == other.inputs.tobytes()
                and self.targets.tobytes() == other.targets.tobytes()
                and self.masks.tobytes() == other.masks.tobytes()
                and (self.mesh is None or self.mesh.to_text() == other.mesh.to_text()))

    # --- model views ------------------------------------------------------------

    def node_positions(self, i):
        """``(P, 2)`` coordinates of the field points of sample ``i``."""
        if self.kind == "darcy":
            return grid_centers(make_structured(*self.field_shape[::-1]))
        if self.kind == "graded":
            return np.column_stack([self.inputs[i, 0].ravel(), self.inputs[i, 1].ravel()]).astype(float)
        return self.mesh.nodes

    def image_size(self):
        """Smallest multiple of 16 that holds the field."""
        if self.topography == "unstructured":
            side = math.isqrt(self.field_shape[0] - 1) + 1
        else:
            side = max(self.field_shape)
        return 16 * math.ceil(side / 16)

    def to_image(self, target: Optional[int] = None) -> ImageData:
        target = target or self.image_size()
        xs, ys, ms = [], [], []
        for i in range(len(self)):
            if self.topography == "unstructured":
                xi = pack_unstructured(self.inputs[i].T.astype(float), target)
                yi = pack_unstructured(self.targets[i].T.astype(float), target)
            else:
                place = unroll_graded if self.kind == "graded" else grid_to_image
                xi = place(list(self.inputs[i].astype(float)), target)
                yi = place(list(self.targets[i].astype(float)), target)
            xs.append(xi.chw())
            ys.append(yi.chw())
            ms.append(xi.mask)
        return ImageData(np.stack(xs), np.stack(ys), np.stack(ms))

    def to_graph(self, k: int = 8) -> GraphData:
        """One k-NN graph per sample; node features are the inputs plus coordinates.

        Graded inputs already are coordinates, so they are used unchanged.
        """
        graphs, cache = [], None
        for i in range(len(self)):
            pos = self.node_positions(i)
            feat = self.inputs[i].reshape(len(self.inputs[i]), -1).T.astype(float)
            if self.kind != "graded":
                feat = np.column_stack([feat, pos])
            if self.kind == "graded" or cache is None:
                cache = knn_graph(pos, feat, k)
                graphs.append(cache)
            else:
                graphs.append(cache.with_features(feat))
        targets = self.targets.reshape(len(self), self.targets.shape[1], -1).transpose(0, 2, 1)
        return GraphData(graphs, targets.astype(float))


# --- generation ---------------------------------------------------------------------

def _params(kind, params):
    if kind not in KINDS:
        raise SetupError(f"unknown dataset kind {kind!r}; expected one of {sorted(KINDS)}")
    merged = dict(DEFAULT_PARAMS[kind])
    unknown = sorted(set(params or {}) - set(merged))
    if unknown:
        raise SetupError(f"unknown {kind} parameters: {unknown}")
    merged.update(params or {})
    return merged


def _solver_cfg():
    return solvers.SolverConfig(tolerance=1e-10, mode="stationary-iterative")


def motor_layout(seed: int, half_angle: float = math.pi / 4):
    """Seeded region rule plus current signs ``{region: +-1}``.

    Iron yoke and rotor, an air gap, one magnet and one coil slot. The magnet
    is an equivalent current region, which keeps the problem linear.
    """
    rng = np.random.default_rng([seed, 7])
    gap = rng.uniform(0.66, 0.72)
    magnet_centre = rng.uniform(-0.5, 0.5) * half_angle
    magnet_width = rng.uniform(0.15, 0.35) * half_angle
    coil_centre = rng.uniform(-0.5, 0.5) * half_angle
    coil_width = rng.uniform(0.15, 0.3) * half_angle
    coil_sign = float(rng.choice([-1.0, 1.0]))
    magnet_sign = float(rng.choice([-1.0, 1.0]))

    def rule(r, theta):
        region = np.full(np.shape(r), IRON, dtype=np.int64)
        region[(r > gap) & (r < gap + 0.04)] = AIR
        region[(r > gap - 0.08) & (r <= gap) & (np.abs(theta - magnet_centre) < magnet_width)] = MAGNET
        region[(r > 0.8) & (r < 0.93) & (np.abs(theta - coil_centre) < coil_width)] = COIL
        return region

    return rule, {COIL: coil_sign, MAGNET: magnet_sign}


def magnetostatic_mesh(p):
    return make_trimesh_annulus_sector(p["n_radial"], p["n_angular"])


def generate_sample(kind: str, seed: int, params=None):
    """``(inputs, targets, mask, extra)`` for one seed, as float32 arrays."""
    p = _params(kind, params)
    if kind == "darcy":
        grid = make_structured(p["res"], p["res"])
        K = solvers.generate_conductivity(grid, seed, p["k_low"], p["k_high"], p["smoothing"])
        pf = solvers.solve_darcy(K, _solver_cfg(), source=p["source"])
        x, y = K.values[None], pf.values[None]
        mask = np.ones(grid.shape, bool)
        extra = None
    elif kind == "graded":
        rng = np.random.default_rng([seed, 3])
        ratio = float(rng.uniform(p["ratio_min"], p["ratio_max"]))
        length = float(rng.uniform(p["length_min"], p["length_max"]))
        grid = make_graded(p["n_stream"], p["n_cross"], ratio, length)
        pf = solvers.solve_poisson_graded(grid, source=p["source"], cfg=_solver_cfg())
        s, c = grid.cell_centers()
        x, y = np.stack([s, c]), pf.values[None]
        mask = np.ones(grid.shape, bool)
        extra = None
    else:
        base = magnetostatic_mesh(p)
        rule, signs = motor_layout(seed)
        r = np.hypot(*base.centroids().T)
        theta = np.arctan2(base.centroids()[:, 1], base.centroids()[:, 0])
        mesh = TriMesh(base.nodes, base.triangles, rule(r, theta), base.boundary_nodes)
        nu = {IRON: p["iron_reluctivity"], AIR: 1.0, COIL: 1.0, MAGNET: p["magnet_reluctivity"]}
        setup = solvers.MagnetostaticSetup(mesh, {k: nu[k] for k in mesh.regions},
                                           {k: v * p["current_density"] for k, v in signs.items()})
        a = solvers.solve_magnetostatic(setup, _solver_cfg())
        bmag = solvers.triangles_to_nodes(mesh, solvers.flux_density(a).magnitude)
        onehot = [solvers.triangles_to_nodes(mesh, (mesh.region_id == m).astype(float)) for m in range(len(MATERIALS))]
        _, j = setup.per_triangle()
        current = solvers.triangles_to_nodes(mesh, j / p["current_density"])
        x, y = np.stack(onehot + [current]), bmag[None]
        mask = np.ones(mesh.n_nodes, bool)
        extra = base
    return x.astype(STORE_DTYPE), y.astype(STORE_DTYPE), mask, extra


CHANNELS = {
    "darcy": (("K",), ("p",)),
    "graded": (("stream", "cross"), ("p",)),
    "magnetostatic": (tuple(MATERIALS) + ("current",), ("B",)),
}


def generate_set(kind: str, n: int, base_seed: int = 0, params=None, name: Optional[str] = None) -> SampleSet:
    """``n`` independent solves with seeds ``base_seed .. base_seed + n - 1``."""
    if n < 1:
        raise SetupError(f"need at least one sample, got n={n}")
    p = _params(kind, params)
    xs, ys, ms, mesh = [], [], [], None
    for seed in range(base_seed, base_seed + n):
        try:
            x, y, m, extra = generate_sample(kind, seed, p)
        except (ConvergenceError, SetupError, FloatingPointError) as exc:
            raise GenerationError(seed, exc) from exc
        xs.append(x)
        ys.append(y)
        ms.append(m)
        mesh = extra if extra is not None else mesh
    ins, outs = CHANNELS[kind]
    return SampleSet(name or f"{kind}-{n}", kind, np.stack(xs), np.stack(ys), np.stack(ms),
                     ins, outs, (base_seed, base_seed + n - 1), p, mesh)


# --- persistence --------------------------------------------------------------------

def write_set(sset: SampleSet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(sset.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(path / "samples.bin", "wb") as fh:
        for i in range(len(sset)):
            fh.write(sset.inputs[i].astype(STORE_DTYPE).tobytes())
            fh.write(sset.targets[i].astype(STORE_DTYPE).tobytes())
            fh.write(sset.masks[i].astype(np.uint8).tobytes())
    if sset.mesh is not None:
        sset.mesh.save(path / "mesh.txt")
    return path


def read_set(path) -> SampleSet:
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        man = json.load(fh)
    version = man.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version!r}, expected {FORMAT_VERSION!r}")
    try:
        kind, count = man["kind"], int(man["count"])
        shape = tuple(int(s) for s in man["field_shape"])
        cin, cout = len(man["inputs"]), len(man["targets"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InconsistentSetError(f"{path}: malformed manifest ({exc})") from exc
    if KINDS.get(kind) != man.get("topography"):
        raise InconsistentSetError(f"{path}: kind {kind!r} does not match topography {man.get('topography')!r}")
    points = int(np.prod(shape))
    record = 4 * (cin + cout) * points + points
    payload = (path / "samples.bin").read_bytes()
    if len(payload) % record:
        raise TruncatedPayloadError(
            f"{path}: payload of {len(payload)} bytes is not a whole number of {record}-byte records")
    if len(payload) // record != count:
        raise InconsistentSetError(f"{path}: manifest declares {count} samples, payload holds {len(payload) // record}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, record)
    nf = 4 * cin * points
    nt = 4 * cout * points
    inputs = raw[:, :nf].copy().view(STORE_DTYPE).reshape((count, cin) + shape)
    targets = raw[:, nf:nf + nt].copy().view(STORE_DTYPE).reshape((count, cout) + shape)
    mask_bytes = raw[:, nf + nt:]
    if np.any(mask_bytes > 1):
        raise InconsistentSetError(f"{path}: mask bytes must be 0 or 1")
    masks = mask_bytes.astype(bool).reshape((count,) + shape)
    mesh = TriMesh.load(path / "mesh.txt") if KINDS[kind] == "unstructured" else None
    try:
        return SampleSet(man["name"], kind, inputs, targets, masks, tuple(man["inputs"]),
                         tuple(man["targets"]), tuple(man["seeds"]), man.get("params", {}), mesh)
    except ShapeError as exc:
        raise InconsistentSetError(str(exc)) from exc
