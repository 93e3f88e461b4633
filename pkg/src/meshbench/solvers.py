"""Ground-truth solvers for the three mesh topographies.

* ``solve_darcy``: steady ``-div(K grad p) = f`` on a uniform cell grid,
  conservative 5-point finite volumes, reached either by explicit
  pseudo-time marching or by red-black SOR sweeps.
* ``solve_poisson_graded``: ``-lap p = f`` on a wall-graded channel with the
  3-point nonuniform central stencil on each axis.
* ``solve_magnetostatic``: P1 finite elements for the 2-D vector potential,
  ``-div(nu grad A_z) = mu0 J_z``, solved with Jacobi-preconditioned CG.

All problems use homogeneous Dirichlet data. On cell grids the wall value is
imposed through a mirrored ghost cell (``p_ghost = -p``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import gaussian_filter

from .errors import ConvergenceError, SetupError, ShapeError
from .meshkit import GradedGrid, StructuredGrid, TriMesh

log = logging.getLogger(__name__)

MU0 = 4e-7 * math.pi
MODES = ("pseudo-transient", "stationary-iterative")


@dataclass(frozen=True)
class SolverConfig:
    source: float = 1.0
    tolerance: float = 1e-8
    max_iters: int = 200_000
    mode: str = "pseudo-transient"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise SetupError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iters < 1:
            raise SetupError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mode not in MODES:
            raise SetupError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class ScalarField:
    """One value per cell (grids) or per node (triangle meshes)."""

    mesh: object
    values: np.ndarray
    quantity: str = "p"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        expected = _field_shape(self.mesh)
        if v.shape != expected:
            raise ShapeError(f"field shape {v.shape} does not match mesh shape {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _field_shape(mesh):
    if isinstance(mesh, TriMesh):
        return (mesh.n_nodes,)
    return mesh.shape


@dataclass(frozen=True)
class ConductivityField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ShapeError(f"conductivity shape {v.shape} does not match grid {self.grid.shape}")
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise SetupError("conductivity must be positive and finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def generate_conductivity(grid: StructuredGrid, seed: int, k_low: float = 3.0,
                          k_high: float = 12.0, smoothing: float = 2.0) -> ConductivityField:
    """Two-phase medium: seeded Gaussian noise, optionally smoothed, cut at its median."""
    if not (k_low > 0 and k_high > k_low):
        raise SetupError(f"need 0 < k_low < k_high, got {k_low}, {k_high}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape)
    if smoothing > 0:
        noise = gaussian_filter(noise, sigma=smoothing, mode="reflect")
    values = np.where(noise > np.median(noise), k_high, k_low)
    return ConductivityField(grid, values)


# --- 5-point stencil machinery ---------------------------------------------

@dataclass
class Stencil5:
    """``(A p)_P = cP p_P - cS p_S - cN p_N - cW p_W - cE p_E``.

    Rows are axis 0 (S/N neighbours), columns axis 1 (W/E). Neighbour
    coefficients pointing outside the domain are zero; Dirichlet ghost
    contributions are already folded into ``cP``.
    """

    cP: np.ndarray
    cS: np.ndarray
    cN: np.ndarray
    cW: np.ndarray
    cE: np.ndarray

    def apply(self, p):
        out = self.cP * p
        out[1:, :] -= self.cS[1:, :] * p[:-1, :]
        out[:-1, :] -= self.cN[:-1, :] * p[1:, :]
        out[:, 1:] -= self.cW[:, 1:] * p[:, :-1]
        out[:, :-1] -= self.cE[:, :-1] * p[:, 1:]
        return out

    def neighbour_sum(self, p):
        out = np.zeros_like(p)
        out[1:, :] += self.cS[1:, :] * p[:-1, :]
        out[:-1, :] += self.cN[:-1, :] * p[1:, :]
        out[:, 1:] += self.cW[:, 1:] * p[:, :-1]
        out[:, :-1] += self.cE[:, :-1] * p[:, 1:]
        return out

    def gershgorin(self):
        return float(np.max(self.cP + self.cS + self.cN + self.cW + self.cE))

    def to_sparse(self):
        n0, n1 = self.cP.shape
        idx = np.arange(n0 * n1).reshape(n0, n1)
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [self.cP.ravel()]
        for coef, sl_p, sl_n in (
            (self.cS, np.s_[1:, :], np.s_[:-1, :]),
            (self.cN, np.s_[:-1, :], np.s_[1:, :]),
            (self.cW, np.s_[:, 1:], np.s_[:, :-1]),
            (self.cE, np.s_[:, :-1], np.s_[:, 1:]),
        ):
            rows.append(idx[sl_p].ravel())
            cols.append(idx[sl_n].ravel())
            vals.append(-coef[sl_p].ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n0 * n1, n0 * n1))


def _residual(st: Stencil5, p, f):
    return f - st.apply(p)


def _pseudo_transient(st: Stencil5, f, dt, cfg: SolverConfig):
    p = np.zeros_like(f)
    res = np.inf
    for it in range(1, cfg.max_iters + 1):
        r = _residual(st, p, f)
        res = float(np.max(np.abs(r)))
        if res <= cfg.tolerance:
            return p, res, it - 1
        p += dt * r
    r = _residual(st, p, f)
    res = float(np.max(np.abs(r)))
    if res <= cfg.tolerance:
        return p, res, cfg.max_iters
    raise ConvergenceError("pseudo-transient march did not reach steady state", res, cfg.max_iters)


def _red_black_sor(st: Stencil5, f, cfg: SolverConfig, omega=None):
    n0, n1 = f.shape
    if omega is None:
        omega = 2.0 / (1.0 + math.sin(math.pi / max(n0, n1)))
    ii, jj = np.indices(f.shape)
    colors = [(ii + jj) % 2 == 0, (ii + jj) % 2 == 1]
    inv_cp = 1.0 / st.cP
    p = np.zeros_like(f)

    def relax(mask):
        gs = (f + st.neighbour_sum(p)) * inv_cp
        p[mask] += omega * (gs[mask] - p[mask])

    res = float(np.max(np.abs(f)))
    for it in range(cfg.max_iters):
        if res <= cfg.tolerance:
            return p, res, it
        relax(colors[0])
        relax(colors[1])
        res = float(np.max(np.abs(_residual(st, p, f))))
    if res <= cfg.tolerance:
        return p, res, cfg.max_iters
    raise ConvergenceError("red-black SOR sweeps did not converge", res, cfg.max_iters)


def _solve_stencil(st: Stencil5, f, cfg: SolverConfig, dt):
    if cfg.mode == "pseudo-transient":
        p, res, its = _pseudo_transient(st, f, dt, cfg)
    else:
        p, res, its = _red_black_sor(st, f, cfg)
    log.debug("%s converged: residual %.3e in %d iterations", cfg.mode, res, its)
    return p


# --- Darcy on a structured grid ---------------------------------------------

def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def darcy_stencil(K: ConductivityField, insulated_y: bool = False) -> Stencil5:
    """Conservative finite-volume operator for ``-div(K grad p)``.

    Face conductivities are harmonic means; wall faces sit half a cell away
    from the centre and use the cell's own conductivity. ``insulated_y``
    replaces the y-walls (first/last rows) with zero-flux walls.
    """
    k = K.values
    hx, hy = K.grid.hx, K.grid.hy
    cS = np.zeros_like(k)
    cN = np.zeros_like(k)
    cW = np.zeros_like(k)
    cE = np.zeros_like(k)
    fy = _harmonic(k[:-1, :], k[1:, :]) / hy**2
    fx = _harmonic(k[:, :-1], k[:, 1:]) / hx**2
    cN[:-1, :] = fy
    cS[1:, :] = fy
    cE[:, :-1] = fx
    cW[:, 1:] = fx
    cP = cS + cN + cW + cE
    cP[:, 0] += 2.0 * k[:, 0] / hx**2
    cP[:, -1] += 2.0 * k[:, -1] / hx**2
    if not insulated_y:
        cP[0, :] += 2.0 * k[0, :] / hy**2
        cP[-1, :] += 2.0 * k[-1, :] / hy**2
    return Stencil5(cP, cS, cN, cW, cE)


def _source_array(source, shape, default):
    if source is None:
        return np.full(shape, float(default))
    if isinstance(source, ScalarField):
        source = source.values
    f = np.array(source, dtype=float)
    if f.ndim == 0:
        return np.full(shape, float(f))
    if f.shape != shape:
        raise ShapeError(f"source shape {f.shape} does not match mesh shape {shape}")
    return f


def darcy_time_step(K: ConductivityField) -> float:
    """Explicit stability bound ``h^2 / (4 max K)``."""
    h = min(K.grid.hx, K.grid.hy)
    return h * h / (4.0 * float(np.max(K.values)))


def solve_darcy(K: ConductivityField, cfg: SolverConfig = SolverConfig(), source=None,
                insulated_y: bool = False) -> ScalarField:
    """Steady Darcy pressure with ``p = 0`` on the walls.

    ``source`` overrides the constant ``cfg.source`` with a per-cell array.
    """
    st = darcy_stencil(K, insulated_y=insulated_y)
    f = _source_array(source, K.grid.shape, cfg.source)
    p = _solve_stencil(st, f, cfg, darcy_time_step(K))
    return ScalarField(K.grid, p, "p")


def darcy_residual(K: ConductivityField, p, source=1.0, insulated_y=False):
    st = darcy_stencil(K, insulated_y=insulated_y)
    values = p.values if isinstance(p, ScalarField) else p
    return _residual(st, values, _source_array(source, K.grid.shape, 1.0))


def darcy_face_fluxes(K: ConductivityField, p):
    """Outward fluxes through the four faces of every cell (per unit depth).

    Returns ``(south, north, west, east)`` arrays, each ``(ny, nx)``.
    """
    k = K.values
    v = p.values if isinstance(p, ScalarField) else np.asarray(p)
    hx, hy = K.grid.hx, K.grid.hy
    south = np.empty_like(v)
    north = np.empty_like(v)
    west = np.empty_like(v)
    east = np.empty_like(v)
    ky = _harmonic(k[:-1, :], k[1:, :])
    kx = _harmonic(k[:, :-1], k[:, 1:])
    # outward flux = K_face * (p_P - p_nb) / distance * face_length
    north[:-1, :] = ky * (v[:-1, :] - v[1:, :]) / hy * hx
    south[1:, :] = ky * (v[1:, :] - v[:-1, :]) / hy * hx
    east[:, :-1] = kx * (v[:, :-1] - v[:, 1:]) / hx * hy
    west[:, 1:] = kx * (v[:, 1:] - v[:, :-1]) / hx * hy
    south[0, :] = k[0, :] * v[0, :] / (hy / 2) * hx
    north[-1, :] = k[-1, :] * v[-1, :] / (hy / 2) * hx
    west[:, 0] = k[:, 0] * v[:, 0] / (hx / 2) * hy
    east[:, -1] = k[:, -1] * v[:, -1] / (hx / 2) * hy
    return south, north, west, east


# --- Poisson on a graded channel --------------------------------------------

def _nonuniform_axis(spacings):
    """Per-cell ``(c_prev, c_next, c_diag)`` of ``-d2/dx2`` on cell centres.

    Interior: ``p'' = 2 [h+ p[i-1] - (h- + h+) p[i] + h- p[i+1]] / [h- h+ (h- + h+)]``.
    At a wall the mirrored ghost sits one wall-cell width away.
    """
    s = np.asarray(spacings, dtype=float)
    gaps = 0.5 * (s[:-1] + s[1:])
    hm = np.concatenate([[s[0]], gaps])
    hp = np.concatenate([gaps, [s[-1]]])
    c_prev = 2.0 / (hm * (hm + hp))
    c_next = 2.0 / (hp * (hm + hp))
    diag = c_prev + c_next
    # ghost value is -p[i]: its coefficient moves onto the diagonal
    diag[0] += c_prev[0]
    diag[-1] += c_next[-1]
    c_prev = c_prev.copy()
    c_next = c_next.copy()
    c_prev[0] = 0.0
    c_next[-1] = 0.0
    return c_prev, c_next, diag


def graded_stencil(grid: GradedGrid) -> Stencil5:
    sp_, sn_, sd_ = _nonuniform_axis(grid.stream_spacings)
    cp_, cn_, cd_ = _nonuniform_axis(grid.cross_spacings)
    shape = grid.shape
    cS = np.broadcast_to(sp_[:, None], shape).copy()
    cN = np.broadcast_to(sn_[:, None], shape).copy()
    cW = np.broadcast_to(cp_[None, :], shape).copy()
    cE = np.broadcast_to(cn_[None, :], shape).copy()
    cP = sd_[:, None] + cd_[None, :]
    return Stencil5(cP, cS, cN, cW, cE)


def solve_poisson_graded(grid: GradedGrid, source=None, cfg: SolverConfig = SolverConfig()) -> ScalarField:
    """``-lap p = f`` with ``p = 0`` on all four channel walls."""
    st = graded_stencil(grid)
    f = _source_array(source, grid.shape, cfg.source)
    dt = 1.9 / st.gershgorin()
    p = _solve_stencil(st, f, cfg, dt)
    return ScalarField(grid, p, "p")


# --- P1 finite elements -------------------------------------------------------

def p1_gradients(mesh: TriMesh):
    """Triangle areas ``(M,)`` and basis-function gradients ``(M, 3, 2)``."""
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    # grad phi_i = (y_j - y_k, x_k - x_j) / (2 area), (i, j, k) cyclic
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    grads = np.stack([b, c], axis=2) / (2.0 * area)[:, None, None]
    return area, grads


def assemble_stiffness(mesh: TriMesh, coef_per_triangle) -> sp.csr_matrix:
    area, g = p1_gradients(mesh)
    coef = np.broadcast_to(np.asarray(coef_per_triangle, dtype=float), area.shape)
    ke = (coef * area)[:, None, None] * np.einsum("mik,mjk->mij", g, g)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()


# edge-midpoint rule, exact for quadratics
_MID_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


def assemble_load(mesh: TriMesh, load: Union[Callable, np.ndarray, float]) -> np.ndarray:
    """``b_i = int f phi_i``. ``load`` is a per-triangle constant array or a callable ``f(x, y)``."""
    area, _ = p1_gradients(mesh)
    n = mesh.n_nodes
    b = np.zeros(n)
    if callable(load):
        pts = np.einsum("qk,mkd->mqd", _MID_BARY, mesh.nodes[mesh.triangles])
        fq = load(pts[..., 0], pts[..., 1])
        contrib = area[:, None] / 3.0 * np.einsum("mq,qk->mk", fq, _MID_BARY)
    else:
        vals = np.broadcast_to(np.asarray(load, dtype=float), area.shape)
        contrib = np.repeat((vals * area / 3.0)[:, None], 3, axis=1)
    np.add.at(b, mesh.triangles.ravel(), contrib.ravel())
    return b


def conjugate_gradient(A, b, tol=1e-8, max_iters=200_000, callback=None, precondition=True):
    """Jacobi-preconditioned CG; stops on ``||b - A x|| <= tol * ||b||``.

    ``callback(x)`` sees every iterate.
    """
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0
    inv_d = 1.0 / A.diagonal() if precondition else np.ones_like(b)
    r = b.copy()
    z = inv_d * r
    d = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        Ad = A @ d
        alpha = rz / float(d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        if callback is not None:
            callback(x)
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = inv_d * r
        rz_new = float(r @ z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    res = float(np.linalg.norm(b - A @ x)) / bnorm
    raise ConvergenceError("conjugate gradient did not converge", res, max_iters)


def solve_p1_poisson(mesh: TriMesh, coef_per_triangle, load, cfg: SolverConfig = SolverConfig(),
                     callback=None) -> np.ndarray:
    """Nodal solution of ``-div(coef grad u) = load`` with ``u = 0`` on boundary nodes."""
    if not mesh.boundary_nodes:
        raise SetupError("no Dirichlet nodes: the stiffness matrix is singular")
    A = assemble_stiffness(mesh, coef_per_triangle)
    b = assemble_load(mesh, load)
    free = ~mesh.boundary_mask()
    if not free.any():
        return np.zeros(mesh.n_nodes)
    Aff = A[free][:, free]
    u = np.zeros(mesh.n_nodes)
    u[free], _ = conjugate_gradient(Aff, b[free], tol=cfg.tolerance, max_iters=cfg.max_iters,
                                    callback=callback)
    return u


@dataclass(frozen=True)
class MagnetostaticSetup:
    """``reluctivity`` holds relative values ``1 / mu_r`` per region id."""

    mesh: TriMesh
    reluctivity: Mapping[int, float]
    current_density: Mapping[int, float] = field(default_factory=dict)
    mu0: float = MU0

    def __post_init__(self):
        missing = [r for r in self.mesh.regions if r not in self.reluctivity]
        if missing:
            raise SetupError(f"no reluctivity for regions {missing}")
        bad = [r for r in self.mesh.regions if not self.reluctivity[r] > 0]
        if bad:
            raise SetupError(f"reluctivity must be positive, regions {bad}")
        if not self.mesh.boundary_nodes:
            raise SetupError("no Dirichlet nodes: the stiffness matrix is singular")

    def per_triangle(self):
        rid = self.mesh.region_id
        nu = np.array([self.reluctivity[r] for r in rid.tolist()])
        j = np.array([self.current_density.get(r, 0.0) for r in rid.tolist()])
        return nu, j


def solve_magnetostatic(setup: MagnetostaticSetup, cfg: SolverConfig = SolverConfig()) -> ScalarField:
    nu, j = setup.per_triangle()
    a = solve_p1_poisson(setup.mesh, nu, setup.mu0 * j, cfg)
    return ScalarField(setup.mesh, a, "A_z")


@dataclass(frozen=True)
class FluxDensity:
    bx: np.ndarray
    by: np.ndarray

    @property
    def magnitude(self):
        return np.hypot(self.bx, self.by)


def flux_density(A: ScalarField) -> FluxDensity:
    """Per-triangle ``B = (dA/dy, -dA/dx)`` from the P1 gradient."""
    mesh = A.mesh
    if not isinstance(mesh, TriMesh):
        raise ShapeError("flux density needs a field on a TriMesh")
    _, g = p1_gradients(mesh)
    grad = np.einsum("mi,mid->md", A.values[mesh.triangles], g)
    return FluxDensity(bx=grad[:, 1], by=-grad[:, 0])


def triangles_to_nodes(mesh: TriMesh, values) -> np.ndarray:
    """Area-weighted average of per-triangle values onto nodes."""
    area, _ = p1_gradients(mesh)
    num = np.zeros(mesh.n_nodes)
    den = np.zeros(mesh.n_nodes)
    w = np.repeat(area[:, None], 3, axis=1).ravel()
    np.add.at(num, mesh.triangles.ravel(), (w * np.repeat(np.asarray(values, float), 3)))
    np.add.at(den, mesh.triangles.ravel(), w)
    return num / den
