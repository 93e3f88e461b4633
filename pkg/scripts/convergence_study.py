"""Grid-refinement study for the three reference solvers.

Prints the relative L2 error and observed order for the structured Darcy
solver, the graded Poisson solver, and the P1 magnetostatic solver, each on a
manufactured solution. Example::

    python scripts/convergence_study.py --levels 16 32 64 128
"""

import argparse
import math
import time

import numpy as np

from meshbench import solvers
from meshbench.meshkit import make_graded, make_structured, make_trimesh_annulus_sector
from meshbench.solvers import ConductivityField, SolverConfig

R_IN, R_OUT = 0.5, 1.0


def sine(x, y):
    return np.sin(math.pi * x) * np.sin(math.pi * y)


def darcy_error(n, mode):
    g = make_structured(n, n)
    x, y = g.cell_centers()
    p = solvers.solve_darcy(ConductivityField(g, np.ones(g.shape)), SolverConfig(mode=mode),
                            source=2 * math.pi ** 2 * sine(x, y))
    return np.linalg.norm(p.values - sine(x, y)) / np.linalg.norm(sine(x, y))


def graded_error(n, ratio16):
    # keep the grading map fixed under refinement: ratio ** (n / 16) constant
    grid = make_graded(n, n, ratio16 ** (16 / n))
    s, c = grid.cell_centers()
    p = solvers.solve_poisson_graded(grid, 2 * math.pi ** 2 * sine(s, c),
                                     SolverConfig(mode="stationary-iterative"))
    return np.linalg.norm(p.values - sine(s, c)) / np.linalg.norm(sine(s, c))


def fem_error(n):
    """Nodal relative error against a solution vanishing on the whole sector boundary."""
    half = math.pi / 4
    mesh = make_trimesh_annulus_sector(n, 2 * n, half_angle=half)

    def exact(x, y):
        r, th = np.hypot(x, y), np.arctan2(y, x)
        return (r - R_IN) * (R_OUT - r) * np.cos(2 * th)

    def load(x, y):
        r, th = np.hypot(x, y), np.arctan2(y, x)
        g = (r - R_IN) * (R_OUT - r)
        return -(-2 + (-2 * r + R_IN + R_OUT) / r - 4 * g / r ** 2) * np.cos(2 * th)

    a = solvers.solve_p1_poisson(mesh, np.ones(mesh.n_triangles), load, SolverConfig(tolerance=1e-12))
    u = exact(*mesh.nodes.T)
    return np.linalg.norm(a - u) / np.linalg.norm(u)


def report(name, levels, errors):
    print(f"\n{name}")
    for i, (n, e) in enumerate(zip(levels, errors)):
        order = "" if i == 0 else f"  order {math.log(errors[i - 1] / e) / math.log(n / levels[i - 1]):.3f}"
        print(f"  n={n:4d}  rel L2 {e:.4e}{order}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--levels", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--grading", type=float, default=1.3, help="cross ratio at 16 cells")
    args = p.parse_args()
    t0 = time.perf_counter()
    for mode in solvers.MODES:
        report(f"darcy ({mode})", args.levels, [darcy_error(n, mode) for n in args.levels])
    report(f"graded poisson (ratio {args.grading} at n=16)", args.levels,
           [graded_error(n, args.grading) for n in args.levels])
    fem_levels = [max(n // 2, 4) for n in args.levels]
    report("p1 magnetostatic", fem_levels, [fem_error(n) for n in fem_levels])
    print(f"\ntotal {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
