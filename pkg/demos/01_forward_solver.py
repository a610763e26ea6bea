"""Forward problem: grid convergence of the leapfrog solver, then a semilinear solve.

Run with ``python demos/01_forward_solver.py``.
"""
import math

import numpy as np

from waveprobe import geometry as G
from waveprobe import wave_solver as W

metric = G.minkowski(1)
domain = G.Domain(1.0, [(0.0, 1.0)])

# u = sin(t) sin(pi x) solves  -u_tt + u_xx = (1 - pi^2) u  with zero lateral data.
print("manufactured solution, 1+1 Minkowski")
prev = None
for nx in (32, 64, 128):
    grid = W.SpacetimeGrid.for_metric(domain, nx, metric)
    P = grid.points()
    exact = np.sin(P[..., 0]) * np.sin(math.pi * P[..., 1])
    F = (1 - math.pi**2) * exact
    zero = np.zeros((grid.nt + 1, grid.sigma.size))
    u = W.solve_linear(metric, F, zero, None, np.sin(math.pi * grid.axes[0]), grid)
    err = float(np.max(np.abs(u.values - exact)))
    note = f"  ratio {prev / err:.3f}" if prev else ""
    print(f"  nx {nx:4d}  max error {err:.3e}{note}")
    prev = err

# Semilinear problem  box u + q u^4 = 0  driven by a small pulse entering from the left.
domain = G.Domain(3.2, [(0.0, 1.0)])
grid = W.SpacetimeGrid.for_metric(domain, 64, metric)
P = grid.points()
q = np.exp(-((P[..., 0] - 1.6) ** 2 + (P[..., 1] - 0.5) ** 2) / 0.1)
t = grid.sigma_points()[..., 0]
r = (t - 0.5) / 0.3
pulse = np.where(np.abs(r) < 1, np.exp(1 - 1 / np.maximum(1 - r**2, 1e-300)), 0.0)
data = W.LateralBoundaryData(grid, pulse * (grid.sigma.side == -1)[None, :])
data = data * (1e-2 / W.boundary_norm(metric, data))
u, rep = W.solve_semilinear(metric, q, 4, data, grid)
print("\nsemilinear solve with boundary data of norm 1e-2")
print(f"  Picard iterations {rep.iterations}, final residual {rep.residual:.2e}")
print(f"  contraction ratios {[f'{c:.1e}' for c in rep.contraction_ratios]}")
