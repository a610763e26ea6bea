"""Recover a potential at a few events from noiseless DN data.

The calibration ratio compares the quadrature of q v0 v1..v4 with the
predicted stationary-phase value; it should be close to one.
"""
from waveprobe import geometry as G
from waveprobe import reconstruction as R

metric = G.minkowski(1)
domain = G.Domain(3.2, [(0.0, 1.0)])
q = R.BumpPotential((R.GaussianBump((1.6, 0.5), 0.1, 1.0),))
settings = R.ProbeSettings()
tau, eps = 80.0, 1e-3
grid = settings.grid(metric, domain, tau)

bundle = R.build_probe(metric, domain, (1.6, 0.5), tau, 40.0, 4, grid, settings)
cal = R.calibration(metric, q, bundle)
print(f"calibration ratio {abs(cal.ratio):.4f}")

print("\n  event          q       estimate   error")
for p0 in [(1.6, 0.5), (1.5, 0.4), (1.7, 0.6)]:
    r = R.recover_at(metric, domain, q, p0, eps, tau, 40.0, 4, grid, settings)
    print(f"  {p0!s:12s}  {r.q_true:.4f}   {r.estimate:.4f}    {r.abs_err:.4f}")
