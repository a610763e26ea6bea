"""Command line front end: ``waveprobe {forward,beam,identity,reconstruct,sweep}``.

Exit codes: 0 success, 2 configuration error (including an unstable
time step), 3 numerical failure.
"""
import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import check_grid, load_config
from .errors import CFLError, ConfigError, WaveprobeError
from .gaussian_beam import beam_lp_norm, beam_residual, beam_through, conjugate_beam, correct_beam
from .geometry import null_vector
from .linearization import identity_evaluate
from .reconstruction import (
    NoiseModel,
    build_probe,
    calibration,
    optimal_params,
    recover_at,
    recovery_set,
    stability_sweep,
)
from .wave_solver import (
    LateralBoundaryData,
    boundary_norm,
    solve_linear,
    solve_semilinear,
)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

HELP = {
    "forward": (
        "Solve the semilinear problem with configured lateral data.\n\n"
        "outputs:\n"
        "  solution.csv     t, x1.., re, im for every grid node\n"
        "  report.json      iterations, residual history, contraction ratios, CFL number\n"
        "  convergence.csv  (data = \"manufactured\") nx, max_error, ratio"
    ),
    "beam": (
        "Build Gaussian beams along one null geodesic over a frequency ladder.\n\n"
        "outputs:\n"
        "  residual_ladder.csv  tau, nx, residual_l2, l4_norm, correction_ratio\n"
        "  beam_dump.csv        t, x1.., s, y1.., re, im on tube nodes (first tau)\n"
        "  summary.json         fitted residual slope"
    ),
    "identity": (
        "Evaluate both sides of the integral identity at the probe points.\n\n"
        "outputs:\n"
        "  identity.csv  probe_id, t, x1.., eps, tau, lhs_re, lhs_im, rhs_boundary_re,\n"
        "                rhs_boundary_im, rhs_remainder_re, rhs_remainder_im, discrepancy,\n"
        "                expansion_remainder; with probe.eps_ladder a row\n"
        "                probe_id = slope:<id> holds the fitted remainder slope"
    ),
    "reconstruct": (
        "Recover q at the reconstruction points from DN data of the configured potential.\n\n"
        "outputs:\n"
        "  qhat.csv          point_id, t, x1.., q_true, qhat_re, qhat_im, abs_err, status\n"
        "                    (abs_err = |qhat_re - q_true|; the potential is real)\n"
        "  calibration.json  quadrature-to-prediction ratio at the first point"
    ),
    "sweep": (
        "Stability sweep over the noise ladder sweep.deltas.\n\n"
        "outputs:\n"
        "  sweep.csv     delta, eps, tau, point_id, q_true, qhat_re, qhat_im, abs_err\n"
        "                (abs_err = |qhat_re - q_true|)\n"
        "  summary.json  fitted slope with 95% band, R^2, sigma(s,m,n), config hash"
    ),
}


# --------------------------------------------------------------------------
# subcommands


def _smooth_pulse(t, center, width):
    r = (np.asarray(t) - center) / width
    out = np.zeros_like(r, dtype=float)
    inside = np.abs(r) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - r[inside] ** 2))
    return out


def cmd_forward(cfg, out, jobs=1):
    opts = cfg.sections["forward"]
    grid = check_grid(cfg)
    if opts["data"] == "manufactured":
        return _manufactured(cfg, out)
    q = cfg.potential(grid.points())
    shape = (grid.nt + 1, grid.sigma.size)
    if opts["data"] == "zero":
        data = LateralBoundaryData(grid, np.zeros(shape))
    else:
        prof = _smooth_pulse(grid.t, opts["pulse_center"], opts["pulse_width"])
        data = LateralBoundaryData(grid, np.repeat(prof[:, None], shape[1], axis=1))
        nrm = boundary_norm(cfg.metric, data)
        data = data * (opts["amplitude"] / nrm if nrm > 0 else 0.0)
    u, rep = solve_semilinear(cfg.metric, q, opts["m"], data, grid, **cfg.solver_options())
    io.write_csv(out / "solution.csv", io.field_header(grid.n), io.field_rows(grid, u.values))
    io.write_json(
        out / "report.json",
        {
            "iterations": rep.iterations,
            "residual": rep.residual,
            "residual_history": rep.residual_history,
            "contraction_ratios": rep.contraction_ratios,
            "norm_history": rep.norm_history,
            "cfl": rep.cfl,
            "boundary_norm": rep.boundary_norm,
            "grid": grid.describe(),
            "config_hash": io.config_hash(cfg.raw),
        },
    )
    return rep


def _manufactured(cfg, out):
    """Convergence table for ``u = sin t prod sin(k_i (x_i - lo_i))`` in flat space."""
    if not cfg.metric.name.startswith("minkowski"):
        raise ConfigError("forward.data: the manufactured solution needs the minkowski metric")
    ks = [math.pi / (hi - lo) for lo, hi in cfg.domain.bounds]
    los = [lo for lo, _ in cfg.domain.bounds]
    rows = []
    prev = None
    for level in range(cfg.sections["forward"]["refinements"] + 1):
        grid = check_grid(cfg, cfg.grid["nx"] * 2**level)
        P = grid.points()
        spatial = np.ones(grid.shape)
        for i, (k, lo) in enumerate(zip(ks, los)):
            spatial = spatial * np.sin(k * (P[..., i + 1] - lo))
        exact = np.sin(P[..., 0]) * spatial
        F = (1 - sum(k * k for k in ks)) * exact
        u1 = spatial[0]
        zero = np.zeros((grid.nt + 1, grid.sigma.size))
        u = solve_linear(cfg.metric, F, zero, None, u1, grid)
        err = float(np.max(np.abs(u.values - exact)))
        rows.append((grid.nx[0], err, prev / err if prev else float("nan")))
        prev = err
    io.write_csv(out / "convergence.csv", ["nx", "max_error", "ratio"], rows)
    return rows


def _fit_slope(x, y):
    """Log-log slope over the positive entries; NaN with fewer than two."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(y) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def cmd_beam(cfg, out, jobs=1):
    opts = cfg.sections["beam"]
    if not opts["point"]:
        raise ConfigError("beam.point: required")
    metric, domain = cfg.metric, cfg.domain
    point = np.array(opts["point"])
    vel = null_vector(metric, point, np.array(opts["direction"]), future=True)
    H0 = 1j * opts["beam_width"] * np.eye(domain.n)
    rows = []
    for k, tau in enumerate(opts["taus"]):
        nx = max(16, int(math.ceil(opts["nodes_per_wavelength"] * tau / (4 * math.pi)
                                   * max(hi - lo for lo, hi in domain.bounds))))
        grid = check_grid(cfg, nx)
        beam = beam_through(metric, domain, point, vel, tau, opts["cutoff"], H0=H0)
        if opts["conjugate"]:
            beam = conjugate_beam(beam)
        _, res = beam_residual(beam, grid)
        l4 = beam_lp_norm(beam, grid, 4)
        ratio = float("nan")
        if opts["correction"] != "none":
            ratio = correct_beam(beam, "forward", grid, residual=opts["correction"]).ratio()
        rows.append((tau, nx, res, l4, ratio))
        if k == 0:
            s, y, inside = beam._grid_coords(grid)
            vals = beam.on_grid(grid).values
            P = grid.points()
            dump = []
            for idx in zip(*np.nonzero(inside)):
                dump.append(tuple(P[idx]) + (s[idx],) + tuple(y[idx]) + (vals[idx].real, vals[idx].imag))
            header = ["t"] + [f"x{i + 1}" for i in range(domain.n)] + ["s"] + [f"y{i + 1}" for i in range(domain.n)]
            io.write_csv(out / "beam_dump.csv", header + ["re", "im"], dump)
    io.write_csv(out / "residual_ladder.csv", ["tau", "nx", "residual_l2", "l4_norm", "correction_ratio"], rows)
    slope = _fit_slope([r[0] for r in rows], [r[2] for r in rows])
    io.write_json(
        out / "summary.json",
        {
            # an identically zero residual (flat 1+1) has no log-slope
            "residual_slope": slope if math.isfinite(slope) else "undefined",
            "max_residual": max(r[2] for r in rows),
            "l4_spread": max(r[3] for r in rows) / min(r[3] for r in rows),
            "config_hash": io.config_hash(cfg.raw),
        },
    )
    return rows


def _probe_parameters(cfg):
    p = cfg.sections["probe"]
    tau, eps = p["tau"], p["eps"]
    if tau == "optimal" or eps == "optimal":
        prm = optimal_params(p["m"], p["s"], cfg.n, p["delta"], p["M"], p["kappa"], p["tau0"])
        tau = prm.tau if tau == "optimal" else tau
        eps = prm.eps if eps == "optimal" else eps
    return float(eps), float(tau)


def cmd_identity(cfg, out, jobs=1):
    p = cfg.sections["probe"]
    points = p["points"]
    if not points:
        raise ConfigError("probe.points: at least one probe point is required")
    eps, tau = _probe_parameters(cfg)
    settings = cfg.probe_settings()
    grid = settings.grid(cfg.metric, cfg.domain, tau)
    q = cfg.potential(grid.points())
    rows = []
    n = cfg.n
    for pid, pt in enumerate(points):
        bundle = build_probe(cfg.metric, cfg.domain, pt, tau, p["tau0"], p["m"], grid, settings)
        ladder = list(p["eps_ladder"]) or [eps]
        rems = []
        for e in ladder:
            ev = identity_evaluate(cfg.metric, q, bundle.v0, bundle.probe(e), grid,
                                   with_expansion=bool(p["eps_ladder"]), jobs=jobs)
            rems.append(abs(ev.expansion_remainder))
            rows.append((pid,) + tuple(pt) + (e, tau, ev.lhs.real, ev.lhs.imag, ev.rhs_boundary.real,
                                             ev.rhs_boundary.imag, ev.rhs_remainder.real, ev.rhs_remainder.imag,
                                             ev.discrepancy, abs(ev.expansion_remainder)))
        if p["eps_ladder"]:
            slope = _fit_slope(ladder, rems)
            rows.append((f"slope:{pid}",) + ("",) * (n + 1) + ("",) * 9 + (slope,))
    header = (["probe_id", "t"] + [f"x{i + 1}" for i in range(n)]
              + ["eps", "tau", "lhs_re", "lhs_im", "rhs_boundary_re", "rhs_boundary_im", "rhs_remainder_re",
                 "rhs_remainder_im", "discrepancy", "expansion_remainder"])
    io.write_csv(out / "identity.csv", header, rows)
    return rows


class _AllFailed(WaveprobeError):
    pass


def cmd_reconstruct(cfg, out, jobs=1):
    p = cfg.sections["probe"]
    points = cfg.sections["reconstruct"]["points"] or p["points"]
    if not points:
        raise ConfigError("reconstruct.points: at least one point is required")
    eps, tau = _probe_parameters(cfg)
    settings = cfg.probe_settings()
    grid = settings.grid(cfg.metric, cfg.domain, tau)
    inside = {tuple(x) for x in recovery_set(cfg.metric, cfg.domain, points)}
    rows = []
    ok = 0
    calib = None
    for pid, pt in enumerate(points):
        qt = float(cfg.potential(np.array([pt]))[0])
        if tuple(pt) not in inside:
            rows.append((pid,) + tuple(pt) + (qt, "", "", "", "outside recovery set"))
            continue
        try:
            r = recover_at(cfg.metric, cfg.domain, cfg.potential, pt, eps, tau, p["tau0"], p["m"], grid, settings)
        except WaveprobeError as exc:
            rows.append((pid,) + tuple(pt) + (qt, "", "", "", f"failed: {exc}"))
            continue
        if calib is None and abs(qt) > 0:
            bundle = build_probe(cfg.metric, cfg.domain, pt, tau, p["tau0"], p["m"], grid, settings)
            c = calibration(cfg.metric, cfg.potential, bundle)
            calib = {"point": list(pt), "tau": tau, "ratio": c.ratio, "ratio_literal_constant": c.ratio_literal,
                     "literal_offset": c.offset}
        ok += 1
        rows.append((pid,) + tuple(pt) + (qt, r.q_hat.real, r.q_hat.imag, r.abs_err, "ok"))
    header = ["point_id", "t"] + [f"x{i + 1}" for i in range(cfg.n)] + ["q_true", "qhat_re", "qhat_im", "abs_err",
                                                                        "status"]
    io.write_csv(out / "qhat.csv", header, rows)
    io.write_json(out / "calibration.json", calib or {})
    if ok == 0:
        raise _AllFailed("recovery failed at every point")
    return rows


def cmd_sweep(cfg, out, jobs=1):
    sw = cfg.sections["sweep"]
    if not sw["deltas"]:
        raise ConfigError("sweep.deltas: at least one noise level is required")
    points = sw["points"] or cfg.sections["reconstruct"]["points"] or cfg.sections["probe"]["points"]
    if not points:
        raise ConfigError("sweep.points: at least one point is required")
    scenario = cfg.scenario(points)
    noise = NoiseModel(sw["noise_seed"]) if sw["noise"] else None
    rep = stability_sweep(scenario, sw["deltas"], noise, jobs=jobs)
    rows = []
    for d, pid, r in rep.rows:
        prm = rep.params[rep.deltas.index(d)]
        rows.append((d, prm.eps, prm.tau, pid, r.q_true, r.q_hat.real, r.q_hat.imag, r.abs_err))
    io.write_csv(out / "sweep.csv", ["delta", "eps", "tau", "point_id", "q_true", "qhat_re", "qhat_im", "abs_err"],
                 rows)
    io.write_json(
        out / "summary.json",
        {
            "deltas": rep.deltas,
            "errors": rep.errors,
            "eps": [p.eps for p in rep.params],
            "tau": [p.tau for p in rep.params],
            "kappa0": [p.kappa0 for p in rep.params],
            "slope": rep.slope if rep.slope_defined else "undefined",
            "slope_band_95": list(rep.slope_band) if rep.slope_defined else "undefined",
            "intercept": rep.intercept if rep.slope_defined else "undefined",
            "r_squared": rep.r_squared if rep.slope_defined else "undefined",
            "sigma": str(rep.exponent),
            "sigma_value": float(rep.exponent),
            "failures": [list(f) for f in rep.failures],
            "config_hash": io.config_hash(cfg.raw),
        },
    )
    return rep


COMMANDS = {
    "forward": cmd_forward,
    "beam": cmd_beam,
    "identity": cmd_identity,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
}


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="waveprobe", description="Gaussian beam probes for semilinear waves.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=HELP[name].splitlines()[0], description=HELP[name],
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("--config", required=True, type=Path, help="scenario TOML file")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed (unsigned 64-bit)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.jobs < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, seed=args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out, jobs=args.jobs)
    except (ConfigError, CFLError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WaveprobeError as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
