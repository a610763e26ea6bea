"""Scenario configuration from TOML files.

Every field is validated before any solve starts; problems are reported
as ``section.key: message`` through :class:`ConfigError`.
"""
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import CFLError, ConfigError
from .geometry import Domain, grid_metric, minkowski, perturbed_beta, time_dependent_h
from .reconstruction import BumpPotential, GaussianBump, ProbeSettings, Scenario
from .wave_solver import MAX_CFL, SpacetimeGrid

logger = logging.getLogger(__name__)

METRICS = ("minkowski", "perturbed-beta", "time-dependent-h", "grid")


class _Section:
    """Typed access to one table with field-level errors."""

    def __init__(self, name, table, problems):
        self.name = name
        self.table = table if isinstance(table, dict) else {}
        self.problems = problems
        if table is not None and not isinstance(table, dict):
            problems.append(f"{name}: expected a table")

    def _err(self, key, msg):
        self.problems.append(f"{self.name}.{key}: {msg}")

    def number(self, key, default=None, low=None, high=None, strict_low=False, integer=False):
        if key not in self.table:
            if default is None:
                self._err(key, "required")
            return default
        v = self.table[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self._err(key, f"expected a number, got {v!r}")
            return default
        if integer and int(v) != v:
            self._err(key, f"expected an integer, got {v!r}")
            return default
        if not math.isfinite(v):
            self._err(key, "must be finite")
            return default
        if low is not None and (v < low or (strict_low and v == low)):
            self._err(key, f"must be {'>' if strict_low else '>='} {low}")
        if high is not None and v > high:
            self._err(key, f"must be <= {high}")
        return int(v) if integer else float(v)

    def choice(self, key, options, default=None):
        v = self.table.get(key, default)
        if v is None:
            self._err(key, "required")
        elif v not in options:
            self._err(key, f"must be one of {', '.join(map(str, options))}")
        return v

    def flag(self, key, default=False):
        v = self.table.get(key, default)
        if not isinstance(v, bool):
            self._err(key, "expected true or false")
            return default
        return v

    def vector(self, key, length=None, default=None):
        if key not in self.table:
            if default is None:
                self._err(key, "required")
            return default
        v = self.table[key]
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            self._err(key, "expected a list of numbers")
            return default
        if arr.ndim != 1 or (length is not None and len(arr) != length):
            self._err(key, f"expected a list of {length} numbers")
            return default
        return tuple(float(x) for x in arr)

    def text(self, key, default=None):
        v = self.table.get(key, default)
        if v is not None and not isinstance(v, str):
            self._err(key, "expected a string")
        return v


@dataclass(frozen=True, eq=False)
class Config:
    """A validated scenario.  ``raw`` is the parsed TOML kept for hashing."""

    raw: dict
    seed: int
    metric: object
    domain: Domain
    grid: dict
    potential: BumpPotential
    sections: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def n(self):
        return self.domain.n

    def make_grid(self, nx=None):
        """Grid from ``grid.nx``/``grid.nt``; raises :class:`CFLError` for an unstable step."""
        nx = self.grid["nx"] if nx is None else nx
        if self.grid.get("nt") is not None:
            g = SpacetimeGrid(self.domain, int(self.grid["nt"]), (int(nx),) * self.n)
            g.check_cfl(self.metric, self.grid["cfl"])
            return g
        return SpacetimeGrid.for_metric(self.domain, int(nx), self.metric, cfl=self.grid["cfl"])

    def solver_options(self):
        return {
            "tol": self.grid["picard_tol"],
            "max_iter": self.grid["picard_max_iter"],
            "kappa": self.grid["kappa"],
        }

    def probe_settings(self):
        p = self.sections["probe"]
        return ProbeSettings(
            cutoff_radius=p["cutoff"],
            transverse_cutoff=p["transverse_cutoff"],
            beam_width=p["beam_width"],
            aux_tau=p["aux_tau"],
            aux_cutoff=p["aux_cutoff"],
            rotation=p["rotation"],
            nodes_per_wavelength=p["nodes_per_wavelength"],
            cfl=self.grid["cfl"],
        )

    def scenario(self, points):
        p = self.sections["probe"]
        return Scenario(
            self.metric,
            self.domain,
            self.potential,
            tuple(points),
            m=p["m"],
            s=p["s"],
            M=p["M"],
            kappa=p["kappa"],
            tau0=p["tau0"],
            settings=self.probe_settings(),
        )


def _metric(sec, n, base_dir):
    name = sec.choice("name", METRICS, "minkowski")
    if name == "minkowski":
        return minkowski(n)
    if name == "perturbed-beta":
        return perturbed_beta(n, sec.number("coefficient", 0.1))
    if name == "time-dependent-h":
        return time_dependent_h(n, sec.number("coefficient", 0.1))
    if name == "grid":
        path = sec.text("path")
        if path is None:
            return None
        full = (base_dir / path).resolve()
        if not full.exists():
            sec._err("path", f"file {full} does not exist")
            return None
        return grid_metric(str(full))
    return None


def _points_spec(sec, n, problems, key_prefix):
    """Events from an explicit ``points`` list or ``t``/``x`` linspace triples."""
    if "points" in sec.table:
        pts = []
        for i, p in enumerate(sec.table["points"]):
            try:
                arr = np.asarray(p, dtype=float)
            except (TypeError, ValueError):
                arr = np.zeros(0)
            if arr.shape != (n + 1,):
                problems.append(f"{key_prefix}.points[{i}]: expected {n + 1} coordinates")
                continue
            pts.append(tuple(float(v) for v in arr))
        return pts
    if "t" in sec.table:
        axes = []
        t = sec.vector("t", 3)
        xs = sec.table.get("x")
        if xs is None:
            problems.append(f"{key_prefix}.x: required with t")
            return []
        xs = [xs] if n == 1 and np.ndim(xs) == 1 else xs
        if t is None or len(xs) != n:
            problems.append(f"{key_prefix}.x: expected {n} triples")
            return []
        for triple in [t] + list(xs):
            lo, hi, cnt = triple
            if int(cnt) != cnt or cnt < 1:
                problems.append(f"{key_prefix}: point counts must be positive integers")
                return []
            axes.append(np.linspace(lo, hi, int(cnt)))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n + 1)
        return [tuple(float(v) for v in row) for row in mesh]
    return []


def validate(raw, base_dir=Path(".")):
    """Build a :class:`Config` from a parsed TOML mapping."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a table")
    known = {"seed", "metric", "domain", "grid", "potential", "forward", "beam", "probe", "reconstruct", "sweep"}
    for key in raw:
        if key not in known:
            problems.append(f"{key}: unknown section")
    top = _Section("config", raw, problems)
    seed = top.number("seed", 0, low=0, integer=True)

    dom = _Section("domain", raw.get("domain"), problems)
    T = dom.number("T", low=0, strict_low=True)
    bounds = dom.table.get("bounds")
    n = 0
    if bounds is None:
        problems.append("domain.bounds: required")
    else:
        try:
            b = np.asarray(bounds, dtype=float)
            if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
                raise ValueError
            n = len(b)
        except (TypeError, ValueError):
            problems.append("domain.bounds: expected a list of [lo, hi] pairs with lo < hi")
    if n > 3:
        problems.append("domain.bounds: at most three space dimensions")
    t_start = dom.number("t_start", 0.0)
    domain = None
    if T is not None and n and n <= 3 and not problems:
        domain = Domain(T, [tuple(map(float, r)) for r in bounds], t_start)

    msec = _Section("metric", raw.get("metric", {}), problems)
    metric = _metric(msec, max(n, 1), base_dir) if n else None

    gsec = _Section("grid", raw.get("grid", {}), problems)
    grid = {
        "nx": gsec.number("nx", 64, low=4, integer=True),
        "nt": gsec.number("nt", None, low=2, integer=True) if "nt" in gsec.table else None,
        "cfl": gsec.number("cfl", MAX_CFL, low=0, high=1.0, strict_low=True),
        "picard_tol": gsec.number("picard_tol", 1e-10, low=0, strict_low=True),
        "picard_max_iter": gsec.number("picard_max_iter", 50, low=1, integer=True),
        "kappa": gsec.number("kappa", 1e-2, low=0, strict_low=True),
    }
    if grid["cfl"] is not None and grid["cfl"] > MAX_CFL:
        problems.append(f"grid.cfl: must be <= {MAX_CFL} for the explicit scheme")

    psec = _Section("potential", raw.get("potential", {}), problems)
    bumps = []
    for i, b in enumerate(psec.table.get("bumps", [])):
        bs = _Section(f"potential.bumps[{i}]", b, problems)
        c = bs.vector("center", n + 1)
        w = bs.number("width", low=0, strict_low=True)
        a = bs.number("amplitude", 1.0)
        if c is not None and w is not None:
            bumps.append(GaussianBump(c, w, a))
    scale = psec.number("scale", 1.0)
    potential = BumpPotential(tuple(bumps)).scaled(scale)

    sections = {}
    fsec = _Section("forward", raw.get("forward", {}), problems)
    sections["forward"] = {
        "m": fsec.number("m", 4, low=2, integer=True),
        "data": fsec.choice("data", ("zero", "pulse", "manufactured"), "pulse"),
        "amplitude": fsec.number("amplitude", 1e-2, low=0),
        "pulse_center": fsec.number("pulse_center", 0.5),
        "pulse_width": fsec.number("pulse_width", 0.3, low=0, strict_low=True),
        "refinements": fsec.number("refinements", 2, low=1, integer=True),
    }

    bsec = _Section("beam", raw.get("beam", {}), problems)
    sections["beam"] = {
        "point": bsec.vector("point", n + 1, default=()),
        "direction": bsec.vector("direction", n, default=(1.0,) + (0.0,) * (n - 1)),
        "taus": bsec.vector("taus", default=(40.0, 80.0, 160.0, 320.0)),
        "cutoff": bsec.number("cutoff", 0.3, low=0, strict_low=True),
        "beam_width": bsec.number("beam_width", 1.0, low=0, strict_low=True),
        "conjugate": bsec.flag("conjugate"),
        "correction": bsec.choice("correction", ("none", "continuum", "discrete"), "continuum"),
        "nodes_per_wavelength": bsec.number("nodes_per_wavelength", 12.0, low=1),
    }
    if sections["beam"]["taus"] and min(sections["beam"]["taus"]) < 1:
        problems.append("beam.taus: frequencies must be >= 1")

    prsec = _Section("probe", raw.get("probe", {}), problems)
    tau = prsec.table.get("tau", 80.0)
    eps = prsec.table.get("eps", "optimal")
    if not (tau == "optimal" or (isinstance(tau, (int, float)) and not isinstance(tau, bool) and tau >= 1)):
        problems.append("probe.tau: expected a number >= 1 or \"optimal\"")
    if not (eps == "optimal" or (isinstance(eps, (int, float)) and not isinstance(eps, bool) and eps > 0)):
        problems.append("probe.eps: expected a positive number or \"optimal\"")
    sections["probe"] = {
        "m": prsec.number("m", 4, low=4, integer=True),
        "s": prsec.number("s", 2, low=0, integer=True),
        "tau": tau,
        "eps": eps,
        "delta": prsec.number("delta", 1e-60, low=0, strict_low=True),
        "tau0": prsec.number("tau0", 40.0, low=1),
        "M": prsec.number("M", 1.0, low=0, strict_low=True),
        "kappa": prsec.number("kappa", 0.9, low=0, high=1.0, strict_low=True),
        "cutoff": prsec.number("cutoff", 0.3, low=0, strict_low=True),
        "transverse_cutoff": (
            prsec.number("transverse_cutoff", low=0, strict_low=True) if "transverse_cutoff" in prsec.table else None
        ),
        "beam_width": prsec.number("beam_width", 4.0, low=0, strict_low=True),
        "aux_tau": prsec.number("aux_tau", 2.0, low=1),
        "aux_cutoff": prsec.number("aux_cutoff", 0.3, low=0, strict_low=True),
        "rotation": prsec.number("rotation", 0.2, low=0, strict_low=True),
        "nodes_per_wavelength": prsec.number("nodes_per_wavelength", 20.0, low=1),
        "eps_ladder": prsec.vector("eps_ladder", default=()),
        "points": _points_spec(prsec, n, problems, "probe") if n else [],
    }
    if sections["probe"]["kappa"] is not None and sections["probe"]["kappa"] >= 1:
        problems.append("probe.kappa: must be < 1")

    rsec = _Section("reconstruct", raw.get("reconstruct", {}), problems)
    sections["reconstruct"] = {"points": _points_spec(rsec, n, problems, "reconstruct") if n else []}

    ssec = _Section("sweep", raw.get("sweep", {}), problems)
    deltas = ssec.vector("deltas", default=())
    if deltas and (any(d <= 0 for d in deltas) or any(b <= a for a, b in zip(deltas, deltas[1:]))):
        problems.append("sweep.deltas: must be positive and strictly increasing")
    M = sections["probe"]["M"]
    if deltas and M is not None and max(deltas) >= M:
        problems.append("sweep.deltas: every delta must be below probe.M")
    sections["sweep"] = {
        "deltas": deltas,
        "noise_seed": ssec.number("noise_seed", seed if seed is not None else 0, low=0, integer=True),
        "noise": ssec.flag("noise", True),
        "points": _points_spec(ssec, n, problems, "sweep") if n else [],
    }

    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return Config(raw, seed, metric, domain, grid, potential, sections, base_dir)


def load_config(path, seed=None):
    """Read and validate a TOML scenario; ``seed`` overrides the file's seed."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if seed is not None:
        raw["seed"] = int(seed)
    return validate(raw, path.parent)


def check_grid(config, nx=None):
    """Build the configured grid, turning CFL violations into configuration errors."""
    try:
        return config.make_grid(nx)
    except CFLError as exc:
        raise ConfigError(f"grid: {exc}") from exc
