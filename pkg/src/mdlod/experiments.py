"""Experiment configurations, coefficient/source builders and the convergence harness."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fem import CoefficientSet, assemble_load, energy_norm, solve_dirichlet
from .geometry import MixedDomain, load_geometry, parse_geometry
from .mesh import MeshError, agglomerate, build_hierarchy, grid_assignment, mesh_pair, staircase_polyline
from .lod import VARIANTS, build_basis, setup, solve_multiscale

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

COLUMNS = ("experiment", "H", "h", "ell", "variant", "err_energy", "err_rel", "n_coarse", "n_fine_free",
           "wall_seconds")


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


# -- analytic data ----------------------------------------------------------

ANALYTIC = {
    "one": lambda x, y: np.ones_like(x),
    "zero": lambda x, y: np.zeros_like(x),
    "sin_sin": lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y),
    "x_plus_2y": lambda x, y: x + 2 * y,
    "sin30_plus_2": lambda x, y: np.sin(30 * np.pi * x) * np.sin(30 * np.pi * y) + 2,
}


def random_field(seed: int, n: int, lo: float, hi: float) -> np.ndarray:
    """Uniform values in ``[lo, hi]``, the k-th one drawn from counter k of a Philox stream keyed by ``seed``."""
    gen = np.random.Generator(np.random.Philox(key=int(seed) % 2 ** 64))
    return gen.uniform(lo, hi, size=n)


def _coefficient(spec, n_cells: int, name: str):
    if isinstance(spec, (int, float)):
        spec = {"kind": "constant", "value": spec}
    if isinstance(spec, str):
        spec = {"kind": "analytic", "id": spec}
    if not isinstance(spec, dict):
        raise ConfigError(f"{name}: cannot read coefficient spec {spec!r}")
    kind = spec.get("kind", "constant")
    if kind == "constant":
        v = float(spec.get("value", 1.0))
        if v <= 0:
            raise ConfigError(f"{name}: value must be positive")
        return v
    if kind == "analytic":
        fid = spec.get("id")
        if fid not in ANALYTIC:
            raise ConfigError(f"{name}: unknown analytic id {fid!r}; known: {sorted(ANALYTIC)}")
        return ANALYTIC[fid]
    if kind == "random-checkerboard":
        if "seed" not in spec:
            raise ConfigError(f"{name}: random coefficients need a seed")
        lo, hi = float(spec.get("lo", 0.01)), float(spec.get("hi", 1.0))
        if lo <= 0 or hi < lo:
            raise ConfigError(f"{name}: need 0 < lo <= hi, got lo={lo}, hi={hi}")
        if name != "A0":
            raise ConfigError(f"{name}: random checkerboards are defined on fine bulk elements only")
        return random_field(spec["seed"], n_cells, lo, hi)
    raise ConfigError(f"{name}: unknown coefficient kind {kind!r}")


def build_coefficients(spec: dict, n_cells: int) -> CoefficientSet:
    """CoefficientSet from a ``{A0, A1, B1}`` spec; ``n_cells`` sizes random fields."""
    spec = dict(spec or {})
    unknown = set(spec) - {"A0", "A1", "B1"}
    if unknown:
        raise ConfigError(f"unknown coefficient entries {sorted(unknown)}")
    return CoefficientSet(**{k: _coefficient(spec.get(k, 1.0), n_cells, k) for k in ("A0", "A1", "B1")})


def build_source(spec):
    if isinstance(spec, (int, float)):
        return float(spec)
    if spec in ANALYTIC:
        return ANALYTIC[spec]
    raise ConfigError(f"unknown source {spec!r}; use a number or one of {sorted(ANALYTIC)}")


# -- configuration ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    experiment: str
    geometry: object = "cross"
    coefficients: dict = field(default_factory=dict)
    sources: dict = field(default_factory=lambda: {"f0": 0.0, "f1": 0.0})
    H: list = field(default_factory=lambda: [0.5, 0.25, 0.125])
    h: float = 1 / 32
    ell: list = field(default_factory=lambda: [1, 2, 3, 4])
    variant: str = "stabilized"
    threads: int = 1
    output: str | None = None
    interpolation: str = "nodal"
    coarse: dict = field(default_factory=lambda: {"kind": "uniform"})

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.h <= 0 or not self.H:
            raise ConfigError("need h > 0 and at least one H")
        n = self.n_fine
        for H in self.H:
            nH = 1.0 / H
            if abs(nH - round(nH)) > 1e-9 or n % round(nH) or n // round(nH) < 2:
                raise ConfigError(f"h = {self.h:g} must divide H = {H:g} with a factor of at least 2")
        if self.variant != "global" and (not self.ell or min(self.ell) < 1):
            raise ConfigError("localized variants need ell values >= 1")
        if self.interpolation not in ("nodal", "pou"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")
        kind = self.coarse.get("kind", "uniform")
        if kind not in ("uniform", "agglomerated"):
            raise ConfigError(f"unknown coarse mesh kind {kind!r}")
        if kind == "agglomerated" and self.interpolation != "pou":
            raise ConfigError("agglomerated coarse meshes need interpolation = 'pou'")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        for k in ("f0", "f1"):
            build_source(self.sources.get(k, 0.0))

    @property
    def n_fine(self) -> int:
        n = 1.0 / self.h
        if abs(n - round(n)) > 1e-9:
            raise ConfigError(f"1/h must be an integer, got h = {self.h!r}")
        return int(round(n))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        coeffs = {}
        for k, v in self.coefficients.items():
            if isinstance(v, dict) and v.get("kind") == "random-checkerboard":
                v = dict(v, seed=int(seed))
            coeffs[k] = v
        return replace(self, coefficients=coeffs)


def _fraction(v):
    if isinstance(v, str) and "/" in v:
        a, b = v.split("/")
        return float(a) / float(b)
    return float(v)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data, default_name=Path(path).stem)


def config_from_dict(data: dict, default_name: str = "experiment") -> ExperimentConfig:
    data = dict(data)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    data.setdefault("experiment", default_name)
    if "H" in data:
        data["H"] = [_fraction(v) for v in data["H"]]
    if "h" in data:
        data["h"] = _fraction(data["h"])
    if "ell" in data:
        data["ell"] = [int(v) for v in data["ell"]]
    return ExperimentConfig(**data)


def resolve_geometry(spec, h: float) -> MixedDomain:
    """Geometry from a builtin name, a TOML path, or an inline table.

    Inline tables may list ``staircases`` as ``[p0, p1]`` pairs; each becomes
    a grid-following interface with step ``h``.
    """
    if isinstance(spec, str):
        return load_geometry(spec)
    if not isinstance(spec, dict):
        raise ConfigError(f"cannot read geometry {spec!r}")
    spec = dict(spec)
    stairs = spec.pop("staircases", [])
    lines = list(spec.get("interfaces", []))
    for p0, p1 in stairs:
        lines.append([list(p) for p in staircase_polyline(tuple(p0), tuple(p1), h)])
    spec["interfaces"] = lines
    return parse_geometry(spec)


# -- harness ----------------------------------------------------------------


@dataclass
class ReportRow:
    experiment: str
    H: float
    h: float
    ell: float
    variant: str
    err_energy: float
    err_rel: float
    n_coarse: int
    n_fine_free: int
    wall_seconds: float

    def as_list(self):
        ell = "inf" if math.isinf(self.ell) else str(int(self.ell))
        return [self.experiment, repr(self.H), repr(self.h), ell, self.variant, repr(self.err_energy),
                repr(self.err_rel), str(self.n_coarse), str(self.n_fine_free), f"{self.wall_seconds:.3f}"]


def build_problem_hierarchy(c: ExperimentConfig, d: MixedDomain, H: float):
    nH = int(round(1 / H))
    r = c.n_fine // nH
    if c.coarse.get("kind", "uniform") == "uniform":
        return build_hierarchy(d, nH, r), None
    fine = mesh_pair(d, c.n_fine)
    labels = grid_assignment(fine, nH, float(c.coarse.get("min_fraction", 0.25)))
    return agglomerate(fine, labels, float(c.coarse.get("rho0", 0.05)), float(c.coarse.get("rho1", 1.0)), H=H)


def run_experiment(c: ExperimentConfig, progress=None) -> list[ReportRow]:
    """One row per (H, ell) cell, sorted by H descending then ell ascending."""
    d = resolve_geometry(c.geometry, c.h)
    f0 = build_source(c.sources.get("f0", 0.0))
    f1 = build_source(c.sources.get("f1", 0.0))
    rows = []
    fine_cache = None
    for H in sorted(c.H, reverse=True):
        try:
            hier, report = build_problem_hierarchy(c, d, H)
        except MeshError as err:
            raise ExperimentError(f"cell H={H:g}: {err}") from err
        if report is not None and not report.ok:
            log.warning("regularity report for H=%g: %s", H, report.summary())
        coeffs = build_coefficients(c.coefficients, hier.fine.n_cells)
        pb = setup(hier, coeffs, mode=c.interpolation, threads=c.threads)
        F = assemble_load(pb.space, f0, f1)
        # the fine problem does not depend on H
        if fine_cache is None:
            t0 = time.perf_counter()
            uh = solve_dirichlet(pb.A, F)
            fine_cache = (uh, energy_norm(pb.A, uh), time.perf_counter() - t0)
        uh, uh_norm, _ = fine_cache
        if len(uh) != pb.space.n_free:
            raise ExperimentError("fine spaces differ between coarse levels")
        ells = [math.inf] if c.variant == "global" else sorted(c.ell)
        for ell in ells:
            t0 = time.perf_counter()
            try:
                basis = build_basis(pb, None if math.isinf(ell) else ell, c.variant)
                _, u = solve_multiscale(basis, pb.A, F)
            except Exception as err:
                raise ExperimentError(f"cell H={H:g}, ell={ell}: {err}") from err
            err_e = energy_norm(pb.A, uh - u)
            row = ReportRow(c.experiment, float(H), float(c.h), float(ell), c.variant, err_e,
                            err_e / uh_norm if uh_norm > 0 else 0.0, pb.n_coarse, pb.space.n_free,
                            time.perf_counter() - t0)
            rows.append(row)
            if progress:
                progress(row)
    if c.output:
        write_csv(rows, c.output)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def write_csv(rows, path) -> None:
    """Write rows atomically: a temporary file in the target directory, then a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(rows_to_csv(rows))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RateFit:
    x: np.ndarray
    err: np.ndarray
    steps: np.ndarray     # per-step EOCs (h-rate) or per-step log ratios (ell-decay)
    slope: float


def fit_rates(rows, mode: str = "h-rate") -> RateFit:
    """Observed rates along H (``h-rate``) or ell (``ell-decay``).

    ``rows`` are ReportRows or ``(x, err)`` pairs and must vary along one axis only.
    """
    pts = []
    for r in rows:
        if isinstance(r, ReportRow):
            pts.append((r.H if mode == "h-rate" else r.ell, r.err_energy))
        else:
            pts.append(tuple(r))
    if mode not in ("h-rate", "ell-decay"):
        raise ValueError(f"unknown fit mode {mode!r}")
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a rate")
    pts.sort(key=lambda p: -p[0] if mode == "h-rate" else p[0])
    x = np.array([p[0] for p in pts], dtype=float)
    e = np.array([p[1] for p in pts], dtype=float)
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be positive and finite for a log fit")
    if mode == "h-rate":
        steps = np.log(e[:-1] / e[1:]) / np.log(x[:-1] / x[1:])
        slope = float(np.polyfit(np.log(x), np.log(e), 1)[0])
    else:
        steps = np.log(e[1:] / e[:-1]) / (x[1:] - x[:-1])
        slope = float(np.polyfit(x, np.log(e), 1)[0])
    return RateFit(x=x, err=e, steps=steps, slope=slope)
