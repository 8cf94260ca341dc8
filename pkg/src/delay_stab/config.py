"""Run configuration: sectioned ``key = value`` files.

Sections and keys (units: seconds, radians)::

    [plant]          p.poly | p.table, q_tilde.poly | q_tilde.table, theta1, theta2,
                     margin, grid_size, m_modes
    [design]         variant, delta, h_o, h_i, n0, n, gains.k, gains.l,
                     poles.ctrl, poles.obs
    [certification]  alphas, eps, points_per_decade, decades, p_scales, n_max,
                     max_remainder_ratio, sdpa_margin
    [simulation]     z0, y0, T, dt, plant_kind, m_modes, fd_grid,
                     lipschitz_bound, artstein_stride
    [output]         record_stride, profiles, prefix
    [sweep]          parameter, values

Scalars accept constant expressions (``pi/5``); lists are comma separated.
``*.poly`` lists ascending polynomial coefficients in ``x``; ``*.table``
is ``x0:v0, x1:v1, ...`` interpolated linearly.  ``z0`` is an expression in
``x`` and ``y0`` one in ``tau``.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .certification import SearchConfig
from .errors import DelayStabError, ParseError, ValidationError
from .expr import compile_expression, evaluate_number
from .spectral import Coefficient, PlantSpec
from .synthesis import DesignParameters, GainSet, Variant

SCHEMA = {
    "plant": {"p.poly", "p.table", "q_tilde.poly", "q_tilde.table", "theta1", "theta2",
              "margin", "grid_size", "m_modes"},
    "design": {"variant", "delta", "h_o", "h_i", "n0", "n", "gains.k", "gains.l",
               "poles.ctrl", "poles.obs"},
    "certification": {"alphas", "eps", "points_per_decade", "decades", "p_scales", "n_max",
                      "max_remainder_ratio", "sdpa_margin"},
    "simulation": {"z0", "y0", "t", "dt", "plant_kind", "m_modes", "fd_grid",
                   "lipschitz_bound", "artstein_stride"},
    "output": {"record_stride", "profiles", "prefix"},
    "sweep": {"parameter", "values"},
}
SWEEP_PARAMETERS = ("h_o", "h_i", "delta")
COMMAND_SECTIONS = {
    "design": ("plant", "design"),
    "certify": ("plant", "design", "certification"),
    "simulate": ("plant", "design", "simulation"),
    "sweep": ("plant", "design", "certification", "sweep"),
    "export-lmi": ("plant", "design", "certification"),
}


@dataclass
class SimulationConfig:
    z0: object
    y0: object
    T: float
    dt: float = 1e-3
    plant_kind: str = "modal"
    m_modes: int = 60
    fd_grid: int = 2001
    lipschitz_bound: float = 1e4
    artstein_stride: int = 0


@dataclass
class OutputConfig:
    record_stride: int = 1
    profiles: bool = False
    prefix: Optional[str] = None


@dataclass
class SweepConfig:
    parameter: str
    values: list


@dataclass
class RunConfig:
    source: str
    plant: PlantSpec
    margin: float = 1.0
    grid_size: int = 2001
    m_modes: int = 400
    design: Optional[DesignParameters] = None
    gains: Optional[GainSet] = None
    ctrl_poles: Optional[list] = None
    obs_poles: Optional[list] = None
    certification: Optional[SearchConfig] = None
    sdpa_margin: float = 1e-6
    simulation: Optional[SimulationConfig] = None
    output: OutputConfig = field(default_factory=OutputConfig)
    sweep: Optional[SweepConfig] = None
    sections: tuple = ()

    @property
    def stem(self):
        return self.output.prefix or Path(self.source).stem

    def require(self, command):
        missing = [s for s in COMMAND_SECTIONS.get(command, ()) if s not in self.sections]
        if missing:
            raise ValidationError([f"[{m}]: section required by {command}" for m in missing],
                                  operation="RunConfig.require")
        return self


def shipped_configs():
    return sorted(p.name for p in resources.files("delay_stab").joinpath("configs").iterdir()
                  if p.name.endswith(".cfg"))


def resolve_config(name):
    """A path if it exists, otherwise a shipped configuration of that name."""
    path = Path(name)
    if path.is_file():
        return path
    base = path.name if path.suffix == ".cfg" else path.name + ".cfg"
    shipped = resources.files("delay_stab").joinpath("configs", base)
    if shipped.is_file():
        return Path(str(shipped))
    raise ParseError(f"no configuration file {name!r} (shipped: {', '.join(shipped_configs())})",
                     operation="resolve_config")


class _Reader:
    """Typed access to one section that records violations instead of raising."""

    def __init__(self, section, items, errors):
        self.section = section
        self.items = items
        self.errors = errors

    def has(self, key):
        return key in self.items

    def _fail(self, key, reason):
        self.errors.append(f"[{self.section}] {key}: {reason}")

    def number(self, key, default=None, required=False, check=None, reason=""):
        if key not in self.items:
            if required:
                self._fail(key, "missing")
            return default
        try:
            value = evaluate_number(self.items[key])
        except DelayStabError as exc:
            self._fail(key, str(exc))
            return default
        if check is not None and not check(value):
            self._fail(key, f"{value!r} {reason}")
            return default
        return value

    def integer(self, key, default=None, required=False, minimum=None):
        value = self.number(key, None, required)
        if value is None:
            return default
        if value != int(value):
            self._fail(key, f"{value!r} is not an integer")
            return default
        if minimum is not None and value < minimum:
            self._fail(key, f"{int(value)} is below {minimum}")
            return default
        return int(value)

    def numbers(self, key, default=None, required=False):
        if key not in self.items:
            if required:
                self._fail(key, "missing")
            return default
        out = []
        for part in self.items[key].split(","):
            try:
                out.append(evaluate_number(part))
            except DelayStabError as exc:
                self._fail(key, str(exc))
                return default
        return out

    def complexes(self, key):
        if key not in self.items:
            return None
        out = []
        for part in self.items[key].split(","):
            try:
                out.append(complex(part.strip().replace(" ", "")))
            except ValueError:
                self._fail(key, f"{part.strip()!r} is not a number")
                return None
        return out

    def text(self, key, default=None, required=False, choices=None):
        if key not in self.items:
            if required:
                self._fail(key, "missing")
            return default
        value = self.items[key].strip()
        if choices is not None and value.lower() not in choices:
            self._fail(key, f"{value!r} not one of {', '.join(choices)}")
            return default
        return value.lower() if choices is not None else value

    def flag(self, key, default=False):
        if key not in self.items:
            return default
        value = self.items[key].strip().lower()
        if value in ("1", "true", "yes", "on"):
            return True
        if value in ("0", "false", "no", "off"):
            return False
        self._fail(key, f"{value!r} is not a boolean")
        return default

    def coefficient(self, name, required=True):
        poly, table = f"{name}.poly", f"{name}.table"
        if self.has(poly) and self.has(table):
            self._fail(name, "give either .poly or .table, not both")
            return None
        if self.has(poly):
            coeffs = self.numbers(poly)
            return None if coeffs is None else Coefficient(poly=coeffs)
        if self.has(table):
            xs, vs = [], []
            for part in self.items[table].split(","):
                if ":" not in part:
                    self._fail(table, f"entry {part.strip()!r} is not x:value")
                    return None
                a, b = part.split(":", 1)
                try:
                    xs.append(evaluate_number(a))
                    vs.append(evaluate_number(b))
                except DelayStabError as exc:
                    self._fail(table, str(exc))
                    return None
            if len(xs) < 2 or np.any(np.diff(xs) <= 0) or xs[0] > 0 or xs[-1] < 1:
                self._fail(table, "needs increasing nodes covering [0, 1]")
                return None
            return Coefficient(table=(np.array(xs), np.array(vs)))
        if required:
            self._fail(name, f"missing ({poly} or {table})")
        return None


def _read_text(text, source):
    if not text.strip():
        raise ParseError(f"{source}: empty configuration", operation="parse_config")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc}", operation="parse_config") from exc
    if not parser.sections():
        raise ParseError(f"{source}: no sections found", operation="parse_config")
    return parser


def parse_config(path):
    """Read and validate a configuration; every violation is reported at once."""
    path = resolve_config(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}", operation="parse_config") from exc
    return parse_config_text(text, str(path))


def parse_config_text(text, source="<string>"):
    parser = _read_text(text, source)
    errors = []
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"[{section}]: unknown section")
            continue
        for key in parser[section]:
            if key not in SCHEMA[section]:
                errors.append(f"[{section}] {key}: unknown key")
    sections = tuple(s for s in parser.sections() if s in SCHEMA)
    get = lambda name: _Reader(name, dict(parser[name]) if parser.has_section(name) else {}, errors)

    if "plant" not in sections:
        errors.append("[plant]: section required")
    pr = get("plant")
    p = pr.coefficient("p")
    q = pr.coefficient("q_tilde")
    theta1 = pr.number("theta1", required=True)
    theta2 = pr.number("theta2", required=True)
    margin = pr.number("margin", 1.0, check=lambda v: v > 0, reason="must be positive")
    grid_size = pr.integer("grid_size", 2001, minimum=11)
    m_modes = pr.integer("m_modes", 400, minimum=4)
    if grid_size is not None and m_modes is not None and not m_modes < grid_size / 4:
        errors.append(f"[plant] m_modes: {m_modes} must be below grid_size/4 = {grid_size / 4:g}")

    design = gains = ctrl_poles = obs_poles = None
    variant = None
    if "design" in sections:
        dr = get("design")
        variant = dr.text("variant", required=True, choices=tuple(v.value for v in Variant))
        delta = dr.number("delta", required=True, check=lambda v: v > 0, reason="must be positive")
        h_o = dr.number("h_o", required=True, check=lambda v: v > 0, reason="must be positive")
        h_i = dr.number("h_i", 0.0, check=lambda v: v >= 0, reason="must be nonnegative")
        n0 = dr.integer("n0", None, minimum=1)
        n = dr.integer("n", None, minimum=2)
        k = dr.numbers("gains.k")
        l = dr.numbers("gains.l")
        ctrl_poles = dr.complexes("poles.ctrl")
        obs_poles = dr.complexes("poles.obs")
        if (k is None) != (l is None):
            errors.append("[design] gains: give both gains.k and gains.l")
        elif k is not None:
            if len(k) != len(l):
                errors.append("[design] gains: gains.k and gains.l differ in length")
            elif n0 is not None and len(k) != n0:
                errors.append(f"[design] gains: length {len(k)} does not match n0 = {n0}")
            else:
                gains = GainSet(np.array(k, dtype=float), np.array(l, dtype=float))
                n0 = len(k) if n0 is None else n0
        if variant == "joint" and "h_i" not in dr.items:
            errors.append("[design] h_i: missing (required by the joint variant)")
        if variant is not None and variant != "joint" and h_i:
            errors.append("[design] h_i: only used by the joint variant")
        if None not in (variant, delta, h_o, h_i):
            n_eff = n if n is not None else (n0 + 1 if n0 is not None else 2)
            try:
                design = DesignParameters(delta=delta, n=n_eff, variant=variant, h_o=h_o, h_i=h_i, n0=n0)
            except ValueError as exc:
                errors.append(f"[design]: {exc}")

    plant = None
    if None not in (p, q, theta1, theta2):
        plant = PlantSpec(p, q, theta1, theta2)
        measurement = Variant(variant).measurement if variant else None
        for v in plant.violations(measurement):
            key = "theta1" if "theta1" in v else "theta2" if "theta2" in v else "p"
            errors.append(f"[plant] {key}: {v}")

    search = None
    sdpa_margin = 1e-6
    if "certification" in sections:
        cr = get("certification")
        base = SearchConfig()
        alphas = cr.numbers("alphas", list(base.alphas))
        if alphas is not None and any(a <= 1 for a in alphas):
            errors.append("[certification] alphas: every alpha must exceed 1")
        eps = cr.numbers("eps", list(base.eps_values))
        if eps is not None and any(not 0 < e <= 0.5 for e in eps):
            errors.append("[certification] eps: values must lie in (0, 1/2]")
        decades = cr.numbers("decades", list(base.decades))
        if decades is not None and (len(decades) != 2 or decades[0] >= decades[1]):
            errors.append("[certification] decades: needs two increasing exponents")
        scales = cr.numbers("p_scales", list(base.p_scales))
        if scales is not None and any(s <= 0 for s in scales):
            errors.append("[certification] p_scales: values must be positive")
        search = SearchConfig(
            alphas=tuple(alphas or base.alphas), eps_values=tuple(eps or base.eps_values),
            points_per_decade=cr.integer("points_per_decade", base.points_per_decade, minimum=1),
            decades=tuple(decades) if decades and len(decades) == 2 else base.decades,
            p_scales=tuple(scales or base.p_scales),
            n_max=cr.integer("n_max", base.n_max, minimum=2),
            max_remainder_ratio=cr.number("max_remainder_ratio", base.max_remainder_ratio,
                                          check=lambda v: v > 0, reason="must be positive"),
        )
        sdpa_margin = cr.number("sdpa_margin", 1e-6, check=lambda v: v >= 0, reason="must be nonnegative")

    sim = None
    if "simulation" in sections:
        sr = get("simulation")
        z0 = y0 = None
        for key, var in (("z0", "x"), ("y0", "tau")):
            src = sr.text(key, required=True)
            if src is None:
                continue
            try:
                fn = compile_expression(src, var)
                fn(0.5)
            except DelayStabError as exc:
                errors.append(f"[simulation] {key}: {exc}")
                continue
            if key == "z0":
                z0 = fn
            else:
                y0 = fn
        T = sr.number("t", required=True, check=lambda v: v > 0, reason="must be positive")
        dt = sr.number("dt", 1e-3, check=lambda v: v > 0, reason="must be positive")
        kind = sr.text("plant_kind", "modal", choices=("modal", "fd"))
        sim = SimulationConfig(
            z0=z0, y0=y0, T=T, dt=dt, plant_kind=kind,
            m_modes=sr.integer("m_modes", 60, minimum=4),
            fd_grid=sr.integer("fd_grid", 2001, minimum=11),
            lipschitz_bound=sr.number("lipschitz_bound", 1e4, check=lambda v: v > 0, reason="must be positive"),
            artstein_stride=sr.integer("artstein_stride", 0, minimum=0),
        )
        if design is not None and T is not None and dt is not None:
            for name, h in (("h_o", design.h_o), ("h_i", design.h_i)):
                if h and abs(h / dt - round(h / dt)) > 1e-9 * max(1.0, h / dt):
                    errors.append(f"[simulation] dt: {name} = {h!r} is not a multiple of dt = {dt!r}")
        if m_modes is not None and sim.m_modes is not None and sim.m_modes > m_modes:
            errors.append(f"[simulation] m_modes: {sim.m_modes} exceeds the {m_modes} computed modes")

    out = OutputConfig()
    if "output" in sections:
        orr = get("output")
        out = OutputConfig(record_stride=orr.integer("record_stride", 1, minimum=1),
                           profiles=orr.flag("profiles"), prefix=orr.text("prefix"))

    sweep = None
    if "sweep" in sections:
        wr = get("sweep")
        param = wr.text("parameter", required=True, choices=SWEEP_PARAMETERS)
        values = wr.numbers("values", required=True)
        if values is not None and not values:
            errors.append("[sweep] values: empty")
        if param is not None and values:
            sweep = SweepConfig(param, values)

    if errors:
        raise ValidationError(errors, operation="parse_config")
    return RunConfig(
        source=source, plant=plant, margin=margin, grid_size=grid_size, m_modes=m_modes,
        design=design, gains=gains, ctrl_poles=ctrl_poles, obs_poles=obs_poles,
        certification=search, sdpa_margin=sdpa_margin, simulation=sim, output=out,
        sweep=sweep, sections=sections,
    )


def with_parameter(params, name, value):
    """Copy of ``DesignParameters`` with one swept field replaced."""
    return replace(params, **{name: float(value)})
