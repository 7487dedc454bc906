"""TOML run configurations: parsing, validation and object builders."""

from __future__ import annotations

import ast
import copy
import math
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .coefficients import PolynomialFlux, Profile, SeparableCoefficients, TrigField, TrigMode
from .mcf import McfConfig, mcf_coefficients
from .nonlinearity import make_family, mcf_regularize, regularize
from .solver import CFLError, SolverConfig, grid_coords, truncate_initial

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "EXPERIMENTS", "initial_function"]

EXPERIMENTS = ("contraction", "moments", "entropy", "fracreg", "phistab", "mcf-consistency", "initial-continuity")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


_REQ = object()

# section -> key -> (types, default)
_NUM = (int, float)
SCHEMA = {
    "": {"equation": (str, "pme"), "out_dir": (str, "gradnoise-out")},
    "nonlinearity": {"family": (str, "power_law"), "m": (_NUM, 2.0), "K": (_NUM, 2.0), "n": (_NUM, 4)},
    "coefficients": {
        "profile": (str, "sqrt"),
        "amplitude": (list, [0.2]),
        "kappa": (list, [1.0]),
        "phase": (list, [0.0]),
        "flux": (list, []),
    },
    "mcf": {"amplitude": (list, [0.2]), "kappa": (list, [1.0]), "phase": (list, [0.0]), "N0": (_NUM, 100.0)},
    "grid": {"dim": (int, 1), "M": (int, 128)},
    "time": {"dt": ((int, float, str), "auto"), "T_final": (_NUM, 0.25), "snapshots": (int, 11),
             "cfl_safety": (_NUM, 0.9), "cfl_radius": (_NUM, 0.0)},
    "ensemble": {"seed_base": (int, 0), "count": (int, 64), "chunk": (int, 64)},
    "initial": {"xi": (str, "1 + 0.5*sin(2*pi*x)"), "xi_alt": (str, "1 + 0.5*sin(2*pi*x) + 0.2*cos(4*pi*x)")},
    "output": {"csv": (bool, False), "binary": (bool, False), "plots": (bool, True)},
    "experiments": {"run": (list, [])},
    "experiments.contraction": {"C_max": (_NUM, 5.0), "snapshots": (int, 26)},
    "experiments.moments": {"ns": (list, [2, 4, 8]), "Ms": (list, [64, 128]), "T_final": (_NUM, 0.1),
                            "count": (int, 64), "p": (_NUM, 2.0), "factor": (_NUM, 2.0)},
    "experiments.entropy": {
        "det_xi": (str, "0.1*(0.3 + cos(2*pi*x))"),
        "det_M": (int, 128),
        "det_dt": (_NUM, 2e-6),
        "det_T": (_NUM, 0.02),
        "det_family": (str, "linear"),
        "tol": (_NUM, 1e-6),
        "M0": (int, 32),
        "delta0": (_NUM, 1.0),
        "shift": (_NUM, 1.0),
        "T_final": (_NUM, 0.05),
        "levels": (int, 3),
        "count": (int, 256),
        "shrink": (_NUM, 2.0),
    },
    "experiments.fracreg": {"xi": (str, "maximum(0, 1 - 16*(x - 0.5)**2)"), "M": (int, 256),
                            "T_final": (_NUM, 0.05), "epsilons_h": (list, [4, 8, 16, 32]),
                            "snapshots": (int, 11), "noise": (bool, False), "count": (int, 1),
                            "slack": (_NUM, 0.15)},
    "experiments.phistab": {"xi": (str, "1.5*sin(2*pi*x)"), "ns": (list, [2, 4, 8]), "M": (int, 64),
                            "T_final": (_NUM, 0.1), "count": (int, 64), "snapshots": (int, 21)},
    "experiments.mcf-consistency": {"xi": (str, "0.5*sin(2*pi*x)"), "Ms": (list, [256, 512]), "dt": (_NUM, 1e-7),
                                    "n": (_NUM, 16), "tol": (_NUM, 1e-4),
                                    "C_max": (_NUM, 200.0)},
    "experiments.initial-continuity": {"h_max": (_NUM, 0.01), "snapshots": (int, 41), "count": (int, 64)},
}


def _flatten(data: dict, prefix: str = "") -> dict:
    """Split a parsed TOML tree into ``{section: {key: value}}``."""
    out = {prefix: {}}
    for k, v in data.items():
        name = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            if name not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]")
            out.update(_flatten(v, name))
        else:
            out[prefix][k] = v
    return out


@dataclass
class RunConfig:
    """Validated configuration; ``sections`` holds every field with defaults filled in."""

    sections: dict
    source: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @property
    def equation(self) -> str:
        return self.sections[""]["equation"]

    @property
    def experiments(self) -> list:
        return list(self.sections["experiments"]["run"])

    def exp(self, name: str) -> dict:
        return self.sections[f"experiments.{name}"]

    # -- builders -----------------------------------------------------------

    def family(self):
        nl = self["nonlinearity"]
        name = nl["family"]
        if name == "power_law":
            return make_family(name, m=float(nl["m"]), K=float(nl["K"]))
        return make_family(name, K=float(nl["K"]))

    def nonlinearity(self, n=None, family=None):
        n = self["nonlinearity"]["n"] if n is None else n
        if self.equation == "mcf" and family is None:
            return mcf_regularize(n)
        fam = self.family() if family is None else make_family(family)
        key = (fam.name, fam.m, fam.K, n)
        if key not in self._cache:
            self._cache[key] = regularize(fam, int(n))
        return self._cache[key]

    def coefficients(self, modes: int | None = None):
        if self.equation == "mcf":
            return mcf_coefficients(self.mcf_config())
        c = self["coefficients"]
        d = self["grid"]["dim"]
        K = len(c["amplitude"]) if modes is None else modes
        h = []
        for i in range(d):
            row = []
            for k in range(K):
                kap = tuple(float(c["kappa"][k]) if j == i else 0.0 for j in range(d))
                row.append(TrigField((TrigMode(float(c["amplitude"][k]), kap, float(c["phase"][k])),)))
            h.append(row)
        flux = PolynomialFlux([list(map(float, p)) for p in c["flux"]]) if c["flux"] else None
        return SeparableCoefficients(h, Profile(c["profile"]), flux)

    def mcf_config(self) -> McfConfig:
        c = self["mcf"]
        hs = [TrigField((TrigMode(float(a), (float(k),), float(p)),)) for a, k, p in zip(c["amplitude"], c["kappa"], c["phase"])]
        t = self["time"]
        return McfConfig(hs, float(c["N0"]), n=float(self["nonlinearity"]["n"]), M=self["grid"]["M"],
                         dt=float(t["dt"]) if t["dt"] != "auto" else 1e-5, T_final=float(t["T_final"]))

    def xi(self, expr: str | None = None, M: int | None = None) -> np.ndarray:
        M = self["grid"]["M"] if M is None else M
        return initial_function(self["initial"]["xi"] if expr is None else expr, M, self["grid"]["dim"])

    def solver_config(self, n=None, M=None, T=None, modes=None, dt=None, xi=None, radius=None, family=None):
        """``SolverConfig`` with optional overrides; ``dt = "auto"`` picks the largest
        step dividing ``T`` within the CFL budget at ``|u| <= radius``."""
        t = self["time"]
        M = self["grid"]["M"] if M is None else M
        T = float(t["T_final"]) if T is None else T
        nl = self.nonlinearity(n, family)
        n_val = nl.n
        co = self.coefficients(modes)
        x0 = self.xi(M=M) if xi is None else xi
        R0 = float(np.max(np.abs(truncate_initial(x0, n_val))))
        if radius is None:
            radius = float(t["cfl_radius"]) or 2.0 * R0 + 0.5
        dt = t["dt"] if dt is None else dt
        safety = float(t["cfl_safety"])
        if dt == "auto":
            probe = SolverConfig(nl, co, 1.0, 0.0, M, self["grid"]["dim"], safety)
            b = probe.budget(radius)
            dt = T / math.ceil(T / b) if T > 0 else b
        cfg = SolverConfig(nl, co, float(dt), T, M, self["grid"]["dim"], safety)
        cfg.check_cfl(R0)
        return cfg

    def seeds(self, count: int | None = None) -> list:
        e = self["ensemble"]
        c = e["count"] if count is None else count
        return list(range(e["seed_base"], e["seed_base"] + c))


_ALLOWED_NAMES = {"x", "y", "pi", "e", "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "arctan",
                  "maximum", "minimum", "where", "sign", "heaviside"}


def initial_function(expr: str, M: int, dim: int = 1) -> np.ndarray:
    """Evaluate an arithmetic expression in ``x`` (and ``y``) on the grid.

    Only numbers, arithmetic operators and the functions in ``_ALLOWED_NAMES``
    are accepted.
    """
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"initial data {expr!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id not in _ALLOWED_NAMES:
            raise ConfigError(f"initial data {expr!r}: unknown name {node.id!r}")
        if not isinstance(node, (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
                                 ast.Constant, ast.operator, ast.unaryop, ast.Compare, ast.cmpop)):
            raise ConfigError(f"initial data {expr!r}: unsupported syntax {type(node).__name__}")
    coords = grid_coords(M, dim)
    ns = {name: getattr(np, name) for name in _ALLOWED_NAMES if hasattr(np, name)}
    ns.update(pi=np.pi, e=np.e, x=coords[0], y=coords[1] if dim == 2 else np.zeros_like(coords[0]))
    val = eval(compile(tree, "<initial>", "eval"), {"__builtins__": {}}, ns)
    return np.asarray(val, dtype=float) * np.ones((M,) * dim)


def _check_type(name: str, value, types):
    if isinstance(value, bool) and types is not bool and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{name}: expected {types}, got a boolean")
    if not isinstance(value, types):
        tn = "/".join(t.__name__ for t in (types if isinstance(types, tuple) else (types,)))
        raise ConfigError(f"{name}: expected {tn}, got {type(value).__name__}")


def parse_config(text: str) -> RunConfig:
    """Parse and validate TOML text into a :class:`RunConfig`."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    given = _flatten(data)
    sections = {}
    for sec, keys in SCHEMA.items():
        vals = given.get(sec, {})
        out = {}
        for k, v in vals.items():
            if k not in keys:
                where = f"[{sec}] " if sec else ""
                raise ConfigError(f"unknown key {where}{k!r}")
        for k, (types, default) in keys.items():
            name = f"{sec}.{k}" if sec else k
            if k in vals:
                _check_type(name, vals[k], types)
                out[k] = vals[k]
            else:
                out[k] = copy.deepcopy(default)
        sections[sec] = out
    cfg = RunConfig(sections, text)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.equation not in ("pme", "mcf", "custom"):
        raise ConfigError(f"equation: unknown equation {cfg.equation!r} (pme | mcf | custom)")
    fam = cfg["nonlinearity"]["family"]
    if fam not in ("power_law", "arctan", "linear"):
        raise ConfigError(f"nonlinearity.family: unknown family {fam!r}")
    if cfg.equation == "pme" and fam != "power_law":
        raise ConfigError("nonlinearity.family: pme requires power_law")
    if fam == "power_law" and not cfg["nonlinearity"]["m"] > 1:
        raise ConfigError("nonlinearity.m: power law needs m > 1")
    if not cfg["nonlinearity"]["n"] >= 1:
        raise ConfigError("nonlinearity.n: must be >= 1")
    if cfg["coefficients"]["profile"] not in ("sqrt", "linear", "square", "one"):
        raise ConfigError(f"coefficients.profile: unknown profile {cfg['coefficients']['profile']!r}")
    c = cfg["coefficients"]
    if not len(c["amplitude"]) == len(c["kappa"]) == len(c["phase"]):
        raise ConfigError("coefficients: amplitude, kappa and phase must have equal length")
    if cfg["grid"]["dim"] not in (1, 2):
        raise ConfigError("grid.dim: must be 1 or 2")
    if cfg["grid"]["M"] < 4:
        raise ConfigError("grid.M: need at least 4 cells")
    if cfg.equation == "mcf" and cfg["grid"]["dim"] != 1:
        raise ConfigError("grid.dim: mcf is one-dimensional")
    dt = cfg["time"]["dt"]
    if isinstance(dt, str) and dt != "auto":
        raise ConfigError("time.dt: must be a positive number or \"auto\"")
    if not isinstance(dt, str) and not dt > 0:
        raise ConfigError("time.dt: must be positive")
    for name in cfg.experiments:
        if name not in EXPERIMENTS:
            raise ConfigError(f"experiments.run: unknown experiment {name!r}")
    for key in ("xi", "xi_alt"):
        initial_function(cfg["initial"][key], 8, cfg["grid"]["dim"])
    if cfg.equation == "mcf":
        try:
            cfg.mcf_config()
        except ValueError as exc:
            raise ConfigError(f"mcf: {exc}") from None
    if not isinstance(dt, str):
        try:
            cfg.solver_config()
        except CFLError as exc:
            raise ConfigError(f"time.dt: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"time: {exc}") from None


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return parse_config(text)
