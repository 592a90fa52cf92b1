"""Experiment configuration files.

Configs are INI files with five sections::

    [model]
    kind = yule | finite_type | house_of_cards
    # yule
    b = 1.0
    # finite_type: one value per type; matrix rows separated by ';'
    rates = 0.5, 1.0
    offspring = 0 0 1; 0 0 1
    type_kernel = 1 0; 0 1            (optional, placement of the children)
    mutation_rates = 0.5, 0.5         (optional single-child type change)
    mutation_kernel = 0 1; 1 0
    # house_of_cards
    alpha = x - 1/(e - 1)
    moment_order = 4

    [simulation]
    x0 = 0
    grid = 2, 4, 6
    extension = auto                  (or a number: T - max(grid))
    replicas = 2000
    cap = 1000000
    seed = 1                          (required)
    threads = 1

    [analysis]
    functions = f                     (names defined in [functions])
    regime = auto                     (or small | critical)
    family_size = 12
    calibration_reps = 200
    bootstrap = 200
    moments = none                    (or oracle | mc)
    moment_orders = 1, 2

    [output]
    dir = results
    dump_trajectories = false

    [functions]
    f = piecewise(1, 0.5, 0)

Functions use the expression language of :mod:`branching_clt.dsl`; for
finite models ``x`` is the type index.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dsl import DSLError, Expr
from .models import (HouseOfCardsParams, ModelError, make_finite_type, make_house_of_cards,
                     make_yule, mutation_channel)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "parse_config_string", "build_model",
           "MODEL_KINDS"]

MODEL_KINDS = ("yule", "finite_type", "house_of_cards")
SECTIONS = ("model", "simulation", "analysis", "output", "functions")

_KEYS = {
    "model": {"kind", "b", "rates", "offspring", "type_kernel", "mutation_rates",
              "mutation_kernel", "alpha", "moment_order"},
    "simulation": {"x0", "grid", "extension", "replicas", "cap", "seed", "threads"},
    "analysis": {"functions", "regime", "family_size", "calibration_reps", "bootstrap",
                 "moments", "moment_orders"},
    "output": {"dir", "dump_trajectories"},
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class ExperimentConfig:
    source: str
    path: Optional[str]
    model_kind: str
    model_params: Dict[str, object]
    x0: float
    grid: np.ndarray
    extension: Optional[float]      # None: chosen from the growth rate
    replicas: int
    cap: int
    seed: int
    threads: int
    functions: Dict[str, Expr]
    analyzed: List[str]
    regime: str
    family_size: int
    calibration_reps: int
    bootstrap: int
    moments: str
    moment_orders: Tuple[int, ...]
    out_dir: str
    dump_trajectories: bool
    moment_order: int = 4
    overrides: Dict[str, object] = field(default_factory=dict)

    @property
    def config_hash(self):
        h = hashlib.sha256(self.source.encode())
        for k in sorted(self.overrides):
            h.update(f"\n{k}={self.overrides[k]!r}".encode())
        return h.hexdigest()

    def with_overrides(self, replicas=None, seed=None, threads=None, out_dir=None,
                       dump_trajectories=None):
        """Apply command-line overrides.  ``threads`` and the output location
        do not affect results and are not part of the hash."""
        if replicas is not None:
            if replicas < 1:
                raise ConfigError(["--replicas: must be >= 1"])
            self.replicas = int(replicas)
            self.overrides["replicas"] = self.replicas
        if seed is not None:
            self.seed = int(seed)
            self.overrides["seed"] = self.seed
        if threads is not None:
            if threads < 1:
                raise ConfigError(["--threads: must be >= 1"])
            self.threads = int(threads)
        if out_dir is not None:
            self.out_dir = out_dir
        if dump_trajectories:
            self.dump_trajectories = True
        return self


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _matrix(text):
    rows = [r for r in text.split(";") if r.strip()]
    return [_floats(r) for r in rows]


class _Reader:
    def __init__(self, cp):
        self.cp = cp
        self.errors = []

    def get(self, sec, key, conv=str, default=None, required=False):
        if not self.cp.has_option(sec, key):
            if required:
                self.errors.append(f"[{sec}] {key}: missing")
            return default
        raw = self.cp.get(sec, key)
        try:
            return conv(raw)
        except (ValueError, DSLError) as exc:
            self.errors.append(f"[{sec}] {key}: {exc}")
            return default


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _extension(text):
    return None if text.strip().lower() == "auto" else float(text)


def parse_config_string(text, path=None):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path or "<string>")
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    errors = []
    for sec in cp.sections():
        if sec not in SECTIONS:
            errors.append(f"[{sec}]: unknown section")
        elif sec in _KEYS:
            for key in cp.options(sec):
                if key not in _KEYS[sec]:
                    errors.append(f"[{sec}] {key}: unknown key")
    for sec in ("model", "simulation"):
        if not cp.has_section(sec):
            errors.append(f"[{sec}]: missing section")
            cp.add_section(sec)
    for sec in ("analysis", "output", "functions"):
        if not cp.has_section(sec):
            cp.add_section(sec)
    rd = _Reader(cp)

    kind = rd.get("model", "kind", required=True)
    params = {}
    if kind is not None and kind not in MODEL_KINDS:
        rd.errors.append(f"[model] kind: unknown model {kind!r} (choose from {', '.join(MODEL_KINDS)})")
    if kind == "yule":
        params["b"] = rd.get("model", "b", float, 1.0)
    elif kind == "finite_type":
        params["rates"] = rd.get("model", "rates", _floats, required=True)
        params["offspring"] = rd.get("model", "offspring", _matrix, required=True)
        params["type_kernel"] = rd.get("model", "type_kernel", _matrix)
        params["mutation_rates"] = rd.get("model", "mutation_rates", _floats)
        params["mutation_kernel"] = rd.get("model", "mutation_kernel", _matrix)
        if (params["mutation_rates"] is None) != (params["mutation_kernel"] is None):
            rd.errors.append("[model] mutation_rates/mutation_kernel: give both or neither")
    elif kind == "house_of_cards":
        params["alpha"] = rd.get("model", "alpha", Expr, required=True)
    moment_order = rd.get("model", "moment_order", int, 4)

    seed = None
    if not cp.has_option("simulation", "seed"):
        rd.errors.append("[simulation] seed: seed required")
    else:
        seed = rd.get("simulation", "seed", int)
    x0 = rd.get("simulation", "x0", float, 0.0)
    grid = rd.get("simulation", "grid", _floats, required=True)
    if grid is not None:
        g = np.asarray(grid, float)
        if g.size == 0 or np.any(np.diff(g) <= 0) or g[0] < 0:
            rd.errors.append("[simulation] grid: must be nonempty, nonnegative and increasing")
        grid = g
    extension = rd.get("simulation", "extension", _extension, None)
    if extension is not None and extension < 0:
        rd.errors.append("[simulation] extension: must be >= 0 or auto")
    replicas = rd.get("simulation", "replicas", int, 1000)
    if replicas is not None and replicas < 1:
        rd.errors.append("[simulation] replicas: must be >= 1")
    cap = rd.get("simulation", "cap", lambda s: int(float(s)), 10 ** 6)
    threads = rd.get("simulation", "threads", int, 1)

    functions = {}
    for name in cp.options("functions"):
        if name == "h":
            rd.errors.append("[functions] h: reserved for the eigenfunction")
            continue
        e = rd.get("functions", name, Expr)
        if e is not None:
            functions[name] = e
    analyzed = rd.get("analysis", "functions", lambda s: s.replace(",", " ").split(), None)
    if analyzed is None:
        analyzed = list(functions)
    for name in analyzed:
        if name != "h" and name not in functions:
            rd.errors.append(f"[analysis] functions: {name!r} is not defined in [functions]")
    regime = rd.get("analysis", "regime", str, "auto")
    if regime not in ("auto", "small", "critical", "large"):
        rd.errors.append(f"[analysis] regime: unknown regime {regime!r}")
    moments = rd.get("analysis", "moments", str, "none")
    if moments not in ("none", "oracle", "mc"):
        rd.errors.append(f"[analysis] moments: expected none, oracle or mc, got {moments!r}")
    orders = tuple(rd.get("analysis", "moment_orders", lambda s: [int(v) for v in _floats(s)],
                          [1, 2]) or ())
    for k in orders:
        if k < 1 or (moment_order is not None and k > moment_order):
            rd.errors.append(f"[analysis] moment_orders: {k} outside 1..{moment_order}")
        if moments == "oracle" and k > 2:
            rd.errors.append(f"[analysis] moment_orders: oracle moments are available for k <= 2, got {k}")

    cfg = ExperimentConfig(
        source=text, path=path, model_kind=kind, model_params=params, x0=x0, grid=grid,
        extension=extension, replicas=replicas, cap=cap, seed=seed, threads=threads,
        functions=functions, analyzed=list(analyzed), regime=regime,
        family_size=rd.get("analysis", "family_size", int, 12),
        calibration_reps=rd.get("analysis", "calibration_reps", int, 200),
        bootstrap=rd.get("analysis", "bootstrap", int, 200),
        moments=moments, moment_orders=orders,
        out_dir=rd.get("output", "dir", str, "results"),
        dump_trajectories=rd.get("output", "dump_trajectories", _bool, False),
        moment_order=moment_order)
    errors += rd.errors
    if not errors:
        try:
            build_model(cfg)
        except ModelError as exc:
            errors.append(f"[model]: {exc}")
        except ValueError as exc:
            errors.append(f"[model]: {exc}")
    if not errors and grid is not None and cfg.model_kind != "house_of_cards":
        d = len(params["rates"]) if kind == "finite_type" else 1
        if not (x0 == int(x0) and 0 <= x0 < d):
            errors.append(f"[simulation] x0: must be a type index in 0..{d - 1}")
    if not errors and kind == "house_of_cards" and not 0.0 <= x0 <= 1.0:
        errors.append("[simulation] x0: must lie in [0, 1]")
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path):
    """Read and validate a config file; every violation is reported at once."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    return parse_config_string(text, path=str(path))


def build_model(cfg):
    p = cfg.model_params
    if cfg.model_kind == "yule":
        return make_yule(p["b"])
    if cfg.model_kind == "finite_type":
        extra = ()
        if p.get("mutation_rates") is not None:
            extra = (mutation_channel(p["mutation_rates"], p["mutation_kernel"]),)
        return make_finite_type(p["rates"], p["offspring"], type_kernel=p.get("type_kernel"),
                                extra_mechanisms=extra, moment_order=cfg.moment_order)
    return make_house_of_cards(HouseOfCardsParams(p["alpha"]), moment_order=cfg.moment_order)
