"""Config-driven scenario runner: parse, build, run, write CSV/JSON/SVG, compare runs.

Config files are YAML with a fixed schema (see ``SCHEMA`` below and the README).
Parsing is strict: unknown keys, wrong types and regions outside the grid are
rejected with the offending field and line.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .barriers import (
    ClassK,
    CohesionBarrier,
    ConflictBarrier,
    EntropyBarrier,
    FloorBarrier,
    KLBarrier,
    ObstacleBarrier,
    CapBarrier,
    WassersteinBarrier,
    normalize_region,
)
from .errors import ComparisonError, ConfigError, InfeasibleQPError
from .grid import (
    DensityField,
    gaussian_density,
    make_grid,
    mixture_density,
    read_field_csv,
    uniform_density,
    write_field_csv,
)
from .microscopic import SwarmConfig, destinations, run_swarm, sample_swarm
from .qp import SolverSettings
from .safety_filter import ClfSpec, FilterConfig, barrier_labels, run_scenario
from .transport import SinkhornParams, SpeedSchedule, transport_map

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SWARMCBF_OUTPUT_ROOT"
MASS_TOL = 1e-6

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VIOLATION = 2

# ---------------------------------------------------------------------------
# schema

REQUIRED = object()

COMPONENT = {
    "weight": ("float", 1.0),
    "kind": (("gaussian", "uniform"), REQUIRED),
    "mean": ("floats", None),
    "cov": ("floats", None),
    "box": ("box", None),
}
DENSITY = {
    "kind": (("gaussian", "uniform", "mixture", "file"), REQUIRED),
    "mean": ("floats", None),
    "cov": ("floats", None),
    "box": ("box", None),
    "components": ([COMPONENT], None),
    "path": ("str", None),
}
GRID = {"bounds": ("box", REQUIRED), "cells": ("ints", REQUIRED)}
TIME = {"dt": ("float", REQUIRED), "steps": ("int", REQUIRED)}
SCHEDULE = {
    "kind": (("reciprocal-horizon", "constant"), "reciprocal-horizon"),
    "horizon": ("float", 1.0),
    "gain_cap": ("float", None),
    "gain": ("float", 1.0),
}
BARRIER_KINDS = ("obstacle", "conflict", "cohesion", "kl", "wasserstein", "pointwise-cap", "pointwise-floor",
                 "entropy")
BARRIER = {
    "kind": (BARRIER_KINDS, REQUIRED),
    "alpha": ("float", 5.0),
    "region": ("box", None),
    "epsilon": ("float", None),
    "d": ("float", None),
    "beta": ("float", None),
    "bound": ("float", None),
    "reference": (DENSITY, None),
}
# parameters each barrier kind needs / accepts
BARRIER_PARAMS = {
    "obstacle": ({"region", "epsilon"}, set()),
    "conflict": ({"d", "epsilon"}, set()),
    "cohesion": ({"d", "epsilon"}, set()),
    "kl": ({"reference", "beta"}, set()),
    "wasserstein": ({"beta"}, set()),
    "pointwise-cap": ({"bound"}, {"region"}),
    "pointwise-floor": ({"bound"}, {"region"}),
    "entropy": ({"epsilon"}, set()),
}
CLF = {"alpha": ("float", 1.0)}
SOLVER = {
    "method": (("auto", "admm", "ipm", "active-set"), "auto"),
    "feas_tol": ("float", 1e-7),
    "opt_tol": ("float", 1e-7),
    "max_iter": ("int", 20000),
}
SINKHORN = {"epsilon": ("float", REQUIRED), "tol": ("float", 1e-6), "max_iters": ("int", 20000)}
SWARM = {
    "N": ("int", REQUIRED),
    "r": ("float", REQUIRED),
    "mode": (("cap", "entropy"), "cap"),
    "rho_max": ("float", None),
    "rho_min": ("float", None),
    "alpha1": ("float", 5.0),
    "alpha2": ("float", 5.0),
    "convention": (("lagrangian", "eulerian"), "lagrangian"),
    "trust": ("float", None),
    "entropy_eps": ("float", 3.0),
    "entropy_tol": ("float", 0.05),
    "alpha": ("float", 1.0),
    "consensus_k": ("float", 1.0),
    "consensus_dt": ("float", 0.1),
    "sub_iters": ("int", 20),
    "transient": ("float", 0.1),
}
OUTPUT = {
    "stride": ("int", 10),
    "dir": ("str", None),
    "violation_tol": ("float", 1e-4),
    "plots": ("bool", True),
}
SCHEMA = {
    "name": ("str", REQUIRED),
    "description": ("str", ""),
    "mode": (("macroscopic", "microscopic"), "macroscopic"),
    "seed": ("int", None),
    "grid": (GRID, REQUIRED),
    "initial": (DENSITY, REQUIRED),
    "target": (DENSITY, REQUIRED),
    "time": (TIME, REQUIRED),
    "schedule": (SCHEDULE, {}),
    "nominal": (("ot", "kl", "zero"), "ot"),
    "filtered": ("bool", True),
    "barriers": ([BARRIER], []),
    "clf": (CLF, None),
    "solver": (SOLVER, {}),
    "sinkhorn": (SINKHORN, None),
    "swarm": (SWARM, None),
    "output": (OUTPUT, {}),
}


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    line = None
    lines: dict = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.lines = {}
    for knode, vnode in node.value:
        key = loader.construct_object(knode, deep=True)
        line = knode.start_mark.line + 1
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", field=str(key), line=line)
        out[key] = loader.construct_object(vnode, deep=True)
        out.lines[key] = line
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


def _line(m, key=None):
    if isinstance(m, _Map):
        return m.lines.get(key, m.line) if key is not None else m.line
    return None


def _float(v, path, line):
    if isinstance(v, bool):
        raise ConfigError("expected a number", field=path, line=line)
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v)  # YAML 1.1 reads "1e-3" as a string
        except ValueError:
            pass
    raise ConfigError(f"expected a number, got {v!r}", field=path, line=line)


def _int(v, path, line):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"expected an integer, got {v!r}", field=path, line=line)
    return int(v)


def _coerce(kind, v, path, line):
    if v is None:
        return None
    if isinstance(kind, dict):
        return _section(v, kind, path)
    if isinstance(kind, list):
        if not isinstance(v, list):
            raise ConfigError("expected a list", field=path, line=line)
        return [_section(item, kind[0], f"{path}[{k}]") for k, item in enumerate(v)]
    if isinstance(kind, tuple):
        if v not in kind:
            raise ConfigError(f"expected one of {', '.join(kind)}, got {v!r}", field=path, line=line)
        return v
    if kind == "float":
        return _float(v, path, line)
    if kind == "int":
        return _int(v, path, line)
    if kind == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"expected true/false, got {v!r}", field=path, line=line)
        return v
    if kind == "str":
        if not isinstance(v, str):
            raise ConfigError(f"expected a string, got {v!r}", field=path, line=line)
        return v
    if kind in ("floats", "ints"):
        items = v if isinstance(v, list) else [v]
        conv = _float if kind == "floats" else _int
        return [conv(x, path, line) for x in items]
    if kind == "box":
        if not isinstance(v, list) or not v:
            raise ConfigError("expected a list of [lo, hi] pairs", field=path, line=line)
        pairs = v if isinstance(v[0], list) else [v]
        out = []
        for p in pairs:
            if not isinstance(p, list) or len(p) != 2:
                raise ConfigError("expected [lo, hi] pairs", field=path, line=line)
            lo, hi = _float(p[0], path, line), _float(p[1], path, line)
            if not lo < hi:
                raise ConfigError("interval needs lo < hi", field=path, line=line)
            out.append([lo, hi])
        return out
    raise AssertionError(kind)


def _section(m, schema, path):
    if not isinstance(m, dict):
        raise ConfigError("expected a mapping", field=path or "<root>", line=_line(m))
    for key in m:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", field=f"{path}.{key}" if path else str(key), line=_line(m, key))
    out = {}
    for key, (kind, default) in schema.items():
        fpath = f"{path}.{key}" if path else key
        if key in m:
            out[key] = _coerce(kind, m[key], fpath, _line(m, key))
        elif default is REQUIRED:
            raise ConfigError("missing required key", field=fpath, line=_line(m))
        else:
            out[key] = copy.deepcopy(default)
            if isinstance(kind, dict) and default is not None:
                out[key] = _section(default, kind, fpath)
    return out


def _check_density(spec, dim, path, grid_box):
    kind = spec["kind"]
    need = {"gaussian": ("mean", "cov"), "uniform": ("box",), "mixture": ("components",), "file": ("path",)}[kind]
    for key in need:
        if spec.get(key) is None:
            raise ConfigError(f"{kind} density needs '{key}'", field=f"{path}.{key}")
    for key in ("mean", "cov"):
        if spec.get(key) is not None and len(spec[key]) != dim:
            raise ConfigError(f"expected {dim} entries", field=f"{path}.{key}")
    if spec.get("box") is not None:
        _check_box(spec["box"], dim, f"{path}.box", grid_box)
    for k, comp in enumerate(spec.get("components") or []):
        _check_density(comp, dim, f"{path}.components[{k}]", grid_box)


def _check_box(box, dim, path, grid_box):
    if len(box) != dim:
        raise ConfigError(f"expected {dim} intervals", field=path)
    for (lo, hi), (glo, ghi) in zip(box, grid_box):
        if lo < glo - 1e-12 or hi > ghi + 1e-12:
            raise ConfigError("region is not inside the grid bounds", field=path)


@dataclass
class ScenarioConfig:
    """Validated, defaults-filled scenario description (plain nested data)."""

    data: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["data"][key]
        except KeyError:
            raise AttributeError(key) from None

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def dim(self) -> int:
        return len(self.data["grid"]["bounds"])

    @property
    def horizon(self) -> float:
        return self.data["time"]["dt"] * self.data["time"]["steps"]

    def with_overrides(self, **kw) -> "ScenarioConfig":
        d = self.to_dict()
        for key, val in kw.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = val
        return parse_config(d)


def parse_config(source, origin: str = "<config>") -> ScenarioConfig:
    """Parse YAML text or a mapping into a :class:`ScenarioConfig`."""
    if isinstance(source, str):
        try:
            raw = yaml.load(source, Loader=_Loader)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            raise ConfigError(f"{origin}: {exc.problem}", line=mark.line + 1 if mark else None) from None
    else:
        raw = source
    data = _section(raw, SCHEMA, "")
    dim = len(data["grid"]["bounds"])
    if len(data["grid"]["cells"]) != dim:
        raise ConfigError(f"expected {dim} cell counts", field="grid.cells", line=_line(raw.get("grid"), "cells"))
    if any(c < 1 for c in data["grid"]["cells"]):
        raise ConfigError("cell counts must be positive", field="grid.cells")
    gbox = data["grid"]["bounds"]
    _check_density(data["initial"], dim, "initial", gbox)
    _check_density(data["target"], dim, "target", gbox)
    if not data["time"]["dt"] > 0 or data["time"]["steps"] < 0:
        raise ConfigError("need dt > 0 and steps >= 0", field="time")
    for k, b in enumerate(data["barriers"]):
        need, opt = BARRIER_PARAMS[b["kind"]]
        path = f"barriers[{k}]"
        for key in need:
            if b[key] is None:
                raise ConfigError(f"{b['kind']} barrier needs '{key}'", field=f"{path}.{key}")
        for key in ("region", "epsilon", "d", "beta", "bound", "reference"):
            if b[key] is not None and key not in need | opt:
                raise ConfigError(f"'{key}' does not apply to a {b['kind']} barrier", field=f"{path}.{key}")
        if b["region"] is not None:
            _check_box(b["region"], dim, f"{path}.region", gbox)
        if b["reference"] is not None:
            _check_density(b["reference"], dim, f"{path}.reference", gbox)
        if not b["alpha"] > 0:
            raise ConfigError("alpha must be positive", field=f"{path}.alpha")
    if data["mode"] == "microscopic":
        if data["seed"] is None:
            raise ConfigError("microscopic mode needs a seed", field="seed")
        if data["swarm"] is None:
            raise ConfigError("microscopic mode needs a 'swarm' section", field="swarm")
        if data["barriers"] or data["clf"]:
            raise ConfigError("microscopic mode takes its constraints from 'swarm'", field="barriers")
    elif data["swarm"] is not None:
        raise ConfigError("'swarm' only applies to microscopic mode", field="swarm")
    if data["output"]["stride"] < 1:
        raise ConfigError("stride must be >= 1", field="output.stride")
    return ScenarioConfig(data)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def merge_config(base: dict, override: dict) -> dict:
    """Recursive dict merge (``override`` wins; lists are replaced)."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# presets

_OBSTACLE = [[3.5, 4.5], [3.5, 4.5]]
_BLOBS = {"kind": "mixture", "components": [
    {"kind": "gaussian", "mean": [2.0, 6.0], "cov": [0.3, 0.3]},
    {"kind": "gaussian", "mean": [4.0, 6.5], "cov": [0.3, 0.3]},
    {"kind": "gaussian", "mean": [6.0, 6.0], "cov": [0.3, 0.3]},
]}

PRESETS = {
    "1d_cap": {
        "name": "1d_cap",
        "description": "1D transport N(0,1) -> U[10,14] with density cap 0.2 on [3,7]",
        "grid": {"bounds": [[-5.0, 20.0]], "cells": [2500]},
        "initial": {"kind": "gaussian", "mean": [0.0], "cov": [1.0]},
        "target": {"kind": "uniform", "box": [[10.0, 14.0]]},
        "time": {"dt": 0.001, "steps": 1000},
        "schedule": {"horizon": 1.0, "gain_cap": 1000.0},
        "barriers": [{"kind": "pointwise-cap", "bound": 0.2, "region": [[3.0, 7.0]], "alpha": 5.0}],
        "output": {"stride": 10, "violation_tol": 2e-3},
    },
    "2d_obstacle": {
        "name": "2d_obstacle",
        "description": "2D transport N([1,1], I/20) -> N([7,7], I/20) around a square obstacle "
                       "(obstacle placement and eps are a local choice)",
        "grid": {"bounds": [[0.0, 8.0], [0.0, 8.0]], "cells": [160, 160]},
        "initial": {"kind": "gaussian", "mean": [1.0, 1.0], "cov": [0.05, 0.05]},
        "target": {"kind": "gaussian", "mean": [7.0, 7.0], "cov": [0.05, 0.05]},
        "time": {"dt": 0.01, "steps": 100},
        "schedule": {"horizon": 1.0, "gain_cap": 100.0},
        "barriers": [{"kind": "obstacle", "region": _OBSTACLE, "epsilon": 1e-3, "alpha": 5.0}],
        "sinkhorn": {"epsilon": 0.01, "tol": 1e-6},
        "output": {"stride": 10, "violation_tol": 1e-4},
    },
    "2d_distributed": {
        "name": "2d_distributed",
        "description": "1000 agents, decoupled per-agent density cap 0.045 and floor 0.01",
        "mode": "microscopic",
        "seed": 0,
        "grid": {"bounds": [[0.0, 8.0], [0.0, 8.0]], "cells": [80, 80]},
        "initial": {"kind": "uniform", "box": [[0.5, 7.5], [0.5, 4.0]]},
        "target": _BLOBS,
        "time": {"dt": 0.002, "steps": 500},
        "schedule": {"horizon": 1.0, "gain_cap": 10.0},
        "sinkhorn": {"epsilon": 0.01, "tol": 1e-6},
        "swarm": {"N": 1000, "r": 0.4, "mode": "cap", "rho_max": 0.045, "rho_min": 0.01, "alpha1": 100.0,
                  "alpha2": 100.0, "trust": 1.0},
        "output": {"stride": 50},
    },
    "entropy": {
        "name": "entropy",
        "description": "1000 agents, entropy lower bound 3 by slack consensus",
        "mode": "microscopic",
        "seed": 0,
        "grid": {"bounds": [[0.0, 8.0], [0.0, 8.0]], "cells": [80, 80]},
        "initial": {"kind": "uniform", "box": [[0.5, 7.5], [0.5, 7.5]]},
        "target": {"kind": "gaussian", "mean": [4.0, 4.0], "cov": [0.25, 0.25]},
        "time": {"dt": 0.01, "steps": 100},
        "schedule": {"horizon": 1.0, "gain_cap": 10.0},
        "sinkhorn": {"epsilon": 0.01, "tol": 1e-6},
        "swarm": {"N": 1000, "r": 0.4, "mode": "entropy", "entropy_eps": 3.0, "alpha": 10.0, "sub_iters": 20},
        "output": {"stride": 10},
    },
}
for _name in list(PRESETS):
    _p = copy.deepcopy(PRESETS[_name])
    _p["name"] = f"{_name}_unfiltered"
    _p["description"] = f"{_p['description']} (no filter)"
    _p["filtered"] = False
    PRESETS[f"{_name}_unfiltered"] = _p


def preset_names() -> list:
    return list(PRESETS)


def preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; try one of {', '.join(PRESETS)}", field="preset")
    return parse_config(copy.deepcopy(PRESETS[name]))


# ---------------------------------------------------------------------------
# building blocks


def build_density(spec: dict, grid) -> DensityField:
    kind = spec["kind"]
    if kind == "gaussian":
        return gaussian_density(grid, spec["mean"], spec["cov"])
    if kind == "uniform":
        return uniform_density(grid, spec["box"])
    if kind == "mixture":
        return mixture_density(grid, [(c["weight"], build_density(c, grid)) for c in spec["components"]])
    g2, rho, _ = read_field_csv(spec["path"])
    if g2 != grid or rho is None:
        raise ConfigError("density file does not match the configured grid", field="path")
    return rho.normalized()


def build_barriers(cfg: ScenarioConfig, grid, target) -> tuple:
    out = []
    for b in cfg.barriers:
        a = ClassK(b["alpha"])
        kind = b["kind"]
        region = normalize_region(b["region"], grid.dim) if b["region"] is not None else None
        if kind == "obstacle":
            out.append(ObstacleBarrier(alpha=a, region=region, epsilon=b["epsilon"]))
        elif kind == "conflict":
            out.append(ConflictBarrier(alpha=a, d=b["d"], epsilon=b["epsilon"]))
        elif kind == "cohesion":
            out.append(CohesionBarrier(alpha=a, d=b["d"], epsilon=b["epsilon"]))
        elif kind == "kl":
            out.append(KLBarrier(alpha=a, eta=build_density(b["reference"], grid), beta=b["beta"]))
        elif kind == "wasserstein":
            out.append(WassersteinBarrier(alpha=a, target=target, beta=b["beta"], sinkhorn=_sinkhorn(cfg)))
        elif kind == "pointwise-cap":
            out.append(CapBarrier(b["bound"], region, a))
        elif kind == "pointwise-floor":
            out.append(FloorBarrier(b["bound"], region, a))
        else:
            out.append(EntropyBarrier(alpha=a, epsilon=b["epsilon"]))
    return tuple(out)


def _sinkhorn(cfg):
    s = cfg.sinkhorn
    return None if s is None else SinkhornParams(s["epsilon"], max_iters=s["max_iters"], tol=s["tol"])


def _schedule(cfg):
    s = cfg.schedule
    return SpeedSchedule(s["kind"], s["horizon"], s["gain_cap"], s["gain"])


def _solver(cfg):
    s = cfg.solver
    return SolverSettings(feas_tol=s["feas_tol"], opt_tol=s["opt_tol"], max_iter=s["max_iter"], method=s["method"])


def build_filter_config(cfg: ScenarioConfig, grid, target) -> FilterConfig:
    clf = None if cfg.clf is None else ClfSpec(target, ClassK(cfg.clf["alpha"]))
    return FilterConfig(dt=cfg.time["dt"], steps=cfg.time["steps"], target=target, gamma=_schedule(cfg),
                        nominal=cfg.nominal, barriers=build_barriers(cfg, grid, target), clf=clf,
                        solver=_solver(cfg), sinkhorn=_sinkhorn(cfg), filtered=cfg.filtered,
                        snapshot_every=cfg.output["stride"])


def build_swarm_config(cfg: ScenarioConfig) -> SwarmConfig:
    s = cfg.swarm
    return SwarmConfig(dt=cfg.time["dt"], steps=cfg.time["steps"], gamma=_schedule(cfg), mode=s["mode"],
                       filtered=cfg.filtered, rho_max=s["rho_max"], rho_min=s["rho_min"],
                       alpha1=ClassK(s["alpha1"]), alpha2=ClassK(s["alpha2"]), convention=s["convention"],
                       entropy_eps=s["entropy_eps"], alpha=ClassK(s["alpha"]), consensus_k=s["consensus_k"],
                       consensus_dt=s["consensus_dt"], sub_iters=s["sub_iters"], trust=s["trust"],
                       snapshot_every=cfg.output["stride"])


# ---------------------------------------------------------------------------
# reports and files


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list, columns: list | None = None):
    """Rows of dicts to CSV; floats are written with ``repr`` so reruns are byte-identical."""
    columns = columns or (list(rows[0].keys()) if rows else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        rec = {}
        for k, v in r.items():
            try:
                rec[k] = float(v)
            except (TypeError, ValueError):
                rec[k] = v
        out.append(rec)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class RunReport:
    config: dict
    diagnostics: list
    final: dict
    violations: dict
    out_dir: str | None = None
    files: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return any(v.get("violated") for v in self.violations.values())

    @property
    def exit_code(self) -> int:
        return EXIT_VIOLATION if self.violated else EXIT_OK

    def to_dict(self) -> dict:
        return _jsonable({"config": self.config, "final": self.final, "violations": self.violations,
                          "files": self.files})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n")


def recompute_violations(cfg: ScenarioConfig, diagnostics: list) -> dict:
    """Violation summary derived from the per-step diagnostics alone."""
    out = {}
    tol = cfg.output["violation_tol"]
    if cfg.mode == "macroscopic":
        masses = [d["mass"] for d in diagnostics]
        dev = max(abs(m - 1.0) for m in masses) if masses else 0.0
        out["mass"] = {"max_deviation": dev, "tol": MASS_TOL, "violated": bool(dev > MASS_TOL)}
        labels = [k for k in (diagnostics[0] if diagnostics else {}) if k.startswith("H_")]
        for lab in labels:
            vals = [d[lab] for d in diagnostics]
            lo = min(vals)
            out[lab] = {"min": lo, "max": max(vals), "tol": tol, "enforced": bool(cfg.filtered),
                        "violated": bool(cfg.filtered and lo < -tol)}
        return out
    s = cfg.swarm
    if s["mode"] == "cap":
        last = diagnostics[-1]
        out["cohesion"] = {"isolated_final": last["isolated"], "min_neighbors_final": last["min_neighbors"],
                           "enforced": bool(cfg.filtered and s["rho_min"] is not None),
                           "violated": bool(cfg.filtered and s["rho_min"] is not None and last["isolated"] > 0)}
        if s["rho_max"] is not None:
            out["cap"] = {"frac_over_max_final": last["frac_over_max"], "enforced": bool(cfg.filtered),
                          "violated": False}
    else:
        start = int(math.ceil(s["transient"] * len(diagnostics)))
        after = [d["entropy_hat"] for d in diagnostics[start:]] or [math.inf]
        lo = min(after)
        thr = s["entropy_eps"] - s["entropy_tol"]
        out["entropy"] = {"min_after_transient": lo, "threshold": s["entropy_eps"], "tol": s["entropy_tol"],
                          "enforced": bool(cfg.filtered), "violated": bool(cfg.filtered and lo < thr)}
    return out


def _output_dir(cfg: ScenarioConfig, out=None) -> Path:
    if out is not None:
        return Path(out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / cfg.name
    if cfg.output["dir"]:
        return Path(cfg.output["dir"])
    return Path("runs") / cfg.name


def run_config(cfg: ScenarioConfig, out=None, write: bool = True, progress=None) -> RunReport:
    """Execute one scenario; with ``write`` the CSVs, plots and ``report.json`` go to the output dir."""
    t0 = time.perf_counter()
    grid = make_grid(cfg.grid["bounds"], cfg.grid["cells"])
    rho0 = build_density(cfg.initial, grid)
    target = build_density(cfg.target, grid)
    try:
        if cfg.mode == "macroscopic":
            rep, payload = _run_macro(cfg, grid, rho0, target, progress)
        else:
            rep, payload = _run_micro(cfg, grid, rho0, target, progress)
    except InfeasibleQPError as exc:
        if write and exc.snapshot and "rho" in exc.snapshot:
            d = _output_dir(cfg, out)
            d.mkdir(parents=True, exist_ok=True)
            write_field_csv(d / "failure_state.csv", exc.snapshot["rho"], exc.snapshot.get("u_nom"))
            log.error("failure state written to %s", d / "failure_state.csv")
        raise
    rep.final["wall_time"] = time.perf_counter() - t0
    if write:
        d = _output_dir(cfg, out)
        d.mkdir(parents=True, exist_ok=True)
        rep.out_dir = str(d)
        _write_outputs(cfg, rep, payload, d)
        rep.save(d / "report.json")
    return rep


def _run_macro(cfg, grid, rho0, target, progress):
    fc = build_filter_config(cfg, grid, target)
    traj = run_scenario(rho0, fc, progress=progress)
    diags = [dict(step=k, **d) for k, d in enumerate(traj.diagnostics)]
    viol = recompute_violations(cfg, diags)
    final = {"w2_to_target": diags[-1]["w2_to_target"], "steps": traj.steps, "t_final": diags[-1]["t"]}
    for lab in barrier_labels(fc.barriers):
        vals = [d[lab] for d in diags]
        final[f"{lab}_min"] = min(vals)
        final[f"{lab}_max"] = max(vals)
    final["mass_max_deviation"] = viol["mass"]["max_deviation"]
    rep = RunReport(cfg.to_dict(), diags, final, viol)
    return rep, {"traj": traj, "grid": grid, "target": target, "barriers": fc.barriers}


def _run_micro(cfg, grid, rho0, target, progress):
    s = cfg.swarm
    rng = np.random.default_rng(cfg.seed)
    T = transport_map(rho0, target, _sinkhorn(cfg))
    swarm = sample_swarm(rho0, s["N"], s["r"], rng)
    dest = destinations(T, swarm.positions)
    traj = run_swarm(swarm, dest, build_swarm_config(cfg), progress=progress)
    diags = [dict(step=k, **d) for k, d in enumerate(traj.diagnostics)]
    viol = recompute_violations(cfg, diags)
    last = diags[-1]
    final = {k: last[k] for k in ("t", "isolated", "min_neighbors", "rho_hat_max") if k in last}
    for k in ("frac_over_max", "frac_under_min", "entropy_hat"):
        if k in last:
            final[k] = last[k]
    if s["mode"] == "entropy":
        final["entropy_min_after_transient"] = viol["entropy"]["min_after_transient"]
        if traj.rounds:
            final["max_abs_telescope"] = max(abs(r["sum_telescope"]) for r in traj.rounds)
    rep = RunReport(cfg.to_dict(), diags, final, viol)
    return rep, {"traj": traj, "grid": grid, "target": target}


def _write_outputs(cfg, rep, payload, d: Path):
    (d / "config.yaml").write_text(cfg.dump())
    write_csv(d / "diagnostics.csv", rep.diagnostics)
    rep.files += ["config.yaml", "diagnostics.csv"]
    snap_dir = d / "snapshots"
    snap_dir.mkdir(exist_ok=True)
    traj = payload["traj"]
    if cfg.mode == "macroscopic":
        for k, (t, rho) in enumerate(zip(traj.times, traj.snapshots)):
            name = f"snapshots/rho_{k:05d}.csv"
            write_field_csv(d / name, rho)
            rep.files.append(name)
    else:
        for k, snap in enumerate(traj.snapshots):
            name = f"snapshots/swarm_{k:05d}.csv"
            _write_swarm_csv(d / name, snap)
            rep.files.append(name)
        if traj.rounds:
            write_csv(d / "consensus.csv", traj.rounds, ["round", "sum_telescope", "max_lambda_spread", "entropy_hat"])
            rep.files.append("consensus.csv")
    if cfg.output["plots"]:
        from . import plotting

        rep.files += plotting.plot_run(cfg, rep, payload, d)


def _write_swarm_csv(path, snap):
    dim = snap.positions.shape[1]
    axes = "xyz"[:dim]
    cols = ["id"] + list(axes) + [f"v{a}" for a in axes] + ["rho_hat", "lambda", "y"]
    rows = []
    for i in range(snap.positions.shape[0]):
        r = {"id": i, "rho_hat": snap.rho_hat[i], "lambda": snap.lam[i], "y": snap.y[i]}
        for a, ax in enumerate(axes):
            r[ax] = snap.positions[i, a]
            r[f"v{ax}"] = snap.velocities[i, a]
        rows.append(r)
    write_csv(path, rows, cols)


def run(config_path=None, out=None, seed=None, preset_name=None, progress=None) -> RunReport:
    """CLI-level entry: preset and/or file (file keys override the preset), optional seed override."""
    if config_path is None and preset_name is None:
        raise ConfigError("give a config file or --preset")
    if preset_name and preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}", field="preset")
    base = copy.deepcopy(PRESETS[preset_name]) if preset_name else None
    if config_path is not None:
        cfg = load_config(config_path) if base is None else None
        if base is not None:
            text = Path(config_path).read_text()
            raw = yaml.load(text, Loader=_Loader) or {}
            cfg = parse_config(merge_config(base, raw))
    else:
        cfg = parse_config(base)
    if seed is not None:
        cfg = cfg.with_overrides(seed=int(seed))
    return run_config(cfg, out=out, progress=progress)


# ---------------------------------------------------------------------------
# comparison


def load_run(run_dir) -> dict:
    d = Path(run_dir)
    try:
        report = json.loads((d / "report.json").read_text())
    except OSError:
        raise ComparisonError(f"{d} does not look like a run directory (no report.json)") from None
    return {"dir": str(d), "report": report, "diagnostics": read_csv(d / "diagnostics.csv")}


def compare(dir_a, dir_b, out=None, plots: bool = True) -> dict:
    """Side-by-side final metrics, their differences and each run's worst constraint margin."""
    a, b = load_run(dir_a), load_run(dir_b)
    ca, cb = a["report"]["config"], b["report"]["config"]
    if ca["grid"] != cb["grid"]:
        raise ComparisonError("runs use different grids")
    ha = ca["time"]["dt"] * ca["time"]["steps"]
    hb = cb["time"]["dt"] * cb["time"]["steps"]
    if not math.isclose(ha, hb, rel_tol=1e-12, abs_tol=1e-15):
        raise ComparisonError(f"runs have different horizons ({ha:g} vs {hb:g})")
    fa, fb = a["report"]["final"], b["report"]["final"]
    diff = {}
    for k in fa:
        if k == "wall_time" or k not in fb:
            continue
        if isinstance(fa[k], (int, float)) and isinstance(fb[k], (int, float)):
            x, y = float(fa[k]), float(fb[k])
            diff[k] = 0.0 if (x == y or (math.isnan(x) and math.isnan(y))) else y - x
    summary = {
        "a": {"dir": a["dir"], "name": ca["name"], "final": fa, "max_violation": _max_violation(a)},
        "b": {"dir": b["dir"], "name": cb["name"], "final": fb, "max_violation": _max_violation(b)},
        "difference": diff,
    }
    if out is not None:
        od = Path(out)
        od.mkdir(parents=True, exist_ok=True)
        files = []
        if plots:
            from . import plotting

            files = plotting.plot_compare(a, b, od)
        summary["files"] = files
        (od / "compare.json").write_text(json.dumps(_jsonable(summary), indent=2) + "\n")
    return summary


def _max_violation(run) -> dict:
    """Worst value of each constraint over the run (positive = violated by that much)."""
    cfg = run["report"]["config"]
    diags = run["diagnostics"]
    out = {}
    if cfg["mode"] == "macroscopic":
        for k in diags[0]:
            if k.startswith("H_"):
                out[k] = max(0.0, -min(d[k] for d in diags))
        out["mass"] = max(abs(d["mass"] - 1.0) for d in diags)
    else:
        s = cfg["swarm"]
        if s["mode"] == "entropy":
            out["entropy"] = max(0.0, s["entropy_eps"] - min(d["entropy_hat"] for d in diags))
        else:
            if s["rho_max"] is not None:
                out["frac_over_max_final"] = diags[-1]["frac_over_max"]
            out["isolated_final"] = diags[-1]["isolated"]
    return out


def format_compare(summary: dict) -> str:
    fa, fb = summary["a"]["final"], summary["b"]["final"]
    keys = [k for k in fa if k in fb and k != "wall_time"]
    w = max([len(k) for k in keys] + [10])
    lines = [f"{'metric':<{w}}  {summary['a']['name']:>16}  {summary['b']['name']:>16}  {'diff':>12}"]
    for k in keys:
        d = summary["difference"].get(k, "")
        lines.append(f"{k:<{w}}  {_short(fa[k]):>16}  {_short(fb[k]):>16}  {_short(d):>12}")
    lines.append("max constraint violation:")
    for side in ("a", "b"):
        mv = ", ".join(f"{k}={_short(v)}" for k, v in summary[side]["max_violation"].items())
        lines.append(f"  {summary[side]['name']}: {mv}")
    return "\n".join(lines)


def _short(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)
