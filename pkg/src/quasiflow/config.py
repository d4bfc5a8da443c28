"""Experiment configuration: one TOML file drives every stage.

The resolved config (defaults filled in) is written beside the run's
artifacts; loading the resolved file and dumping it again is byte-identical,
and its sha256 is stamped into every artifact manifest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:              # Python < 3.11
    import tomli as tomllib

from .drift import MollifiedSequence, ProblemSpec, SpaceQuadrature, make_drift
from .errors import ConfigError
from .flow import BrownianDriver, uniform_grid_1d
from .pde import GridSpec

_DEFAULTS = {
    "seed": 20240801,
    "workers": 1,
    "out_root": "runs",
    "problem": {"d": 1, "T": 1.0, "p": 3.0, "q": 8.0},
    "drift": {"kind": "zero"},
    "quadrature": {"half_width": 4.0, "base_panels": 96, "gl_order": 12,
                   "time_nodes": 16},
    "mollify": {"levels": [3, 4], "eps_scale": 1.0, "cutoff_base": 2.0,
                "gl_order": 16},
    "pde": {"half_width": 4.0, "h": 1.0 / 256.0, "dt": 2.5e-4,
            "padding": 0.5, "store_stride": 16},
    "lambda_policy": {"mode": "auto", "target": 0.5, "value": 1.0,
                      "start": 1.0, "cap": 2.0 ** 20},
    "driver": {"dt": 1.0e-3, "refine": 2, "paths_window": 256,
               "paths_census": 1024},
    "flow": {"window_center": 0.0, "window_spacing": 1.0e-3,
             "window_points": 41, "census_points": [-1.0, 1.0],
             "n_reports": 20, "box_margin": 0.1, "scheme": "euler",
             "headline_times": [0.25, 0.5, 1.0]},
    "verify": {"pde_order": False, "exp_moment_k": 2.0, "flow_gap_k": 2.0,
               "jacobian_stability": True},
    "thresholds": {
        "headline_median": 0.05, "moment_drift": 0.25, "expmoment_drift": 0.25,
        "jacobian_drift": 0.25, "reciprocity": 1.0e-9, "cov_median": 0.05,
        "cov_p95": 0.15, "monotonicity": 1.0e-3, "censored_max": 0.01,
        "roundtrip": 1.0e-10, "grad_phi_inv": 2.0, "sigma_sv_slack": 1.0e-9,
        "growth_headroom": 2.0, "pde_order_min": 1.9,
        "sobolev_ratio_drift": 2.0,
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = {}
    for key, dval in defaults.items():
        if key in user:
            uval = user[key]
            if isinstance(dval, dict):
                if not isinstance(uval, dict):
                    raise ConfigError(f"config key {path}{key} must be a table")
                out[key] = _merge(dval, uval, f"{path}{key}.")
            else:
                out[key] = uval
        else:
            out[key] = dval
    for key, uval in user.items():
        if key not in out:
            out[key] = uval
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value of type {type(v)}")


def dump_toml(data: dict) -> str:
    """Canonical TOML for our config shape (scalars, lists, one table level)."""
    lines = []
    for key in sorted(k for k, v in data.items() if not isinstance(v, dict)):
        lines.append(f"{key} = {_toml_value(data[key])}")
    for key in sorted(k for k, v in data.items() if isinstance(v, dict)):
        lines.append("")
        lines.append(f"[{key}]")
        sub = data[key]
        for k2 in sorted(sub):
            if isinstance(sub[k2], dict):
                raise ConfigError("config tables nest one level deep")
            lines.append(f"{k2} = {_toml_value(sub[k2])}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration with typed accessors."""

    name: str
    data: dict

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        data = _merge(_DEFAULTS, raw)
        name = data.get("name") or path.stem
        data["name"] = name
        cfg = cls(name=name, data=data)
        cfg.validate()
        return cfg

    def validate(self):
        self.problem()
        self.grid()
        drv = self.data["driver"]
        T = self.data["problem"]["T"]
        refine = int(drv["refine"])
        if refine < 1:
            raise ConfigError("driver.refine must be >= 1")
        base_dt = drv["dt"] / refine
        n = T / base_dt
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("T must be a whole number of base driver steps")
        if self.data["flow"]["window_points"] < 3:
            raise ConfigError("flow.window_points must be >= 3")
        levels = self.data["mollify"]["levels"]
        if sorted(levels) != list(levels) or len(levels) < 1:
            raise ConfigError("mollify.levels must be increasing and non-empty")
        head = self.data["flow"].get("headline_level", levels[-1])
        if head not in levels:
            raise ConfigError(
                f"flow.headline_level {head} is not among mollify.levels {levels}")

    def resolved_toml(self) -> str:
        return dump_toml(self.data)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_toml().encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def workers(self) -> int:
        return int(self.data["workers"])

    def problem(self) -> ProblemSpec:
        p = self.data["problem"]
        return ProblemSpec(d=int(p["d"]), T=float(p["T"]),
                           p=float(p["p"]), q=float(p["q"]))

    def drift_field(self):
        d = dict(self.data["drift"])
        kind = d.pop("kind")
        return make_drift(kind, self.problem(), **d)

    def quadrature(self) -> SpaceQuadrature:
        q = self.data["quadrature"]
        return SpaceQuadrature(half_width=float(q["half_width"]),
                               base_panels=int(q["base_panels"]),
                               gl_order=int(q["gl_order"]),
                               time_nodes=int(q["time_nodes"]))

    def mollified_sequence(self) -> MollifiedSequence:
        m = self.data["mollify"]
        return MollifiedSequence(self.drift_field(),
                                 [int(n) for n in m["levels"]],
                                 eps_scale=float(m["eps_scale"]),
                                 cutoff_base=float(m["cutoff_base"]),
                                 gl_order=int(m["gl_order"]))

    def grid(self) -> GridSpec:
        g = self.data["pde"]
        return GridSpec(half_width=float(g["half_width"]), h=float(g["h"]),
                        dt=float(g["dt"]), padding=float(g["padding"]),
                        store_stride=int(g["store_stride"]))

    @property
    def levels(self) -> list[int]:
        return [int(n) for n in self.data["mollify"]["levels"]]

    @property
    def headline_level(self) -> int:
        return int(self.data["flow"].get("headline_level", self.levels[-1]))

    @property
    def refine(self) -> int:
        return int(self.data["driver"]["refine"])

    def driver(self, family: str) -> BrownianDriver:
        drv = self.data["driver"]
        T = self.data["problem"]["T"]
        base_dt = float(drv["dt"]) / self.refine
        n_steps = int(round(T / base_dt))
        paths = int(drv["paths_window"] if family == "window" else drv["paths_census"])
        return BrownianDriver(master_seed=self.seed, n_paths=paths,
                              dt=base_dt, n_steps=n_steps,
                              d=int(self.data["problem"]["d"]))

    def window_grid(self, refined: bool = False):
        f = self.data["flow"]
        spacing = float(f["window_spacing"]) / (2.0 if refined else 1.0)
        if int(self.data["problem"]["d"]) == 1:
            return uniform_grid_1d(float(f["window_center"]), spacing,
                                   int(f["window_points"]))
        import numpy as np
        n = int(f["window_points"])
        c = float(f["window_center"])
        axis = (np.arange(n) - (n - 1) / 2.0) * spacing + c
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        return np.stack([X, Y], axis=-1).reshape(-1, 2)

    def window_meta(self, refined: bool = False) -> dict:
        f = self.data["flow"]
        n = int(f["window_points"])
        d = int(self.data["problem"]["d"])
        spacing = float(f["window_spacing"]) / (2.0 if refined else 1.0)
        return {"shape": [n] * d, "spacing": spacing, "uniform": True}

    def census_grid(self):
        import numpy as np
        pts = self.data["flow"]["census_points"]
        d = int(self.data["problem"]["d"])
        arr = np.asarray(pts, dtype=float)
        if arr.ndim == 1:
            if d != 1:
                raise ConfigError("census_points must be d-vectors for d > 1")
            arr = arr[:, None]
        return arr

    def thresholds(self) -> dict:
        return dict(self.data["thresholds"])
