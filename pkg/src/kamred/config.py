"""Problem-file parsing and validation.

The config is a single JSON document (schema documented in the README).
Potential tables are lists of records [multi_index, k, coeff]; each record is
mirrored to its conjugate so the assembled function is real-on-real.  The
(H2) self-adjointness relations are either satisfied by direct V-tables or
auto-completed from the free real parts (Y1, Y0), in which case the report
flags the completion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fourier import Fun
from .indices import Frequency, index_weight, make_index
from .regularization import SchrodingerInput


@dataclass
class RunConfig:
    eta: float = 1.0
    sigma_bar: float = 2.0
    jmax: int = 32
    lmax: float = 8.0
    eps: float = 1e-3
    gamma: float = None          # default eps**0.5
    mu: float = 2.0
    omega: dict = None           # {site: value} or {"sample": {...}}
    potential: dict = None
    kam: dict = field(default_factory=lambda: {
        "chi": 1.5, "n0": 8.0, "stop": 1e-12, "n_max": 8})
    evolve: dict = field(default_factory=lambda: {
        "t_final": 10.0, "dt": 1e-3, "sigma_eval": 0.25, "n_samples": 16})
    measure: dict = field(default_factory=lambda: {
        "d": 3, "gamma_list": [0.1, 0.05, 0.025], "lmax": 4.0,
        "samples": 10000})
    seed: int = 12345
    auto_completed: bool = False

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"config parse error at line {e.lineno}, column {e.colno}: "
                f"{e.msg}") from e
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        cfg = cls()
        known = {"eta", "sigma_bar", "jmax", "lmax", "eps", "gamma", "mu",
                 "omega", "potential", "kam", "evolve", "measure", "seed"}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown config field '{key}'")
        for key in ("eta", "sigma_bar", "eps", "gamma", "mu"):
            if key in raw:
                v = raw[key]
                if not isinstance(v, (int, float)):
                    raise ConfigError(f"field '{key}' must be a number")
                setattr(cfg, key, float(v))
        for key in ("jmax", "seed"):
            if key in raw:
                if not isinstance(raw[key], int):
                    raise ConfigError(f"field '{key}' must be an integer")
                setattr(cfg, key, raw[key])
        if "lmax" in raw:
            cfg.lmax = float(raw["lmax"])
        for key in ("kam", "evolve", "measure"):
            if key in raw:
                if not isinstance(raw[key], dict):
                    raise ConfigError(f"field '{key}' must be an object")
                getattr(cfg, key).update(raw[key])
        if cfg.gamma is None:
            cfg.gamma = math.sqrt(cfg.eps)
        cfg.omega = raw.get("omega")
        cfg.potential = raw.get("potential")
        if cfg.potential is None:
            raise ConfigError("missing required field 'potential'")
        if cfg.eps < 0:
            raise ConfigError("eps must be nonnegative")
        return cfg

    # -- builders -------------------------------------------------------------

    def build_frequency(self) -> Frequency:
        from .diophantine import sample_diophantine_frequency
        if self.omega is None:
            raise ConfigError("missing required field 'omega'")
        if "sample" in self.omega:
            spec = self.omega["sample"]
            d = int(spec.get("d", 2))
            seed = int(spec.get("seed", self.seed))
            omega, _ = sample_diophantine_frequency(
                d, self.gamma, self.mu, self.lmax, seed, eta=self.eta)
            return omega
        try:
            comps = {int(n): float(v) for n, v in self.omega.items()}
        except (TypeError, ValueError) as e:
            raise ConfigError(f"omega table malformed: {e}") from e
        try:
            return Frequency(comps, gamma=self.gamma, mu=self.mu)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def _parse_table(self, name, records, normalize):
        coeffs = {}
        if not isinstance(records, list):
            raise ConfigError(f"potential.{name} must be a list of records")
        for i, rec in enumerate(records):
            where = f"potential.{name}[{i}]"
            if not (isinstance(rec, list) and len(rec) == 3):
                raise ConfigError(
                    f"{where}: record must be [multi_index, k, coeff]")
            mi_raw, k, c = rec
            if not isinstance(mi_raw, dict):
                raise ConfigError(f"{where}: multi_index must be an object")
            try:
                mi = make_index({int(n): int(e) for n, e in mi_raw.items()})
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{where}: bad multi_index: {e}") from e
            if not isinstance(k, int):
                raise ConfigError(f"{where}: spatial mode k must be integer")
            if isinstance(c, (int, float)):
                cv = complex(c)
            elif isinstance(c, list) and len(c) == 2:
                cv = complex(c[0], c[1])
            else:
                raise ConfigError(f"{where}: coeff must be number or [re,im]")
            if abs(k) > self.jmax:
                raise ConfigError(f"{where}: |k| = {abs(k)} > jmax")
            w = index_weight(mi, self.eta) + abs(k)
            if w > self.lmax + self.jmax:
                raise ConfigError(f"{where}: weight {w} beyond the envelope")
            if normalize:
                cv *= math.exp(-self.sigma_bar * w)
            # real-on-real symmetry completion
            key = (mi, k)
            mkey = (tuple((n, -e) for n, e in mi), -k)
            coeffs[key] = coeffs.get(key, 0j) + cv
            coeffs[mkey] = coeffs.get(mkey, 0j) + cv.conjugate()
        return Fun(coeffs, sigma=self.sigma_bar, eta=self.eta,
                   jmax=self.jmax, lmax=self.lmax)

    def build_input(self, omega=None) -> SchrodingerInput:
        pot = self.potential
        if not isinstance(pot, dict):
            raise ConfigError("'potential' must be an object")
        normalize = bool(pot.get("normalize_width", True))
        if "v2" not in pot:
            raise ConfigError("potential.v2 is required")
        v2 = self._parse_table("v2", pot["v2"], normalize)
        if v2.reality_defect() > 1e-12:
            raise ConfigError("potential.v2 must be real-on-real")
        direct = "v1" in pot or "v0" in pot
        free = "y1" in pot or "y0" in pot
        if direct and free:
            raise ConfigError(
                "give either direct tables (v1, v0) or free parts (y1, y0)")
        if direct:
            v1 = self._parse_table("v1", pot.get("v1", []), normalize)
            v0 = self._parse_table("v0", pot.get("v0", []), normalize)
            self.auto_completed = False
        else:
            y1 = self._parse_table("y1", pot.get("y1", []), normalize)
            y0 = self._parse_table("y0", pot.get("y0", []), normalize)
            v1 = v2.x_derivative(1) + 1j * y1
            v0 = y0 + 0.5j * y1.x_derivative(1)
            self.auto_completed = True
        omega = self.build_frequency() if omega is None else omega
        return SchrodingerInput(v0=v0, v1=v1, v2=v2, eps=self.eps,
                                omega=omega, sigma_bar=self.sigma_bar,
                                jmax=self.jmax, lmax=self.lmax, eta=self.eta)

    def echo(self):
        """Deterministic dict for the report bundle."""
        return {
            "eta": self.eta, "sigma_bar": self.sigma_bar, "jmax": self.jmax,
            "lmax": self.lmax, "eps": self.eps, "gamma": self.gamma,
            "mu": self.mu, "omega": self.omega, "potential": self.potential,
            "kam": self.kam, "evolve": self.evolve, "measure": self.measure,
            "seed": self.seed, "auto_completed": self.auto_completed,
        }


REFERENCE_CONFIG = {
    "eta": 1.0,
    "sigma_bar": 1.0,
    "jmax": 32,
    "lmax": 8.0,
    "eps": 1e-3,
    "mu": 2.0,
    "omega": {"1": 1.41421356237, "2": 1.73205080757},
    "potential": {
        "normalize_width": True,
        "v2": [[{"1": 1}, 1, [0.25, 0.1]], [{"2": 1}, 1, [0.15, -0.07]],
               [{}, 1, 0.1], [{"1": 1}, 0, [0.1, 0.05]]],
        "y1": [[{"1": 1}, 1, [0.2, 0.1]], [{"1": -1, "2": 1}, 2, [0.1, 0.06]],
               [{"1": 1, "2": -1}, 0, [0.3, -0.12]], [{}, 0, -0.25]],
        "y0": [[{"2": 1}, 0, [0.3, 0.2]], [{"1": 1}, 2, [0.2, -0.1]],
               [{}, 0, 0.25], [{"1": 2}, 1, [0.4, 0.15]],
               [{"1": 2}, 0, [0.3, -0.2]]],
    },
    "kam": {"chi": 1.5, "n0": 8.0, "stop": 1e-12, "n_max": 8},
    "evolve": {"t_final": 10.0, "dt": 1e-3, "sigma_eval": 0.25,
               "n_samples": 16},
    "measure": {"d": 3, "gamma_list": [0.1, 0.05, 0.025], "lmax": 4.0,
                "samples": 10000},
    "seed": 12345,
}
