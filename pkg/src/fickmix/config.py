"""Flat key-value run configuration with schema validation and hashing.

Config files are plain text, one ``section.key = value`` pair per line, with
``#`` comments.  Every key has a default, unknown keys are rejected, and the
canonical serialization of the resolved configuration is hashed so reports
and cache files can be tied to the exact inputs that produced them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mixture import Mixture
from .velocity_grid import build_grid

_INT = "int"
_FLOAT = "float"
_FLOATS = "floats"
_CHOICE = "choice"

#: Default collision-kernel constant for every species pair.
DEFAULT_KINETIC_CONSTANT = 12.0

# key -> (kind, default, extra); extra holds the admissible choices.
SCHEMA = {
    "species.count": (_INT, 2, None),
    "species.masses": (_FLOATS, (1.0, 3.0), None),
    "species.concentrations": (_FLOATS, (1.0, 2.0), None),
    # Defaults to DEFAULT_KINETIC_CONSTANT in every entry, sized N*N.  The
    # default puts the shipped slab scenario well inside the scale-separated
    # regime: the collision rate exceeds the fluid relaxation rate by a
    # factor ~1/(6.6 eps^2) at the largest study epsilon.
    "kernel.c_phi": (_FLOATS, None, None),
    "kernel.gamma": (_FLOAT, 0.0, None),
    "kernel.angular": (_CHOICE, "constant", ("constant", "grad")),
    "kernel.b0": (_FLOAT, 1.0 / (2.0 * math.pi), None),
    "kernel.d": (_INT, 2, None),
    "grid.rv": (_FLOAT, 6.0, None),
    "grid.mv": (_INT, 24, None),
    "grid.angular": (_INT, 16, None),
    "solver.dt": (_FLOAT, 1e-3, None),
    "solver.t_end": (_FLOAT, 1.0, None),
    "solver.s": (_INT, 1, None),
    "solver.matrix_mode": (_CHOICE, "quasilinear", ("frozen", "quasilinear")),
    "solver.cells": (_INT, 128, None),
    "solver.delta": (_FLOAT, 0.5, None),
    "solver.delta_s": (_FLOAT, 0.1, None),
    "init.amplitude": (_FLOAT, 1e-3, None),
    "init.wavenumber": (_INT, 1, None),
    "kinetic.epsilons": (_FLOATS, (0.2, 0.1, 0.05), None),
    "kinetic.t_end": (_FLOAT, 0.1, None),
    "kinetic.dt_factor": (_FLOAT, 0.025, None),
    "kinetic.cells": (_INT, 64, None),
    "kinetic.s": (_INT, 1, None),
    "kinetic.control_threshold": (_FLOAT, 50.0, None),
    "constants.c2": (_FLOAT, 1.0, None),
}

# keys whose values determine the collision stencil and assembled operator;
# cache files are addressed by a hash over this subset only.
_PIPELINE_PREFIXES = ("species.", "kernel.", "grid.")


def _parse_value(key: str, raw: str):
    kind, _default, extra = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind == _INT:
            return int(raw)
        if kind == _FLOAT:
            return float(raw)
        if kind == _FLOATS:
            return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ValueError(f"config key '{key}': cannot parse '{raw}'") from exc
    if kind == _CHOICE:
        if raw not in extra:
            raise ValueError(f"config key '{key}': '{raw}' not in {extra}")
        return raw
    raise ValueError(f"unhandled config kind for '{key}'")


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration with canonical hashing and object builders."""

    values: dict = field(default_factory=dict)

    def get(self, key: str):
        return self.values[key]

    @property
    def canonical(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical.encode("utf-8")).hexdigest()

    @property
    def pipeline_hash(self) -> str:
        lines = [
            f"{k} = {_format_value(self.values[k])}"
            for k in sorted(self.values)
            if k.startswith(_PIPELINE_PREFIXES)
        ]
        text = "\n".join(lines) + "\n"
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def mixture(self) -> Mixture:
        count = self.get("species.count")
        c_phi = np.asarray(self.get("kernel.c_phi"), dtype=float).reshape(count, count)
        return Mixture(
            masses=np.asarray(self.get("species.masses"), dtype=float),
            kinetic_constants=c_phi,
            gamma=self.get("kernel.gamma"),
            angular_profile=self.get("kernel.angular"),
            profile_constant=self.get("kernel.b0"),
            dim=self.get("kernel.d"),
        )

    def grid(self):
        return build_grid(
            dim=self.get("kernel.d"),
            r_max=self.get("grid.rv"),
            points_per_axis=self.get("grid.mv"),
            angular_count=self.get("grid.angular"),
        )

    def concentrations(self) -> np.ndarray:
        return np.asarray(self.get("species.concentrations"), dtype=float)


def _validate(values: dict) -> dict:
    count = values["species.count"]
    if count < 2:
        raise ValueError("species.count must be at least 2")
    masses = values["species.masses"]
    if len(masses) != count:
        raise ValueError(
            f"species.masses must list exactly {count} values, got {len(masses)}"
        )
    conc = values["species.concentrations"]
    if len(conc) != count:
        raise ValueError(
            f"species.concentrations must list exactly {count} values, got {len(conc)}"
        )
    if values["kernel.c_phi"] is None:
        values["kernel.c_phi"] = tuple(
            DEFAULT_KINETIC_CONSTANT for _ in range(count * count))
    if len(values["kernel.c_phi"]) != count * count:
        raise ValueError(
            f"kernel.c_phi must list {count * count} row-major entries"
        )
    for key in ("solver.dt", "solver.t_end", "kinetic.t_end", "kinetic.dt_factor",
                "init.wavenumber", "solver.cells", "kinetic.cells"):
        if values[key] <= 0:
            raise ValueError(f"config key '{key}' must be positive")
    for key in ("solver.s", "kinetic.s"):
        if values[key] < 0:
            raise ValueError(f"config key '{key}' must be non-negative")
    return values


def parse_config_text(text: str) -> RunConfig:
    """Parse config text, fill defaults, validate, and freeze."""
    values = {k: default for k, (_kind, default, _extra) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"config line {lineno}: expected 'key = value', got '{body}'")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        values[key] = _parse_value(key, raw)
    return RunConfig(values=_validate(values))


def load_config(path=None) -> RunConfig:
    """Load a config file, or the pure defaults when no path is given."""
    if path is None:
        return parse_config_text("")
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))
