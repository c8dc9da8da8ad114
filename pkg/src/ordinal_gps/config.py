"""Run configuration: a declarative YAML or JSON document.

Minimal example::

    mode: analyze
    input: data.csv
    outcome: bmi
    treatment:
      column: label_use
      levels: [never, rarely, sometimes, most, always]
    covariates:
      - {name: age, type: numeric, role: gps}
      - {name: female, type: binary, role: adjustment-A1}
      - {name: smoker, type: binary, role: audit-only}
    K: [5, 10, 15]
    elimination: E2

``synthetic: {n: 1000, seed: 0}`` may replace ``input``/``outcome``/``treatment``
to run on generated data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import yaml

from .design import EliminationRule
from .errors import ConfigError

MODES = ("analyze", "audit", "simulate")
ROLES = ("gps", "adjustment-A1", "audit-only")
TYPES = ("numeric", "ordinal", "binary")
ADJUSTMENTS = ("none", "A1", "A2")
SETS = ("set1", "set2")
DEFAULT_MISSING = ("", "NA", "N/A", "NaN", "nan", ".")


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    type: str = "numeric"
    role: str = "gps"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.type not in TYPES:
            raise ConfigError(f"covariate {self.name!r}: type must be one of {TYPES}")
        if self.role not in ROLES:
            raise ConfigError(f"covariate {self.name!r}: role must be one of {ROLES}")
        if self.levels is not None and self.type != "ordinal":
            raise ConfigError(f"covariate {self.name!r}: levels are only allowed for ordinal columns")


@dataclass(frozen=True)
class SimulationSpec:
    """Monte Carlo settings used in ``simulate`` mode."""

    sets: tuple[str, ...] = SETS
    M: int = 500
    n_covariates: int = 15
    estimators: tuple[str, ...] = (
        "subclass_K5",
        "subclass_regression_K5",
        "subclass_K15",
        "subclass_regression_K15",
        "naive",
        "standard_regression",
        "iptw",
    )
    bootstrap_B: int = 200
    adjustment: str = "A2"
    pca_columns: tuple[str, ...] | None = None
    standardize_pca: bool = True

    def __post_init__(self):
        bad = [s for s in self.sets if s not in SETS]
        if bad or not self.sets:
            raise ConfigError(f"simulation.sets must be a non-empty subset of {SETS}")
        if self.M < 1:
            raise ConfigError("simulation.M must be at least 1")
        if self.n_covariates < 1:
            raise ConfigError("simulation.n_covariates must be at least 1")
        if self.bootstrap_B < 0:
            raise ConfigError("simulation.bootstrap_B must be non-negative")
        if self.adjustment not in ADJUSTMENTS:
            raise ConfigError(f"simulation.adjustment must be one of {ADJUSTMENTS}")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "analyze"
    input: str | None = None
    outcome: str | None = None
    treatment_column: str | None = None
    treatment_levels: tuple[str, ...] | None = None
    id_column: str | None = None
    covariates: tuple[CovariateSpec, ...] = ()
    missing_values: tuple[str, ...] = DEFAULT_MISSING
    synthetic: dict | None = None
    K: tuple[int, ...] = (5, 10, 15)
    elimination: str = "E1"
    adjustment: tuple[str, ...] = ("A1", "A2")
    alpha: float = 0.05
    gate_alpha: float = 0.05
    gate_multiplier: float = 2.0
    seed: int = 0
    bootstrap_B: int = 1000
    simulation: SimulationSpec = field(default_factory=SimulationSpec)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.input is None and self.synthetic is None:
            raise ConfigError("either 'input' or 'synthetic' is required")
        if self.input is not None and self.synthetic is not None:
            raise ConfigError("'input' and 'synthetic' are mutually exclusive")
        if self.input is not None:
            if not self.treatment_column:
                raise ConfigError("treatment.column is required")
            if not self.covariates:
                raise ConfigError("at least one covariate is required")
            if self.mode != "audit" and not self.outcome:
                raise ConfigError(f"outcome is required in {self.mode} mode")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate names")
        if self.covariates and not any(c.role != "audit-only" for c in self.covariates):
            raise ConfigError("at least one covariate must enter the balancing-score model")
        if not self.K or any(int(k) != k or k < 1 for k in self.K):
            raise ConfigError("K values must be integers >= 1")
        try:
            EliminationRule(self.elimination)
        except ValueError:
            raise ConfigError("elimination must be one of E1, E2, E3") from None
        bad = [a for a in self.adjustment if a not in ADJUSTMENTS]
        if bad:
            raise ConfigError(f"adjustment entries must be among {ADJUSTMENTS}")
        for name in ("alpha", "gate_alpha"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.gate_multiplier <= 0:
            raise ConfigError("gate_multiplier must be positive")
        if self.bootstrap_B < 0:
            raise ConfigError("bootstrap_B must be non-negative")

    # ------------------------------------------------------------------ #

    def role_names(self, *roles: str) -> list[str]:
        return [c.name for c in self.covariates if c.role in roles]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["covariates"] = [asdict(c) for c in self.covariates]
        return json.loads(json.dumps(out))

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form; output options are not part of it."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def with_mode(self, mode: str) -> "RunConfig":
        return replace(self, mode=mode)


def _tuple(v):
    if v is None:
        return None
    if isinstance(v, (str, int)):
        return (v,)
    return tuple(v)


def from_mapping(doc: dict[str, Any], *, base_dir: Path | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a parsed document."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a key-value mapping")
    known = {
        "mode", "input", "outcome", "treatment", "id_column", "covariates", "missing_values",
        "synthetic", "K", "elimination", "adjustment", "alpha", "gate_alpha", "gate_multiplier",
        "seed", "bootstrap_B", "simulation",
    }
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {unknown}")
    kw: dict[str, Any] = {}
    for key in ("mode", "outcome", "id_column", "elimination", "alpha", "gate_alpha",
                "gate_multiplier", "seed", "bootstrap_B", "synthetic"):
        if key in doc:
            kw[key] = doc[key]
    if "input" in doc and doc["input"] is not None:
        path = Path(doc["input"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        kw["input"] = str(path)
    if "treatment" in doc:
        tr = doc["treatment"]
        if isinstance(tr, str):
            tr = {"column": tr}
        kw["treatment_column"] = tr.get("column")
        if tr.get("levels") is not None:
            kw["treatment_levels"] = tuple(str(v) for v in tr["levels"])
    if "covariates" in doc:
        specs = []
        for c in doc["covariates"] or ():
            if isinstance(c, str):
                c = {"name": c}
            try:
                levels = c.get("levels")
                specs.append(CovariateSpec(
                    name=str(c["name"]),
                    type=c.get("type", "numeric"),
                    role=c.get("role", "gps"),
                    levels=None if levels is None else tuple(str(v) for v in levels),
                ))
            except (KeyError, TypeError):
                raise ConfigError(f"malformed covariate entry {c!r}") from None
        kw["covariates"] = tuple(specs)
    if "missing_values" in doc:
        kw["missing_values"] = tuple(str(v) for v in doc["missing_values"])
    if "K" in doc:
        kw["K"] = tuple(_tuple(doc["K"]))
    if "adjustment" in doc:
        kw["adjustment"] = tuple(_tuple(doc["adjustment"]))
    if "simulation" in doc:
        sim = dict(doc["simulation"] or {})
        for key in ("sets", "estimators", "pca_columns"):
            if key in sim:
                sim[key] = _tuple(sim[key])
        try:
            kw["simulation"] = SimulationSpec(**sim)
        except TypeError as exc:
            raise ConfigError(f"simulation section: {exc}") from None
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    """Read a YAML or JSON configuration file; relative input paths resolve against its directory."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse configuration {path}: {exc}") from None
    return from_mapping(doc, base_dir=path.parent)
