"""Batch orchestration: ingest, design, balance gate, estimation, simulation."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .balance import balance_audit, emit_plot_data, significant_proportion
from .config import CovariateSpec, RunConfig
from .data import Dataset
from .design import subclassify, trim_common_support, validate_partition
from .errors import (
    EmptyAfterFiltering,
    NonConvergence,
    OrdinalGPSError,
    SchemaMismatch,
    UnparseableValue,
)
from .estimation import (
    estimate_iptw,
    estimate_naive,
    estimate_standard_regression,
    estimate_subclass_means,
    estimate_subclass_regression,
    global_test,
)
from .models import fit_ordered_logit, linear_predictor
from .simulation import FullPotentialData, SimulationSummary, StudyConfig, impute_set1, impute_set2, run_study
from .synthetic import base_study_data

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATE = 4


@contextmanager
def stage(name: str):
    """Tag package errors raised inside the block with the pipeline stage."""
    try:
        yield
    except OrdinalGPSError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


# --------------------------------------------------------------------------- #
# Ingestion
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class IngestReport:
    source: str
    rows_read: int
    dropped_missing: int
    retained: int

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "rows_read": self.rows_read,
            "dropped_missing": self.dropped_missing,
            "retained": self.retained,
        }


_TRUE = {"1", "1.0", "true", "yes"}
_FALSE = {"0", "0.0", "false", "no"}


def _parse_float(raw: str, line: int, column: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise UnparseableValue(line, column, raw) from None
    if not math.isfinite(v):
        raise UnparseableValue(line, column, raw)
    return v


def _parse_covariate(raw: str, spec: CovariateSpec, line: int) -> float:
    if spec.type == "binary":
        key = raw.strip().lower()
        if key in _TRUE:
            return 1.0
        if key in _FALSE:
            return 0.0
        raise UnparseableValue(line, spec.name, raw)
    if spec.type == "ordinal":
        if spec.levels is not None:
            try:
                return float(spec.levels.index(raw.strip()))
            except ValueError:
                raise UnparseableValue(line, spec.name, raw) from None
        v = _parse_float(raw, line, spec.name)
        if v != int(v):
            raise UnparseableValue(line, spec.name, raw)
        return v
    return _parse_float(raw, line, spec.name)


def ingest(path: str | Path, config: RunConfig, *, require_outcome: bool = True) -> tuple[Dataset, IngestReport]:
    """Read a comma-separated file with a header row into a typed :class:`Dataset`.

    Rows with a missing value in any referenced column are dropped and
    counted. Treatment values are mapped through the declared level ordering;
    without one they must be integers and are ranked in numeric order.
    Parse errors name the file line (the header is line 1) and column.
    """
    path = Path(path)
    specs = config.covariates
    outcome = config.outcome if require_outcome else None
    missing = set(config.missing_values)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise SchemaMismatch(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaMismatch(f"{path} is empty") from None
        needed = [s.name for s in specs] + [config.treatment_column]
        if outcome:
            needed.append(outcome)
        if config.id_column:
            needed.append(config.id_column)
        absent = [c for c in needed if c not in header]
        if absent:
            raise SchemaMismatch(f"column(s) {absent} not found in {path.name}")
        pos = {c: header.index(c) for c in needed}

        ids, xs, ts, ys = [], [], [], []
        rows_read = dropped = 0
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            rows_read += 1
            if len(row) != len(header):
                raise SchemaMismatch(f"line {line}: expected {len(header)} fields, found {len(row)}")
            cells = {c: row[pos[c]].strip() for c in needed}
            if any(v in missing for v in cells.values()):
                dropped += 1
                continue
            xs.append([_parse_covariate(cells[s.name], s, line) for s in specs])
            ts.append((cells[config.treatment_column], line))
            if outcome:
                ys.append(_parse_float(cells[outcome], line, outcome))
            if config.id_column:
                raw = cells[config.id_column]
                try:
                    ids.append(int(raw))
                except ValueError:
                    raise UnparseableValue(line, config.id_column, raw) from None
            else:
                ids.append(rows_read - 1)

    if not xs:
        raise EmptyAfterFiltering(f"no complete rows in {path.name} ({rows_read} read, {dropped} dropped)")

    tcol = config.treatment_column
    if config.treatment_levels is not None:
        levels = list(config.treatment_levels)
        t = []
        for raw, line in ts:
            if raw not in levels:
                raise UnparseableValue(line, tcol, raw)
            t.append(levels.index(raw) + 1)
        labels = tuple(levels)
    else:
        codes = []
        for raw, line in ts:
            try:
                codes.append(int(raw))
            except ValueError:
                raise UnparseableValue(line, tcol, raw) from None
        uniq = sorted(set(codes))
        t = [uniq.index(c) + 1 for c in codes]
        labels = tuple(str(u) for u in uniq)
    if len(labels) < 2:
        raise SchemaMismatch("treatment needs at least two levels")

    data = Dataset(
        ids=np.array(ids),
        x=np.array(xs, dtype=float).reshape(len(xs), len(specs)),
        t=np.array(t),
        y=np.array(ys) if outcome else None,
        n_levels=len(labels),
        columns=tuple(s.name for s in specs),
        kinds=tuple(s.type for s in specs),
        level_labels=labels,
    )
    report = IngestReport(str(path), rows_read, dropped, data.n)
    logger.info("ingested %d rows, dropped %d with missing values", rows_read, dropped)
    return data, report


def load_data(config: RunConfig, *, require_outcome: bool = True) -> tuple[Dataset, IngestReport]:
    """The configured dataset, from a file or from the synthetic generator."""
    if config.synthetic is not None:
        opts = dict(config.synthetic)
        data = base_study_data(**opts)
        if config.covariates:
            data = data.select_columns([c.name for c in config.covariates])
        return data, IngestReport(f"synthetic:{json.dumps(opts, sort_keys=True)}", data.n, 0, data.n)
    return ingest(config.input, config, require_outcome=require_outcome)


def _roles(config: RunConfig, data: Dataset) -> tuple[list[str], list[str], list[str]]:
    """Balancing-score covariates, A1 covariates, audited covariates."""
    if not config.covariates:
        names = list(data.columns)
        return names, [], names
    gps = config.role_names("gps", "adjustment-A1")
    a1 = config.role_names("adjustment-A1")
    return gps, a1, [c.name for c in config.covariates]


def _adjustment_sets(config: RunConfig, gps: list[str], a1: list[str], which) -> dict[str, list[str]]:
    table = {"none": [], "A1": a1, "A2": gps}
    return {a: table[a] for a in which}


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def provenance(config: RunConfig) -> dict:
    return {
        "config_hash": config.hash(),
        "seed": config.seed,
        "versions": {
            "package": package_version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }


@dataclass
class RunReport:
    """Everything one run produced, keyed to the configuration hash."""

    mode: str
    config: dict
    provenance: dict
    ingest: dict
    sections: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    exit_code: int = EXIT_OK

    def to_dict(self) -> dict:
        return _clean({
            "mode": self.mode,
            "exit_code": self.exit_code,
            "provenance": self.provenance,
            "config": self.config,
            "ingest": self.ingest,
            "notes": self.notes,
            **self.sections,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_markdown(self) -> str:
        from .report import render_markdown

        return render_markdown(self.to_dict())


# --------------------------------------------------------------------------- #
# Analysis
# --------------------------------------------------------------------------- #


def _fit_summary(fit) -> dict:
    return {
        "columns": list(fit.column_names),
        "beta": fit.beta.tolist(),
        "theta": fit.theta.tolist(),
        "se": fit.se.tolist(),
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "grad_norm": fit.grad_norm,
        "converged": fit.converged,
        "n": fit.n,
    }


def _require_converged(fit, what: str) -> None:
    if not fit.converged:
        raise NonConvergence(f"{what} did not converge (max|grad|={fit.grad_norm:.3g})")


def run_analysis(config: RunConfig) -> RunReport:
    """Design, balance audit and (in analyze mode) effect estimation.

    For every K the partition is validated and audited. Estimation for a K is
    skipped, with the reason recorded, when the partition is infeasible or
    the share of significant within-subclass balance tests at ``gate_alpha``
    exceeds ``gate_multiplier * gate_alpha``. If no K survives, the report's
    exit code is 4.
    """
    estimate = config.mode == "analyze"
    with stage("ingest"):
        data, ing = load_data(config, require_outcome=estimate)
    report = RunReport(config.mode, config.to_dict(), provenance(config), ing.to_dict())
    gps, a1, audited = _roles(config, data)
    adj_sets = _adjustment_sets(config, gps, a1, config.adjustment)
    p_check = max((len(v) for v in adj_sets.values()), default=0)

    with stage("gps-fit"):
        fit = fit_ordered_logit(data, gps)
        _require_converged(fit, "balancing-score model")
    continuous = [c for c in gps if data.kinds[data.columns.index(c)] == "numeric"]
    with stage("support"):
        retained, support = trim_common_support(data, fit, config.elimination, continuous)
        _require_converged(support.refit, "balancing-score refit")
    refit = support.refit
    lp = linear_predictor(refit, retained)
    report.sections["gps_fit"] = _fit_summary(fit)
    report.sections["support"] = support.to_dict()
    if support.passes:
        report.notes.append(
            f"{config.elimination}: one trim-then-refit pass; later stages use the refit model"
        )

    alphas = sorted({0.01, 0.05, config.alpha})
    gate_limit = config.gate_multiplier * config.gate_alpha
    designs = []
    estimated_any = False
    for K in config.K:
        with stage("subclassify"):
            part = subclassify(lp, K, ids=retained.ids, treatment=retained.t, n_levels=retained.Z)
            check = validate_partition(part, retained.Z, p_check)
        with stage("balance"):
            matrix = balance_audit(retained, part, audited)
            props = {f"{a:g}": significant_proportion(matrix, a) for a in alphas}
            gate_prop = significant_proportion(matrix, config.gate_alpha)
            gate_ok = not (gate_prop > gate_limit)
            plots = emit_plot_data(retained, part, refit, audited, matrix=matrix)
        entry = {
            "K": K,
            "partition": part.to_dict(include_assignment=True),
            "validation": check.to_dict(),
            "balance": matrix.to_dict(),
            "significant_proportion": props,
            "gate": {
                "alpha": config.gate_alpha,
                "threshold": gate_limit,
                "proportion": gate_prop,
                "passed": gate_ok,
            },
            "plot_data": plots,
        }
        if estimate:
            if not check.ok:
                entry["skipped"] = "partition infeasible: cell or subclass minimum not met"
            elif not gate_ok:
                entry["skipped"] = (
                    f"balance gate: {gate_prop:.3f} of within-subclass tests significant at "
                    f"{config.gate_alpha:g}, above {gate_limit:.3f}; effects not estimated"
                )
            else:
                with stage("estimation"):
                    entry["global_tests"] = {
                        name: global_test(retained, part, cols or None).to_dict()
                        for name, cols in {"anova": [], **{f"ancova_{a}": c for a, c in adj_sets.items() if c}}.items()
                    }
                    effects = {"subclass_means": estimate_subclass_means(retained, part).to_dict()}
                    for a, cols in adj_sets.items():
                        table, per_k = estimate_subclass_regression(retained, part, cols or None)
                        effects[f"subclass_regression_{a}"] = {
                            **table.to_dict(),
                            "subclasses": [e.to_dict() for e in per_k],
                        }
                    entry["effects"] = effects
                estimated_any = True
            if "skipped" in entry:
                report.notes.append(f"K={K}: {entry['skipped']}")
        designs.append(entry)
    report.sections["designs"] = designs

    if estimate:
        if estimated_any:
            with stage("estimation"):
                comp = {
                    "naive": estimate_naive(retained).to_dict(),
                    "iptw": estimate_iptw(retained, refit, config.bootstrap_B, config.seed).to_dict(),
                }
                for a, cols in adj_sets.items():
                    comp[f"standard_regression_{a}"] = estimate_standard_regression(retained, cols or None).to_dict()
            report.sections["comparators"] = comp
        else:
            report.exit_code = EXIT_GATE
            report.notes.append("no K passed validation and the balance gate; estimation skipped")
    return report


# --------------------------------------------------------------------------- #
# Simulation
# --------------------------------------------------------------------------- #


def build_full_data(data: Dataset, kind: str, pca_columns=None, *, standardize: bool = True) -> FullPotentialData:
    if kind == "set1":
        return impute_set1(data)
    return impute_set2(data, pca_columns, standardize=standardize)


def run_simulation(config: RunConfig, *, workers: int = 1) -> tuple[dict[str, SimulationSummary], RunReport]:
    """Build the configured potential-outcome sets and run the study on each."""
    sim = config.simulation
    with stage("ingest"):
        data, ing = load_data(config)
    report = RunReport("simulate", config.to_dict(), provenance(config), ing.to_dict())
    gps, a1, _ = _roles(config, data)
    adjustment = _adjustment_sets(config, gps, a1, (sim.adjustment,))[sim.adjustment]
    continuous = [c for c in gps if data.kinds[data.columns.index(c)] == "numeric"]
    study = StudyConfig(
        n_covariates=sim.n_covariates,
        elimination=config.elimination,
        gps_columns=tuple(gps),
        adjustment=tuple(adjustment),
        assignment_columns=tuple(gps),
        continuous_columns=tuple(continuous),
        bootstrap_B=sim.bootstrap_B,
    )
    pca = list(sim.pca_columns) if sim.pca_columns is not None else gps
    summaries: dict[str, SimulationSummary] = {}
    results = {}
    for i, kind in enumerate(sim.sets):
        with stage(f"simulate-{kind}"):
            full = build_full_data(data, kind, pca, standardize=sim.standardize_pca)
            seed = np.random.SeedSequence(config.seed, spawn_key=(i,))
            summary = run_study(full, sim.estimators, sim.M, study, seed, workers=workers)
        summaries[kind] = summary
        results[kind] = {"potential_outcomes": full.to_dict(), "summary": summary.to_dict()}
        if summary.failed:
            report.notes.append(f"{kind}: {summary.failed} replication(s) failed after redraws and were excluded")
    report.sections["simulation"] = results
    return summaries, report
