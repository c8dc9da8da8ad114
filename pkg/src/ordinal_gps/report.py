"""Markdown rendering of run reports. Values are rounded to three decimals."""

from __future__ import annotations

from typing import Iterable, Sequence


def fmt(v, digits: int = 3) -> str:
    if v is None:
        return "NA"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, int):
        return str(v)
    return f"{v:.{digits}f}"


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def effect_rows(tables: dict[str, dict]) -> str:
    """Estimators as rows, ``t v s`` pairs as columns; ``**`` marks intervals excluding 0."""
    if not tables:
        return ""
    first = next(iter(tables.values()))
    header = ["Estimator"] + [p["label"] for p in first["pairs"]]
    rows = []
    for name, tab in tables.items():
        cells = [
            f"{fmt(p['estimate'])} ({fmt(p['se'])}){'**' if p['significant'] else ''}"
            for p in tab["pairs"]
        ]
        rows.append([name] + cells)
    return _table(header, rows)


def balance_rows(designs: list[dict]) -> str:
    """Raw and subclass-averaged tau for every audited covariate, one column per K."""
    if not designs:
        return ""
    bal0 = designs[0]["balance"]
    header = ["Covariate", "raw tau"] + [f"tau_bar K={d['K']}" for d in designs]
    rows = []
    for j, name in enumerate(bal0["columns"]):
        rows.append([name, fmt(bal0["tau_raw"][j])] + [fmt(d["balance"]["tau_bar"][j]) for d in designs])
    return _table(header, rows)


def significance_rows(designs: list[dict], rule: str) -> str:
    if not designs:
        return ""
    alphas = list(designs[0]["significant_proportion"])
    header = ["Rule", "K"] + [f"alpha={a}" for a in alphas] + ["gate"]
    rows = [
        [rule, d["K"]]
        + [fmt(d["significant_proportion"][a]) for a in alphas]
        + ["pass" if d["gate"]["passed"] else "fail"]
        for d in designs
    ]
    return _table(header, rows)


def simulation_rows(summary: dict) -> str:
    """Coverage columns followed by mean bias (SD) for each comparison against level 1."""
    ests = summary["estimators"]
    if not ests:
        return ""
    pairs = [p for p in next(iter(ests.values()))["pairs"] if p["s"] == 1]
    header = ["Estimator", "Average", "Complete"] + [f"{p['t']} v 1" for p in pairs]
    rows = []
    for name, e in ests.items():
        by = {(p["t"], p["s"]): p for p in e["pairs"]}
        rows.append(
            [name, fmt(e["average"]), fmt(e["complete"])]
            + [f"{fmt(by[(p['t'], 1)]['mean_bias'])} ({fmt(by[(p['t'], 1)]['sd_bias'])})" for p in pairs]
        )
    return _table(header, rows)


def render_markdown(report: dict) -> str:
    prov = report["provenance"]
    out = [
        f"# Run report ({report['mode']})",
        "",
        f"- config hash: `{prov['config_hash']}`",
        f"- seed: {prov['seed']}",
        "- versions: " + ", ".join(f"{k} {v}" for k, v in prov["versions"].items()),
        f"- input: {report['ingest']['source']} ({report['ingest']['rows_read']} rows read, "
        f"{report['ingest']['dropped_missing']} dropped for missing values, "
        f"{report['ingest']['retained']} retained)",
        f"- exit code: {report['exit_code']}",
    ]
    if report.get("notes"):
        out += ["", "## Notes", ""] + [f"- {n}" for n in report["notes"]]

    if "support" in report:
        sup = report["support"]
        out += [
            "",
            "## Common support",
            "",
            f"Rule {sup['rule']}: {sup['original_n']} units, {sup['dropped_n']} dropped, "
            f"{sup['retained_n']} retained.",
        ]
    designs = report.get("designs", [])
    if designs:
        rule = report.get("support", {}).get("rule", "")
        out += ["", "## Covariate balance (Kendall's tau)", "", balance_rows(designs)]
        out += ["", "## Proportion of significant within-subclass tests", "", significance_rows(designs, rule)]
        for d in designs:
            out += ["", f"## K = {d['K']}", ""]
            v = d["validation"]
            out.append(
                f"Partition {'passes' if v['ok'] else 'fails'} validation "
                f"(smallest cell {v['min_cell']}, required {v['min_cell_required']})."
            )
            if "skipped" in d:
                out += ["", f"Estimation skipped: {d['skipped']}."]
                continue
            if "global_tests" in d:
                rows = [
                    [name, fmt(g["statistic"]), f"{g['df'][0]}, {g['df'][1]}", f"{g['p_value']:.3g}"]
                    for name, g in d["global_tests"].items()
                ]
                out += ["", _table(["Global test", "F", "df", "p-value"], rows)]
            if "effects" in d:
                out += ["", effect_rows(d["effects"])]
    if "comparators" in report:
        out += ["", "## Comparators", "", effect_rows(report["comparators"])]
        iptw = report["comparators"].get("iptw", {}).get("metadata", {})
        if iptw:
            out += [
                "",
                f"IPTW: {iptw['n_weights_gt_10']} weights above 10, maximum weight "
                f"{fmt(iptw['max_weight'])}, {iptw['bootstrap_B']} bootstrap resamples.",
            ]
    if designs and any("effects" in d for d in designs):
        out += [
            "",
            "Subclass-weighted standard errors ignore uncertainty in the estimated "
            "balancing score and can understate sampling variance.",
        ]
    for kind, sim in report.get("simulation", {}).items():
        s = sim["summary"]
        truth = sim["potential_outcomes"]["true_vs_first"]
        out += [
            "",
            f"## Simulation {kind}",
            "",
            f"M = {s['M']}, completed {s['completed']}, failed {s['failed']}, redraws {s['redraws']}. "
            "True effects vs level 1: " + ", ".join(fmt(v) for v in truth) + ".",
            "",
            simulation_rows(s),
        ]
    return "\n".join(out) + "\n"
