"""
Report collation service.

Responsibilities:
- Read every results table an experiment directory holds.
- Render markdown tables: method x dataset returns, per-robot transfer,
  grouping ablation, compute-normalized control, critic grouping, group-count
  sweep, conflict summaries and correlations.
- Report seed-level standard errors (sample SD / sqrt(seeds)) and flag cells
  with missing seeds instead of averaging over them silently.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)

MISSING_MARK = "†"
GROUPING_ABLATION = ("iql", "iql+random", "iql+heuristic", "iql+eg")


def standard_error(values: Sequence[float]) -> float:
    """Sample standard deviation over sqrt(n); NaN for fewer than two values."""
    values = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if values.size < 2:
        return float("nan")
    return float(values.std(ddof=1) / np.sqrt(values.size))


def _fmt(value: Optional[float], digits: int = 2) -> str:
    if value is None or not np.isfinite(value):
        return "n/a"
    return f"{value:.{digits}f}"


def _cell(values: Sequence[float], expected: int) -> str:
    text = f"{_fmt(float(np.mean(values)))} ± {_fmt(standard_error(values))}"
    return text + (f" {MISSING_MARK}" if len(values) < expected else "")


def markdown_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _read(path: Path) -> Optional[pd.DataFrame]:
    return pd.read_csv(path) if path.is_file() else None


def main_table(results: pd.DataFrame, expected_seeds: int) -> str:
    """Methods as rows, datasets as columns, mean return ± SE."""
    datasets = sorted(results["dataset"].unique())
    rows = []
    for method in sorted(results["method"].unique()):
        row = [method]
        for name in datasets:
            cell = results[(results["method"] == method) & (results["dataset"] == name)]["mean_return"]
            row.append(_cell(cell.tolist(), expected_seeds) if len(cell) else "")
        rows.append(row)
    return markdown_table(["method", *datasets], rows)


def relative_table(results: pd.DataFrame, methods: Sequence[str], baseline: str = "iql") -> Optional[str]:
    """Seed-mean return and relative change over `baseline` per dataset."""
    present = [m for m in methods if m in set(results["method"])]
    if baseline not in present or len(present) < 2:
        return None
    rows = []
    for name in sorted(results["dataset"].unique()):
        sub = results[results["dataset"] == name]
        base = sub[sub["method"] == baseline]["mean_return"].mean()
        for method in present:
            value = sub[sub["method"] == method]["mean_return"].mean()
            change = (value - base) / abs(base) * 100 if base else float("nan")
            rows.append([name, method, _fmt(value), _fmt(change, 1) + "%"])
    return markdown_table(["dataset", "method", "return", f"vs {baseline}"], rows)


def paired_test(results: pd.DataFrame, a: str, b: str, dataset: str) -> Optional[Dict[str, float]]:
    """Paired t-test of method a vs b over shared seeds (None with fewer than two)."""
    sub = results[results["dataset"] == dataset]
    left = sub[sub["method"] == a].set_index("seed")["mean_return"]
    right = sub[sub["method"] == b].set_index("seed")["mean_return"]
    seeds = sorted(set(left.index) & set(right.index))
    if len(seeds) < 2:
        return None
    t, p = stats.ttest_rel(left.loc[seeds], right.loc[seeds])
    return {"t": float(t), "p": float(p), "n": len(seeds), "mean_diff": float((left.loc[seeds] - right.loc[seeds]).mean())}


def critic_table(results: pd.DataFrame) -> Optional[str]:
    rows = []
    for name in sorted(results["dataset"].unique()):
        test = paired_test(results, "iql+eg-critic", "iql+eg", name)
        if test is not None:
            rows.append([name, _fmt(test["mean_diff"]), _fmt(test["t"]), _fmt(test["p"], 3), str(test["n"])])
    if not rows:
        return None
    return markdown_table(["dataset", "critic EG - actor EG", "t", "p", "seeds"], rows)


def transfer_table(transfer: pd.DataFrame) -> str:
    rows = []
    for robot, sub in transfer.groupby("robot", sort=True):
        gain = sub["gain"].tolist()
        rows.append(
            [
                robot,
                _fmt(sub["single"].mean()),
                _fmt(sub["cross"].mean()),
                f"{_fmt(float(np.mean(gain)))} ± {_fmt(standard_error(gain))}",
                _fmt(sub["avg_c"].mean(), 3),
                "yes" if bool(sub["flagged"].astype(bool).any()) else "",
            ]
        )
    return markdown_table(["robot", "single", "cross", "gain", "Avg C", "flagged"], rows)


def _correlation_line(path: Path, label: str) -> Optional[str]:
    if not path.is_file():
        return None
    payload = json.loads(path.read_text())
    if payload.get("r") is None:
        return f"- {label}: not computed ({payload.get('reason', 'insufficient data')})"
    return f"- {label}: r = {payload['r']:.3f}, p = {payload['p']:.3g} (n = {payload['n']})"


def missing_seed_cells(results: pd.DataFrame, seeds: Sequence[int]) -> List[str]:
    out = []
    for (name, method), sub in results.groupby(["dataset", "method"], sort=True):
        missing = sorted(set(seeds) - set(sub["seed"]))
        if missing:
            out.append(f"{name} / {method}: missing seeds {missing}")
    return out


def build_report(root: Path, seeds: Optional[Sequence[int]] = None) -> str:
    """Markdown summary of everything under the experiment root.

    Args:
        root (Path): Experiment output root.
        seeds (Optional[Sequence[int]]): Expected seeds; defaults to every seed
            found in the results.

    Returns:
        str: The report text.
    """
    sections = [f"# Experiment report: {root.name}"]
    results = _read(root / "train" / "results.csv")
    if results is not None and len(results):
        seeds = sorted(seeds if seeds is not None else results["seed"].unique().tolist())
        sections += ["## Mean return by method and dataset", main_table(results, len(seeds))]
        missing = missing_seed_cells(results, seeds)
        if missing:
            for line in missing:
                logger.warning("report: %s", line)
            sections += [f"{MISSING_MARK} cells averaged over fewer seeds:", "\n".join(f"- {m}" for m in missing)]
        ablation = relative_table(results, GROUPING_ABLATION)
        if ablation:
            sections += ["## Grouping strategy", ablation]
        critic = critic_table(results)
        if critic:
            sections += ["## Critic grouping", critic]
        tests = []
        for name in sorted(results["dataset"].unique()):
            for a, b in (("iql", "bc"), ("iql+eg", "iql"), ("iql+eg", "iql+pcgrad")):
                test = paired_test(results, a, b, name)
                if test is not None:
                    tests.append([name, f"{a} - {b}", _fmt(test["mean_diff"]), _fmt(test["t"]), _fmt(test["p"], 3)])
        if tests:
            sections += ["## Paired comparisons", markdown_table(["dataset", "comparison", "diff", "t", "p"], tests)]

    budget = _read(root / "analysis" / "budget" / "budget.csv")
    if budget is not None and len(budget):
        rows = [
            [method, _cell(sub["mean_return"].tolist(), len(seeds or sub["seed"])), str(int(sub["actor_samples"].iloc[0]))]
            for method, sub in budget.groupby("method", sort=True)
        ]
        sections += ["## Compute-normalized comparison", markdown_table(["method", "return", "actor samples"], rows)]

    sweep = _read(root / "analysis" / "m-sweep" / "m_sweep.csv")
    if sweep is not None and len(sweep):
        rows = [[str(m), _cell(sub["mean_return"].tolist(), len(seeds or sub["seed"]))] for m, sub in sweep.groupby("m")]
        sections += ["## Group count sweep", markdown_table(["m", "return"], rows)]

    transfer = _read(root / "analysis" / "transfer" / "transfer.csv")
    if transfer is not None and len(transfer):
        sections += ["## Transfer per robot", transfer_table(transfer)]

    conflicts = _read(root / "analysis" / "conflicts" / "summary.csv")
    if conflicts is not None and len(conflicts):
        rows = [
            [name, _cell(sub["mean_negative_fraction"].tolist(), len(seeds or sub["seed"]))]
            for name, sub in conflicts.groupby("dataset", sort=True)
        ]
        sections += ["## Negative gradient-cosine fraction", markdown_table(["dataset", "fraction"], rows)]

    diversity = _read(root / "analysis" / "diversity" / "diversity.csv")
    if diversity is not None and len(diversity):
        rows = []
        for (name, n), sub in diversity.groupby(["subset", "n_robots"], sort=False):
            values = sub["negative_fraction"].dropna().tolist()
            rows.append([name, str(n), _cell(values, len(sub)) if values else "absent"])
        rows.sort(key=lambda r: int(r[1]))
        sections += ["## Conflict vs robot diversity", markdown_table(["subset", "robots", "fraction"], rows)]

    finetune = _read(root / "analysis" / "finetune" / "finetune.csv")
    if finetune is not None and len(finetune):
        rows = [
            [robot, _fmt(sub["pretrained_checkpoints"].mean(), 1), _fmt(sub["scratch_checkpoints"].mean(), 1),
             f"{int(sub['faster'].astype(bool).sum())}/{len(sub)}"]
            for robot, sub in finetune.groupby("held_out", sort=True)
        ]
        sections += [
            "## Pre-train / fine-tune (checkpoints to 90% of final return)",
            markdown_table(["held out", "pre-trained", "scratch", "pre-trained faster"], rows),
        ]

    correlations = [
        _correlation_line(root / "analysis" / "embodiment" / "correlation.json", "similarity vs mean cosine"),
        _correlation_line(root / "analysis" / "transfer" / "correlation.json", "transfer gain vs Avg C"),
    ]
    correlations = [c for c in correlations if c]
    if correlations:
        sections += ["## Correlations", "\n".join(correlations)]

    if len(sections) == 1:
        sections.append("No results found.")
    return "\n\n".join(sections) + "\n"


def write_report(root: Path, seeds: Optional[Sequence[int]] = None) -> Path:
    path = root / "report.md"
    path.write_text(build_report(root, seeds))
    return path
