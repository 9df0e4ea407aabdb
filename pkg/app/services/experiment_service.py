"""
Experiment orchestration service.

Responsibilities:
- Coordinate between the subcommands and the ML layer.
- Lay out artifacts through run_storage and stamp every output directory.
- Fan independent (dataset, method, seed) runs out over worker processes and
  reduce their results in sorted order.
- Run the analyses (conflicts, diversity, embodiment, transfer, m-sweep,
  budget, finetune) and emit their CSV and SVG outputs.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from xemb_ml import train_and_evaluate
from xemb_ml.analysis_service import (
    TransferReport,
    alignment_rows,
    average_conflict,
    conflict_stats,
    diversity_sweep,
    export_conflicts,
    export_transfer,
    measure_conflicts,
    pearson,
    transfer_and_correlation,
    transfer_experiment,
)
from xemb_ml.dataset_service import Dataset, generate_variant, load_dataset, parse_variant_name, save_dataset
from xemb_ml.errors import ConfigError, InsufficientData
from xemb_ml.linkchain_service import COMMANDS, expert_reference_scores, load_suite, make_suite, save_suite
from xemb_ml.morphology_service import (
    DistanceMatrix,
    cluster,
    elbow_group_count,
    export_distances,
    export_groups,
    similarity_from_distance,
    suite_distance_matrix,
)
from xemb_ml.offline_rl_service import pretrain_finetune, save_checkpoint
from xemb_ml.schemas import EmbodimentSpec, SuiteManifest
from xemb_ml.utils.table_io import read_matrix_csv, write_json, write_matrix_csv, write_rows_csv

from ..core.runs import stamp_run
from ..models.schemas import RobotResult, RunConfig, RunResult
from ..utils import svg
from ..utils.run_storage import (
    analysis_path,
    dataset_path,
    distances_dir,
    require,
    suite_path,
    train_path,
)

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"
RUN_COLUMNS = tuple(RunResult.model_fields)
ROBOT_COLUMNS = tuple(RobotResult.model_fields)


# ---------------------------------------------------------------- suite and data


def generate_suite(config: RunConfig, root: Path) -> SuiteManifest:
    """Generate the embodiment suite and write suite.json under `root`."""
    specs = make_suite(config.suite.seed, config.suite.env)
    manifest = save_suite(specs, config.suite.seed, suite_path(root), config.suite.env)
    stamp_run(root, config)
    return manifest


def read_suite(root: Path) -> SuiteManifest:
    return load_suite(require(suite_path(root), "gen-suite"))


def variant_name(variant: str, direction: str, fraction: Optional[float] = None) -> str:
    """Catalog name of a dataset variant, e.g. ('mixture', 'forward', 0.7) -> 'mixture70-forward'.

    Raises:
        ConfigError: For an X outside [0, 1] or a fraction that is not a whole percentage.
    """
    if variant != "mixture":
        name = f"{variant}-{direction}"
    else:
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"mixture fraction must lie in [0, 1], got {fraction}", field="fraction")
        percent = round(fraction * 100)
        if abs(percent - fraction * 100) > 1e-9:
            raise ConfigError(f"mixture fraction {fraction} is not a whole percentage", field="fraction")
        name = f"mixture{percent}-{direction}"
    parse_variant_name(name)
    return name


def generate_datasets(config: RunConfig, root: Path, names: Sequence[str], workers: int = 1) -> Dict[str, Path]:
    """Generate and save each named variant; re-running rewrites identical bytes."""
    manifest = read_suite(root)
    written = {}
    for name in names:
        dataset = generate_variant(
            name,
            manifest.specs,
            config.data.steps_per_robot,
            config.data.seed,
            manifest.env,
            config.data.sweep,
            workers,
        )
        path = save_dataset(dataset, dataset_path(root, name))
        stamp_run(path, config)
        written[name] = path
        logger.info("Wrote dataset %s (%d robots) to %s", name, len(dataset.robots), path)
    return written


def read_dataset(root: Path, name: str) -> Dataset:
    return load_dataset(require(dataset_path(root, name), f"gen-data --dataset {name}"))


def expert_scores_for(manifest: SuiteManifest, direction: str) -> Dict[str, float]:
    if direction == "forward" and manifest.expert_scores:
        return dict(manifest.expert_scores)
    return expert_reference_scores(manifest.specs, COMMANDS[direction], manifest.env)


# ---------------------------------------------------------------- morphology


def suite_distances(config: RunConfig, root: Path, specs: Sequence[EmbodimentSpec]) -> DistanceMatrix:
    """FGW distance matrix of the suite, cached under morphology/ per solver settings."""
    out = distances_dir(root)
    settings_file = out / "fgw.json"
    cached = out / "distance.csv"
    wanted = config.suite.fgw.model_dump(mode="json")
    if cached.is_file() and settings_file.is_file() and json.loads(settings_file.read_text()) == wanted:
        entries, labels = read_matrix_csv(cached)
        if labels == sorted(s.id for s in specs):
            return DistanceMatrix(entries=entries, labels=tuple(labels))
    d = suite_distance_matrix(sorted(specs, key=lambda s: s.id), config.suite.fgw)
    export_distances(d, out)
    write_json(settings_file, wanted)
    return d


def resolve_m(config: RunConfig, d: DistanceMatrix) -> int:
    return elbow_group_count(d, method=config.suite.fgw.linkage) if config.train.auto_m else config.train.m


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainJob:
    """One independent training run; `subdir` overrides the default run directory."""

    dataset: str
    method: str
    seed: int
    overrides: Tuple[Tuple[str, Any], ...] = ()
    subdir: Optional[Tuple[str, ...]] = None

    def directory(self, root: Path) -> Path:
        if self.subdir is not None:
            return root.joinpath(*self.subdir)
        return train_path(root, self.dataset, self.method, self.seed)


def run_train_job(config: RunConfig, root: Path, job: TrainJob) -> Tuple[RunResult, List[RobotResult]]:
    """Train one (dataset, method, seed) cell and write its run directory.

    Args:
        config (RunConfig): Resolved run configuration.
        root (Path): Experiment output root holding suite, data and distances.
        job (TrainJob): The cell to run.

    Returns:
        Tuple[RunResult, List[RobotResult]]: Summary row and per-robot rows.
    """
    manifest = read_suite(root)
    dataset = read_dataset(root, job.dataset)
    overrides = dict(job.overrides)
    train_cfg = config.method_config(job.method, job.seed, **overrides)

    groups = None
    if train_cfg.grouping == "eg":
        d = suite_distances(config, root, manifest.specs)
        m = train_cfg.m if "m" in overrides else resolve_m(config, d)
        groups = cluster(d, m, config.suite.fgw.linkage)

    summary = train_and_evaluate(
        train_cfg,
        manifest.specs,
        dataset,
        latent=config.model,
        env=manifest.env,
        fgw=config.suite.fgw,
        groups=groups,
        expert_scores=expert_scores_for(manifest, dataset.manifest.direction),
    )

    out = job.directory(root)
    state = summary["state"]
    save_checkpoint(state, out / "checkpoint")
    write_rows_csv(out / "log.csv", summary["log"])
    write_rows_csv(out / "evaluations.csv", summary["evaluations"], ("step", "robot", "return"))
    if groups is not None:
        export_groups(groups, out / "groups.json")

    final = summary["final_returns"]
    normalized = summary["normalized_scores"]
    result = RunResult(
        dataset=job.dataset,
        method=job.method,
        seed=job.seed,
        mean_return=summary["mean_return"],
        mean_normalized=float(np.mean(list(normalized.values()))) if normalized else float("nan"),
        groups=0 if groups is None else groups.m,
        updates=state.step,
        actor_samples=state.actor_samples,
    )
    robots = [
        RobotResult(
            dataset=job.dataset,
            method=job.method,
            seed=job.seed,
            robot=robot,
            final_return=value,
            normalized=normalized.get(robot, float("nan")),
            group=None if groups is None else groups.mapping[robot],
        )
        for robot, value in sorted(final.items())
    ]
    write_json(out / RESULT_FILE, {"run": result.model_dump(), "robots": [r.model_dump() for r in robots]})
    stamp_run(out, config, [job.seed])
    logger.info("%s / %s / seed %d: mean return %.3f", job.dataset, job.method, job.seed, result.mean_return)
    return result, robots


def run_jobs(
    config: RunConfig,
    root: Path,
    jobs: Sequence[TrainJob],
    workers: int = 1,
) -> List[Tuple[RunResult, List[RobotResult]]]:
    """Run independent jobs, in worker processes when workers > 1; results follow job order."""
    if any(config.method_config(j.method, j.seed, **dict(j.overrides)).grouping == "eg" for j in jobs):
        # computed once up front so workers read the cache
        suite_distances(config, root, read_suite(root).specs)
    if workers <= 1 or len(jobs) <= 1:
        return [run_train_job(config, root, job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_train_job, repeat(config), repeat(root), jobs))


def train_matrix(config: RunConfig, root: Path, workers: int = 1) -> Dict[str, Path]:
    """Train every (dataset, method, seed) of [train] and collate the results tables."""
    jobs = [
        TrainJob(dataset=name, method=method, seed=seed)
        for name in config.train_datasets
        for method in config.train.methods
        for seed in config.run.seeds
    ]
    for name in sorted(set(config.train_datasets)):
        require(dataset_path(root, name), f"gen-data --dataset {name}")
    run_jobs(config, root, jobs, workers)
    return collect_results(root)


def collect_results(root: Path) -> Dict[str, Path]:
    """Collate every train/*/*/seed-*/result.json into results.csv and robot_results.csv."""
    runs: List[Dict[str, Any]] = []
    robots: List[Dict[str, Any]] = []
    for path in sorted((root / "train").glob(f"*/*/seed-*/{RESULT_FILE}")):
        payload = json.loads(path.read_text())
        runs.append(payload["run"])
        robots.extend(payload["robots"])
    runs.sort(key=lambda r: (r["dataset"], r["method"], r["seed"]))
    robots.sort(key=lambda r: (r["dataset"], r["method"], r["seed"], r["robot"]))
    return {
        "results": write_rows_csv(root / "train" / "results.csv", runs, RUN_COLUMNS),
        "robot_results": write_rows_csv(root / "train" / "robot_results.csv", robots, ROBOT_COLUMNS),
    }


# ---------------------------------------------------------------- analyses


def _check_cadence(config: RunConfig) -> None:
    if config.analysis.cadence > config.train.updates:
        raise ConfigError(
            f"cadence {config.analysis.cadence} exceeds updates {config.train.updates}; no matrices would be recorded",
            field="analysis.cadence",
        )


def _seed_mean_curve(curves: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Tuple[float, float]]:
    steps = curves[0][0]
    values = np.nanmean(np.stack([c[1] for c in curves]), axis=0)
    return [(float(s), float(v)) for s, v in zip(steps, values)]


def _correlation_payload(compute: Callable[[], Tuple[float, float]], n: int) -> Dict[str, Any]:
    try:
        r, p = compute()
    except InsufficientData as exc:
        logger.warning("correlation skipped: %s", exc)
        return {"r": None, "p": None, "n": n, "reason": str(exc)}
    return {"r": r, "p": p, "n": n}


def analyze_conflicts(config: RunConfig, root: Path) -> Dict[str, Path]:
    """Negative-fraction curves per dataset variant, one conflict measurement per seed."""
    _check_cadence(config)
    manifest = read_suite(root)
    a = config.analysis
    rows, curves = [], {}
    for name in a.conflict_datasets:
        dataset = read_dataset(root, name)
        per_seed = []
        for seed in config.run.seeds:
            records = measure_conflicts(
                config.method_config(a.method, seed),
                manifest.specs,
                dataset,
                cadence=a.cadence,
                latent=config.model,
                env=manifest.env,
                fgw=config.suite.fgw,
            )
            export_conflicts(records, analysis_path(root, "conflicts", name, f"seed-{seed}"))
            stats = conflict_stats(records)
            per_seed.append((stats.steps, stats.negative_fraction))
            rows.append({"dataset": name, "seed": seed, "mean_negative_fraction": stats.mean_negative_fraction})
        curves[name] = _seed_mean_curve(per_seed)
    out = analysis_path(root, "conflicts")
    written = {
        "summary": write_rows_csv(out / "summary.csv", rows, ("dataset", "seed", "mean_negative_fraction")),
        "plot": svg.line_plot(
            curves, out / "negative_fraction.svg", "Negative gradient-cosine fraction", "update", "fraction"
        ),
    }
    stamp_run(out, config)
    return written


def default_subsets(specs: Sequence[EmbodimentSpec], d: DistanceMatrix) -> Dict[str, List[str]]:
    """Three mutually closest quadruped-like robots, all quadruped-like robots, all robots."""
    index = {label: i for i, label in enumerate(d.labels)}
    quads = sorted(s.id for s in specs if s.family == "quadruped-like")
    subsets: Dict[str, List[str]] = {}
    if len(quads) >= 3:
        def nearest(anchor: str) -> List[str]:
            others = sorted((q for q in quads if q != anchor), key=lambda q: (d.entries[index[anchor], index[q]], q))
            return [anchor] + others[:2]

        def spread(group: List[str]) -> float:
            return sum(d.entries[index[a], index[b]] for a in group for b in group)

        best = min((nearest(q) for q in quads), key=lambda g: (spread(g), g))
        subsets[f"similar-{len(best)}"] = sorted(best)
    subsets[f"quadruped-{len(quads)}"] = quads
    subsets[f"all-{len(specs)}"] = sorted(s.id for s in specs)
    return subsets


def analyze_diversity(config: RunConfig, root: Path) -> Dict[str, Path]:
    """Mean negative fraction as the trained robot set grows more diverse."""
    _check_cadence(config)
    manifest = read_suite(root)
    a = config.analysis
    ids = {s.id for s in manifest.specs}
    if a.subsets is not None:
        subsets = a.subsets
        unknown = sorted({r for members in subsets.values() for r in members} - ids)
        if unknown:
            raise ConfigError(f"subset robots not in the suite: {unknown}", field="analysis.subsets")
    else:
        subsets = default_subsets(manifest.specs, suite_distances(config, root, manifest.specs))
    dataset = read_dataset(root, a.dataset)
    rows = []
    for seed in config.run.seeds:
        values = diversity_sweep(
            config.method_config(a.method, seed), manifest.specs, dataset, subsets, a.cadence, config.model, manifest.env
        )
        for name, value in values.items():
            rows.append({"subset": name, "n_robots": len(set(subsets[name])), "seed": seed, "negative_fraction": value})
    out = analysis_path(root, "diversity")
    means = []
    for name, members in subsets.items():
        vals = [r["negative_fraction"] for r in rows if r["subset"] == name and r["negative_fraction"] is not None]
        if vals:
            means.append((float(len(set(members))), float(np.mean(vals))))
    written = {
        "summary": write_rows_csv(out / "diversity.csv", rows, ("subset", "n_robots", "seed", "negative_fraction")),
        "subsets": write_json(out / "subsets.json", subsets),
        "plot": svg.line_plot(
            {a.dataset: sorted(means)}, out / "diversity.svg", "Conflict vs robot-set size", "robots", "fraction"
        ),
    }
    stamp_run(out, config)
    return written


def analyze_embodiment(config: RunConfig, root: Path) -> Dict[str, Path]:
    """Similarity matrix, mean-cosine matrix and their pairwise scatter with Pearson r."""
    _check_cadence(config)
    manifest = read_suite(root)
    a = config.analysis
    d = suite_distances(config, root, manifest.specs)
    similarity = similarity_from_distance(d)
    out = analysis_path(root, "embodiment")
    written = export_distances(d, out)
    elbow = elbow_group_count(d, method=config.suite.fgw.linkage)
    for m in sorted({2, 3, 4, elbow} & set(range(1, len(d.labels) + 1))):
        export_groups(cluster(d, m, config.suite.fgw.linkage), out / f"groups-m{m}.json")

    dataset = read_dataset(root, a.dataset)
    scatter, matrices, robots = [], [], None
    for seed in config.run.seeds:
        records = measure_conflicts(
            config.method_config(a.method, seed),
            manifest.specs,
            dataset,
            cadence=a.cadence,
            latent=config.model,
            env=manifest.env,
            fgw=config.suite.fgw,
        )
        stats = conflict_stats(records)
        rows = alignment_rows(similarity, d.labels, stats)
        scatter.extend({**row, "seed": seed} for row in rows)
        matrices.append(stats.mean_matrix)
        robots = stats.robots
    mean_cosine = np.nanmean(np.stack(matrices), axis=0)

    xs = [r["similarity"] for r in scatter]
    ys = [r["mean_cosine"] for r in scatter]
    correlation = _correlation_payload(lambda: pearson(xs, ys), len(xs))
    correlation["elbow_m"] = elbow
    fit = tuple(np.polyfit(xs, ys, 1)) if len(xs) >= 2 else None
    written.update(
        {
            "mean_cosine": svg.heatmap(mean_cosine, robots, out / "mean_cosine.svg", "Mean gradient cosine", (-1.0, 1.0)),
            "similarity_plot": svg.heatmap(similarity, d.labels, out / "similarity.svg", "Embodiment similarity", (0.0, 1.0)),
            "scatter": write_rows_csv(
                out / "scatter.csv", scatter, ("seed", "robot_a", "robot_b", "similarity", "mean_cosine")
            ),
            "scatter_plot": svg.scatter_plot(
                list(zip(xs, ys)), out / "scatter.svg", "Similarity vs gradient alignment", "similarity", "mean cosine", fit
            ),
            "correlation": write_json(out / "correlation.json", correlation),
        }
    )
    written["mean_cosine_csv"] = write_matrix_csv(out / "mean_cosine.csv", mean_cosine, robots)
    stamp_run(out, config)
    return written


def analyze_transfer(config: RunConfig, root: Path) -> Dict[str, Path]:
    """Single vs cross-embodiment returns, Avg C per robot and the gain/alignment correlation."""
    _check_cadence(config)
    manifest = read_suite(root)
    a = config.analysis
    dataset = read_dataset(root, a.dataset)
    experts = expert_scores_for(manifest, dataset.manifest.direction)
    out = analysis_path(root, "transfer")
    rows = []
    for seed in config.run.seeds:
        cfg = config.method_config(a.method, seed)
        reports = transfer_experiment(
            cfg, manifest.specs, dataset, latent=config.model, env=manifest.env,
            expert_scores=experts, threshold_fraction=a.transfer_threshold, fgw=config.suite.fgw,
        )
        export_transfer(reports, out / f"seed-{seed}" / "transfer.csv")
        records = measure_conflicts(
            cfg, manifest.specs, dataset, cadence=a.cadence, latent=config.model, env=manifest.env, fgw=config.suite.fgw
        )
        avg_c = average_conflict(records)
        for r in reports:
            rows.append(
                {"robot": r.robot, "seed": seed, "single": r.single, "cross": r.cross,
                 "gain": r.gain, "flagged": r.flagged, "avg_c": avg_c.get(r.robot, float("nan"))}
            )

    pooled = []
    for robot in sorted({r["robot"] for r in rows}):
        mine = [r for r in rows if r["robot"] == robot]
        pooled.append(
            (
                TransferReport(
                    robot=robot,
                    single=float(np.mean([r["single"] for r in mine])),
                    cross=float(np.mean([r["cross"] for r in mine])),
                    threshold=a.transfer_threshold * abs(experts[robot]),
                ),
                float(np.nanmean([r["avg_c"] for r in mine])),
            )
        )
    reports = [p[0] for p in pooled]
    mean_c = {p[0].robot: p[1] for p in pooled}
    flagged = [r for r in reports if r.flagged]
    correlation = _correlation_payload(lambda: transfer_and_correlation(reports, mean_c), len(flagged))
    written = {
        "transfer": write_rows_csv(
            out / "transfer.csv", rows, ("robot", "seed", "single", "cross", "gain", "flagged", "avg_c")
        ),
        "correlation": write_json(out / "correlation.json", correlation),
        "scatter_plot": svg.scatter_plot(
            [(mean_c[r.robot], r.gain) for r in flagged], out / "gain_vs_cosine.svg",
            "Transfer gain vs gradient alignment", "Avg C", "gain",
        ),
    }
    stamp_run(out, config)
    return written


def scaled_m_values(values: Sequence[int], n_robots: int) -> List[int]:
    """Requested group counts clipped to the robot count, deduplicated and sorted."""
    return sorted({min(m, n_robots) for m in values})


def analyze_m_sweep(config: RunConfig, root: Path, workers: int = 1) -> Dict[str, Path]:
    """IQL+EG return as a function of the group count."""
    a = config.analysis
    dataset = read_dataset(root, a.dataset)
    ms = scaled_m_values(a.m_values, len(dataset.robots))
    jobs = [
        TrainJob(
            dataset=a.dataset, method="iql+eg", seed=seed, overrides=(("m", m),),
            subdir=("analysis", "m-sweep", f"m-{m}", f"seed-{seed}"),
        )
        for m in ms
        for seed in config.run.seeds
    ]
    results = run_jobs(config, root, jobs, workers)
    rows = [
        {"m": dict(job.overrides)["m"], "seed": run.seed, "mean_return": run.mean_return,
         "mean_normalized": run.mean_normalized}
        for job, (run, _) in zip(jobs, results)
    ]
    rows.sort(key=lambda r: (r["m"], r["seed"]))
    out = analysis_path(root, "m-sweep")
    curve = [(float(m), float(np.mean([r["mean_return"] for r in rows if r["m"] == m]))) for m in ms]
    written = {
        "summary": write_rows_csv(out / "m_sweep.csv", rows, ("m", "seed", "mean_return", "mean_normalized")),
        "plot": svg.line_plot({a.dataset: curve}, out / "m_sweep.svg", "Return vs group count", "m", "mean return"),
    }
    stamp_run(out, config)
    return written


def analyze_budget(config: RunConfig, root: Path, workers: int = 1) -> Dict[str, Path]:
    """Compute-normalized comparison: every method uses the same m, so sample counts can be checked."""
    a = config.analysis
    manifest = read_suite(root)
    dataset = read_dataset(root, a.dataset)
    m = resolve_m(config, suite_distances(config, root, manifest.specs))
    m = min(m, len(dataset.robots))
    jobs = [
        TrainJob(
            dataset=a.dataset, method=method, seed=seed, overrides=(("m", m),),
            subdir=("analysis", "budget", method, f"seed-{seed}"),
        )
        for method in a.budget_methods
        for seed in config.run.seeds
    ]
    rows = [
        {"method": run.method, "seed": run.seed, "m": m, "mean_return": run.mean_return,
         "mean_normalized": run.mean_normalized, "actor_samples": run.actor_samples}
        for run, _ in run_jobs(config, root, jobs, workers)
    ]
    rows.sort(key=lambda r: (r["method"], r["seed"]))
    samples = {
        (r["method"], r["seed"]): r["actor_samples"] for r in rows if r["method"] in ("iql+eg", "iql+normalized")
    }
    matched = all(
        samples[("iql+eg", s)] == samples[("iql+normalized", s)]
        for s in config.run.seeds
        if ("iql+eg", s) in samples and ("iql+normalized", s) in samples
    )
    if not matched:
        logger.warning("actor sample counts differ between iql+eg and iql+normalized")
    out = analysis_path(root, "budget")
    written = {
        "summary": write_rows_csv(
            out / "budget.csv", rows, ("method", "seed", "m", "mean_return", "mean_normalized", "actor_samples")
        ),
        "check": write_json(out / "samples.json", {"m": m, "samples_match": matched}),
    }
    stamp_run(out, config)
    return written


def checkpoints_to_fraction(curve: Sequence[Tuple[int, float]], fraction: float = 0.9) -> int:
    """Evaluation checkpoints until the return first reaches `fraction` of its final value."""
    if not curve:
        return 0
    final = curve[-1][1]
    target = final - (1.0 - fraction) * abs(final)
    for i, (_, value) in enumerate(curve, start=1):
        if value >= target:
            return i
    return len(curve)


def default_held_out(specs: Sequence[EmbodimentSpec]) -> List[str]:
    """First robot id of every family."""
    first: Dict[str, str] = {}
    for spec in sorted(specs, key=lambda s: s.id):
        first.setdefault(spec.family, spec.id)
    return sorted(first.values())


def analyze_finetune(config: RunConfig, root: Path) -> Dict[str, Path]:
    """Pre-train without each held-out robot, then fine-tune from pre-trained vs fresh weights."""
    manifest = read_suite(root)
    a = config.analysis
    held_out = a.held_out or default_held_out(manifest.specs)
    dataset = read_dataset(root, a.finetune_dataset)
    curve_rows, rows = [], []
    out = analysis_path(root, "finetune")
    for robot in held_out:
        series: Dict[str, List[List[Tuple[int, float]]]] = {"pretrained": [], "scratch": []}
        for seed in config.run.seeds:
            curves = pretrain_finetune(
                config.method_config(a.method, seed), manifest.specs, dataset, robot,
                latent=config.model, env=manifest.env, fgw=config.suite.fgw,
            )
            for arm in ("pretrained", "scratch"):
                curve = getattr(curves, arm)
                series[arm].append(curve)
                curve_rows.extend(
                    {"held_out": robot, "seed": seed, "arm": arm, "step": step, "return": value}
                    for step, value in curve
                )
            pre = checkpoints_to_fraction(curves.pretrained)
            scratch = checkpoints_to_fraction(curves.scratch)
            rows.append(
                {"held_out": robot, "seed": seed, "pretrained_checkpoints": pre,
                 "scratch_checkpoints": scratch, "faster": pre < scratch}
            )
        svg.line_plot(
            {
                arm: [(float(s), float(np.mean([c[i][1] for c in curves_]))) for i, (s, _) in enumerate(curves_[0])]
                for arm, curves_ in series.items()
            },
            out / f"{robot}.svg", f"Fine-tuning on {robot}", "update", "return",
        )
    written = {
        "curves": write_rows_csv(out / "curves.csv", curve_rows, ("held_out", "seed", "arm", "step", "return")),
        "summary": write_rows_csv(
            out / "finetune.csv", rows,
            ("held_out", "seed", "pretrained_checkpoints", "scratch_checkpoints", "faster"),
        ),
    }
    stamp_run(out, config)
    return written


ANALYZERS: Dict[str, Callable[..., Dict[str, Path]]] = {
    "conflicts": analyze_conflicts,
    "diversity": analyze_diversity,
    "embodiment": analyze_embodiment,
    "transfer": analyze_transfer,
    "m-sweep": analyze_m_sweep,
    "budget": analyze_budget,
    "finetune": analyze_finetune,
}

PARALLEL_ANALYSES = ("m-sweep", "budget")


def run_analysis(kind: str, config: RunConfig, root: Path, workers: int = 1) -> Dict[str, Path]:
    if kind not in ANALYZERS:
        raise ConfigError(f"unknown analysis '{kind}'; choose from {sorted(ANALYZERS)}", field="kind")
    if kind in PARALLEL_ANALYSES:
        return ANALYZERS[kind](config, root, workers)
    return ANALYZERS[kind](config, root)
