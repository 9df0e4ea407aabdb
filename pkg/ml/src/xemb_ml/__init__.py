"""
Cross-embodiment offline RL services package.

Provides the LinkChain environment suite, dataset generation, morphology
distances and grouping, the URMA-style networks, offline RL trainers and the
gradient-conflict instrumentation. The front-end imports the orchestration
entry points below.
"""
from __future__ import annotations

import time
from typing import Any, Dict, Optional, Sequence

from .dataset_service import Dataset
from .linkchain_service import COMMANDS, expert_reference_scores
from .offline_rl_service import run_training
from .schemas import EmbodimentSpec, EnvSettings, FGWSettings, GroupAssignment, LatentConfig, TrainConfig

__version__ = "0.1.0"


def train_and_evaluate(
    config: TrainConfig,
    suite: Sequence[EmbodimentSpec],
    dataset: Dataset,
    latent: LatentConfig = LatentConfig(),
    env: EnvSettings = EnvSettings(),
    fgw: FGWSettings = FGWSettings(),
    groups: Optional[GroupAssignment] = None,
    expert_scores: Optional[Dict[str, float]] = None,
) -> Dict[str, Any]:
    """Orchestrate one training run and summarize its final evaluation.

    Args:
        config (TrainConfig): Algorithm, grouping and hyperparameters.
        suite (Sequence[EmbodimentSpec]): Suite the dataset was generated on.
        dataset (Dataset): Offline data for every training robot.
        latent (LatentConfig): Network widths.
        env (EnvSettings): Evaluation environment constants.
        fgw (FGWSettings): Solver settings for morphology grouping.
        groups (Optional[GroupAssignment]): Precomputed grouping (skips clustering).
        expert_scores (Optional[Dict[str, float]]): Reference returns for
            normalized scores; recomputed from the suite when omitted.

    Returns:
        Dict[str, Any]: Final returns, normalized scores, groups, evaluation
            curve rows, update log and timing metadata.
    """
    start = time.time()
    result = run_training(config, suite, dataset, latent=latent, env=env, groups=groups, fgw=fgw)
    final = result.final_returns()
    if expert_scores is None:
        command = COMMANDS[dataset.manifest.direction]
        expert_scores = expert_reference_scores([s for s in suite if s.id in final], command, env)
    normalized = {robot: value / expert_scores[robot] for robot, value in final.items() if expert_scores.get(robot)}

    return {
        "metadata": {
            "algorithm": config.algorithm,
            "grouping": config.grouping,
            "seed": config.seed,
            "updates": result.state.step,
            "processing_time_seconds": round(time.time() - start, 2),
        },
        "final_returns": final,
        "normalized_scores": normalized,
        "mean_return": sum(final.values()) / len(final) if final else float("nan"),
        "groups": None if result.groups is None else result.groups.groups(),
        "evaluations": result.evaluations,
        "log": result.log,
        "state": result.state,
    }


__all__ = ["__version__", "train_and_evaluate"]
