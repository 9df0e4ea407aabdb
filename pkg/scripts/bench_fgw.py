"""
Time the suite's FGW distance matrix and report solver properties.

Usage (from repo root):
    python scripts/bench_fgw.py --seed 0 --epsilon 1e-3 --out runs/bench

Prints the wall-clock time of the N(N-1)/2 solves, the maximum self-distance,
the maximum asymmetry, and the clustering elbow. With --out the distance and
similarity matrices are written as CSV.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "ml" / "src"))

import numpy as np

from xemb_ml.linkchain_service import make_suite
from xemb_ml.morphology_service import (
    build_graph,
    elbow_group_count,
    export_distances,
    fgw_distance,
    standardize_graphs,
    suite_distance_matrix,
)
from xemb_ml.schemas import FGWSettings


def bench(seed: int, alpha: float, epsilon: float, out: Optional[Path] = None) -> None:
    """Compute and check the suite distance matrix.

    Args:
        seed (int): Suite generation seed.
        alpha (float): Structure weight.
        epsilon (float): Inner entropic regularization.
        out (Optional[Path]): Directory for distance.csv and similarity.csv.
    """
    settings = FGWSettings(alpha=alpha, epsilon=epsilon)
    specs = make_suite(seed)
    start = time.perf_counter()
    d = suite_distance_matrix(specs, settings)
    elapsed = time.perf_counter() - start

    graphs = standardize_graphs([build_graph(s) for s in specs])
    self_distance = max(fgw_distance(g, g, alpha, epsilon, settings) for g in graphs)
    asymmetry = max(
        abs(fgw_distance(graphs[i], graphs[k], alpha, epsilon, settings) - d.entries[k, i])
        for i in range(len(graphs))
        for k in range(i + 1, len(graphs))
    )
    print(f"{len(specs)}x{len(specs)} FGW matrix in {elapsed:.2f}s")
    print(f"max self-distance {self_distance:.3e}, max asymmetry {asymmetry:.3e}")
    print(f"distance range [{d.entries[~np.eye(len(specs), dtype=bool)].min():.4f}, {d.entries.max():.4f}]")
    print(f"elbow group count {elbow_group_count(d, method=settings.linkage)}")
    if out is not None:
        for name, path in export_distances(d, out).items():
            print(f"{name}: {path}")


def main() -> None:
    parser = argparse.ArgumentParser(description="Benchmark the suite FGW distance matrix")
    parser.add_argument("--seed", type=int, default=0, help="Suite seed (default: 0)")
    parser.add_argument("--alpha", type=float, default=0.5, help="Structure weight (default: 0.5)")
    parser.add_argument("--epsilon", type=float, default=1e-3, help="Entropic regularization (default: 1e-3)")
    parser.add_argument("--out", default=None, help="Optional output directory for the CSV matrices")
    args = parser.parse_args()

    out = Path(args.out).expanduser().resolve() if args.out else None
    bench(args.seed, args.alpha, args.epsilon, out)


if __name__ == "__main__":
    main()
