"""
Tabular export helpers shared by the services.

Responsibilities:
- Write labelled square matrices (distances, similarities, cosines) as CSV
  with a header row of ids, and read them back.
- Write row records (update logs, result tables) as CSV.
- Write JSON payloads with stable key order.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

PathLike = Union[str, Path]


def write_matrix_csv(path: PathLike, matrix: np.ndarray, labels: Sequence[str]) -> Path:
    """Write a square matrix with ids as both header and index column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(np.asarray(matrix, dtype=np.float64), index=list(labels), columns=list(labels))
    frame.index.name = "id"
    frame.to_csv(path, float_format="%.17g")
    return path


def read_matrix_csv(path: PathLike) -> Tuple[np.ndarray, List[str]]:
    frame = pd.read_csv(path, index_col=0)
    return frame.to_numpy(dtype=np.float64), [str(c) for c in frame.columns]


def write_rows_csv(path: PathLike, rows: Iterable[Dict[str, Any]], columns: Sequence[str] = ()) -> Path:
    """Write dict rows; `columns` fixes the column order when given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    if columns:
        frame = frame.reindex(columns=list(columns))
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
