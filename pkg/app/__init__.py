"""
Experiment front-end package root.

This package contains the command-line surface of the lab: suite and dataset
generation, training runs, analyses and report collation. It is responsible
for configuration, run directories, and orchestration of the ML services.
"""
import sys
from pathlib import Path

# Add ML package to path for imports.
_ML_SRC = Path(__file__).resolve().parents[1] / "ml" / "src"
if str(_ML_SRC) not in sys.path:
    sys.path.insert(0, str(_ML_SRC))
