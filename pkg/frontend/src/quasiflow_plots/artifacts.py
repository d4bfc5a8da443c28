"""Readers for the quasiflow artifact contracts (CSV + manifest JSON)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


class SchemaError(Exception):
    """An artifact is missing, malformed, or lacks a required column."""


def read_manifest(csv_path: Path) -> dict:
    man_path = Path(str(csv_path) + ".manifest.json")
    if not man_path.exists():
        raise SchemaError(f"missing manifest {man_path}")
    return json.loads(man_path.read_text())


def read_table(csv_path: Path, required: list[str]) -> dict[str, np.ndarray]:
    """Load a numeric CSV into named columns, checking the schema."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise SchemaError(f"missing artifact {csv_path}")
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for col in required:
            if col not in header:
                raise SchemaError(
                    f"{csv_path.name}: required column {col!r} not in {header}")
        rows = np.array([[float(v) for v in row] for row in reader])
    if rows.size == 0:
        raise SchemaError(f"{csv_path.name}: no data rows")
    return {name: rows[:, i] for i, name in enumerate(header)}


def find_density_csv(run_dir: Path) -> Path:
    """Highest-level density file of a run (the headline level)."""
    run_dir = Path(run_dir)
    candidates = sorted(run_dir.glob("density_level*.csv"),
                        key=lambda p: int(p.stem.rsplit("level", 1)[1]))
    if not candidates:
        raise SchemaError(f"no density_level*.csv under {run_dir}")
    return candidates[-1]


def footer_text(manifest: dict) -> str:
    seed = manifest.get("seed", "?")
    h = manifest.get("config_hash", "?")
    return f"seed {seed}   config {h}"
