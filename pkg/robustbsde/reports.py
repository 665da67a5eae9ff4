"""CSV output. Floats are written with repr so reruns produce identical bytes."""

import csv
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np

from robustbsde.bsdej import BsdeSolution, solution_rows


SUMMARY_HEADER = ["label", "value"]


def format_cell(value: object) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def write_summary(path: Path, summary: Mapping[str, object]) -> Path:
    """Two-column label,value file, in insertion order."""
    return write_table(path, SUMMARY_HEADER, summary.items())


def write_solution(path: Path, solution: BsdeSolution) -> Path:
    header, rows = solution_rows(solution)
    return write_table(path, header, rows)
