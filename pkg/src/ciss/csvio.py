"""Strict RFC-4180 CSV emission with lossless float formatting.

All real values are printed with 17 significant digits so a round-trip
through text reproduces the exact float64 bit pattern; rows end with CRLF.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def fmt_real(x: float) -> str:
    return f"{float(x):.17g}"


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
