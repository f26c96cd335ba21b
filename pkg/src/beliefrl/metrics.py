"""Metrics CSV: fixed header, one row per gradient step."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, fields
from typing import Iterable, List, Optional, TextIO

from .rl import MetricsRecord

FIELDS = [f.name for f in fields(MetricsRecord)]
_INT_FIELDS = {"frames", "segment", "seed"}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    def __init__(self, fh: TextIO, write_header: bool = True):
        self.fh = fh
        self.writer = csv.writer(fh, lineterminator="\n")
        if write_header:
            self.writer.writerow(FIELDS)

    def write(self, record: MetricsRecord) -> None:
        self.writer.writerow([_fmt(v) for v in astuple(record)])
        self.fh.flush()


def parse_row(row: dict) -> MetricsRecord:
    values = {}
    for name in FIELDS:
        raw = row[name]
        if name in _INT_FIELDS:
            values[name] = int(raw)
        elif raw == "":
            values[name] = None
        else:
            values[name] = float(raw)
    return MetricsRecord(**values)


def read_metrics(path: str) -> List[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [parse_row(r) for r in reader]


def final_return(records: Iterable[MetricsRecord], tail: int = 1) -> float:
    """Mean of the rolling return over the last ``tail`` records (NaNs skipped)."""
    vals = [r.mean_return for r in list(records)[-tail:] if not math.isnan(r.mean_return)]
    return sum(vals) / len(vals) if vals else float("nan")
