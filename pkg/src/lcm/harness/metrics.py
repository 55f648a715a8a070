"""Metrics output: fixed-header CSV plus JSON-lines, written atomically."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

CSV_HEADER = "epoch,split,metric,value,seconds"


@dataclass
class RunRecord:
    meta: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)    # (epoch, split, metric, value, seconds)
    steps: list = field(default_factory=list)   # dicts, one per optimizer step
    start_time: float = field(default_factory=time.perf_counter)

    def add(self, epoch, split, metric, value):
        self.rows.append((epoch, split, metric, float(value),
                          time.perf_counter() - self.start_time))

    def add_step(self, **fields):
        self.steps.append(dict(fields))

    def summary(self) -> dict:
        return {"meta": self.meta, "n_rows": len(self.rows), "n_steps": len(self.steps)}


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_metrics(record: RunRecord, out_dir, prefix: str = "metrics") -> dict:
    """Write <prefix>.csv and <prefix>.jsonl into out_dir; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{prefix}.csv")
    lines = [CSV_HEADER]
    for epoch, split, metric, value, seconds in record.rows:
        lines.append(f"{epoch},{split},{metric},{value:.10g},{seconds:.3f}")
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    jsonl_path = os.path.join(out_dir, f"{prefix}.jsonl")
    _atomic_write(jsonl_path, "".join(json.dumps(s) + "\n" for s in record.steps))
    return {"csv": csv_path, "jsonl": jsonl_path}


def write_json(payload, out_dir, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
