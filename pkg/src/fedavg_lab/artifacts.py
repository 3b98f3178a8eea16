"""Reading and writing run logs (CSV) and reports (JSON).

A run CSV starts with one ``# {json}`` metadata line carrying the config hash,
the seed and the run configuration, followed by the mandatory header
``round,loss,grad_norm_sq,xi_pre,xi_post,drift_bound,envelope``. Row 0 holds
the initial point; fields that do not apply are left empty. Floats use 17
significant digits and lines end in LF.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from fedavg_lab.engine import RoundRecord, Trajectory
from fedavg_lab.errors import MonitorError

CSV_COLUMNS = ("round", "loss", "grad_norm_sq", "xi_pre", "xi_post", "drift_bound", "envelope")


def fmt(value: float | None) -> str:
    return "" if value is None else format(float(value), ".17g")


def _sanitize(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    return obj


def dumps_json(obj: Any) -> str:
    return json.dumps(_sanitize(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_json(obj))


def read_json(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_csv(
    path: Path,
    trajectory: Trajectory,
    meta: dict,
    drift_bound: Sequence[float | None] | None = None,
    envelope: Sequence[float | None] | None = None,
) -> None:
    """Write ``trajectory`` with one row per round (``0..R``).

    ``drift_bound`` and ``envelope`` are indexed by round and may hold
    ``None`` for rows where the quantity is undefined.
    """
    n = len(trajectory.rounds) + 1
    drift_bound = drift_bound if drift_bound is not None else [None] * n
    envelope = envelope if envelope is not None else [None] * n
    lines = ["# " + json.dumps(_sanitize(meta), sort_keys=True, allow_nan=False), ",".join(CSV_COLUMNS)]
    lines.append(
        ",".join(["0", fmt(trajectory.initial_loss), fmt(trajectory.initial_grad_norm_sq), "", "", fmt(drift_bound[0]), fmt(envelope[0])])
    )
    fedavg = trajectory.kind == "fedavg"
    for i, rec in enumerate(trajectory.rounds, start=1):
        lines.append(
            ",".join(
                [
                    str(rec.r),
                    fmt(rec.loss),
                    fmt(rec.grad_norm_sq),
                    fmt(rec.xi_pre) if fedavg else "",
                    fmt(rec.xi_post) if fedavg else "",
                    fmt(drift_bound[i]),
                    fmt(envelope[i]),
                ]
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass(frozen=True)
class RunLog:
    meta: dict
    rows: tuple[dict, ...]

    def trajectory(self) -> Trajectory:
        """Rebuild the loss and drift record; iterates are not stored in the log."""
        first = self.rows[0]
        records = tuple(
            RoundRecord(
                r=int(row["round"]),
                loss=row["loss"],
                grad_norm_sq=row["grad_norm_sq"],
                xi_pre=row["xi_pre"] if row["xi_pre"] is not None else 0.0,
                xi_post=row["xi_post"] if row["xi_post"] is not None else 0.0,
            )
            for row in self.rows[1:]
        )
        return Trajectory(
            self.meta.get("kind", "fedavg"),
            None,
            first["loss"],
            first["grad_norm_sq"],
            records,
            (),
            dict(self.meta.get("run_config", {})),
            self.meta.get("constants"),
        )


def read_run_csv(path: Path) -> RunLog:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].startswith("# "):
        raise MonitorError(f"{path}: missing metadata line")
    meta = json.loads(lines[0][2:])
    if len(lines) < 2 or lines[1] != ",".join(CSV_COLUMNS):
        raise MonitorError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != len(CSV_COLUMNS):
            raise MonitorError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(fields)}")
        rows.append({k: (float(v) if v else None) for k, v in zip(CSV_COLUMNS, fields)})
    if not rows:
        raise MonitorError(f"{path}: no data rows")
    return RunLog(meta, tuple(rows))
