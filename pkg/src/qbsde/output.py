"""Write run results to disk: JSON, CSV and PNG, each tagged with the config hash."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .experiments import RunResult, Table


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def write_json(path: str, payload: dict, config_sha256: str) -> None:
    body = {"config_sha256": config_sha256, **_clean(payload)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(body, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else "nan"
    return str(v)


def write_csv(path: str, table: Table, config_sha256: str) -> None:
    """One ``#``-prefixed config-hash line, a header row, then the data."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_sha256={config_sha256}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])


def read_csv(path: str) -> tuple[str, list[str], list[list[str]]]:
    """Inverse of :func:`write_csv`: ``(config_sha256, columns, rows)``."""
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_sha256="):
            raise ValueError(f"{path}: missing config-hash line")
        rows = list(csv.reader(fh))
    return first.split("=", 1)[1], rows[0], rows[1:]


def write_result(result: RunResult, cfg: dict, config_sha256: str, outdir: str) -> list[str]:
    """Write every artifact of ``result`` into ``outdir``; returns the written paths."""
    os.makedirs(outdir, exist_ok=True)
    formats = set(cfg["output"]["formats"])
    written = []
    path = os.path.join(outdir, "config.resolved.json")
    write_json(path, {"config": cfg}, config_sha256)
    written.append(path)
    if "json" in formats:
        path = os.path.join(outdir, "results.json")
        payload = {"command": result.command, "exit_code": result.exit_code, **result.scalars}
        write_json(path, payload, config_sha256)
        written.append(path)
        if result.reports:
            rdir = os.path.join(outdir, "reports")
            os.makedirs(rdir, exist_ok=True)
            by_id: dict[str, list] = {}
            for r in result.reports:
                by_id.setdefault(r.theorem_id, []).append(r.to_dict())
            for tid, reps in sorted(by_id.items()):
                path = os.path.join(rdir, f"{tid}.json")
                write_json(path, {"theorem_id": tid, "reports": reps}, config_sha256)
                written.append(path)
    if "csv" in formats:
        for name, table in result.tables.items():
            path = os.path.join(outdir, f"{name}.csv")
            write_csv(path, table, config_sha256)
            written.append(path)
    if "png" in formats and result.plots:
        from .plotting import render

        for name, spec in result.plots.items():
            path = os.path.join(outdir, f"{name}.png")
            render(spec, path, config_sha256)
            written.append(path)
    return written
