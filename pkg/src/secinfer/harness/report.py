"""Comparison tables across simulation summaries."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

COLUMNS = ("source", "run", "requests", "mean_ms", "p50_ms", "p95_ms", "cold", "warm", "hot",
           "model_switches", "cold_starts", "gb_seconds")


def _load(path: str | Path) -> tuple[str, dict]:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    return p.parent.name or str(p), json.loads(p.read_text())


def rows(inputs) -> list[dict]:
    out = []
    for path in inputs:
        source, data = _load(path)
        for run, s in data["runs"].items():
            lat = s["latency"]
            out.append({
                "source": source, "run": run, "requests": s["requests"],
                "mean_ms": lat["mean_ms"], "p50_ms": lat["p50_ms"], "p95_ms": lat["p95_ms"],
                **{k: s["paths"].get(k, 0) for k in ("cold", "warm", "hot")},
                "model_switches": s["model_switches"], "cold_starts": s["cold_starts"],
                "gb_seconds": s["gb_seconds"],
            })
    return out


def _cell(v) -> str:
    if v is None:
        return "-"
    return f"{v:.2f}" if isinstance(v, float) else str(v)


def compare(inputs) -> tuple[str, str]:
    """Return (aligned text table, plot-ready CSV)."""
    data = rows(inputs)
    cells = [list(COLUMNS)] + [[_cell(r[c]) for c in COLUMNS] for r in data]
    widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) if i > 1 else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in cells]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in data:
        w.writerow(["" if r[c] is None else (f"{r[c]:.3f}" if isinstance(r[c], float) else r[c]) for c in COLUMNS])
    return "\n".join(lines), buf.getvalue()
