"""Snapshot grids, metric curves and summary tables for finished runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..views import compose_grid
from .runs import SNAPSHOT_KEYS, RunRecord

ROW_LABELS = {"x0": "x0", "x0_cond": "x0 | cond", "x0_uncond": "x0 | uncond", "x0_guided": "x0 | guided",
              "views": "grid"}
CURVE_COLUMNS = ("dist_to_mode", "grad_norm", "L_SGC", "pearson_front", "vpcsm_grad_norm")


class ReportError(RuntimeError):
    pass


@dataclass
class ReportResult:
    figures: list = field(default_factory=list)
    table: Path | None = None
    missing: list = field(default_factory=list)


def find_runs(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise ReportError(f"{path} is not a directory")
    if (path / "run.json").exists():
        return [path]
    runs = sorted(p.parent for p in path.glob("*/run.json"))
    if not runs:
        raise ReportError(f"no runs under {path} (expected run.json here or one level down)")
    return runs


def _load_snapshots(record: RunRecord):
    loaded, missing = [], []
    for p in record.snapshots:
        if not p.exists():
            missing.append(p)
            continue
        with np.load(p) as z:
            loaded.append({k: z[k] for k in z.files})
    return loaded, missing


def _draw(ax, value, lim: float):
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 1:
        ax.scatter(v[:1], v[1:2] if v.size > 1 else [0.0], s=18, c="C3")
        ax.set_xlim(-lim, lim)
        ax.set_ylim(-lim, lim)
        ax.axhline(0, lw=0.3, c="0.7")
        ax.axvline(0, lw=0.3, c="0.7")
        ax.set_aspect("equal")
        return
    if v.ndim == 4:
        v = compose_grid(v)
    ax.imshow(np.clip(v, 0.0, 1.0), interpolation="nearest")


def snapshot_grid(record: RunRecord, path: Path) -> tuple[Path | None, list]:
    """Rows are quantities, columns are snapshot steps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    snaps, missing = _load_snapshots(record)
    if not snaps:
        return None, missing
    keys = [k for k in ("views",) + SNAPSHOT_KEYS if any(k in s for s in snaps)]
    vecs = [np.abs(s[k]).max() for s in snaps for k in keys if k in s and s[k].ndim == 1]
    lim = max(2.0, 1.1 * max(vecs)) if vecs else 2.0
    fig, axes = plt.subplots(len(keys), len(snaps), figsize=(1.6 * len(snaps) + 0.8, 1.6 * len(keys) + 0.4),
                             squeeze=False)
    for j, s in enumerate(snaps):
        axes[0, j].set_title(f"step {int(s['step'])}\nt={int(s['t'])}", fontsize=7)
        for i, k in enumerate(keys):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if k in s:
                _draw(ax, s[k], lim)
            else:
                ax.axis("off")
            if j == 0:
                ax.set_ylabel(ROW_LABELS.get(k, k), fontsize=7)
    fig.suptitle(f"run {record.config_hash}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path, missing


def metric_curves(records, path: Path) -> Path | None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = [c for c in CURVE_COLUMNS if any(r.rows and c in r.rows[0] for r in records)]
    if not cols:
        return None
    fig, axes = plt.subplots(1, len(cols), figsize=(3.2 * len(cols), 2.8), squeeze=False)
    for ax, c in zip(axes[0], cols):
        for r in records:
            if not r.rows or c not in r.rows[0]:
                continue
            steps = [int(row["step"]) for row in r.rows]
            vals = [float(row[c]) if row[c] != "" else math.nan for row in r.rows]
            label = f"{r.config_hash} ({r.run_dir.name})"
            ax.plot(steps, vals, lw=0.9, label=label)
        ax.set_title(c, fontsize=8)
        ax.set_xlabel("step", fontsize=7)
        ax.tick_params(labelsize=6)
    axes[0, 0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _flat_summary(record: RunRecord) -> dict:
    out = {"run": record.run_dir.name, "config_hash": record.config_hash, "status": record.status,
           "steps": len(record.rows), "wall_clock_s": round(float(record.wall_clock), 2)}
    for k, v in record.summary.items():
        if isinstance(v, dict):
            out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
        elif not isinstance(v, list):
            out[k] = v
    return out


def summary_table(records, path: Path) -> Path:
    rows = [_flat_summary(r) for r in records]
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)
    return path


def report(run, out=None) -> ReportResult:
    """Figures and a summary table for one run directory or a directory of runs.

    Missing snapshot files are listed in the result; what exists is still drawn.
    """
    dirs = find_runs(run)
    records = [RunRecord.load(d) for d in dirs]
    out = Path(out) if out is not None else Path(run) / "report"
    out.mkdir(parents=True, exist_ok=True)
    res = ReportResult()
    for r in records:
        fig, missing = snapshot_grid(r, out / f"snapshots_{r.run_dir.name}.png")
        res.missing.extend(missing)
        if fig is not None:
            res.figures.append(fig)
    curves = metric_curves(records, out / "metrics.png")
    if curves is not None:
        res.figures.append(curves)
    res.table = summary_table(records, out / "summary.csv")
    return res
