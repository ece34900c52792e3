"""Report rendering: figures plus delimited data for offline inspection.

Two report paths exist. `check-net --report-dir` writes the traffic-light
spawn plan as CSV next to a top-down map of the parsed network (lanes,
junctions, planned signal heads). `report` consumes a stats JSONL produced
by a run and writes a summary CSV next to timeline figures for step lag and
entity counts.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .netparse import ParsedNetwork, TrafficLightPlan


class ReportError(Exception):
    pass


def write_spawn_csv(plan: TrafficLightPlan, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tl_id", "link_index", "x", "y", "z", "yaw_deg"])
        for spawn in plan.spawns:
            writer.writerow(
                [
                    spawn.tl_id,
                    spawn.link_index,
                    f"{spawn.position[0]:.3f}",
                    f"{spawn.position[1]:.3f}",
                    f"{spawn.position[2]:.3f}",
                    f"{spawn.yaw:.2f}",
                ]
            )


def render_network_figure(
    network: ParsedNetwork, plan: TrafficLightPlan, path: str | Path, mapper=None
) -> None:
    """Top-down map: lane polylines, traffic-light spawn points with facing."""
    fig, ax = plt.subplots(figsize=(10, 10))
    for lane in network.lanes.values():
        shape = lane.shape
        if mapper is not None:
            shape = [mapper.to_engine(*p) for p in shape]
        xs = [p[0] for p in shape]
        ys = [p[1] for p in shape]
        internal = lane.id.startswith(":")
        ax.plot(xs, ys, color="#b0b0b0" if internal else "#404040",
                linewidth=0.8 if internal else 1.4, zorder=1)
    if plan.spawns:
        sx = [s.position[0] for s in plan.spawns]
        sy = [s.position[1] for s in plan.spawns]
        ax.scatter(sx, sy, s=36, c="#d62728", marker="o", zorder=3, label="signal heads")
        for spawn in plan.spawns:
            rad = math.radians(spawn.yaw)
            ax.annotate(
                "",
                xy=(spawn.position[0] + 4 * math.cos(rad), spawn.position[1] + 4 * math.sin(rad)),
                xytext=spawn.position[:2],
                arrowprops=dict(arrowstyle="->", color="#d62728", lw=1.0),
            )
        ax.legend(loc="upper right")
    ax.set_aspect("equal")
    ax.set_xlabel("x [engine units]")
    ax.set_ylabel("y [engine units]")
    ax.set_title(f"{len(network.lanes)} lanes, {len(plan.spawns)} signal heads")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def load_stats(path: str | Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{line_no}: bad stats line: {exc}") from None
    if not rows:
        raise ReportError(f"{path}: no stats records")
    return rows


def _percentile(values: list[float], q: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    k = min(len(ordered) - 1, max(0, math.ceil(q * len(ordered)) - 1))
    return ordered[k]


def write_stats_summary(rows: list[dict], path: str | Path) -> None:
    metrics = [
        "tick_rate",
        "active",
        "culled",
        "pool_free",
        "step_lag_p99",
        "applied",
        "dropped",
        "clients",
        "osc_bundles",
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "p50", "p99", "max", "last"])
        for metric in metrics:
            values = [float(r[metric]) for r in rows if metric in r]
            if not values:
                continue
            writer.writerow(
                [
                    metric,
                    f"{sum(values) / len(values):.4f}",
                    f"{_percentile(values, 0.50):.4f}",
                    f"{_percentile(values, 0.99):.4f}",
                    f"{max(values):.4f}",
                    f"{values[-1]:.4f}",
                ]
            )


def render_stats_figures(rows: list[dict], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    times = [float(r.get("t", i)) for i, r in enumerate(rows)]
    t0 = times[0]
    times = [t - t0 for t in times]
    written = []

    fig, ax = plt.subplots(figsize=(9, 4))
    for key, style in (("step_lag_p50", "-"), ("step_lag_p99", "--"), ("step_lag_max", ":")):
        if any(key in r for r in rows):
            ax.plot(times, [1e3 * float(r.get(key, 0.0)) for r in rows], style, label=key)
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("producer step lag [ms]")
    ax.set_title("Producer pacing")
    ax.legend()
    fig.tight_layout()
    lag_path = out_dir / "step_lag.png"
    fig.savefig(lag_path, dpi=120)
    plt.close(fig)
    written.append(lag_path)

    fig, ax = plt.subplots(figsize=(9, 4))
    for key in ("active", "culled", "pool_free"):
        if any(key in r for r in rows):
            ax.plot(times, [float(r.get(key, 0.0)) for r in rows], label=key)
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("entities")
    ax.set_title("Culling and pool occupancy")
    ax.legend()
    fig.tight_layout()
    counts_path = out_dir / "entities.png"
    fig.savefig(counts_path, dpi=120)
    plt.close(fig)
    written.append(counts_path)

    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(times, [float(r.get("sim_time", 0.0)) for r in rows], label="sim_time")
    ax.plot(times, times, "--", color="#888888", label="wall time")
    ax.set_xlabel("wall time [s]")
    ax.set_ylabel("simulation time [s]")
    ax.set_title("Timescale preservation")
    ax.legend()
    fig.tight_layout()
    timescale_path = out_dir / "timescale.png"
    fig.savefig(timescale_path, dpi=120)
    plt.close(fig)
    written.append(timescale_path)

    return written


def write_stats_report(stats_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Figures plus summary.csv for one stats JSONL; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = load_stats(stats_path)
    summary = out_dir / "summary.csv"
    write_stats_summary(rows, summary)
    return [summary] + render_stats_figures(rows, out_dir)
