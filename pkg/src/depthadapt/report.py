"""Derived report tables and figures from a finished run directory.

Each export reads the run's raw artifacts, writes a small delimited table,
and renders the matching PNG next to it. Tables stay the source of truth;
the figures are a convenience view of exactly the same rows.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be pinned first


def _read_tsv(path: str) -> tuple[list[str], list[list[str]]]:
    """Header and data rows of a tab-separated file, comment lines skipped."""
    header: list[str] = []
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if not header:
                header = parts
            else:
                rows.append(parts)
    return header, rows


def _write_tsv(path: str, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def _save_line_plot(path: str, xs, series: dict[str, list[float]], xlabel: str,
                    ylabel: str, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6), dpi=120)
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", markersize=2.5, linewidth=1.0, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def running_mean(values: list[float]) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values, start=1):
        acc += v
        out.append(acc / i)
    return out


def export_validation_curve(run_dir: str, out_dir: str) -> list[str]:
    """Validation loss against keyframe index, from the event log."""
    header, rows = _read_tsv(os.path.join(run_dir, "events.tsv"))
    col = {name: i for i, name in enumerate(header)}
    ts, ls = [], []
    for row in rows:
        if row[col["action"]] != "validate":
            continue
        ts.append(int(row[col["t"]]))
        ls.append(float(row[col["l_val"]]))
    tsv = os.path.join(out_dir, "val_loss_vs_t.tsv")
    _write_tsv(tsv, ["t", "l_val"], [[str(t), f"{l:.8f}"] for t, l in zip(ts, ls)])
    png = os.path.join(out_dir, "val_loss_vs_t.png")
    _save_line_plot(png, ts, {"l_val": ls}, "keyframe index", "validation loss",
                    "Validation loss over the keyframe stream")
    return [tsv, png]


def export_accuracy_running(run_dir: str, out_dir: str) -> list[str]:
    """Per-frame depth accuracy with its running mean."""
    header, rows = _read_tsv(os.path.join(run_dir, "metrics_depth.tsv"))
    col = {name: i for i, name in enumerate(header)}
    frames = [int(r[col["frame"]]) for r in rows]
    pc = [float(r[col["percent_correct"]]) for r in rows]
    run = running_mean(pc)
    tsv = os.path.join(out_dir, "accuracy_running.tsv")
    _write_tsv(tsv, ["frame", "percent_correct", "running_mean"],
               [[str(f), f"{p:.6f}", f"{m:.6f}"] for f, p, m in zip(frames, pc, run)])
    png = os.path.join(out_dir, "accuracy_running.png")
    _save_line_plot(png, frames, {"per frame": pc, "running mean": run},
                    "keyframe id", "percent correct",
                    "Depth accuracy per keyframe")
    return [tsv, png]


def export_ba_cost(run_dir: str, out_dir: str) -> list[str]:
    """Concatenated per-iteration BA cost across all refinement passes."""
    names = sorted(n for n in os.listdir(run_dir)
                   if n.startswith("ba_") and n.endswith(".tsv"))
    out_rows: list[list[str]] = []
    xs: list[int] = []
    costs: list[float] = []
    step = 0
    for name in names:
        pass_id = name[len("ba_"):-len(".tsv")]
        _, rows = _read_tsv(os.path.join(run_dir, name))
        for row in rows:
            out_rows.append([pass_id, row[0], row[1], row[3]])
            xs.append(step)
            costs.append(float(row[1]))
            step += 1
    tsv = os.path.join(out_dir, "ba_cost.tsv")
    _write_tsv(tsv, ["ba_pass", "iteration", "cost", "accepted"], out_rows)
    png = os.path.join(out_dir, "ba_cost.png")
    if costs:
        fig, ax = plt.subplots(figsize=(6.0, 3.6), dpi=120)
        ax.semilogy(xs, costs, marker="o", markersize=2.5, linewidth=1.0)
        ax.set_xlabel("cumulative LM iteration")
        ax.set_ylabel("cost")
        ax.set_title("Bundle adjustment cost per iteration")
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(png)
        plt.close(fig)
    else:
        _save_line_plot(png, [], {"cost": []}, "cumulative LM iteration", "cost",
                        "Bundle adjustment cost per iteration")
    return [tsv, png]


def export_all(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every report the run directory has inputs for."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    written: list[str] = []
    if os.path.exists(os.path.join(run_dir, "events.tsv")):
        written += export_validation_curve(run_dir, out_dir)
    if os.path.exists(os.path.join(run_dir, "metrics_depth.tsv")):
        written += export_accuracy_running(run_dir, out_dir)
    written += export_ba_cost(run_dir, out_dir)
    return written
