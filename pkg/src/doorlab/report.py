"""Comparison tables and figures from evaluation results."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalharness import REAL_NOTE, GapReport, write_gap_curve  # noqa: E402

TABLE_TOTALS = ("total", "seen", "unseen")
TABLE_BREAKDOWN = ("swing_left", "swing_right", "lights_on", "lights_off", "robot_A", "robot_B")


def _pct(p):
    return "nan" if p is None or (isinstance(p, float) and math.isnan(p)) else f"{100 * p:.1f}"


def _write_tsv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(REAL_NOTE + "\n")
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _breakdown_lookup(report: GapReport):
    return {(b["method"], b["group"], b["domain"]): b for b in report.breakdowns}


def write_tables(report: GapReport, out_dir) -> list:
    """Method x (total, seen, unseen) and method x (swing, lighting, robot) tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    look = _breakdown_lookup(report)
    paths = []
    for name, groups in (("success_table.tsv", TABLE_TOTALS), ("breakdown_table.tsv", TABLE_BREAKDOWN)):
        header = ["method", "domain"] + [c for g in groups for c in (f"{g}_pct", f"{g}_std_pct", f"{g}_n")]
        rows = []
        for m in sorted(report.per_method):
            for dom in ("sim", "real"):
                row = [m, dom]
                for g in groups:
                    b = look.get((m, g, dom))
                    row += [_pct(b["p"]), _pct(b["stddev"]), b["n"]] if b else ["nan", "nan", 0]
                rows.append(row)
        paths.append(_write_tsv(out_dir / name, header, rows))
    gap_rows = [[m, ",".join(e["top_k"]), f"{100 * e['mean_gap']:.2f}"]
                for m, e in sorted(report.per_method.items())]
    paths.append(_write_tsv(out_dir / "gap_summary.tsv", ["method", "top_k", "mean_gap_pct"], gap_rows))
    paths.append(write_gap_curve(report, out_dir / "gap_curve.tsv"))
    return paths


def plot_gap_curves(report: GapReport, path):
    methods = sorted({r["method"] for r in report.per_checkpoint})
    fig, axes = plt.subplots(1, max(1, len(methods)), figsize=(4 * max(1, len(methods)), 3.2),
                             sharey=True, squeeze=False)
    for ax, m in zip(axes[0], methods):
        rows = [r for r in report.per_checkpoint if r["method"] == m]
        runs = sorted({r["checkpoint_id"].rsplit("/", 1)[0] for r in rows})
        for j, run in enumerate(runs):
            rr = sorted((r for r in rows if r["checkpoint_id"].startswith(run + "/")), key=lambda r: r["step"])
            steps = [r["step"] for r in rr]
            ax.plot(steps, [r["sim"] for r in rr], "-o", color="tab:blue", ms=3, alpha=0.8,
                    label="sim" if j == 0 else None)
            real = [(r["step"], r["real"]) for r in rr if not math.isnan(r["real"])]
            if real:
                ax.plot(*zip(*real), "s", color="tab:orange", ms=5, alpha=0.8,
                        label="real-style" if j == 0 else None)
        gap = report.per_method.get(m, {}).get("mean_gap")
        ax.set_title(f"{m}" + (f" (gap {100 * gap:.1f} pts)" if gap is not None else ""))
        ax.set_xlabel("training step")
        ax.set_ylim(-0.02, 1.02)
    axes[0][0].set_ylabel("success rate")
    axes[0][0].legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_breakdowns(report: GapReport, path):
    look = _breakdown_lookup(report)
    groups = TABLE_TOTALS + TABLE_BREAKDOWN
    methods = sorted(report.per_method)
    fig, ax = plt.subplots(figsize=(10, 3.5))
    width = 0.8 / max(1, len(methods))
    x = np.arange(len(groups))
    for i, m in enumerate(methods):
        vals = [look[(m, g, "real")]["p"] if (m, g, "real") in look else np.nan for g in groups]
        errs = [look[(m, g, "real")]["stddev"] if (m, g, "real") in look else np.nan for g in groups]
        ax.bar(x + i * width, vals, width, yerr=errs, label=m, capsize=2)
    ax.set_xticks(x + width * (len(methods) - 1) / 2, groups, rotation=30, ha="right")
    ax.set_ylabel("real-style success (top-k)")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def adaptation_grid(pairs: list, path, titles=("original", "adapted")):
    """Image grid; ``pairs`` holds (original, adapted, label) with RGB or depth arrays."""
    if not pairs:
        raise ValueError("no samples for the adaptation grid")
    fig, axes = plt.subplots(len(pairs), 2, figsize=(3.2, 1.6 * len(pairs)), squeeze=False)
    for row, (orig, adapted, label) in zip(axes, pairs):
        for ax, img in zip(row, (orig, adapted)):
            if img.ndim == 2:
                ax.imshow(img, cmap="viridis", vmin=0, vmax=10)
            else:
                ax.imshow(img)
            ax.set_xticks([])
            ax.set_yticks([])
        row[0].set_ylabel(label, fontsize=6)
    axes[0][0].set_title(titles[0], fontsize=8)
    axes[0][1].set_title(titles[1], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def write_report(report: GapReport, out_dir) -> list:
    out_dir = Path(out_dir)
    paths = write_tables(report, out_dir)
    paths.append(plot_gap_curves(report, out_dir / "gap_curves.png"))
    paths.append(plot_breakdowns(report, out_dir / "breakdowns.png"))
    return paths
