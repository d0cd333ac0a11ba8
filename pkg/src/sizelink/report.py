"""Render link stats to a delimited summary plus matplotlib figures.

Consumes one or more --stats-json outputs and writes report.csv,
savings_by_pass.png, and text_size.png into the output directory.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = ["load_stats", "write_report"]

PASS_KEYS = ("frame_outline", "general_outline", "icf")
PASS_LABELS = {"frame_outline": "frame outline",
               "general_outline": "general outline", "icf": "icf"}


def load_stats(path: Path) -> dict:
    data = json.loads(path.read_text())
    for key in ("text_bytes_before", "text_bytes_after", "passes"):
        if key not in data:
            raise ValueError(f"{path}: not a sizelink stats file (missing {key})")
    return data


def write_report(stats_paths: list[Path], out_dir: Path,
                 labels: list[str] | None = None) -> list[Path]:
    if labels is not None and len(labels) != len(stats_paths):
        raise ValueError("number of labels must match number of stats files")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, path in enumerate(stats_paths):
        data = load_stats(path)
        label = labels[i] if labels else path.stem
        passes = data["passes"]
        before = data["text_bytes_before"]
        after = data["text_bytes_after"]
        rows.append({
            "label": label,
            "text_bytes_before": before,
            "text_bytes_after": after,
            "frame_outline_saved": passes["frame_outline"]["bytes_saved"],
            "general_outline_saved": passes["general_outline"]["bytes_saved"],
            "icf_saved": passes["icf"]["bytes_saved"],
            "total_saved": before - after,
            "saved_pct": round(100.0 * (before - after) / before, 3)
            if before else 0.0,
        })

    written = []
    csv_path = out_dir / "report.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    written.append(csv_path)

    written.append(_savings_figure(rows, out_dir / "savings_by_pass.png"))
    written.append(_size_figure(rows, out_dir / "text_size.png"))
    return written


_ROW_KEYS = {"frame_outline": "frame_outline_saved",
             "general_outline": "general_outline_saved", "icf": "icf_saved"}


def _savings_figure(rows: list[dict], path: Path) -> Path:
    labels = [r["label"] for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(rows)), 4))
    bottoms = [0] * len(rows)
    for key in PASS_KEYS:
        values = [r[_ROW_KEYS[key]] for r in rows]
        ax.bar(x, values, bottom=bottoms, label=PASS_LABELS[key])
        bottoms = [b + v for b, v in zip(bottoms, values)]
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("bytes saved")
    ax.set_title("text bytes saved by pass")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _size_figure(rows: list[dict], path: Path) -> Path:
    labels = [r["label"] for r in rows]
    x = list(range(len(rows)))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(rows)), 4))
    ax.bar([i - width / 2 for i in x], [r["text_bytes_before"] for r in rows],
           width, label="before")
    ax.bar([i + width / 2 for i in x], [r["text_bytes_after"] for r in rows],
           width, label="after")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("text bytes")
    ax.set_title("text size before/after link optimization")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
