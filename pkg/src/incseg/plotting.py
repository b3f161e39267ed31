"""Static chart rendering for loss logs and metric reports."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

LOSS_PARTS = ("loss_cls", "loss_loc", "loss_enc", "loss_sss", "loss_seg", "loss_total")


def plot_loss_curves(rows, out_path: str) -> None:
    """One curve per loss part over training iterations."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    iters = [r["iter"] for r in rows]
    for part in LOSS_PARTS:
        values = [r[part] for r in rows]
        if any(v != 0.0 for v in values):
            ax.plot(iters, values, label=part.removeprefix("loss_"),
                    marker="o" if len(rows) == 1 else None)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_per_class_iou(report: dict, out_path: str, names: dict | None = None) -> None:
    """Bar chart of per-class IoU from a parsed key-value report."""
    entries = sorted(
        ((k.removeprefix("iou."), v) for k, v in report.items()
         if k.startswith("iou.") and not math.isnan(v)),
        key=lambda kv: int(kv[0]) if kv[0].isdigit() else 0,
    )
    labels = [names.get(int(k), k) if names and k.isdigit() else k for k, _ in entries]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(entries) + 1), 4))
    ax.bar(range(len(entries)), [v for _, v in entries], color="#4878a8")
    ax.set_xticks(range(len(entries)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title("per-class IoU")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_alpha_sweep(entries, out_path: str) -> None:
    """mIoU against the label-smoothing coefficient, one curve per protocol.

    ``entries`` is a list of (alpha, protocol, miou) triples.
    """
    by_protocol: dict[str, list] = {}
    for alpha, protocol, value in entries:
        by_protocol.setdefault(protocol, []).append((alpha, value))
    fig, ax = plt.subplots(figsize=(6, 4))
    for protocol, points in sorted(by_protocol.items()):
        points.sort()
        ax.plot([a for a, _ in points], [v for _, v in points], marker="o",
                label=protocol)
    ax.set_xlabel("alpha (hard-label weight)")
    ax.set_ylabel("mIoU (all)")
    ax.set_title("label smoothing sweep")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def write_summary(lines, out_path: str) -> None:
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
