"""Report files for the command-line tools: key=value text, CSV, figures.

Every report function writes plain delimited files next to PNG figures
rendered with the non-interactive matplotlib backend, and returns the list
of paths it wrote so callers can print them.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import write_pgm
from .metrics import per_class_dice

__all__ = [
    "save_kv",
    "save_csv",
    "colorize_mask",
    "training_report",
    "eval_report",
    "ablation_report",
    "infer_report",
]


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def save_kv(path, values: dict) -> Path:
    path = Path(path)
    path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))
    return path


def save_csv(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in columns})
    return path


def colorize_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Mask to RGB floats; the ignore label renders as mid grey."""
    cmap = plt.get_cmap("tab10")
    palette = np.asarray([cmap(i % 10)[:3] for i in range(num_classes)])
    out = np.full(mask.shape + (3,), 0.5)
    known = mask < num_classes
    out[known] = palette[mask[known]]
    return out


# ---------------------------------------------------------------------------
# training


def training_report(out_dir, result) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history = result.history
    written = []

    rows = [{
        "epoch": st.epoch, "lr": st.lr, "train_loss": st.train_loss,
        "val_miou": st.val_miou, "val_pixel_acc": st.val_pixel_acc,
        "seconds": st.seconds, "is_best": int(st.is_best),
    } for st in history]
    written.append(save_csv(out_dir / "history.csv", rows,
                            ["epoch", "lr", "train_loss", "val_miou",
                             "val_pixel_acc", "seconds", "is_best"]))

    summary = {
        "epochs_run": len(history),
        "best_epoch": result.best_epoch,
        "best_val_miou": result.best_score,
    }
    if history:
        summary["final_train_loss"] = history[-1].train_loss
        summary["final_val_miou"] = history[-1].val_miou
    written.append(save_kv(out_dir / "summary.txt", summary))

    if history:
        epochs = [st.epoch for st in history]
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
        ax1.plot(epochs, [st.train_loss for st in history], color="tab:red")
        ax1.set_ylabel("train loss")
        ax1.grid(alpha=0.3)
        ax2.plot(epochs, [st.val_miou for st in history], color="tab:blue")
        ax2.set_ylabel("val mean IoU")
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0.0, 1.0)
        ax2.grid(alpha=0.3)
        fig.tight_layout()
        fig_path = out_dir / "training_curves.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        written.append(fig_path)
    return written


# ---------------------------------------------------------------------------
# evaluation


def eval_report(out_dir, ev) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    iou = ev.iou
    dice_vals = per_class_dice(ev.cm)
    k = ev.cm.num_classes

    summary = {"miou": ev.miou, "pixel_acc": ev.pixel_acc}
    for c in range(k):
        summary[f"iou.{c}"] = "absent" if math.isnan(iou[c]) else iou[c]
    written.append(save_kv(out_dir / "metrics.txt", summary))

    support = ev.cm.counts.sum(axis=1)
    rows = [{
        "class": c,
        "iou": "" if math.isnan(iou[c]) else iou[c],
        "dice": "" if math.isnan(dice_vals[c]) else dice_vals[c],
        "support": int(support[c]),
    } for c in range(k)]
    written.append(save_csv(out_dir / "per_class.csv", rows,
                            ["class", "iou", "dice", "support"]))

    fig, ax = plt.subplots(figsize=(6, 3.5))
    shown = np.where(np.isnan(iou), 0.0, iou)
    ax.bar(range(k), shown, color="tab:blue")
    ax.set_xlabel("class")
    ax.set_ylabel("IoU")
    ax.set_ylim(0.0, 1.0)
    ax.set_xticks(range(k))
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    bar_path = out_dir / "per_class_iou.png"
    fig.savefig(bar_path, dpi=120)
    plt.close(fig)
    written.append(bar_path)

    fig, ax = plt.subplots(figsize=(5, 4.5))
    counts = ev.cm.counts
    im = ax.imshow(np.log1p(counts), cmap="viridis")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    if k <= 12:
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(int(counts[i, j])), ha="center", va="center",
                        color="white", fontsize=7)
    fig.colorbar(im, ax=ax, label="log(1 + count)")
    fig.tight_layout()
    cm_path = out_dir / "confusion.png"
    fig.savefig(cm_path, dpi=120)
    plt.close(fig)
    written.append(cm_path)
    return written


# ---------------------------------------------------------------------------
# ablation


def ablation_report(out_dir, res) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    rows = [{
        "variant": r.variant, "seed": r.seed, "miou": r.miou,
        "paired_miou": r.paired_miou, "pixel_acc": r.pixel_acc,
        "seconds": r.seconds,
    } for r in res.runs]
    written.append(save_csv(out_dir / "runs.csv", rows,
                            ["variant", "seed", "miou", "paired_miou",
                             "pixel_acc", "seconds"]))

    summary: dict = {}
    variants = res.variants()
    for v in variants:
        mean, sd = res.stats(v)
        pmean, psd = res.stats(v, "paired_miou")
        summary[f"{v}.mean_miou"] = mean
        summary[f"{v}.sd_miou"] = sd
        summary[f"{v}.mean_paired_miou"] = pmean
        summary[f"{v}.sd_paired_miou"] = psd
    if "baseline_c" in variants:
        for v in variants:
            if v == "baseline_c":
                continue
            gap, pooled = res.separation(v, "baseline_c")
            summary[f"separation.{v}.mean_gap"] = gap
            summary[f"separation.{v}.pooled_sd"] = pooled
    summary["oracle_miou"] = res.oracle_miou
    summary["oracle_paired_miou"] = res.oracle_paired_miou
    written.append(save_kv(out_dir / "summary.txt", summary))

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8), sharey=True)
    for ax, field_name, title in ((ax1, "miou", "mean IoU, all classes"),
                                  (ax2, "paired_miou", "mean IoU, paired classes")):
        for x, v in enumerate(variants):
            vals = res.scores(v, field_name)
            ax.scatter([x] * len(vals), vals, color="tab:blue", alpha=0.7, zorder=3)
            ax.scatter([x], [vals.mean()], color="tab:red", marker="_",
                       s=500, zorder=4)
        oracle = res.oracle_miou if field_name == "miou" else res.oracle_paired_miou
        ax.axhline(oracle, color="tab:gray", linestyle="--", linewidth=1,
                   label="window oracle")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=15)
        ax.set_title(title, fontsize=10)
        ax.set_ylim(0.0, 1.0)
        ax.grid(alpha=0.3, axis="y")
    ax1.set_ylabel("IoU")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig_path = out_dir / "ablation_scores.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    written.append(fig_path)
    return written


# ---------------------------------------------------------------------------
# inference


def infer_report(out_dir, image: np.ndarray, pred: np.ndarray,
                 truth: np.ndarray | None = None, num_classes: int = 6,
                 stem: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    pgm_path = out_dir / f"{stem}_pred.pgm"
    write_pgm(pgm_path, pred)
    written.append(pgm_path)

    panels = [("input", image), ("prediction", colorize_mask(pred, num_classes))]
    if truth is not None:
        panels.append(("truth", colorize_mask(truth, num_classes)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    for ax, (title, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(np.clip(img, 0.0, 1.0))
        ax.set_title(title, fontsize=10)
        ax.set_axis_off()
    fig.tight_layout()
    png_path = out_dir / f"{stem}_overlay.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    written.append(png_path)
    return written
