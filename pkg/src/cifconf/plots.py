"""Matplotlib renderings of the report tables, written next to the TSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

STYLE = {"figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9}
COLORS = {
    "softmax": "tab:gray",
    "hyp_synchronous": "tab:blue",
    "cif_aligned": "tab:red",
}


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _curve_xy(curve):
    xs = [t for t, n, r in curve if n > 0 and r is not None]
    ys = [r for _, n, r in curve if n > 0 and r is not None]
    return xs, ys


def save_filter_curves(split_curves: dict, path) -> None:
    """Subset error rate vs confidence threshold, split by whether the
    hypothesis contains a deletion.

    ``split_curves`` maps variant -> {"all"|"nodeletion"|"deletion":
    filter-curve rows}.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.2), sharey=True)
        panels = (("all", "all utterances"),
                  ("nodeletion", "without deletion"),
                  ("deletion", "with deletion"))
        for ax, (key, title) in zip(axes, panels):
            for variant, curves in split_curves.items():
                if not curves.get(key):
                    continue
                xs, ys = _curve_xy(curves[key])
                ax.plot(xs, ys, label=variant, color=COLORS.get(variant))
            ax.set_title(title)
            ax.set_xlabel("confidence threshold")
        axes[0].set_ylabel("subset error rate")
        axes[0].legend(fontsize=8)
        _save(fig, path)


def save_roc_curves(roc_by_variant: dict, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.6))
        for variant, points in roc_by_variant.items():
            pts = sorted((fpr, tpr) for _, tpr, fpr in points)
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    label=variant, color=COLORS.get(variant))
        ax.plot([0, 1], [0, 1], ls=":", color="black", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=8, loc="lower right")
        _save(fig, path)


def save_noise_sweep(rows: list, path) -> None:
    """CER and average confidence against the noise level."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.4))
        sigmas = [r["sigma"] for r in rows]
        ax.plot(sigmas, [r["cer"] for r in rows], "o-", color="tab:red", label="CER")
        ax.set_xlabel("noise sigma")
        ax.set_ylabel("CER")
        ax2 = ax.twinx()
        for key, style, label in (
            ("avg_conf_gt", "s--", "avg conf (reference)"),
            ("avg_conf_hyp", "^--", "avg conf (own decode)"),
        ):
            ys = [r[key] for r in rows]
            if all(y is not None for y in ys):
                ax2.plot(sigmas, ys, style, color="tab:blue", label=label, alpha=0.8)
        ax2.set_ylabel("average confidence")
        ax2.grid(False)
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, fontsize=8, loc="center left")
        _save(fig, path)


def save_training_curve(history: list, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.2))
        ax.plot([h["step"] for h in history], [h["loss"] for h in history],
                lw=0.9, label="batch loss")
        dev = [(h["step"], h["dev_cer"]) for h in history if "dev_cer" in h]
        if dev:
            ax2 = ax.twinx()
            ax2.plot([s for s, _ in dev], [c for _, c in dev], "o-",
                     color="tab:red", ms=3, label="dev CER")
            ax2.set_ylabel("dev CER")
            ax2.grid(False)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        _save(fig, path)
