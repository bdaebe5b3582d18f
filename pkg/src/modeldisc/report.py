"""Figure rendering for exported artifacts.

Every exporter writes the delimited artifact (CSV/JSON) and a rendered PNG
next to it.  All functions take the session-file JSON forms, so they work on
stored sessions without touching live pipeline objects.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def sweep_figure(experiments: list[dict]):
    fig, (ax_hist, ax_final) = plt.subplots(1, 2, figsize=(11, 4))
    for rec in experiments:
        label = f"{rec['id']} ({rec['final_loss']:.2e})"
        ax_hist.semilogy(rec["loss_history"], label=label, linewidth=1.2)
    ax_hist.set_xlabel("iteration")
    ax_hist.set_ylabel("training loss")
    ax_hist.set_title("architecture sweep")
    ax_hist.legend(fontsize=7)
    names = [rec["id"] for rec in experiments]
    finals = [rec["final_loss"] for rec in experiments]
    ax_final.bar(range(len(names)), finals)
    ax_final.set_yscale("log")
    ax_final.set_xticks(range(len(names)))
    ax_final.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
    ax_final.set_ylabel("final loss")
    fig.tight_layout()
    return fig


def heatmap_figure(sensitivity: dict):
    jac = np.asarray(sensitivity["jac"], dtype=float)
    inputs = sensitivity["input_names"]
    outputs = sensitivity["output_names"]
    top = set(sensitivity["input_ranking"][: sensitivity["top_m"]])
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(inputs), 1.5 + 0.6 * len(outputs)))
    im = ax.imshow(jac, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(inputs)))
    labels = [f"* {name}" if i in top else name for i, name in enumerate(inputs)]
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_yticks(range(len(outputs)))
    ax.set_yticklabels(outputs)
    ax.set_title("mean |d output / d input| (top inputs starred)")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    return fig


def mask_figure(mask_report: dict):
    sweep = mask_report["sweep"]
    ks = [k for k, _ in sweep]
    losses = [l for _, l in sweep]
    bound = mask_report["tolerance"] * mask_report["full_loss"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(ks, losses, "o-", label="retrained loss")
    ax.axhline(bound, color="tab:red", linestyle="--",
               label=f"tolerance ({mask_report['tolerance']:.2f} x full)")
    ax.axvline(mask_report["chosen_K"], color="tab:green", linestyle=":",
               label=f"chosen K = {mask_report['chosen_K']}")
    ax.set_xlabel("number of corrected equations K")
    ax.set_ylabel("loss")
    ax.set_xticks(ks)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def pareto_figure(fronts: list[list[dict]], targets: list[str] | None = None):
    n = len(fronts)
    fig, axes = plt.subplots(1, n, figsize=(5.5 * n, 4), squeeze=False)
    for t, front in enumerate(fronts):
        ax = axes[0][t]
        comp = [e["complexity"] for e in front]
        mse = [max(e["mse"], 1e-300) for e in front]
        ax.scatter(comp, mse, zorder=3)
        ax.plot(comp, mse, alpha=0.4)
        ax.set_yscale("log")
        ax.set_xlabel("complexity")
        ax.set_ylabel("mse")
        title = targets[t] if targets and t < len(targets) else f"target {t}"
        ax.set_title(title)
        for e in front:
            ax.annotate(e["expression"][:28], (e["complexity"], max(e["mse"], 1e-300)),
                        fontsize=6, rotation=12)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> None:
    fig.savefig(path, dpi=130)
    plt.close(fig)
