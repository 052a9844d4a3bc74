"""CSV report writers and the matplotlib figure renderers that accompany
them. Every CSV starts with a versioned schema comment; figures are written
as PNG files next to the delimited output.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CSV_VERSION = 1


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, kind: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# xdistill csv v{CSV_VERSION} {kind}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Read back a report CSV; returns (kind, header, rows of strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        kind = first.split(maxsplit=4)[-1] if first.startswith("#") else ""
        reader = csv.reader(fh)
        header = next(reader)
        return kind, header, list(reader)


def fig_training_curve(log_rows, path) -> None:
    """Loss and train accuracy against iterations for one training run."""
    if not log_rows:
        return
    it = [r[0] for r in log_rows]
    loss = [r[1] for r in log_rows]
    acc = [r[2] for r in log_rows]
    fig, ax1 = plt.subplots(figsize=(6, 3.5))
    ax1.plot(it, loss, color="tab:blue", lw=1.0)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(it, acc, color="tab:orange", lw=1.0)
    ax2.set_ylabel("train acc", color="tab:orange")
    ax2.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_layer_losses(iter_rows, path) -> None:
    """Per-layer distillation loss curves of one compression run."""
    if not iter_rows:
        return
    positions = sorted({r[0] for r in iter_rows})
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for pos in positions:
        rows = [r for r in iter_rows if r[0] == pos]
        ax.semilogy([r[1] for r in rows], [max(r[2], 1e-30) for r in rows],
                    lw=0.9, label=f"layer {pos}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("layer loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_bound_report(report, path) -> None:
    """Per-layer objectives/constants plus the gap-vs-bound comparison."""
    layers = report.layers
    pos = [row.position for row in layers]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar([p - 0.2 for p in pos], [row.norm_t for row in layers],
                width=0.4, label="teacher norm")
    axes[0].bar([p + 0.2 for p in pos], [row.norm_s for row in layers],
                width=0.4, label="student norm")
    axes[0].set_xlabel("layer")
    axes[0].set_ylabel("spectral norm")
    axes[0].legend(fontsize=8)
    axes[1].semilogy(pos, [max(row.objective_mean, 1e-30) for row in layers],
                     "o-", label="objective")
    axes[1].semilogy(pos, [max(row.est_error, 1e-30) for row in layers],
                     "s--", label="est. error")
    axes[1].set_xlabel("layer")
    axes[1].legend(fontsize=8)
    fig.suptitle(
        f"gap {report.lhs_mean:.3g} <= bound {report.rhs_mean:.3g} "
        f"(satisfied={report.satisfied})",
        fontsize=9,
    )
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_eval_bars(names, top1_means, top1_stds, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 3.2))
    x = np.arange(len(names))
    ax.bar(x, top1_means, yerr=top1_stds, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_sweep_mu(mus, means, stds, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.errorbar(mus, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel("mu")
    ax.set_ylabel("top-1 accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_sweep_alpha_beta(alphas, betas, grid, path) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.imshow(grid, origin="lower", aspect="auto",
                   extent=(min(betas), max(betas), min(alphas), max(alphas)))
    ax.set_xlabel("beta")
    ax.set_ylabel("alpha")
    fig.colorbar(im, ax=ax, label="top-1 accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def fig_ablate_bars(labels, means, stds, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(labels)), 3.4))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("top-1 accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    mean = float(arr.mean()) if arr.size else 0.0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std
