"""CSV and SVG report writers."""

from __future__ import annotations

import statistics
from pathlib import Path
from typing import Any, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from saliency_adapt.core.imaging import GrayMap  # noqa: E402
from saliency_adapt.core.persistence import PersistentStore  # noqa: E402
from saliency_adapt.pipeline.metrics import EvalResult  # noqa: E402
from saliency_adapt.pipeline.trainer import RoundMetrics  # noqa: E402

plt.rcParams["svg.hashsalt"] = "saliency-adapt"


def _save_svg(fig: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None})
    plt.close(fig)
    return path


def write_eval_result(store: PersistentStore, result: EvalResult, *, plot: bool = True) -> list[Path]:
    written = [
        store.write_csv("summary.csv", ["n_images", "mae", "f_beta"], [[result.n_images, f"{result.mae:.6f}", f"{result.f_beta:.6f}"]]),
        store.write_csv(
            "pr_curve.csv",
            ["threshold", "precision", "recall"],
            [[f"{p.threshold:.6f}", f"{p.precision:.6f}", f"{p.recall:.6f}"] for p in result.pr_points],
        ),
    ]
    if result.per_image_mae:
        written.append(store.write_csv("per_image_mae.csv", ["record_id", "mae"], [[i, f"{v:.6f}"] for i, v in result.per_image_mae]))
    if plot:
        fig, ax = plt.subplots(figsize=(5.0, 4.5))
        ax.plot([p.recall for p in result.pr_points], [p.precision for p in result.pr_points], color="#4c78a8")
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.02)
        ax.set_title(f"PR curve (max F = {result.f_beta:.3f}, MAE = {result.mae:.3f})")
        ax.grid(True, alpha=0.25, linestyle=":")
        written.append(_save_svg(fig, store.path("pr_curve.svg")))
    return written


def plot_mae_by_round(store: PersistentStore, history: Sequence[RoundMetrics]) -> Path | None:
    if not history:
        return None
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot([m.round_index for m in history], [m.mae for m in history], marker="o", color="#e45756")
    ax.set_xlabel("round")
    ax.set_ylabel("target-eval MAE")
    ax.set_xticks([m.round_index for m in history])
    ax.grid(True, alpha=0.25, linestyle=":")
    return _save_svg(fig, store.path("mae_by_round.svg"))


def write_stats(
    store: PersistentStore,
    ratios: Sequence[float],
    histogram: Sequence[tuple[float, float, int]],
    center_bias: GrayMap,
) -> dict[str, Any]:
    store.write_csv(
        "size_ratio_histogram.csv",
        ["bin_low", "bin_high", "count"],
        [[f"{low:.4f}", f"{high:.4f}", count] for low, high, count in histogram],
    )
    store.write_png("center_bias.png", center_bias)
    summary = {
        "count": len(ratios),
        "size_ratio_min": min(ratios),
        "size_ratio_mean": statistics.fmean(ratios),
        "size_ratio_max": max(ratios),
    }
    store.write_json("stats.json", summary)
    return summary


def write_ablation(store: PersistentStore, runs: Sequence[dict[str, Any]], arms: Sequence[str]) -> list[dict[str, Any]]:
    """One comparison row per arm (median over seeds) plus the per-run detail table."""
    store.write_csv(
        "ablation_runs.csv",
        ["arm", "seed", "mae", "f_beta", "checksum"],
        [[run["arm"], run["seed"], f"{run['mae']:.6f}", f"{run['f_beta']:.6f}", run["checksum"]] for run in runs],
    )
    rows = []
    for arm in arms:
        arm_runs = [run for run in runs if run["arm"] == arm]
        rows.append(
            {
                "arm": arm,
                "n_seeds": len(arm_runs),
                "median_mae": statistics.median(run["mae"] for run in arm_runs),
                "median_f_beta": statistics.median(run["f_beta"] for run in arm_runs),
            }
        )
    store.write_csv(
        "comparison.csv",
        ["arm", "n_seeds", "median_mae", "median_f_beta"],
        [[row["arm"], row["n_seeds"], f"{row['median_mae']:.6f}", f"{row['median_f_beta']:.6f}"] for row in rows],
    )
    return rows
