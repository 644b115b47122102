"""Figure rendering for the CLI report paths.

Every figure is written next to the delimited output it visualizes: ratio
histograms as bar charts (log scale, since background dominates organ ratios
by orders of magnitude), patch-size rankings as sigma curves, evaluation
reports as per-organ bar charts, and confidence drift as train/test violins.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import json

import matplotlib.pyplot as plt
import numpy as np

from . import __version__


def _finish(fig, path, run_config=None):
    meta = {"Software": f"patchbalance {__version__}"}
    if run_config:
        meta["Description"] = json.dumps(run_config, sort_keys=True,
                                         default=str)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata=meta)
    plt.close(fig)
    return path


def save_ratio_histogram(path, histogram, sigma: float, title: str = "",
                         run_config=None):
    names = list(histogram.class_names)
    ratios = np.asarray(histogram.class_ratios, dtype=float)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names)), 3.6))
    ax.bar(range(len(names)), ratios, color="#4878d0")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean in-patch ratio")
    positive = ratios[ratios > 0]
    if positive.size and positive.min() < 0.01:
        ax.set_yscale("log")
    label = title or "class ratio histogram"
    ax.set_title(f"{label} (sigma = {sigma:.5f})", fontsize=10)
    return _finish(fig, path, run_config)


def save_ranking(path, entries, run_config=None):
    """entries: list of dicts with 'patch', 'sigma', 'voxels' (ranked)."""
    sigmas = [e["sigma"] for e in entries]
    labels = [e["patch"] for e in entries]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(entries)), 3.6))
    ax.plot(range(len(entries)), sigmas, "o-", color="#4878d0", markersize=4)
    ax.plot(0, sigmas[0], "o", color="#d65f5f", markersize=8, zorder=3)
    step = max(1, len(entries) // 24)
    ax.set_xticks(range(0, len(entries), step))
    ax.set_xticklabels(labels[::step], rotation=60, ha="right", fontsize=7)
    ax.set_xlabel("candidate patch size (ranked)")
    ax.set_ylabel("sigma")
    ax.set_title(f"patch-size ranking, best = {labels[0]}", fontsize=10)
    return _finish(fig, path, run_config)


def save_eval_report(path, report, run_config=None):
    names = [agg.class_name for agg in report.per_class]
    panels = [
        ("DSC", [agg.dsc_mean for agg in report.per_class],
         [agg.dsc_std for agg in report.per_class]),
        ("95HD [mm]", [agg.hd95_mean for agg in report.per_class],
         [agg.hd95_std for agg in report.per_class]),
        ("surface Dice", [agg.surface_dice_mean for agg in report.per_class],
         [agg.surface_dice_std for agg in report.per_class]),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(max(9.0, 1.2 * len(names)), 3.4))
    x = np.arange(len(names))
    for ax, (label, means, stds) in zip(axes, panels):
        values = [np.nan if m is None else m for m in means]
        errors = [0.0 if s is None else s for s in stds]
        ax.bar(x, values, yerr=errors, capsize=3, color="#4878d0")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(label, fontsize=9)
    return _finish(fig, path, run_config)


def save_drift(path, drift_report, max_samples: int = 5000,
               run_config=None):
    from .metrics import downsample_deterministic

    classes = [c for c in drift_report.classes
               if c.train_sample.size and c.test_sample.size]
    if not classes:
        classes = list(drift_report.classes)
    fig, ax = plt.subplots(figsize=(max(5.0, 1.4 * len(classes)), 3.8))
    positions, labels = [], []
    for i, cls in enumerate(classes):
        for j, (sample, color) in enumerate(
                ((cls.train_sample, "#4878d0"), (cls.test_sample, "#d65f5f"))):
            if sample.size == 0:
                continue
            data = downsample_deterministic(sample, max_samples)
            parts = ax.violinplot([data], positions=[2 * i + 0.6 * j],
                                  widths=0.55, showmeans=True)
            for body in parts["bodies"]:
                body.set_facecolor(color)
                body.set_alpha(0.6)
            for key in ("cmeans", "cbars", "cmins", "cmaxes"):
                parts[key].set_color(color)
        positions.append(2 * i + 0.3)
        note = "n/a" if cls.drift is None else f"{cls.drift:+.3f}"
        labels.append(f"{cls.class_name}\ndrift {note}")
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("softmax confidence")
    ax.set_title("train (blue) vs test (red) confidence distribution",
                 fontsize=10)
    return _finish(fig, path, run_config)
