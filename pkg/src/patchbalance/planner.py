"""Class imbalance measure and patch-size search.

The imbalance of a sampling configuration is summarized by the population
standard deviation of the mean in-patch class ratios (background included):
0 for a perfectly uniform ratio vector, sqrt(K-1)/K when a single class
occupies everything.  Candidate patch sizes are scored with this measure and
the minimum wins; near-ties go to the candidate with more spatial context.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .sampling import (FULL_VOLUME, PatchSpec, RatioHistogram, SamplingStrategy,
                       exact_ratio_histogram, simulate_epoch)


def sigma_upper_bound(num_classes: int) -> float:
    """Maximum imbalance over probability vectors with K entries."""
    return float(np.sqrt(num_classes - 1) / num_classes)


def imbalance_sigma(histogram: RatioHistogram) -> float:
    """Population standard deviation of the class ratio vector."""
    ratios = histogram.class_ratios
    k = ratios.size
    return float(np.sqrt(np.mean((ratios - 1.0 / k) ** 2)))


@dataclass(frozen=True)
class ImbalanceReport:
    """σ plus the configuration that produced it."""

    sigma: float
    histogram: RatioHistogram
    spec: PatchSpec
    strategy: SamplingStrategy
    seed: int
    patches_per_epoch: int
    exact: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        bound = sigma_upper_bound(len(self.histogram.class_names))
        if self.sigma > bound + 1e-12:
            raise ValueError(f"sigma {self.sigma} exceeds the K-class bound {bound}")


@dataclass(frozen=True)
class PatchConstraints:
    """Feasible patch-size grid standing in for architecture/memory coupling."""

    axis_step: tuple[int, int, int] = (16, 16, 8)
    axis_min: tuple[int, int, int] = (32, 32, 16)
    axis_max: tuple[int, int, int] = (192, 192, 96)
    max_voxels: int | None = None
    include_full_volume: bool = False

    def __post_init__(self):
        if any(s < 1 for s in self.axis_step):
            raise ValueError("axis steps must be >= 1")
        if any(lo > hi for lo, hi in zip(self.axis_min, self.axis_max)):
            raise ValueError("axis_min must not exceed axis_max")
        if any(lo < 1 for lo in self.axis_min):
            raise ValueError("axis minimums must be >= 1")


def enumerate_candidates(constraints: PatchConstraints) -> list[PatchSpec]:
    """All step-aligned sizes inside the per-axis ranges, largest first.

    Sizes are multiples of the axis step; an optional voxel budget filters
    the grid.  Ordered by descending voxel count, then descending size tuple
    so the listing is total.
    """
    per_axis = []
    for step, lo, hi in zip(constraints.axis_step, constraints.axis_min,
                            constraints.axis_max):
        start = -(-lo // step) * step  # first multiple >= lo
        sizes = list(range(start, hi + 1, step))
        per_axis.append(sizes)
    candidates = [
        PatchSpec(size) for size in product(*per_axis)
        if constraints.max_voxels is None
        or int(np.prod(size)) <= constraints.max_voxels
    ]
    if constraints.include_full_volume:
        candidates.append(FULL_VOLUME)
    if not candidates:
        raise ValueError("constraints admit no candidate patch size")
    return sorted(candidates, key=_context_key, reverse=True)


def _context_key(spec: PatchSpec):
    # full-volume candidates offer maximal context
    if spec.is_full_volume:
        return (float("inf"), (float("inf"),) * 3)
    return (spec.voxels, spec.size)


def evaluate_patch_size(volumes, spec: PatchSpec,
                        strategy: SamplingStrategy = SamplingStrategy(),
                        patches_per_epoch: int = 500, seed: int = 0,
                        stream: int = 0, exact: bool = False) -> ImbalanceReport:
    """Measure σ for one patch size, by sampling or in exact all-origins mode.

    Exact mode enumerates every valid origin and is only defined for the
    uniform strategy.
    """
    if exact:
        if strategy.kind != "uniform":
            raise ValueError("exact mode is defined for the uniform strategy only")
        histogram = exact_ratio_histogram(volumes, spec)
    else:
        histogram = simulate_epoch(volumes, spec, strategy,
                                   patches_per_epoch=patches_per_epoch,
                                   seed=seed, stream=stream)
    return ImbalanceReport(imbalance_sigma(histogram), histogram, spec, strategy,
                           seed, patches_per_epoch, exact=exact)


def optimize_patch_size(volumes, constraints: PatchConstraints,
                        strategy: SamplingStrategy = SamplingStrategy(),
                        patches_per_epoch: int = 500, seed: int = 0,
                        tie_delta: float = 0.001, exact: bool = False
                        ) -> tuple[PatchSpec, ImbalanceReport, list[ImbalanceReport]]:
    """Search the constraint grid for the patch size with minimal σ.

    Candidates within ``tie_delta`` of the minimum are tied; the tie breaks
    toward the largest voxel count (more spatial context).  Candidate i draws
    from RNG stream i, so evaluations are order- and schedule-independent.
    Returns (winner spec, winner report, full ranking).
    """
    candidates = enumerate_candidates(constraints)
    reports = [
        evaluate_patch_size(volumes, spec, strategy,
                            patches_per_epoch=patches_per_epoch, seed=seed,
                            stream=index, exact=exact)
        for index, spec in enumerate(candidates)
    ]
    ranking = sorted(
        reports, key=lambda r: (r.sigma,) + tuple(-v for v in _rank_context(r.spec)))
    sigma_min = ranking[0].sigma
    tied = [r for r in ranking if r.sigma <= sigma_min + tie_delta]
    best = max(tied, key=lambda r: _rank_context(r.spec))
    return best.spec, best, ranking


def _rank_context(spec: PatchSpec):
    if spec.is_full_volume:
        return (float("inf"), float("inf"), float("inf"), float("inf"))
    return (spec.voxels,) + spec.size
