"""Patch sampling simulation and per-epoch class ratio measurement.

Randomness is counter-based so that histograms are reproducible across
implementations and independent of how the draw index space is partitioned:

* Generator: Philox 4x64-10 (numpy), key = ``(seed mod 2**64, stream mod
  2**64)``.
* Draw ``i`` owns the 16 raw 64-bit outputs produced by counter blocks
  ``[4*i, 4*i + 4)`` (Philox emits 4 words per counter increment).
* A word ``w`` becomes a uniform double via ``(w >> 11) * 2**-53`` and an
  integer in ``[0, n)`` via ``min(floor(u * n), n - 1)``.
* Word positions within a draw are fixed: 0 = volume choice, 1 = oversample
  decision, 2 = foreground voxel choice, 3..5 = origin x, y, z.  Unused
  positions are simply not read, so uniform and oversampled draws consume
  the same counter range.

Volumes smaller than the patch are padded symmetrically with background
(class 0, floor split on the low side); padding voxels count toward ratios.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume

WORDS_PER_DRAW = 16
_W_VOLUME = 0
_W_OVERSAMPLE = 1
_W_FOREGROUND = 2
_W_ORIGIN = 3  # 3, 4, 5

# integral images are built when (nx+1)(ny+1)(nz+1) * num_classes stays below
# this entry budget (int64, ~160 MB)
_INTEGRAL_BUDGET = 20_000_000


class CounterRng:
    """Counter-based random word source; see the module docstring for the spec."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) % 2**64
        self.stream = int(stream) % 2**64

    def blocks(self, start: int, count: int) -> np.ndarray:
        """Raw words for draws [start, start+count), shape (count, 16)."""
        if count <= 0:
            return np.empty((0, WORDS_PER_DRAW), dtype=np.uint64)
        bg = np.random.Philox(key=[self.seed, self.stream],
                              counter=[4 * start, 0, 0, 0])
        words = bg.random_raw(count * WORDS_PER_DRAW)
        return words.reshape(count, WORDS_PER_DRAW)

    def block(self, draw_index: int) -> np.ndarray:
        return self.blocks(draw_index, 1)[0]


def words_to_uniform(words: np.ndarray) -> np.ndarray:
    """53-bit uniform doubles in [0, 1) from raw 64-bit words."""
    return (words >> np.uint64(11)) * (2.0 ** -53)


def uniform_int(words: np.ndarray, n) -> np.ndarray:
    """Deterministic integers in [0, n); n may be an array broadcast over words."""
    u = words_to_uniform(words)
    return np.minimum((u * n).astype(np.int64), np.asarray(n, dtype=np.int64) - 1)


@dataclass(frozen=True)
class PatchSpec:
    """Patch extent in voxels; ``size=None`` means the per-volume full extent."""

    size: tuple[int, int, int] | None

    def __post_init__(self):
        if self.size is not None:
            object.__setattr__(self, "size", tuple(int(p) for p in self.size))
            if len(self.size) != 3 or any(p < 1 for p in self.size):
                raise ValueError(f"patch size components must be >= 1, got {self.size}")

    @property
    def is_full_volume(self) -> bool:
        return self.size is None

    @property
    def voxels(self) -> int | None:
        return None if self.size is None else int(np.prod(self.size))

    def label(self) -> str:
        if self.size is None:
            return "full"
        return "x".join(str(p) for p in self.size)


FULL_VOLUME = PatchSpec(None)


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = "uniform"  # "uniform" | "foreground-oversample"
    oversample_prob: float = 1.0 / 3.0

    def __post_init__(self):
        if self.kind not in ("uniform", "foreground-oversample"):
            raise ValueError(f"unknown sampling strategy {self.kind!r}")
        if not 0.0 <= self.oversample_prob <= 1.0:
            raise ValueError("oversample_prob must lie in [0, 1]")


@dataclass(frozen=True)
class RatioHistogram:
    """Mean in-patch class ratios over sampled (or enumerated) patches."""

    class_ratios: np.ndarray
    patches_sampled: int
    class_names: tuple[str, ...]
    fallback_count: int = 0
    exact: bool = False
    per_patch_ratios: np.ndarray | None = None

    def __post_init__(self):
        ratios = np.asarray(self.class_ratios, dtype=np.float64)
        object.__setattr__(self, "class_ratios", ratios)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if ratios.ndim != 1 or ratios.size != len(self.class_names):
            raise ValueError("class_ratios must be one entry per class name")
        if ratios.size and ratios.min() < 0:
            raise ValueError("class ratios must be >= 0")
        if ratios.size and abs(float(ratios.sum()) - 1.0) > 1e-9:
            raise ValueError(f"class ratios sum to {ratios.sum()!r}, expected 1")


@dataclass(frozen=True)
class PatchSample:
    """One sampled patch: the label subvolume plus its padded-frame origin."""

    labels: np.ndarray
    origin: tuple[int, int, int]
    used_oversample: bool = False
    fallback: bool = False


@dataclass(frozen=True)
class PatchBatch:
    """B stacked (prediction, one-hot target) patch pairs for the loss kernels.

    ``p`` and ``g`` have shape (B, C+1, V); every item shares the channel
    count and voxel count, and ``g`` must be one-hot.
    """

    p: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        g = np.asarray(self.g, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "g", g)
        if p.ndim != 3 or p.shape != g.shape:
            raise ValueError(
                f"P and G must both have shape (B, C+1, V); got {p.shape} vs {g.shape}")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise ValueError("G must be one-hot (entries 0 or 1)")
        sums = g.sum(axis=1)
        if g.size and not np.all(sums == 1.0):
            raise ValueError("G must have exactly one active channel per voxel")

    @property
    def batch_size(self) -> int:
        return self.p.shape[0]

    @property
    def num_channels(self) -> int:
        return self.p.shape[1]

    @property
    def voxels(self) -> int:
        return self.p.shape[2]

    @classmethod
    def from_prob_volumes(cls, predictions, targets) -> "PatchBatch":
        preds = list(predictions)
        gts = list(targets)
        if len(preds) != len(gts) or not preds:
            raise ValueError("need equal, non-empty prediction/target lists")
        shapes = {v.data.shape for v in preds} | {v.data.shape for v in gts}
        if len(shapes) != 1:
            raise ValueError(f"all volumes in a batch must share channel count "
                             f"and dims; got shapes {sorted(shapes)}")
        p = np.stack([v.data.reshape(v.channels, -1) for v in preds])
        g = np.stack([v.data.reshape(v.channels, -1) for v in gts])
        return cls(p, g)


def class_ratios(patch: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class voxel fraction of a label patch; sums to 1."""
    patch = np.asarray(patch)
    if patch.size == 0:
        raise ValueError("patch must be non-empty")
    counts = np.bincount(patch.ravel(), minlength=num_classes)
    if counts.size > num_classes:
        raise ValueError(f"patch contains class ids >= {num_classes}")
    return counts / patch.size


def _pad_widths(dims, size):
    widths = []
    for n, p in zip(dims, size):
        extra = max(0, p - n)
        widths.append((extra // 2, extra - extra // 2))
    return widths


def pad_to_patch(volume: LabelVolume, spec: PatchSpec) -> np.ndarray:
    """Background-pad the label array so the patch fits (symmetric, floor low)."""
    if spec.is_full_volume:
        return volume.data
    widths = _pad_widths(volume.dims, spec.size)
    if all(w == (0, 0) for w in widths):
        return volume.data
    return np.pad(volume.data, widths, mode="constant", constant_values=0)


class _VolumeSampler:
    """Per-volume sampling state: padded labels, origin ranges, fg coords."""

    def __init__(self, volume: LabelVolume, spec: PatchSpec, num_classes: int):
        self.num_classes = num_classes
        if spec.is_full_volume:
            self.padded = volume.data
            self.patch = volume.dims
        else:
            self.padded = pad_to_patch(volume, spec)
            self.patch = spec.size
        self.ranges = tuple(n - p + 1 for n, p in zip(self.padded.shape, self.patch))
        self._fg = None
        self._integral = None
        self._integral_built = False

    @property
    def fg_coords(self):
        if self._fg is None:
            self._fg = np.argwhere(self.padded > 0)
        return self._fg

    def _build_integral(self):
        self._integral_built = True
        nx, ny, nz = self.padded.shape
        entries = (nx + 1) * (ny + 1) * (nz + 1) * self.num_classes
        if entries > _INTEGRAL_BUDGET:
            self._integral = None
            return
        integral = np.zeros((self.num_classes, nx + 1, ny + 1, nz + 1),
                            dtype=np.int64)
        for c in range(self.num_classes):
            onehot = (self.padded == c).astype(np.int64)
            integral[c, 1:, 1:, 1:] = onehot.cumsum(0).cumsum(1).cumsum(2)
        self._integral = integral

    def counts_for_origins(self, ox, oy, oz) -> np.ndarray:
        """Class counts of the patches at the given origins, shape (n, K)."""
        if not self._integral_built:
            self._build_integral()
        px, py, pz = self.patch
        n = len(ox)
        if self._integral is not None:
            I = self._integral
            ax, ay, az = ox, oy, oz
            bx, by, bz = ox + px, oy + py, oz + pz
            counts = (I[:, bx, by, bz] - I[:, ax, by, bz] - I[:, bx, ay, bz]
                      - I[:, bx, by, az] + I[:, ax, ay, bz] + I[:, ax, by, az]
                      + I[:, bx, ay, az] - I[:, ax, ay, az])
            return counts.T
        counts = np.empty((n, self.num_classes), dtype=np.int64)
        for i in range(n):
            patch = self.padded[ox[i]:ox[i] + px, oy[i]:oy[i] + py,
                                oz[i]:oz[i] + pz]
            counts[i] = np.bincount(patch.ravel(), minlength=self.num_classes)
        return counts


def sample_patch(volume: LabelVolume, spec: PatchSpec, strategy: SamplingStrategy,
                 draw_words: np.ndarray, sampler: _VolumeSampler | None = None
                 ) -> PatchSample:
    """Draw one patch from the volume using the 16-word draw block.

    Uniform mode picks the origin uniformly over all valid origins; the
    oversample mode first flips the oversample decision, then forces a
    uniformly chosen foreground voxel to be contained in the patch (origin
    uniform over the containing range).  Volumes without foreground fall back
    to uniform with the fallback flag set.
    """
    if sampler is None:
        sampler = _VolumeSampler(volume, spec, volume.num_classes)
    if spec.is_full_volume:
        return PatchSample(sampler.padded, (0, 0, 0))

    used_oversample = False
    fallback = False
    if strategy.kind == "foreground-oversample":
        decision = words_to_uniform(draw_words[_W_OVERSAMPLE:_W_OVERSAMPLE + 1])[0]
        if decision < strategy.oversample_prob:
            fg = sampler.fg_coords
            if len(fg) == 0:
                fallback = True
            else:
                used_oversample = True
                pick = int(uniform_int(draw_words[_W_FOREGROUND:_W_FOREGROUND + 1],
                                       len(fg))[0])
                voxel = fg[pick]
                origin = []
                for axis in range(3):
                    p = sampler.patch[axis]
                    lo = max(0, int(voxel[axis]) - p + 1)
                    hi = min(int(voxel[axis]), sampler.padded.shape[axis] - p)
                    word = draw_words[_W_ORIGIN + axis:_W_ORIGIN + axis + 1]
                    origin.append(lo + int(uniform_int(word, hi - lo + 1)[0]))
                ox, oy, oz = origin
                px, py, pz = sampler.patch
                labels = sampler.padded[ox:ox + px, oy:oy + py, oz:oz + pz]
                return PatchSample(labels, (ox, oy, oz), used_oversample=True)

    origin = []
    for axis in range(3):
        word = draw_words[_W_ORIGIN + axis:_W_ORIGIN + axis + 1]
        origin.append(int(uniform_int(word, sampler.ranges[axis])[0]))
    ox, oy, oz = origin
    px, py, pz = sampler.patch
    labels = sampler.padded[ox:ox + px, oy:oy + py, oz:oz + pz]
    return PatchSample(labels, (ox, oy, oz), used_oversample=used_oversample,
                       fallback=fallback)


def _shared_num_classes(volumes) -> tuple[int, tuple[str, ...]]:
    first = volumes[0]
    for v in volumes[1:]:
        if v.num_classes != first.num_classes:
            raise ValueError("all volumes in a set must share the class count")
    return first.num_classes, first.class_names


def simulate_epoch(volumes, spec: PatchSpec, strategy: SamplingStrategy,
                   patches_per_epoch: int = 500, seed: int = 0, stream: int = 0,
                   keep_per_patch: bool = False) -> RatioHistogram:
    """Sample an epoch of patches and average their class ratio vectors.

    Each draw picks a volume uniformly, then a patch per the strategy.  Class
    counts are accumulated as integers, so the histogram is bit-reproducible
    for a given (inputs, seed, stream) regardless of internal chunking.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("simulate_epoch requires a non-empty volume set")
    if patches_per_epoch < 1:
        raise ValueError("patches_per_epoch must be >= 1")
    num_classes, names = _shared_num_classes(volumes)
    rng = CounterRng(seed, stream)

    if spec.is_full_volume:
        return _simulate_full_volume(volumes, num_classes, names,
                                     patches_per_epoch, rng, keep_per_patch)

    samplers = [_VolumeSampler(v, spec, num_classes) for v in volumes]
    voxels = int(np.prod(spec.size))
    totals = np.zeros(num_classes, dtype=np.int64)
    fallback_count = 0
    per_patch = np.empty((patches_per_epoch, num_classes)) if keep_per_patch else None

    chunk = 65536
    for start in range(0, patches_per_epoch, chunk):
        count = min(chunk, patches_per_epoch - start)
        words = rng.blocks(start, count)
        vol_idx = uniform_int(words[:, _W_VOLUME], len(volumes))
        counts = np.empty((count, num_classes), dtype=np.int64)
        for v in range(len(volumes)):
            rows = np.flatnonzero(vol_idx == v)
            if rows.size == 0:
                continue
            sub_counts, fallbacks = _draw_counts(samplers[v], strategy,
                                                 words[rows])
            counts[rows] = sub_counts
            fallback_count += fallbacks
        totals += counts.sum(axis=0)
        if per_patch is not None:
            per_patch[start:start + count] = counts / voxels

    ratios = totals / (patches_per_epoch * voxels)
    return RatioHistogram(ratios, patches_per_epoch, names,
                          fallback_count=fallback_count,
                          per_patch_ratios=per_patch)


def _draw_counts(sampler: _VolumeSampler, strategy: SamplingStrategy,
                 words: np.ndarray) -> tuple[np.ndarray, int]:
    """Vectorized per-draw class counts for one volume; returns fallbacks."""
    n = len(words)
    ranges = np.array(sampler.ranges, dtype=np.int64)
    origins = np.empty((n, 3), dtype=np.int64)
    fallbacks = 0

    if strategy.kind == "foreground-oversample":
        decision = words_to_uniform(words[:, _W_OVERSAMPLE])
        wants_fg = decision < strategy.oversample_prob
        fg = sampler.fg_coords
        if len(fg) == 0:
            fallbacks = int(wants_fg.sum())
            wants_fg = np.zeros(n, dtype=bool)
        rows_fg = np.flatnonzero(wants_fg)
        rows_uni = np.flatnonzero(~wants_fg)
        if rows_fg.size:
            picks = uniform_int(words[rows_fg, _W_FOREGROUND], len(fg))
            voxels = fg[picks]
            for axis in range(3):
                p = sampler.patch[axis]
                lo = np.maximum(0, voxels[:, axis] - p + 1)
                hi = np.minimum(voxels[:, axis], sampler.padded.shape[axis] - p)
                origins[rows_fg, axis] = lo + uniform_int(
                    words[rows_fg, _W_ORIGIN + axis], hi - lo + 1)
        if rows_uni.size:
            for axis in range(3):
                origins[rows_uni, axis] = uniform_int(
                    words[rows_uni, _W_ORIGIN + axis], ranges[axis])
    else:
        for axis in range(3):
            origins[:, axis] = uniform_int(words[:, _W_ORIGIN + axis], ranges[axis])

    counts = sampler.counts_for_origins(origins[:, 0], origins[:, 1],
                                        origins[:, 2])
    return counts, fallbacks


def _simulate_full_volume(volumes, num_classes, names, patches_per_epoch, rng,
                          keep_per_patch):
    ratio_by_volume = np.stack([
        v.class_counts() / v.data.size for v in volumes])
    draws_per_volume = np.zeros(len(volumes), dtype=np.int64)
    per_patch = np.empty((patches_per_epoch, num_classes)) if keep_per_patch else None
    chunk = 262144
    for start in range(0, patches_per_epoch, chunk):
        count = min(chunk, patches_per_epoch - start)
        words = rng.blocks(start, count)
        vol_idx = uniform_int(words[:, _W_VOLUME], len(volumes))
        draws_per_volume += np.bincount(vol_idx, minlength=len(volumes))
        if per_patch is not None:
            per_patch[start:start + count] = ratio_by_volume[vol_idx]
    ratios = (draws_per_volume[:, None] * ratio_by_volume).sum(axis=0) \
        / patches_per_epoch
    return RatioHistogram(ratios, patches_per_epoch, names,
                          per_patch_ratios=per_patch)


def exact_ratio_histogram(volumes, spec: PatchSpec) -> RatioHistogram:
    """Uniform-strategy expectation of the ratio histogram in closed form.

    Averages the per-origin ratio vector over all valid origins of each
    volume (via per-voxel origin-coverage weights), then over volumes with
    equal weight — the exact limit of simulate_epoch's uniform mode.
    ``patches_sampled`` is 0 to mark the non-sampled origin.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("exact_ratio_histogram requires a non-empty volume set")
    num_classes, names = _shared_num_classes(volumes)
    acc = np.zeros(num_classes, dtype=np.float64)
    for volume in volumes:
        if spec.is_full_volume:
            acc += volume.class_counts() / volume.data.size
            continue
        padded = pad_to_patch(volume, spec)
        covs = []
        for axis in range(3):
            n = padded.shape[axis]
            p = spec.size[axis]
            v = np.arange(n, dtype=np.int64)
            covs.append(np.minimum(v, n - p) - np.maximum(0, v - p + 1) + 1)
        weight = (covs[0][:, None, None] * covs[1][None, :, None]
                  * covs[2][None, None, :])
        totals = np.empty(num_classes, dtype=np.int64)
        for c in range(num_classes):
            totals[c] = weight[padded == c].sum()
        n_origins = int(np.prod([n - p + 1 for n, p
                                 in zip(padded.shape, spec.size)]))
        acc += totals / (n_origins * spec.voxels)
    ratios = acc / len(volumes)
    return RatioHistogram(ratios, 0, names, exact=True)
