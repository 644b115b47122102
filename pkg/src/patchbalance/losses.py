"""Forward values and analytic gradients for the Dice-family training losses.

All kernels operate on a PatchBatch with prediction and one-hot target arrays
of shape (B, C+1, V) and differentiate with respect to the predicted
probabilities.  A logit-space gradient is obtained by composing with
``softmax_pullback``, which keeps the kernels framework independent.

Four formulations are provided:

* ``ce_loss`` — multi-class cross entropy, normalized per batch or per
  batch-and-voxel.
* ``dice_score`` — per-(item, class) smoothed Dice quotient averaged over the
  batch and the selected classes; an absent class with zero predicted mass
  scores eps/eps = 1, i.e. missing classes count as perfectly segmented.
* ``nnu_dice`` — batch-pooled Dice: the batch dimension is folded into the
  voxel sums and the background channel is dropped.
* ``ca_dice`` — class-adaptive Dice: only (item, class) pairs whose target is
  present contribute, the numerator carries no smoothing, and the average
  runs over the N contributing pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import PatchBatch

CE_CLIP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-5
    include_background: bool = True  # plain dice_score only
    ce_normalization: str = "batch-voxel"  # "batch" | "batch-voxel"
    dice_to_loss: str = "one-minus-score"  # "score" | "one-minus-score"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.ce_normalization not in ("batch", "batch-voxel"):
            raise ValueError(f"unknown CE normalization {self.ce_normalization!r}")
        if self.dice_to_loss not in ("score", "one-minus-score"):
            raise ValueError(f"unknown dice-to-loss convention {self.dice_to_loss!r}")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss value, per-class breakdown and d(value)/dP.

    ``per_class_terms`` reconstructs the value under each variant's reduction
    (documented on the producing function); ``n_present`` is the contributing
    pair count of the class-adaptive variant.
    """

    value: float
    per_class_terms: np.ndarray
    gradient: np.ndarray
    n_present: int | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not np.all(np.isfinite(self.gradient)):
            raise ValueError("gradient contains non-finite entries")


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable (max-shifted) softmax along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_pullback(probs: np.ndarray, grad_probs: np.ndarray,
                     axis: int = 1) -> np.ndarray:
    """Map d(value)/dP to d(value)/d(logits) through the softmax Jacobian.

    The Jacobian is symmetric, so the same expression serves as the
    Jacobian-vector product for forward-mode checks.
    """
    inner = (probs * grad_probs).sum(axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def softmax_prob_volume(logits: np.ndarray, spacing, class_names):
    """Per-voxel softmax of a (channels, nx, ny, nz) logit field as a ProbVolume."""
    from .volume import ProbVolume

    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 4 or logits.shape[0] != len(class_names):
        raise ValueError("logits must have shape (channels, nx, ny, nz) "
                         "matching class_names")
    probs = softmax(logits, axis=0)
    return ProbVolume(logits.shape[1:], spacing, probs, class_names,
                      normalized=True)


def _dice_sign(cfg: LossConfig) -> float:
    return -1.0 if cfg.dice_to_loss == "one-minus-score" else 1.0


def _score_to_value(score: float, cfg: LossConfig) -> float:
    return 1.0 - score if cfg.dice_to_loss == "one-minus-score" else score


def ce_loss(batch: PatchBatch, cfg: LossConfig = LossConfig()) -> LossResult:
    """Cross entropy −Σ G log P, scaled by 1/B or 1/(B·V).

    ``per_class_terms[c]`` is the class's share of the sum; the terms add up
    to the value.  Predictions are clipped to [1e-12, 1] before the log.
    """
    p = np.clip(batch.p, CE_CLIP, 1.0)
    norm = 1.0 / batch.batch_size
    if cfg.ce_normalization == "batch-voxel":
        norm /= batch.voxels
    terms = -norm * (batch.g * np.log(p)).sum(axis=(0, 2))
    gradient = -norm * batch.g / p
    return LossResult(float(terms.sum()), terms, gradient)


def dice_score(batch: PatchBatch, cfg: LossConfig = LossConfig()) -> LossResult:
    """Smoothed multi-class Dice averaged over batch items and classes.

    ``per_class_terms[c]`` is the batch mean of the class's per-item scores
    (background entry present but NaN when excluded); the value averages the
    included classes and applies the configured sign convention.
    """
    eps = cfg.epsilon
    num = 2.0 * (batch.p * batch.g).sum(axis=2) + eps  # (B, K)
    den = batch.p.sum(axis=2) + batch.g.sum(axis=2) + eps
    t = num / den
    classes = np.arange(batch.num_channels)
    selected = classes >= (0 if cfg.include_background else 1)
    n_sel = int(selected.sum())
    if n_sel == 0:
        raise ValueError("no classes selected; need a foreground class "
                         "when include_background is off")
    score = float(t[:, selected].mean())
    scale = _dice_sign(cfg) / (batch.batch_size * n_sel)
    grad_t = (2.0 * batch.g * den[:, :, None] - num[:, :, None]) / den[:, :, None] ** 2
    gradient = scale * grad_t
    gradient[:, ~selected, :] = 0.0
    per_class = np.where(selected, t.mean(axis=0), np.nan)
    return LossResult(_score_to_value(score, cfg), per_class, gradient)


def nnu_dice(batch: PatchBatch, cfg: LossConfig = LossConfig()) -> LossResult:
    """Batch-pooled Dice over foreground classes.

    The batch dimension joins the voxel sums, giving one pooled quotient per
    foreground class; ``per_class_terms`` holds those quotients (NaN for
    background) and the value is their mean under the sign convention.
    """
    if batch.num_channels < 2:
        raise ValueError("nnu_dice needs at least one foreground class")
    eps = cfg.epsilon
    num = 2.0 * (batch.p * batch.g).sum(axis=(0, 2)) + eps  # (K,)
    den = batch.p.sum(axis=(0, 2)) + batch.g.sum(axis=(0, 2)) + eps
    t = num / den
    score = float(t[1:].mean())
    scale = _dice_sign(cfg) / (batch.num_channels - 1)
    grad_t = (2.0 * batch.g * den[None, :, None] - num[None, :, None]) \
        / den[None, :, None] ** 2
    gradient = scale * grad_t
    gradient[:, 0, :] = 0.0
    per_class = t.copy()
    per_class[0] = np.nan
    return LossResult(_score_to_value(score, cfg), per_class, gradient)


def ca_dice(batch: PatchBatch, cfg: LossConfig = LossConfig()) -> LossResult:
    """Class-adaptive Dice over the foreground pairs present in the targets.

    Only (item, class) pairs with target mass contribute; the numerator is
    unsmoothed, so the score is the real Dice of the sampled patch.
    ``per_class_terms[c]`` is the SUM of the class's contributing pair scores
    (NaN when the class is absent everywhere), so
    value = Σ per_class_terms / n_present under the score convention.
    An all-background batch (N = 0) scores 1 with zero gradient and the
    ``no-present-class`` flag.
    """
    eps = cfg.epsilon
    g_mass = batch.g.sum(axis=2)  # (B, K)
    present = g_mass > 0
    present[:, 0] = False
    n_present = int(present.sum())
    gradient = np.zeros_like(batch.p)
    per_class = np.full(batch.num_channels, np.nan)
    if n_present == 0:
        return LossResult(_score_to_value(1.0, cfg), per_class, gradient,
                          n_present=0, flags=("no-present-class",))
    num = 2.0 * (batch.p * batch.g).sum(axis=2)  # no smoothing in the numerator
    den = batch.p.sum(axis=2) + g_mass + eps
    t = np.where(present, num / den, 0.0)
    score = float(t.sum() / n_present)
    scale = _dice_sign(cfg) / n_present
    grad_t = (2.0 * batch.g * den[:, :, None] - num[:, :, None]) / den[:, :, None] ** 2
    gradient = np.where(present[:, :, None], scale * grad_t, 0.0)
    class_any = present.any(axis=0)
    sums = t.sum(axis=0)
    per_class[class_any] = sums[class_any]
    return LossResult(_score_to_value(score, cfg), per_class, gradient,
                      n_present=n_present)


_DICE_VARIANTS = {"plain": dice_score, "nnu": nnu_dice, "ca": ca_dice}


def combined_loss(batch: PatchBatch, cfg: LossConfig = LossConfig(),
                  dice_variant: str = "nnu",
                  weights: tuple[float, float] = (1.0, 1.0)) -> LossResult:
    """Weighted CE + Dice loss; ``weights`` is (w_ce, w_dice).

    ``per_class_terms`` carries the weighted CE terms (the Dice breakdown is
    variant specific; query the component losses for it).
    """
    if dice_variant not in _DICE_VARIANTS:
        raise ValueError(f"unknown dice variant {dice_variant!r}")
    w_ce, w_dice = weights
    if w_ce < 0 or w_dice < 0 or (w_ce == 0 and w_dice == 0):
        raise ValueError("weights must be >= 0 and not both zero")
    ce = ce_loss(batch, cfg)
    dice = _DICE_VARIANTS[dice_variant](batch, cfg)
    value = w_ce * ce.value + w_dice * dice.value
    gradient = w_ce * ce.gradient + w_dice * dice.gradient
    return LossResult(value, w_ce * ce.per_class_terms, gradient,
                      n_present=dice.n_present, flags=dice.flags)
