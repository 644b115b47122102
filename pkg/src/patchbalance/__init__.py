"""Class-imbalance measurement and planning for patch-based 3D segmentation."""

__version__ = "0.1.0"

from .losses import (LossConfig, LossResult, ca_dice, ce_loss, combined_loss,
                     dice_score, nnu_dice, softmax, softmax_prob_volume,
                     softmax_pullback)
from .metrics import (CaseMetrics, DriftReport, EvalReport, SurfaceDiceParams,
                      WilcoxonResult, compare_reports, confidence_drift, dsc,
                      evaluate_cases, hd95, largest_component, surface_dice,
                      wilcoxon_signed_rank)
from .planner import (ImbalanceReport, PatchConstraints, enumerate_candidates,
                      evaluate_patch_size, imbalance_sigma, optimize_patch_size,
                      sigma_upper_bound)
from .sampling import (FULL_VOLUME, CounterRng, PatchBatch, PatchSample,
                       PatchSpec, RatioHistogram, SamplingStrategy,
                       class_ratios, exact_ratio_histogram, sample_patch,
                       simulate_epoch)
from .volume import (LabelVolume, OrganSpec, PhantomSpec, ProbVolume,
                     SpacingRule, VolumeFormatError, argmax_labels,
                     compute_target_spacing, generate_phantom, load_volume,
                     one_hot, resample, save_volume)
