"""Acceptance battery.

One test per criterion; each prints a single ACCEPTANCE <n> PASS/FAIL line.
Criterion 2 needs a user-supplied dataset (directory of label volumes already
resampled to 0.98x0.98x2.5 mm) via the PATCHBALANCE_MICCAI_DIR environment
variable and is skipped when absent.
"""

import json
import math
import os
import time
from contextlib import contextmanager

import numpy as np
import pytest
from scipy.stats import rankdata

from patchbalance.cli import main
from patchbalance.losses import (LossConfig, ca_dice, ce_loss, combined_loss,
                                 dice_score, nnu_dice)
from patchbalance.metrics import (SurfaceDiceParams, dsc, hd95, surface_dice,
                                  wilcoxon_signed_rank)
from patchbalance.planner import evaluate_patch_size
from patchbalance.sampling import (FULL_VOLUME, PatchBatch, PatchSpec,
                                   SamplingStrategy, simulate_epoch)
from patchbalance.volume import (LabelVolume, OrganSpec, PhantomSpec,
                                 ProbVolume, generate_phantom, save_volume)

UNIFORM = SamplingStrategy("uniform")


@contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} FAIL: {description}")
        raise
    print(f"ACCEPTANCE {number} PASS: {description}")


def multi_organ_phantoms():
    recipes = [
        ((24, 24, 24), (1.0, 1.0, 2.0),
         (OrganSpec(1, "ellipsoid", (8, 8, 8), (5, 5, 4)),
          OrganSpec(2, "box", (18, 18, 18), (1, 1, 1)))),
        ((32, 32, 24), (0.98, 0.98, 2.5),
         (OrganSpec(1, "ellipsoid", (12, 12, 10), (7, 7, 6)),
          OrganSpec(2, "ellipsoid", (24, 24, 16), (3, 3, 3)),
          OrganSpec(3, "box", (6, 26, 6), (1, 1, 1)))),
        ((48, 40, 32), (1.0, 1.0, 1.0),
         (OrganSpec(1, "box", (14, 14, 14), (6, 6, 6)),
          OrganSpec(2, "ellipsoid", (36, 30, 22), (4, 4, 4)),
          OrganSpec(3, "box", (40, 8, 26), (2, 2, 2)),
          OrganSpec(4, "ellipsoid", (10, 32, 8), (1.5, 1.5, 1.5)))),
        ((20, 28, 36), (1.0, 1.0, 2.0),
         (OrganSpec(1, "ellipsoid", (9, 13, 17), (6, 8, 10)),
          OrganSpec(2, "box", (16, 4, 30), (1, 1, 2)))),
    ]
    for dims, spacing, organs in recipes:
        volume, _ = generate_phantom(PhantomSpec(dims, spacing, organs), seed=0)
        yield volume


def test_criterion_1_sigma_extremes():
    """sigma(full volume) >= sigma(8x8x8) in exact all-origins mode."""
    with criterion(1, "sigma(full) >= sigma(8x8x8), exact mode, "
                      "< 10 s per phantom"):
        for volume in multi_organ_phantoms():
            start = time.time()
            full = evaluate_patch_size([volume], FULL_VOLUME, UNIFORM,
                                       exact=True)
            small = evaluate_patch_size([volume], PatchSpec((8, 8, 8)),
                                        UNIFORM, exact=True)
            elapsed = time.time() - start
            assert full.sigma >= small.sigma
            assert elapsed < 10.0


MICCAI_DIR = os.environ.get("PATCHBALANCE_MICCAI_DIR")


@pytest.mark.skipif(not MICCAI_DIR,
                    reason="PATCHBALANCE_MICCAI_DIR not set; dataset-gated "
                           "reproduction skipped")
def test_criterion_2_dataset_gated_sigma(tmp_path):
    """Reported sigma values on the resampled MICCAI 2015 training set."""
    checks = [
        ("full", True, 0.3301, 5e-4),
        ("8x8x8", False, 0.27146, 5e-3),
        ("192x160x56", False, 0.32605, 5e-3),
        ("96x80x48", False, 0.32337, 5e-3),
    ]
    with criterion(2, "dataset-gated sigma reproduction via cmd_histogram"):
        for patch, exact, expected, tolerance in checks:
            out = tmp_path / patch.replace("x", "_")
            args = ["histogram", "--dataset", MICCAI_DIR, "--patch", patch,
                    "--seed", "0", "--out", str(out), "--no-plot"]
            if exact:
                args.append("--exact")
            else:
                args += ["--draws", "20000"]
            assert main(args) == 0
            sigma = json.loads((out / "histogram.json").read_text())["sigma"]
            assert abs(sigma - expected) <= tolerance, \
                f"{patch}: sigma {sigma} vs {expected} +/- {tolerance}"


def random_fd_batch(rng):
    b = int(rng.integers(1, 3))
    k = int(rng.integers(2, 6))
    v = int(rng.integers(4, 65))
    p = rng.uniform(0.2, 1.0, size=(b, k, v))
    p /= p.sum(axis=1, keepdims=True)
    labels = rng.integers(0, k, size=(b, v))
    g = np.zeros((b, k, v))
    np.put_along_axis(g, labels[:, None, :], 1.0, axis=1)
    return PatchBatch(p, g)


def fd_gradient(func, batch, h=1e-4):
    p = batch.p.copy()
    grad = np.zeros_like(p)
    flat_p, flat_g = p.ravel(), grad.ravel()
    for i in range(flat_p.size):
        orig = flat_p[i]
        flat_p[i] = orig + h
        up = func(PatchBatch(p, batch.g)).value
        flat_p[i] = orig - h
        down = func(PatchBatch(p, batch.g)).value
        flat_p[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return grad


def test_criterion_3_gradients():
    """All variants and configurations match central finite differences."""
    variants = []
    for norm in ("batch", "batch-voxel"):
        cfg = LossConfig(ce_normalization=norm)
        variants.append((f"ce/{norm}", lambda b, c=cfg: ce_loss(b, c)))
    for form in ("score", "one-minus-score"):
        for include_bg in (True, False):
            cfg = LossConfig(dice_to_loss=form, include_background=include_bg)
            variants.append((f"dice/{form}/bg={include_bg}",
                             lambda b, c=cfg: dice_score(b, c)))
        cfg = LossConfig(dice_to_loss=form)
        variants.append((f"nnu/{form}", lambda b, c=cfg: nnu_dice(b, c)))
        variants.append((f"ca/{form}", lambda b, c=cfg: ca_dice(b, c)))
    for dice_variant in ("nnu", "ca", "plain"):
        for norm in ("batch", "batch-voxel"):
            cfg = LossConfig(ce_normalization=norm)
            variants.append(
                (f"combined/{dice_variant}/{norm}",
                 lambda b, c=cfg, d=dice_variant: combined_loss(b, c, d)))

    rng = np.random.default_rng(2024)
    batches_per_variant = math.ceil(100 / len(variants)) + 5
    with criterion(3, f"{len(variants)} loss configs x {batches_per_variant} "
                      "batches FD-checked at rel 1e-5, < 60 s"):
        start = time.time()
        total = 0
        for name, func in variants:
            for _ in range(batches_per_variant):
                batch = random_fd_batch(rng)
                analytic = func(batch).gradient
                numeric = fd_gradient(func, batch)
                scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric),
                            1e-12)
                rel = np.linalg.norm(analytic - numeric) / scale
                assert rel < 1e-5, f"{name}: relative error {rel}"
                total += 1
        elapsed = time.time() - start
        assert total >= 100
        assert elapsed < 60.0, f"gradient battery took {elapsed:.1f} s"


def test_criterion_4_ca_dice_semantics():
    """Absent-class fixture: ca = 1.0, background-excluded dice ~ 0.5."""
    with criterion(4, "ca-Dice ignores absent classes (fixture), "
                      "n_present = 1"):
        eps = 1e-5
        v = 40
        g = np.zeros((1, 3, v))
        g[0, 1, :16] = 1.0
        g[0, 0, 16:] = 1.0
        p = np.zeros((1, 3, v))
        p[0, 1, :16] = 1.0
        p[0, 2, 16:24] = 1.0
        p[0, 0, 24:] = 1.0
        batch = PatchBatch(p, g)
        cfg = LossConfig(epsilon=eps, dice_to_loss="score")
        ca = ca_dice(batch, cfg)

        # direct-evaluation oracle: literal per-pair quotients
        terms = []
        for c in (1, 2):
            mass = float(g[0, c].sum())
            if mass == 0:
                continue
            num = 2.0 * float((p[0, c] * g[0, c]).sum())
            den = float(p[0, c].sum()) + mass + eps
            terms.append(num / den)
        oracle = sum(terms) / len(terms)

        assert ca.value == oracle
        assert ca.n_present == 1
        assert abs(ca.value - 1.0) <= 1e-5
        plain = dice_score(batch, LossConfig(epsilon=eps, dice_to_loss="score",
                                             include_background=False))
        assert 0.49 <= plain.value <= 0.51
        assert abs(plain.value - (1.0 + eps / (8.0 + eps)) / 2.0) < 1e-12


def oracle_surface(mask):
    coords = []
    nx, ny, nz = mask.shape
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    xx, yy, zz = x + dx, y + dy, z + dz
                    if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz) \
                            or not mask[xx, yy, zz]:
                        coords.append((x, y, z))
                        break
    return np.array(coords, dtype=float)


def test_criterion_5_metric_oracles():
    """hd95 == brute force, surface dice monotone, dsc == set arithmetic."""
    rng = np.random.default_rng(77)
    names = ("background", "organ_1")
    taus = [0.0, 0.5, 1.0, 2.0, 5.0]
    with criterion(5, "500 mask pairs: hd95 brute-force equality, "
                      "SD monotone in tau, DSC set arithmetic, < 120 s"):
        start = time.time()
        pairs = 0
        while pairs < 500:
            dims = tuple(int(rng.integers(2, 7)) for _ in range(3))
            pred_mask = rng.random(dims) < rng.uniform(0.15, 0.7)
            gt_mask = rng.random(dims) < rng.uniform(0.15, 0.7)
            if not pred_mask.any() or not gt_mask.any():
                continue
            spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, 3).round(2))
            pred = LabelVolume(dims, spacing, pred_mask.astype(np.uint8), names)
            gt = LabelVolume(dims, spacing, gt_mask.astype(np.uint8), names)

            sp = np.asarray(spacing)
            a = oracle_surface(pred_mask) * sp
            b = oracle_surface(gt_mask) * sp
            d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
            expected_hd = max(
                float(np.percentile(d.min(axis=1), 95, method="linear")),
                float(np.percentile(d.min(axis=0), 95, method="linear")))
            assert hd95(pred, gt, 1).value == expected_hd

            values = [surface_dice(pred, gt, 1, SurfaceDiceParams(t)).value
                      for t in taus]
            assert values == sorted(values)

            set_a = {tuple(c) for c in np.argwhere(pred_mask)}
            set_b = {tuple(c) for c in np.argwhere(gt_mask)}
            assert dsc(pred, gt, 1).value \
                == 2 * len(set_a & set_b) / (len(set_a) + len(set_b))
            pairs += 1
        elapsed = time.time() - start
        assert elapsed < 120.0, f"metric battery took {elapsed:.1f} s"


def test_criterion_6_wilcoxon_exactness():
    """Exact p equals literal 2^n sign-assignment enumeration for n <= 12."""
    rng = np.random.default_rng(99)
    with criterion(6, "200 paired samples, exact Wilcoxon p == full "
                      "enumeration"):
        for _ in range(200):
            n = int(rng.integers(1, 13))
            a = rng.normal(size=n).round(1)
            b = rng.normal(size=n).round(1)
            result = wilcoxon_signed_rank(a, b)

            diffs = (a - b)[(a - b) != 0.0]
            if diffs.size == 0:
                assert result.p_value == 1.0
                continue
            ranks = rankdata(np.abs(diffs), method="average")
            w_plus = float(ranks[diffs > 0].sum())
            total = float(ranks.sum())
            lo, hi = min(w_plus, total - w_plus), max(w_plus, total - w_plus)
            m = diffs.size
            signs = (np.arange(2 ** m)[:, None] >> np.arange(m)) & 1
            w_all = signs @ ranks
            extreme = int(((w_all <= lo + 1e-12)
                           | (w_all >= hi - 1e-12)).sum())
            assert result.p_value == pytest.approx(extreme / 2.0 ** m,
                                                   abs=1e-12)


def _write_cli_fixtures(root):
    names = ("background", "organ_1", "organ_2")
    spec_path = root / "phantom_spec.json"
    spec_path.write_text(json.dumps({
        "dims": [16, 16, 16], "spacing": [1.0, 1.0, 1.0],
        "class_names": list(names),
        "organs": [
            {"class_id": 1, "shape": "ellipsoid", "center": [6, 6, 6],
             "radii": [3, 3, 3]},
            {"class_id": 2, "shape": "box", "center": [12, 12, 12],
             "radii": [1, 1, 1]},
        ]}))
    ds = root / "ds"
    ds.mkdir()
    assert main(["phantom", "--spec", str(spec_path), "--out", str(ds),
                 "--format", "json"]) == 0

    gt_dir, pred_dir = root / "gt", root / "pred"
    gt_dir.mkdir(), pred_dir.mkdir()
    gt = np.zeros((10, 10, 10), dtype=np.uint8)
    gt[2:6, 2:6, 2:6] = 1
    gt[7:9, 7:9, 7:9] = 2
    for case in ("c1", "c2"):
        save_volume(LabelVolume((10, 10, 10), (1, 1, 1), gt, names),
                    gt_dir / f"{case}.json")
        pred = gt.copy()
        if case == "c2":
            pred[2, 2, 2] = 0
        save_volume(LabelVolume((10, 10, 10), (1, 1, 1), pred, names),
                    pred_dir / f"{case}.json")

    labels = np.zeros((6, 6, 6), dtype=np.uint8)
    labels[:3] = 1
    for split, conf in (("train", 0.9), ("test", 0.7)):
        (root / f"{split}_pred").mkdir()
        (root / f"{split}_gt").mkdir()
        c1 = np.where(labels == 1, conf, 1.0 - conf)
        prob = np.stack([1.0 - c1, c1, np.zeros_like(c1)])
        prob[0] = 1.0 - prob[1]
        for case in ("a", "b"):
            save_volume(LabelVolume((6, 6, 6), (1, 1, 1), labels, names),
                        root / f"{split}_gt" / f"{case}.json")
            save_volume(ProbVolume((6, 6, 6), (1, 1, 1), prob, names),
                        root / f"{split}_pred" / f"{case}.json")

    v = (40, 1, 1)
    g = np.zeros((3,) + v)
    p = np.zeros((3,) + v)
    g[1, :16] = 1.0
    g[0, 16:] = 1.0
    p[1, :16] = 1.0
    p[2, 16:24] = 1.0
    p[0, 24:] = 1.0
    save_volume(ProbVolume(v, (1, 1, 1), p, names), root / "loss_p.json")
    save_volume(ProbVolume(v, (1, 1, 1), g, names), root / "loss_g.json")
    return spec_path, ds, pred_dir, gt_dir


def test_criterion_7_cli_determinism(tmp_path, capsys):
    """Every CLI command rerun with identical flags is byte-identical."""
    spec_path, ds, pred_dir, gt_dir = _write_cli_fixtures(tmp_path)
    eval_out = tmp_path / "eval_for_compare"
    assert main(["evaluate", "--pred", str(pred_dir), "--gt", str(gt_dir),
                 "--out", str(eval_out), "--no-plot"]) == 0

    commands = {
        "phantom": ["phantom", "--spec", str(spec_path), "--seed", "4",
                    "--format", "json"],
        "histogram": ["histogram", "--dataset", str(ds), "--patch", "6x6x6",
                      "--strategy", "fg:0.33", "--draws", "400", "--seed", "9"],
        "optimize": ["optimize", "--dataset", str(ds), "--step", "4x4x4",
                     "--min", "4x4x4", "--max", "8x8x8", "--draws", "150",
                     "--seed", "9"],
        "evaluate": ["evaluate", "--pred", str(pred_dir), "--gt", str(gt_dir),
                     "--tau", "1=1.0,2=1.0"],
        "compare": ["compare", str(eval_out / "report.json"),
                    str(eval_out / "report.json")],
        "drift": ["drift",
                  "--train-pred", str(tmp_path / "train_pred"),
                  "--train-gt", str(tmp_path / "train_gt"),
                  "--test-pred", str(tmp_path / "test_pred"),
                  "--test-gt", str(tmp_path / "test_gt")],
        "loss": ["loss", str(tmp_path / "loss_p.json"),
                 str(tmp_path / "loss_g.json"), "--variant", "combined",
                 "--dice", "ca"],
    }
    with criterion(7, "all 7 CLI commands byte-identical on rerun"):
        for name, args in commands.items():
            out = tmp_path / f"det_{name}"
            full_args = args + ["--out", str(out)]
            assert main(full_args) == 0
            stdout_first = capsys.readouterr().out
            first = {p.name: p.read_bytes() for p in out.iterdir()}
            assert main(full_args) == 0
            stdout_second = capsys.readouterr().out
            second = {p.name: p.read_bytes() for p in out.iterdir()}
            assert first == second, f"{name} outputs differ between reruns"
            assert stdout_first == stdout_second
            assert first, f"{name} wrote no outputs"


def test_criterion_8_sampling_law():
    """1x1x1 uniform sampling converges to exact voxel frequencies."""
    volume, _ = generate_phantom(PhantomSpec(
        dims=(24, 24, 24), spacing=(1.0, 1.0, 2.0),
        organs=(OrganSpec(1, "ellipsoid", (8, 8, 8), (5, 5, 4)),
                OrganSpec(2, "box", (18, 18, 18), (1, 1, 1)))), seed=7)
    with criterion(8, "1e6 single-voxel draws within 0.005 of exact "
                      "frequencies"):
        hist = simulate_epoch([volume], PatchSpec((1, 1, 1)), UNIFORM,
                              patches_per_epoch=1_000_000, seed=13)
        expected = volume.class_counts() / volume.data.size
        deviation = np.abs(hist.class_ratios - expected).max()
        assert deviation <= 0.005, f"max deviation {deviation}"
