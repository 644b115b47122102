"""Command line front end.

Subcommands: ``phantom``, ``histogram``, ``optimize``, ``evaluate``,
``compare``, ``drift``, ``loss``.  Every command is deterministic given its
flags and seed; outputs land in ``--out`` under fixed file names, embed the
resolved run configuration plus tool version, and report paths additionally
render a matplotlib figure next to the delimited output (disable with
``--no-plot``).

Exit codes: 0 success; 1 degenerate-case flags present while ``--strict``;
2 usage or I/O error.

A JSON config file (``--config``) may mirror any flag by destination name;
explicit flags win over the config, the config wins over defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, plots, reports
from .losses import (LossConfig, ca_dice, ce_loss, combined_loss, dice_score,
                     nnu_dice)
from .metrics import compare_reports, confidence_drift, evaluate_cases
from .planner import (PatchConstraints, evaluate_patch_size,
                      optimize_patch_size)
from .sampling import FULL_VOLUME, PatchBatch, PatchSpec, SamplingStrategy
from .volume import (LabelVolume, OrganSpec, PhantomSpec,
                     VolumeFormatError, generate_phantom, load_volume,
                     save_volume)

EXIT_OK = 0
EXIT_DEGENERATE = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Usage or I/O level failure; maps to exit code 2."""


# ---------------------------------------------------------------------------
# flag parsing helpers


def parse_triple(text: str, what: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise CliError(f"{what} must look like PXxPYxPZ, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise CliError(f"{what} must be three integers, got {text!r}") from exc


def parse_patch(text: str) -> PatchSpec:
    if text == "full":
        return FULL_VOLUME
    return PatchSpec(parse_triple(text, "--patch"))


def parse_strategy(text: str) -> SamplingStrategy:
    if text == "uniform":
        return SamplingStrategy("uniform")
    if text == "fg":
        return SamplingStrategy("foreground-oversample")
    if text.startswith("fg:"):
        try:
            prob = float(text[3:])
        except ValueError as exc:
            raise CliError(f"bad oversample probability in {text!r}") from exc
        return SamplingStrategy("foreground-oversample", oversample_prob=prob)
    raise CliError(f"--strategy must be 'uniform' or 'fg[:PROB]', got {text!r}")


def parse_tau(text: str) -> dict:
    mapping = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise CliError(f"--tau entries must look like CLASS=MM, got {item!r}")
        key, value = item.split("=", 1)
        try:
            mapping[key.strip()] = float(value)
        except ValueError as exc:
            raise CliError(f"bad tolerance in --tau entry {item!r}") from exc
    return mapping


def load_dataset(directory, kind: str) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"dataset directory not found: {directory}")
    volumes = {}
    for path in sorted(directory.iterdir()):
        if path.suffix not in (".mha", ".mhd", ".json"):
            continue
        # a JSON header without its .raw payload is metadata, not a volume
        if path.suffix == ".json" and not path.with_suffix(".raw").exists():
            continue
        if path.stem in volumes:
            raise CliError(f"duplicate case id {path.stem!r} in {directory}")
        try:
            volumes[path.stem] = load_volume(path, kind)
        except VolumeFormatError as exc:
            raise CliError(f"failed to load {path}: {exc}") from exc
    if not volumes:
        raise CliError(f"no volumes found in {directory}")
    if kind == "label":
        _harmonize_class_names(volumes, directory)
    return volumes


def _harmonize_class_names(volumes: dict, directory) -> None:
    """Extend shorter class-name lists that prefix the longest one.

    MetaImage carries no class names, so a case without the last organ loads
    with fewer default names than its peers; as long as the shorter list is a
    prefix of the longest, the volumes describe the same label space.
    """
    longest = max((v.class_names for v in volumes.values()), key=len)
    for case_id, volume in volumes.items():
        names = volume.class_names
        if names == longest:
            continue
        if longest[:len(names)] != names:
            raise CliError(
                f"class names of {case_id!r} conflict with the rest of "
                f"{directory}: {names} vs {longest}")
        volumes[case_id] = LabelVolume(volume.dims, volume.spacing,
                                       volume.data, longest)


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            file_config = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(file_config, dict):
            raise CliError("config file must hold a JSON object")
        for key, value in file_config.items():
            if key in resolved:
                resolved[key] = value
    for key, value in vars(args).items():
        if key in resolved:
            resolved[key] = value
    return resolved


def run_config_for(command: str, options: dict) -> dict:
    config = {"command": command}
    config.update({k: (str(v) if isinstance(v, Path) else v)
                   for k, v in options.items()})
    return config


def prepare_out(options) -> Path:
    out_dir = Path(options["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def finish(strict: bool, degenerate: bool) -> int:
    if strict and degenerate:
        return EXIT_DEGENERATE
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommands


PHANTOM_DEFAULTS = {"spec": None, "seed": 0, "format": "mha", "out": "."}


def cmd_phantom(args) -> int:
    options = resolve_options(args, PHANTOM_DEFAULTS)
    if not options["spec"]:
        raise CliError("phantom requires --spec pointing to a phantom JSON")
    try:
        raw = json.loads(Path(options["spec"]).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read phantom spec {options['spec']}: {exc}") from exc
    try:
        organs = tuple(
            OrganSpec(int(o["class_id"]), o["shape"], tuple(o["center"]),
                      tuple(o["radii"]))
            for o in raw.get("organs", ()))
        spec = PhantomSpec(tuple(raw["dims"]),
                           tuple(raw.get("spacing", (1.0, 1.0, 1.0))), organs,
                           tuple(raw["class_names"]) if "class_names" in raw
                           else None)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid phantom spec: {exc}") from exc
    volume, counts = generate_phantom(spec, seed=int(options["seed"]))
    out_dir = prepare_out(options)
    suffix = ".mha" if options["format"] == "mha" else ".json"
    save_volume(volume, out_dir / f"phantom{suffix}")
    reports.write_json(out_dir / "phantom_counts.json", counts,
                       run_config_for("phantom", options))
    return EXIT_OK


HISTOGRAM_DEFAULTS = {
    "dataset": None, "patch": "full", "strategy": "uniform", "draws": 500,
    "seed": 0, "exact": False, "out": ".", "strict": False, "no_plot": False,
}


def cmd_histogram(args) -> int:
    options = resolve_options(args, HISTOGRAM_DEFAULTS)
    if not options["dataset"]:
        raise CliError("histogram requires --dataset")
    volumes = list(load_dataset(options["dataset"], "label").values())
    spec = parse_patch(options["patch"])
    strategy = parse_strategy(options["strategy"])
    try:
        report = evaluate_patch_size(volumes, spec, strategy,
                                     patches_per_epoch=int(options["draws"]),
                                     seed=int(options["seed"]),
                                     exact=bool(options["exact"]))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = prepare_out(options)
    run_config = run_config_for("histogram", options)
    reports.write_histogram(out_dir, report.histogram, report.sigma, run_config)
    if not options["no_plot"]:
        plots.save_ratio_histogram(out_dir / "histogram.png", report.histogram,
                                   report.sigma, title=f"patch {spec.label()}",
                                   run_config=run_config)
    return finish(options["strict"], report.histogram.fallback_count > 0)


OPTIMIZE_DEFAULTS = {
    "dataset": None, "step": "16x16x8", "min": "32x32x16", "max": None,
    "max_voxels": None, "include_full": False, "strategy": "uniform",
    "draws": 500, "seed": 0, "tie_delta": 0.001, "exact": False, "out": ".",
    "strict": False, "no_plot": False,
}


def cmd_optimize(args) -> int:
    options = resolve_options(args, OPTIMIZE_DEFAULTS)
    if not options["dataset"]:
        raise CliError("optimize requires --dataset")
    volumes = list(load_dataset(options["dataset"], "label").values())
    step = parse_triple(options["step"], "--step")
    axis_min = parse_triple(options["min"], "--min")
    if options["max"]:
        axis_max = parse_triple(options["max"], "--max")
    else:
        # default: the largest dataset extent, rounded down to the step grid
        extents = [max(v.dims[a] for v in volumes) for a in range(3)]
        axis_max = tuple(max(axis_min[a], (extents[a] // step[a]) * step[a])
                         for a in range(3))
    options["max_resolved"] = "x".join(str(m) for m in axis_max)
    try:
        constraints = PatchConstraints(
            axis_step=step, axis_min=axis_min, axis_max=axis_max,
            max_voxels=(int(options["max_voxels"])
                        if options["max_voxels"] else None),
            include_full_volume=bool(options["include_full"]))
        best_spec, _, ranking = optimize_patch_size(
            volumes, constraints, parse_strategy(options["strategy"]),
            patches_per_epoch=int(options["draws"]), seed=int(options["seed"]),
            tie_delta=float(options["tie_delta"]), exact=bool(options["exact"]))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = prepare_out(options)
    run_config = run_config_for("optimize", options)
    reports.write_ranking(out_dir, ranking, best_spec, run_config)
    if not options["no_plot"]:
        plots.save_ranking(out_dir / "ranking.png",
                           reports.ranking_entries(ranking),
                           run_config=run_config)
    degenerate = any(r.histogram.fallback_count > 0 for r in ranking)
    return finish(options["strict"], degenerate)


EVALUATE_DEFAULTS = {
    "pred": None, "gt": None, "tau": "", "postprocess": False, "out": ".",
    "strict": False, "no_plot": False,
}


def cmd_evaluate(args) -> int:
    options = resolve_options(args, EVALUATE_DEFAULTS)
    if not options["pred"] or not options["gt"]:
        raise CliError("evaluate requires --pred and --gt")
    preds = load_dataset(options["pred"], "label")
    gts = load_dataset(options["gt"], "label")
    tau = parse_tau(options["tau"]) if options["tau"] else None
    try:
        report = evaluate_cases(preds, gts, tau_mm=tau,
                                postprocess=bool(options["postprocess"]))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = prepare_out(options)
    run_config = run_config_for("evaluate", options)
    reports.write_eval_report(out_dir, report, run_config)
    if not options["no_plot"]:
        plots.save_eval_report(out_dir / "report.png", report,
                               run_config=run_config)
    degenerate = any(organ.flags for _, organ in report.rows())
    return finish(options["strict"], degenerate)


COMPARE_DEFAULTS = {
    "report_a": None, "report_b": None, "alpha": 0.05, "out": ".",
    "strict": False,
}


def cmd_compare(args) -> int:
    options = resolve_options(args, COMPARE_DEFAULTS)
    try:
        report_a = reports.eval_report_from_json(options["report_a"])
        report_b = reports.eval_report_from_json(options["report_b"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"cannot read evaluation report: {exc}") from exc
    try:
        rows = compare_reports(report_a, report_b, alpha=float(options["alpha"]))
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = prepare_out(options)
    reports.write_compare(out_dir, rows, run_config_for("compare", options))
    degenerate = any(row["flags"] for row in rows)
    return finish(options["strict"], degenerate)


DRIFT_DEFAULTS = {
    "train_pred": None, "train_gt": None, "test_pred": None, "test_gt": None,
    "mask_source": "ground-truth", "max_samples": 10000, "out": ".",
    "strict": False, "no_plot": False,
}


def _paired_split(pred_dir, gt_dir):
    preds = load_dataset(pred_dir, "prob")
    gts = load_dataset(gt_dir, "label")
    if set(preds) != set(gts):
        raise CliError(f"case ids differ between {pred_dir} and {gt_dir}: "
                       f"{sorted(set(preds) ^ set(gts))}")
    return [(preds[k], gts[k]) for k in sorted(preds)]


def cmd_drift(args) -> int:
    options = resolve_options(args, DRIFT_DEFAULTS)
    for key in ("train_pred", "train_gt", "test_pred", "test_gt"):
        if not options[key]:
            raise CliError(f"drift requires --{key.replace('_', '-')}")
    train = _paired_split(options["train_pred"], options["train_gt"])
    test = _paired_split(options["test_pred"], options["test_gt"])
    try:
        report = confidence_drift(train, test,
                                  mask_source=options["mask_source"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out_dir = prepare_out(options)
    run_config = run_config_for("drift", options)
    reports.write_drift(out_dir, report, run_config,
                        max_samples=int(options["max_samples"]))
    if not options["no_plot"]:
        plots.save_drift(out_dir / "drift.png", report,
                         max_samples=int(options["max_samples"]),
                         run_config=run_config)
    degenerate = any(c.drift is None for c in report.classes)
    return finish(options["strict"], degenerate)


LOSS_DEFAULTS = {
    "pred": None, "gt": None, "variant": "ca", "dice": "nnu", "eps": 1e-5,
    "ce_norm": "batch-voxel", "dice_form": "one-minus-score",
    "w_ce": 1.0, "w_dice": 1.0, "out": None, "strict": False,
}

_LOSS_FUNCS = {"ce": ce_loss, "plain": dice_score, "nnu": nnu_dice,
               "ca": ca_dice}


def cmd_loss(args) -> int:
    options = resolve_options(args, LOSS_DEFAULTS)
    try:
        pred = load_volume(options["pred"], "prob")
        gt = load_volume(options["gt"], "prob")
        batch = PatchBatch.from_prob_volumes([pred], [gt])
    except (VolumeFormatError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    cfg = LossConfig(epsilon=float(options["eps"]),
                     ce_normalization=options["ce_norm"],
                     dice_to_loss=options["dice_form"])
    variant = options["variant"]
    try:
        if variant == "combined":
            result = combined_loss(batch, cfg, dice_variant=options["dice"],
                                   weights=(float(options["w_ce"]),
                                            float(options["w_dice"])))
        elif variant in _LOSS_FUNCS:
            result = _LOSS_FUNCS[variant](batch, cfg)
        else:
            raise CliError(f"unknown loss variant {variant!r}")
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    payload = {
        "variant": variant,
        "value": result.value,
        "n_present": result.n_present,
        "per_class_terms": result.per_class_terms,
        "flags": list(result.flags),
    }
    body = {"version": __version__,
            "run_config": run_config_for("loss", options)}
    body.update(reports.jsonable(payload))
    print(json.dumps(body, indent=2, sort_keys=True))
    if options["out"]:
        out_dir = prepare_out(options)
        reports.write_json(out_dir / "loss.json", payload,
                           run_config_for("loss", options))
    return finish(options["strict"], bool(result.flags))


# ---------------------------------------------------------------------------
# parser wiring


def _add_common(sub, out_default="."):
    sub.add_argument("--config", help="JSON config mirroring flags")
    sub.add_argument("--out", default=argparse.SUPPRESS,
                     help=f"output directory (default {out_default!r})")
    sub.add_argument("--strict", action="store_true", default=argparse.SUPPRESS,
                     help="exit 1 when degenerate-case flags were raised")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbalance",
        description="Class-imbalance measurement, patch-size planning, loss "
                    "kernels and segmentation evaluation for volumetric "
                    "patch-based training.")
    parser.add_argument("--version", action="version",
                        version=f"patchbalance {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("phantom", help="generate a deterministic phantom")
    p.add_argument("--spec", default=argparse.SUPPRESS,
                   help="phantom description JSON")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--format", choices=("mha", "json"),
                   default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = commands.add_parser("histogram",
                            help="epoch class-ratio histogram and sigma")
    p.add_argument("--dataset", default=argparse.SUPPRESS,
                   help="directory of label volumes")
    p.add_argument("--patch", default=argparse.SUPPRESS,
                   help="PXxPYxPZ or 'full'")
    p.add_argument("--strategy", default=argparse.SUPPRESS,
                   help="uniform | fg[:PROB]")
    p.add_argument("--draws", type=int, default=argparse.SUPPRESS,
                   help="patches per epoch")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--exact", action="store_true", default=argparse.SUPPRESS,
                   help="average over all origins instead of sampling")
    p.add_argument("--no-plot", action="store_true", default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_histogram)

    p = commands.add_parser("optimize",
                            help="search patch sizes minimizing sigma")
    p.add_argument("--dataset", default=argparse.SUPPRESS)
    p.add_argument("--step", default=argparse.SUPPRESS,
                   help="axis step grid GXxGYxGZ (default 16x16x8)")
    p.add_argument("--min", default=argparse.SUPPRESS,
                   help="minimum size per axis (default 32x32x16)")
    p.add_argument("--max", default=argparse.SUPPRESS,
                   help="maximum size per axis (default: dataset extent)")
    p.add_argument("--max-voxels", type=int, default=argparse.SUPPRESS,
                   help="voxel budget per patch")
    p.add_argument("--include-full", action="store_true",
                   default=argparse.SUPPRESS,
                   help="add the per-volume full extent as a candidate")
    p.add_argument("--strategy", default=argparse.SUPPRESS)
    p.add_argument("--draws", type=int, default=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--tie-delta", type=float, default=argparse.SUPPRESS)
    p.add_argument("--exact", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--no-plot", action="store_true", default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = commands.add_parser("evaluate",
                            help="DSC / 95HD / surface-Dice case evaluation")
    p.add_argument("--pred", default=argparse.SUPPRESS,
                   help="directory of predicted label volumes")
    p.add_argument("--gt", default=argparse.SUPPRESS,
                   help="directory of ground-truth label volumes")
    p.add_argument("--tau", default=argparse.SUPPRESS,
                   help="surface tolerances, e.g. '1=2.0,organ_2=1.5'")
    p.add_argument("--postprocess", action="store_true",
                   default=argparse.SUPPRESS,
                   help="largest-component analysis before evaluation")
    p.add_argument("--no-plot", action="store_true", default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("compare",
                            help="Wilcoxon tests between two report.json files")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--alpha", type=float, default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    p = commands.add_parser("drift",
                            help="train vs test confidence drift analysis")
    p.add_argument("--train-pred", default=argparse.SUPPRESS)
    p.add_argument("--train-gt", default=argparse.SUPPRESS)
    p.add_argument("--test-pred", default=argparse.SUPPRESS)
    p.add_argument("--test-gt", default=argparse.SUPPRESS)
    p.add_argument("--mask-source", choices=("ground-truth", "prediction"),
                   default=argparse.SUPPRESS)
    p.add_argument("--max-samples", type=int, default=argparse.SUPPRESS)
    p.add_argument("--no-plot", action="store_true", default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_drift)

    p = commands.add_parser("loss", help="evaluate a loss on a (P, G) pair")
    p.add_argument("pred", help="prediction probability volume")
    p.add_argument("gt", help="one-hot target probability volume")
    p.add_argument("--variant", choices=("ce", "plain", "nnu", "ca", "combined"),
                   default=argparse.SUPPRESS)
    p.add_argument("--dice", choices=("nnu", "ca", "plain"),
                   default=argparse.SUPPRESS,
                   help="dice component of the combined variant")
    p.add_argument("--eps", type=float, default=argparse.SUPPRESS)
    p.add_argument("--ce-norm", choices=("batch", "batch-voxel"),
                   default=argparse.SUPPRESS)
    p.add_argument("--dice-form", choices=("score", "one-minus-score"),
                   default=argparse.SUPPRESS)
    p.add_argument("--w-ce", type=float, default=argparse.SUPPRESS)
    p.add_argument("--w-dice", type=float, default=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(func=cmd_loss)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
