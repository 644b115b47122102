"""Machine-readable report files (JSON + CSV) with embedded provenance.

Every artifact embeds the resolved run configuration and the tool version:
JSON files under a ``run_config`` key, CSV files as leading ``#`` comment
lines.  Serialization is deterministic (sorted keys, fixed float repr), so
identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import (CaseMetrics, ClassAggregate, DriftReport, EvalReport,
                      OrganMetrics, downsample_deterministic)


def jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def write_json(path, payload: dict, run_config: dict) -> Path:
    path = Path(path)
    body = {"version": __version__, "run_config": jsonable(run_config)}
    body.update(jsonable(payload))
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, fieldnames, rows, run_config: dict,
              extra_comments: dict | None = None) -> Path:
    path = Path(path)
    buffer = io.StringIO()
    buffer.write(f"# version: {__version__}\n")
    buffer.write("# run_config: "
                 + json.dumps(jsonable(run_config), sort_keys=True) + "\n")
    for key, value in (extra_comments or {}).items():
        buffer.write(f"# {key}: {jsonable(value)!r}\n")
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_cell(v) for k, v in row.items()})
    path.write_text(buffer.getvalue())
    return path


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(str(v) for v in value)
    return value


# ---------------------------------------------------------------------------
# histograms and rankings


def histogram_payload(histogram, sigma: float) -> dict:
    return {
        "class_names": list(histogram.class_names),
        "class_ratios": histogram.class_ratios,
        "sigma": sigma,
        "patches_sampled": histogram.patches_sampled,
        "exact": histogram.exact,
        "fallback_count": histogram.fallback_count,
    }


def write_histogram(out_dir, histogram, sigma: float, run_config: dict):
    out_dir = Path(out_dir)
    rows = [
        {"class": c, "name": name, "mean_ratio": float(histogram.class_ratios[c])}
        for c, name in enumerate(histogram.class_names)
    ]
    paths = [
        write_json(out_dir / "histogram.json",
                   histogram_payload(histogram, sigma), run_config),
        write_csv(out_dir / "histogram.csv", ["class", "name", "mean_ratio"],
                  rows, run_config, extra_comments={"sigma": float(sigma)}),
    ]
    return paths


def ranking_entries(ranking) -> list[dict]:
    entries = []
    for report in ranking:
        entries.append({
            "patch": report.spec.label(),
            "sigma": report.sigma,
            "voxels": report.spec.voxels,
            "histogram": histogram_payload(report.histogram, report.sigma),
        })
    return entries


def write_ranking(out_dir, ranking, best_spec, run_config: dict):
    out_dir = Path(out_dir)
    entries = ranking_entries(ranking)
    payload = {"best_patch": best_spec.label(), "ranking": entries}
    rows = [{"rank": i, "patch": e["patch"], "voxels": e["voxels"],
             "sigma": e["sigma"]} for i, e in enumerate(entries)]
    return [
        write_json(out_dir / "ranking.json", payload, run_config),
        write_csv(out_dir / "ranking.csv", ["rank", "patch", "voxels", "sigma"],
                  rows, run_config),
    ]


# ---------------------------------------------------------------------------
# evaluation reports


def eval_report_payload(report: EvalReport) -> dict:
    rows = []
    for case, organ in report.rows():
        rows.append({
            "case": case.case_id,
            "class_id": organ.class_id,
            "class_name": organ.class_name,
            "dsc": organ.dsc,
            "hd95_mm": organ.hd95_mm,
            "surface_dice": organ.surface_dice,
            "flags": list(organ.flags),
        })
    per_class = {}
    for agg in report.per_class:
        per_class[agg.class_name] = {
            "class_id": agg.class_id,
            "n_cases": agg.n_cases,
            "dsc_mean": agg.dsc_mean, "dsc_std": agg.dsc_std,
            "hd95_mean": agg.hd95_mean, "hd95_std": agg.hd95_std,
            "hd95_excluded": agg.hd95_excluded,
            "surface_dice_mean": agg.surface_dice_mean,
            "surface_dice_std": agg.surface_dice_std,
        }
    return {"rows": rows, "per_class": per_class, "overall": report.overall}


def write_eval_report(out_dir, report: EvalReport, run_config: dict):
    out_dir = Path(out_dir)
    payload = eval_report_payload(report)
    return [
        write_json(out_dir / "report.json", payload, run_config),
        write_csv(out_dir / "report.csv",
                  ["case", "class_id", "class_name", "dsc", "hd95_mm",
                   "surface_dice", "flags"],
                  payload["rows"], run_config),
    ]


def eval_report_from_json(path) -> EvalReport:
    """Rebuild an EvalReport from a report.json written by write_eval_report."""
    body = json.loads(Path(path).read_text())
    by_case: dict[str, list[OrganMetrics]] = {}
    for row in body["rows"]:
        organ = OrganMetrics(int(row["class_id"]), row["class_name"],
                             row["dsc"], row["hd95_mm"], row["surface_dice"],
                             tuple(row.get("flags", ())))
        by_case.setdefault(row["case"], []).append(organ)
    cases = tuple(CaseMetrics(case_id, tuple(organs))
                  for case_id, organs in by_case.items())
    per_class = tuple(
        ClassAggregate(entry["class_id"], name, entry["n_cases"],
                       entry["dsc_mean"], entry["dsc_std"], entry["hd95_mean"],
                       entry["hd95_std"], entry["hd95_excluded"],
                       entry["surface_dice_mean"], entry["surface_dice_std"])
        for name, entry in sorted(body.get("per_class", {}).items(),
                                  key=lambda kv: kv[1]["class_id"]))
    return EvalReport(cases, per_class, body.get("overall", {}))


def write_compare(out_dir, rows, run_config: dict):
    out_dir = Path(out_dir)
    fields = ["class_name", "metric", "n", "n_dropped", "statistic",
              "p_value", "significant", "flags"]
    return [
        write_json(out_dir / "compare.json", {"rows": rows}, run_config),
        write_csv(out_dir / "compare.csv", fields, rows, run_config),
    ]


# ---------------------------------------------------------------------------
# confidence drift


def write_drift(out_dir, drift: DriftReport, run_config: dict,
                max_samples: int = 10000):
    out_dir = Path(out_dir)
    summary = {
        "mask_source": drift.mask_source,
        "classes": [
            {"class_id": c.class_id, "class_name": c.class_name,
             "mean_train": c.mean_train, "mean_test": c.mean_test,
             "drift": c.drift, "n_train": c.n_train, "n_test": c.n_test}
            for c in drift.classes
        ],
    }
    sample_rows = []
    for c in drift.classes:
        for split, sample in (("train", c.train_sample), ("test", c.test_sample)):
            for value in downsample_deterministic(sample, max_samples):
                sample_rows.append({"class": c.class_id, "name": c.class_name,
                                    "split": split, "confidence": float(value)})
    return [
        write_json(out_dir / "drift_summary.json", summary, run_config),
        write_csv(out_dir / "drift_samples.csv",
                  ["class", "name", "split", "confidence"], sample_rows,
                  run_config),
    ]
