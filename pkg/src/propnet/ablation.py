"""Experiment runner: variant ablations, seed-deviation and interval sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .data import MaskVolume, VolumeScan, phantom_set
from .metrics import ExperimentReport, case_metrics, metric_columns, paired_t_test
from .propagate import ModelPredictor, PropagationConfig, segment_volume

log = logging.getLogger(__name__)

# variant name -> (checkpoint stem, network overrides, MCC on)
VARIANTS = {
    "propose_only": ("propose_only", {"boundary_branch_enabled": False, "refining_stage_enabled": False}, False),
    "+boundary": ("boundary", {"boundary_branch_enabled": True, "refining_stage_enabled": False}, False),
    "+refine": ("full", {"boundary_branch_enabled": True, "refining_stage_enabled": True}, False),
    "+mcc": ("full", {"boundary_branch_enabled": True, "refining_stage_enabled": True}, True),
}
SUITES = tuple(VARIANTS) + ("variants", "interval_sweep", "deviation_sweep")
DEVIATIONS_MM = (-15, -10, -5, 0, 5, 10, 15)
INTERVALS_MM = (5, 10, 15, 20)


def largest_slice(mask: np.ndarray) -> int:
    """Index of the slice with the largest annotated area (first on ties)."""
    return int(np.argmax(mask.reshape(mask.shape[0], -1).sum(axis=1)))


def deviated_seed(mask: np.ndarray, base: int, deviation_mm: float, spacing_z: float) -> int:
    """Seed index ``deviation_mm`` away from ``base`` (negative = lower z),
    snapped to the nearest slice carrying tumor; ties go toward ``base``."""
    target = base + int(round(deviation_mm / spacing_z))
    target = min(max(target, 0), mask.shape[0] - 1)
    present = np.flatnonzero(mask.reshape(mask.shape[0], -1).any(axis=1))
    if present.size == 0:
        raise ValueError("mask is empty")
    dist = np.abs(present - target)
    best = present[dist == dist.min()]
    return int(best[np.argmin(np.abs(best - base))])


def segment_cases(predict, cases, run, prop_cfg: PropagationConfig | None = None,
                  deviation_mm: float = 0.0, timing_repeats: int = 1):
    """Propagate each (volume, mask) case from its (possibly deviated)
    largest cross-section. Returns a list of (case_id, Segmentation, gt,
    seconds) with seconds the fastest of ``timing_repeats`` propagations."""
    prop_cfg = prop_cfg or run.propagate
    out = []
    for vol, gt in cases:
        base = largest_slice(gt.voxels)
        seed = deviated_seed(gt.voxels, base, deviation_mm, vol.spacing[0]) if deviation_mm else base
        best_t, seg = float("inf"), None
        for _ in range(max(timing_repeats, 1)):
            seg = segment_volume(predict, vol, seed, gt.voxels[seed], prop_cfg,
                                 run.data.target_spacing, run.data.normalize_mode)
            best_t = min(best_t, seg.result.wall_time)
        out.append((vol.id, seg, gt, best_t))
    return out


def report_for(segs, tolerances, fingerprint: dict) -> ExperimentReport:
    cases = [case_metrics(cid, seg.mask.voxels, gt.voxels, gt.spacing, tolerances) for cid, seg, gt, _ in segs]
    fp = dict(fingerprint)
    fp["seconds_per_volume"] = float(np.mean([t for *_, t in segs])) if segs else 0.0
    return ExperimentReport(cases, tuple(tolerances), fp)


def make_validator(run, cases=None):
    """Mean-DSC-after-propagation callback for :func:`propnet.train.train`."""
    if cases is None:
        cases = phantom_set(run.data.phantom, run.data.n_val, split=1)

    def validate(model) -> float:
        segs = segment_cases(ModelPredictor(model), cases, run)
        return float(np.mean([case_metrics(c, s.mask.voxels, g.voxels, g.spacing, ()).dsc for c, s, g, _ in segs]))

    return validate


def variant_config(run, variant: str):
    """RunConfig for training ``variant`` (network flags applied)."""
    _, overrides, mcc = VARIANTS[variant]
    return dataclasses.replace(
        run,
        model=dataclasses.replace(run.model, **overrides),
        propagate=dataclasses.replace(run.propagate, mcc=mcc),
    )


def _load_variant(ckpt_dir: Path, variant: str):
    from .train import load_model

    stem = VARIANTS[variant][0]
    path = ckpt_dir / f"{stem}.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint for variant '{variant}': {path}")
    return load_model(path), path


def _summary_row(report: ExperimentReport, **keys) -> dict:
    row = dict(keys)
    for k, (m, s) in report.aggregates.items():
        row[k] = m
        row[f"{k}_sem"] = s
    row["seconds_per_volume"] = report.fingerprint.get("seconds_per_volume")
    return row


def _write_table(rows: list[dict], path: Path):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_ablation(suite: str, run, ckpt_dir, out_dir, cases=None, timing_repeats: int = 5) -> dict[str, ExperimentReport]:
    """Execute one suite on the validation phantoms; writes per-entry reports,
    a summary ``table.csv``/``summary.json`` and a figure into ``out_dir``."""
    from . import plots

    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    ckpt_dir, out = Path(ckpt_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cases is None:
        cases = phantom_set(run.data.phantom, run.data.n_val, split=1)
    tol = run.evaluate.tolerances
    base_fp = {"config": run.fingerprint(), "suite": suite}
    reports: dict[str, ExperimentReport] = {}
    rows: list[dict] = []

    if suite in VARIANTS or suite == "variants":
        names = list(VARIANTS) if suite == "variants" else [suite]
        if suite == "variants":
            names = [n for n in names if (ckpt_dir / f"{VARIANTS[n][0]}.ckpt").exists()]
            if not names:
                raise FileNotFoundError(f"no variant checkpoints found in {ckpt_dir}")
        for name in names:
            model, path = _load_variant(ckpt_dir, name)
            pcfg = dataclasses.replace(run.propagate, mcc=VARIANTS[name][2])
            segs = segment_cases(ModelPredictor(model), cases, run, pcfg)
            reports[name] = report_for(segs, tol, {**base_fp, "variant": name, "checkpoint": str(path)})
            rows.append(_summary_row(reports[name], variant=name))
        ref = reports[names[0]].values("dsc")
        for row, name in zip(rows, names):
            row["p_vs_first"] = paired_t_test(reports[name].values("dsc"), ref)[1] if len(ref) > 1 else None
        plots.variant_bars(rows, out / "variants.png")
    elif suite == "deviation_sweep":
        model, path = _load_variant(ckpt_dir, "+mcc")
        predict = ModelPredictor(model)
        for dev in DEVIATIONS_MM:
            segs = segment_cases(predict, cases, run, deviation_mm=dev)
            key = f"{dev:+d}mm" if dev else "0mm"
            reports[key] = report_for(segs, tol, {**base_fp, "deviation_mm": dev, "checkpoint": str(path)})
            rows.append(_summary_row(reports[key], deviation_mm=dev))
        plots.deviation_curve(rows, out / "deviation.png")
        (out / "deviation_table.txt").write_text(format_deviation_table(rows) + "\n")
    else:
        model, path = _load_variant(ckpt_dir, "+mcc")
        predict = ModelPredictor(model)
        # repeats are interleaved across intervals so machine-speed drift
        # hits every interval alike; each (interval, case) keeps its fastest run
        by_iv: dict[int, list] = {}
        for _ in range(max(timing_repeats, 1)):
            for iv in INTERVALS_MM:
                pcfg = dataclasses.replace(run.propagate, interval_mm=float(iv))
                segs = segment_cases(predict, cases, run, pcfg)
                prev = by_iv.get(iv)
                by_iv[iv] = segs if prev is None else [
                    (cid, seg, gt, min(t, t0)) for (cid, seg, gt, t), (*_, t0) in zip(segs, prev)]
        for iv in INTERVALS_MM:
            segs = by_iv[iv]
            key = f"{iv}mm"
            reports[key] = report_for(segs, tol, {**base_fp, "interval_mm": iv, "checkpoint": str(path)})
            rows.append(_summary_row(reports[key], interval_mm=iv))
        plots.interval_curve(rows, out / "interval.png")

    for key, rep in reports.items():
        rep.write(out, stem=f"report_{key.replace('+', 'plus_')}")
    _write_table(rows, out / "table.csv")
    (out / "summary.json").write_text(json.dumps({"suite": suite, "rows": rows}, indent=2))
    return reports


def format_table(rows: list[dict], key: str) -> str:
    """Plain-text table of mean metrics keyed by ``key``."""
    cols = [c for c in ("dsc", "ji", "sdsc@0.5", "sdsc@1.0", "sdsc@2.0") if c in rows[0]]
    head = f"{key:>16} " + " ".join(f"{c:>9}" for c in cols)
    lines = [head]
    for r in rows:
        lines.append(f"{str(r[key]):>16} " + " ".join(f"{r[c]:9.3f}" for c in cols))
    return "\n".join(lines)


def format_deviation_table(rows: list[dict]) -> str:
    """Deviation rows as ``Deviation (mm) | DSC | JI | SDSC@...`` with signed
    offsets; negative means toward lower slice indices."""
    cols = [c for c in ("dsc", "ji", "sdsc@0.5", "sdsc@1.0", "sdsc@2.0") if c in rows[0]]
    names = {"dsc": "DSC", "ji": "JI"}
    head = ["Deviation (mm)"] + [names.get(c, c.replace("sdsc", "SDSC")) for c in cols]
    lines = [" | ".join(head)]
    for r in sorted(rows, key=lambda r: r["deviation_mm"]):
        dev = r["deviation_mm"]
        label = f"{dev:+d}" if dev else "0"
        lines.append(" | ".join([label] + [f"{r[c]:.3f}" for c in cols]))
    return "\n".join(lines)
