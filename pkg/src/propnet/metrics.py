"""Overlap and surface metrics, significance testing and case-set reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

DEFAULT_TOLERANCES = (0.5, 1.0, 2.0)
# distances within this slack of the tolerance count as matched
TOL_EPS = 1e-9


def _pair(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def ji(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face neighbour in the background;
    outside the array counts as background."""
    m = np.asarray(mask).astype(bool)
    struct = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=struct, border_value=0)


def _distance_to(target_surface: np.ndarray, spacing) -> np.ndarray:
    if not target_surface.any():
        return np.full(target_surface.shape, np.inf)
    return ndimage.distance_transform_edt(~target_surface, sampling=spacing)


def surface_dice(a, b, tolerance_mm: float, spacing=(1.0, 1.0, 1.0)) -> float:
    """Bidirectional surface Dice at ``tolerance_mm``.

    (|S_a within tol of S_b| + |S_b within tol of S_a|) / (|S_a| + |S_b|),
    Euclidean distances in mm under anisotropic ``spacing``; 1.0 when both
    surfaces are empty.
    """
    if tolerance_mm < 0:
        raise ValueError("tolerance must be >= 0")
    a, b = _pair(a, b)
    sa, sb = surface(a), surface(b)
    n = int(sa.sum()) + int(sb.sum())
    if n == 0:
        return 1.0
    spacing = tuple(float(s) for s in spacing)
    d_ab = _distance_to(sb, spacing)[sa]
    d_ba = _distance_to(sa, spacing)[sb]
    hit = int((d_ab <= tolerance_mm + TOL_EPS).sum()) + int((d_ba <= tolerance_mm + TOL_EPS).sum())
    return hit / n


def paired_t_test(x, y) -> tuple[float, float]:
    """Two-sided paired t-test on x - y.

    All-zero differences give (0, 1); constant nonzero differences give
    (+-inf, 0).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and equally long")
    if x.size < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = x - y
    if np.all(d == 0):
        return 0.0, 1.0
    if np.all(d == d[0]):
        return math.copysign(math.inf, d[0]), 0.0
    res = stats.ttest_rel(x, y)
    return float(res.statistic), float(res.pvalue)


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    ji: float
    sdsc: dict[float, float]
    pred_voxels: int
    gt_voxels: int


def case_metrics(case_id, pred, gt, spacing, tolerances=DEFAULT_TOLERANCES) -> CaseMetrics:
    pred, gt = _pair(pred, gt)
    return CaseMetrics(
        case_id=case_id,
        dsc=dsc(pred, gt),
        ji=ji(pred, gt),
        sdsc={float(t): surface_dice(pred, gt, t, spacing) for t in tolerances},
        pred_voxels=int(pred.sum()),
        gt_voxels=int(gt.sum()),
    )


def mean_sem(values) -> tuple[float, float]:
    """Mean and standard error of the mean (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def metric_columns(tolerances) -> list[str]:
    return ["dsc", "ji"] + [f"sdsc@{t}" for t in tolerances]


def _row(c: CaseMetrics, tolerances) -> dict:
    row = {"id": c.case_id, "dsc": c.dsc, "ji": c.ji}
    row.update({f"sdsc@{t}": c.sdsc[float(t)] for t in tolerances})
    return row


@dataclass
class ExperimentReport:
    cases: list[CaseMetrics]
    tolerances: tuple[float, ...] = DEFAULT_TOLERANCES
    fingerprint: dict = field(default_factory=dict)
    p_values: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cases = sorted(self.cases, key=lambda c: c.case_id)

    @property
    def aggregates(self) -> dict[str, tuple[float, float]]:
        rows = [_row(c, self.tolerances) for c in self.cases]
        return {k: mean_sem([r[k] for r in rows]) for k in metric_columns(self.tolerances)}

    def values(self, metric: str = "dsc") -> np.ndarray:
        return np.array([_row(c, self.tolerances)[metric] for c in self.cases])

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "tolerances": list(self.tolerances),
            "aggregates": {k: {"mean": m, "sem": s} for k, (m, s) in self.aggregates.items()},
            "p_values": self.p_values,
            "cases": [
                {**asdict(c), "sdsc": {str(k): v for k, v in c.sdsc.items()}} for c in self.cases
            ],
        }

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath = out / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default))
        cpath = out / f"{stem}.csv"
        cols = ["id"] + metric_columns(self.tolerances)
        with cpath.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for c in self.cases:
                w.writerow(_row(c, self.tolerances))
        return jpath, cpath


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _case_ids(directory: Path) -> dict[str, Path]:
    return {p.name[: -len(".mask.json")]: p for p in sorted(directory.glob("*.mask.json"))}


def evaluate_set(pred_dir, gt_dir, tolerances=DEFAULT_TOLERANCES) -> ExperimentReport:
    """Score every ``<id>.mask.raw`` in ``pred_dir`` against ``gt_dir``.

    Ground-truth spacing from the sidecar drives the surface metric.
    """
    from .data import load_mask

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds, gts = _case_ids(pred_dir), _case_ids(gt_dir)
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt or not gts:
        raise ValueError(
            f"case mismatch: missing predictions {missing_pred}, missing ground truth {missing_gt}"
            if (missing_pred or missing_gt) else f"no cases found in {gt_dir}"
        )
    cases = []
    for cid in sorted(gts):
        gt, meta = load_mask(gts[cid])
        pred, _ = load_mask(preds[cid])
        cases.append(case_metrics(cid, pred, gt, meta["spacing_mm"], tolerances))
    return ExperimentReport(cases, tuple(float(t) for t in tolerances))
