"""Evaluation metrics: Dice, Hausdorff distance, volume difference.

All three are computed per patient over the assembled 3D volume for the
penumbra and core classes.  Hausdorff uses voxel centers under the
anisotropic physical spacing (mm) and is undefined when either mask is
empty; those patients are excluded from its aggregation and counted.

Aggregation reports mean +/- SD (population formula, ddof=0) per
severity group and over all patients.  WIS patients have no lesion, so
their rows carry the volume difference only and they are excluded from
Dice/Hausdorff aggregation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ctpseg.data import CORE, PENUMBRA, DatasetError, LabelVolume, SeverityGroup

LESION_CLASSES = (PENUMBRA, CORE)
CLASS_LABELS = {PENUMBRA: "penumbra", CORE: "core"}
METRIC_NAMES = ("dice", "hausdorff_mm", "delta_v_ml")

# Groups whose lesion masks are evaluated for overlap/distance metrics.
_OVERLAP_GROUPS = (SeverityGroup.LVO, SeverityGroup.NON_LVO)


def _class_mask(volume: LabelVolume | np.ndarray, class_index: int) -> np.ndarray:
    labels = volume.labels if isinstance(volume, LabelVolume) else np.asarray(volume)
    return labels == class_index


def _check_shapes(pred, gt) -> None:
    p = pred.labels if isinstance(pred, LabelVolume) else np.asarray(pred)
    g = gt.labels if isinstance(gt, LabelVolume) else np.asarray(gt)
    if p.shape != g.shape:
        raise DatasetError(f"shape mismatch: prediction {p.shape} vs truth {g.shape}")


def dice(pred, gt, class_index: int) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _check_shapes(pred, gt)
    p = _class_mask(pred, class_index)
    g = _class_mask(gt, class_index)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def hausdorff(
    pred,
    gt,
    class_index: int,
    spacing: tuple[float, float, float],
    percentile: float | None = None,
) -> float | None:
    """Symmetric Hausdorff distance in mm over class voxel centers.

    Returns None when either mask is empty.  ``percentile`` switches to
    the percentile variant (e.g. 95) of the directed distances.
    """
    _check_shapes(pred, gt)
    p = np.argwhere(_class_mask(pred, class_index)).astype(np.float64)
    g = np.argwhere(_class_mask(gt, class_index)).astype(np.float64)
    if len(p) == 0 or len(g) == 0:
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    p *= scale
    g *= scale
    d_pg, _ = cKDTree(g).query(p, k=1)
    d_gp, _ = cKDTree(p).query(g, k=1)
    if percentile is None:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def volume_difference(
    pred, gt, class_index: int, spacing: tuple[float, float, float]
) -> float:
    """|V_g - V_p| in ml; voxel volume from the spacing in mm^3 / 1000."""
    _check_shapes(pred, gt)
    voxel_ml = float(np.prod(spacing)) / 1000.0
    count_p = int(_class_mask(pred, class_index).sum())
    count_g = int(_class_mask(gt, class_index).sum())
    return abs(count_g - count_p) * voxel_ml


@dataclass
class ClassMetrics:
    dice: float
    hausdorff_mm: float | None
    delta_v_ml: float

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


@dataclass
class PatientMetrics:
    patient_id: str
    group: SeverityGroup
    per_class: dict[int, ClassMetrics]


def evaluate_patient(
    pred,
    gt,
    spacing: tuple[float, float, float],
    patient_id: str,
    group: SeverityGroup,
) -> PatientMetrics:
    per_class = {}
    for c in LESION_CLASSES:
        per_class[c] = ClassMetrics(
            dice=dice(pred, gt, c),
            hausdorff_mm=hausdorff(pred, gt, c, spacing),
            delta_v_ml=volume_difference(pred, gt, c, spacing),
        )
    return PatientMetrics(patient_id=patient_id, group=group, per_class=per_class)


@dataclass
class ReportCell:
    mean: float
    sd: float
    n: int

    def formatted(self) -> str:
        return f"{self.mean:.2f}±{self.sd:.2f}"


@dataclass
class MetricsReport:
    """(group label, class label, metric) -> mean/SD/n over patients."""

    cells: dict[tuple[str, str, str], ReportCell] = field(default_factory=dict)
    excluded: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def cell(self, group: str, class_label: str, metric: str) -> ReportCell | None:
        return self.cells.get((group, class_label, metric))

    def to_csv(self, path: Path | str | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["group", "class", "metric", "mean", "sd", "n", "excluded"])
        for key in sorted(self.cells):
            cell = self.cells[key]
            writer.writerow(
                [*key, repr(cell.mean), repr(cell.sd), cell.n, self.excluded.get(key, 0)]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: Path | str) -> "MetricsReport":
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        report = cls()
        reader = csv.DictReader(io.StringIO(text))
        for row in reader:
            key = (row["group"], row["class"], row["metric"])
            report.cells[key] = ReportCell(
                mean=float(row["mean"]), sd=float(row["sd"]), n=int(row["n"])
            )
            if int(row["excluded"]):
                report.excluded[key] = int(row["excluded"])
        return report

    def format_text(self) -> str:
        groups = ["LVO", "NON_LVO", "WIS", "All"]
        lines = []
        header = f"{'metric':<14}{'class':<10}" + "".join(f"{g:>16}" for g in groups)
        lines.append(header)
        lines.append("-" * len(header))
        for metric in METRIC_NAMES:
            for class_index in LESION_CLASSES:
                cls_label = CLASS_LABELS[class_index]
                row = f"{metric:<14}{cls_label:<10}"
                for g in groups:
                    cell = self.cell(g, cls_label, metric)
                    row += f"{cell.formatted() if cell else '—':>16}"
                lines.append(row)
        return "\n".join(lines)


def _population_stats(values: list[float]) -> ReportCell:
    arr = np.asarray(values, dtype=np.float64)
    return ReportCell(mean=float(arr.mean()), sd=float(arr.std(ddof=0)), n=len(arr))


def aggregate(per_patient: list[PatientMetrics]) -> MetricsReport:
    """Group-wise mean +/- SD table; see the module docstring for the
    WIS and undefined-Hausdorff exclusion rules."""
    if not per_patient:
        raise DatasetError("cannot aggregate an empty metrics list")
    report = MetricsReport()
    group_rows: list[tuple[str, list[PatientMetrics]]] = [
        (g.value, [m for m in per_patient if m.group is g]) for g in SeverityGroup
    ]
    group_rows.append(("All", list(per_patient)))

    for group_label, members in group_rows:
        if not members:
            continue
        for class_index in LESION_CLASSES:
            cls_label = CLASS_LABELS[class_index]
            for metric in METRIC_NAMES:
                values = []
                excluded = 0
                for m in members:
                    if metric != "delta_v_ml" and m.group is SeverityGroup.WIS:
                        excluded += 1
                        continue
                    v = m.per_class[class_index].value(metric)
                    if v is None:
                        excluded += 1
                        continue
                    values.append(v)
                if group_label == SeverityGroup.WIS.value and metric != "delta_v_ml":
                    continue  # WIS rows report the volume difference only
                if values:
                    key = (group_label, cls_label, metric)
                    report.cells[key] = _population_stats(values)
                    if excluded:
                        report.excluded[key] = excluded
    return report


# ---------------------------------------------------------------------------
# Inter-observer comparison
# ---------------------------------------------------------------------------

PAIRING_LABELS = ("pred_vs_consensus", "nr1_vs_nr2", "pred_vs_nr1", "pred_vs_nr2")


@dataclass
class InterobserverCase:
    patient_id: str
    group: SeverityGroup
    spacing: tuple[float, float, float]
    pred: LabelVolume
    truth_a: LabelVolume
    truth_b: LabelVolume
    joint_truth: LabelVolume | None = None  # ground truth delineated jointly


def consensus_intersection(truth_a: LabelVolume, truth_b: LabelVolume) -> LabelVolume:
    """Voxelwise agreement on positives: class c where both annotators mark c."""
    _check_shapes(truth_a, truth_b)
    out = np.zeros(truth_a.shape, dtype=np.uint8)
    for c in LESION_CLASSES:
        out[_class_mask(truth_a, c) & _class_mask(truth_b, c)] = c
    return LabelVolume(out)


def interobserver_report(cases: list[InterobserverCase]) -> dict[str, MetricsReport]:
    """Aggregated metric tables for the four pairings: prediction vs the
    joint/consensus truth, annotator vs annotator, and prediction vs
    each annotator."""
    if not cases:
        raise DatasetError("no inter-observer cases supplied")
    for case in cases:
        if case.truth_a is None or case.truth_b is None:
            raise DatasetError(
                f"patient {case.patient_id!r}: both annotator volumes are required"
            )

    def metrics_for(pair) -> list[PatientMetrics]:
        return [
            evaluate_patient(
                pair(case)[0], pair(case)[1], case.spacing, case.patient_id, case.group
            )
            for case in cases
        ]

    pairings = {
        "pred_vs_consensus": lambda c: (
            c.pred,
            c.joint_truth
            if c.joint_truth is not None
            else consensus_intersection(c.truth_a, c.truth_b),
        ),
        "nr1_vs_nr2": lambda c: (c.truth_a, c.truth_b),
        "pred_vs_nr1": lambda c: (c.pred, c.truth_a),
        "pred_vs_nr2": lambda c: (c.pred, c.truth_b),
    }
    return {label: aggregate(metrics_for(fn)) for label, fn in pairings.items()}
