"""Detection matching, all-point AP / mAP@0.5 and report tables."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .postprocess import Detection, iou_matrix


class EvaluationError(ValueError):
    pass


@dataclass
class GroundTruth:
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class MatchResult:
    tp: list[bool]                  # per detection, in the order given
    matched_gt: list[int | None]
    fn: int

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp


@dataclass
class EvalReport:
    ap: dict[int, float]
    map50: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    precision_undefined: bool = False
    classes_without_gt: list[int] = field(default_factory=list)
    conf_thresh: float = 0.25

    def to_csv(self) -> str:
        lines = ["class_id,ap"]
        lines += [f"{c},{self.ap[c]:.6f}" for c in sorted(self.ap)]
        lines.append("map,precision,recall,tp,fp,fn")
        lines.append(f"{self.map50:.6f},{self.precision:.6f},{self.recall:.6f},{self.tp},{self.fp},{self.fn}")
        return "\n".join(lines) + "\n"


def match_image(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching for one image.

    Each detection, highest score first, claims the unmatched same-class
    ground truth with the largest IoU (lowest index on ties) if that IoU
    reaches ``iou_thresh``.
    """
    tp = [False] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    if gts and dets:
        ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
        gt_cls = np.array([g.class_id for g in gts])
        taken = np.zeros(len(gts), dtype=bool)
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        for i in order:
            cand = np.where((gt_cls == dets[i].class_id) & ~taken, ious[i], -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= iou_thresh:
                taken[j] = True
                tp[i] = True
                matched[i] = j
    fn = len(gts) - sum(tp)
    return MatchResult(tp, matched, fn)


def match(dets_per_image: dict[str, list[Detection]], gts_per_image: dict[str, list[GroundTruth]],
          iou_thresh: float = 0.5) -> dict[str, MatchResult]:
    images = sorted(set(dets_per_image) | set(gts_per_image))
    return {
        img: match_image(dets_per_image.get(img, []), gts_per_image.get(img, []), iou_thresh)
        for img in images
    }


def average_precision(tp_sorted, n_gt: int) -> float:
    """All-point interpolated AP from TP flags sorted by descending score.

    Precision values are ratios of counts, so the envelope area is summed
    as an exact fraction and rounded once.
    """
    if n_gt <= 0:
        raise EvaluationError("average precision is undefined without ground truth")
    tp = [bool(t) for t in tp_sorted]
    if not tp:
        return 0.0
    ctp = np.cumsum(tp)
    # precision envelope: running max from the tail, kept as (numerator, denominator)
    best = Fraction(0)
    envelope = [Fraction(0)] * len(tp)
    for k in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(ctp[k]), k + 1))
        envelope[k] = best
    # recall only moves at true positives, each step is 1/n_gt
    area = sum((envelope[k] for k in range(len(tp)) if tp[k]), Fraction(0))
    return float(area / n_gt)


def evaluate(dets_per_image: dict[str, list[Detection]], gts_per_image: dict[str, list[GroundTruth]],
             conf_thresh: float = 0.25, iou_thresh: float = 0.5) -> EvalReport:
    n_gt_total = sum(len(g) for g in gts_per_image.values())
    if n_gt_total == 0:
        raise EvaluationError("no ground truth to evaluate against")
    results = match(dets_per_image, gts_per_image, iou_thresh)

    # pooled (score, image, index, class, tp) rows; image id breaks score ties
    rows = []
    for img, res in results.items():
        for k, d in enumerate(dets_per_image.get(img, [])):
            rows.append((-d.score, img, k, d.class_id, res.tp[k]))
    rows.sort()

    gt_counts: dict[int, int] = {}
    for gts in gts_per_image.values():
        for g in gts:
            gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1
    det_classes = {r[3] for r in rows}
    ap = {c: average_precision([r[4] for r in rows if r[3] == c], n) for c, n in sorted(gt_counts.items())}

    op = [r for r in rows if -r[0] > conf_thresh]
    tp = sum(1 for r in op if r[4])
    fp = len(op) - tp
    fn = n_gt_total - tp
    undefined = tp + fp == 0
    return EvalReport(
        ap=ap,
        map50=float(np.mean(list(ap.values()))),
        precision=1.0 if undefined else tp / (tp + fp),
        recall=tp / n_gt_total,
        tp=tp, fp=fp, fn=fn,
        precision_undefined=undefined,
        classes_without_gt=sorted(det_classes - set(gt_counts)),
        conf_thresh=conf_thresh,
    )


# ---------------------------------------------------------------- tables

SEP = "  "
ABLATION_HEADER = ("Configuration", "mAP", "Precision", "Recall", "Training Time (Epochs)", "Loss Increase")
COMPARISON_HEADER = ("Model Name", "mAP", "Precision", "Recall")


def pct(v: float) -> str:
    return f"{100.0 * v:.1f}%"


def _cells(row, style: str) -> list[str]:
    label, m, p, r, *rest = row
    cells = [str(label), pct(m), pct(p), pct(r)]
    if style == "ablation":
        epochs, increase = rest
        cells.append(str(epochs))
        cells.append("-" if increase is None else pct(increase))
    return cells


def render_table(rows, style: str = "comparison", align: bool = False) -> str:
    """Render Table-I (``ablation``) or Table-II (``comparison``) style text.

    Ablation rows are ``(label, map, precision, recall, epochs, loss_increase)``
    with ``loss_increase=None`` for the baseline; comparison rows are
    ``(label, map, precision, recall)``.  Cells are joined by two spaces;
    ``align`` additionally pads columns to a common width.
    """
    if style not in ("ablation", "comparison"):
        raise ValueError(f"unknown table style {style!r}")
    header = list(ABLATION_HEADER if style == "ablation" else COMPARISON_HEADER)
    body = [_cells(r, style) for r in rows]
    if align:
        widths = [max(len(c[i]) for c in [header] + body) for i in range(len(header))]
        fmt = lambda cells: SEP.join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    else:
        fmt = SEP.join
    return "\n".join(fmt(c) for c in [header] + body) + "\n"


COMPARISON_ROWS = [
    ("Custom YOLOv8 Model", 0.995, 0.981, 0.988),
    ("Standard YOLOv8 Model", 0.962, 0.978, 0.965),
    ("SSD MobileNet V2", 0.945, 0.960, 0.950),
    ("Mask R-CNN", 0.958, 0.975, 0.963),
    ("Faster R-CNN", 0.970, 0.977, 0.969),
    ("EfficientDet", 0.932, 0.945, 0.938),
]
