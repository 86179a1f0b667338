"""Grid decoding, IoU and class-wise greedy NMS."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import IDENTITY, LetterboxTransform, unletterbox_boxes


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in original pixels


@dataclass(frozen=True)
class DecodeConfig:
    conf_thresh: float = 0.25
    nms_iou_thresh: float = 0.45
    max_detections: int = 100

    def __post_init__(self):
        for name in ("conf_thresh", "nms_iou_thresh"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode(pred: np.ndarray, t: LetterboxTransform = IDENTITY, cfg: DecodeConfig = DecodeConfig(),
           input_size: int = 160, boxes_per_cell: int = 1) -> list[Detection]:
    """Turn one image's raw grid output ``[S, S, B*5 + C]`` into detections.

    Detections come back in slot order (box slot, then row-major cells); run
    :func:`nms` afterwards.
    """
    pred = np.asarray(pred, dtype=np.float64)
    s = pred.shape[0]
    b = boxes_per_cell
    cls_prob = softmax(pred[..., 5 * b:])
    best_cls = cls_prob.argmax(-1)
    best_p = cls_prob.max(-1)
    gy, gx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    out = []
    for k in range(b):
        raw = pred[..., 5 * k:5 * k + 5]
        sig = sigmoid(raw)
        score = sig[..., 4] * best_p
        bx = (gx + sig[..., 0]) / s
        by = (gy + sig[..., 1]) / s
        bw, bh = sig[..., 2], sig[..., 3]
        xyxy = np.stack([bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2], -1) * input_size
        keep = score > cfg.conf_thresh
        if not keep.any():
            continue
        orig = unletterbox_boxes(xyxy[keep], t)
        for (x1, y1, x2, y2), sc, c in zip(orig, score[keep], best_cls[keep]):
            if x2 > x1 and y2 > y1:
                out.append(Detection(int(c), float(sc), (float(x1), float(y1), float(x2), float(y2))))
    return out


def iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def score_order(dets: list[Detection]) -> list[int]:
    """Indices by descending score, ties to lower class id then input order."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, i))


def nms(dets: list[Detection], iou_thresh: float = 0.45, max_detections: int = 100) -> list[Detection]:
    order = score_order(dets)
    if not order:
        return []
    boxes = np.array([dets[i].box for i in order])
    classes = np.array([dets[i].class_id for i in order])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for r in range(len(order)):
        if not alive[r]:
            continue
        kept.append(dets[order[r]])
        if len(kept) == max_detections:
            break
        alive &= ~((classes == classes[r]) & (ious[r] > iou_thresh))
    return kept


def detect(pred, t=IDENTITY, cfg=DecodeConfig(), input_size=160, boxes_per_cell=1) -> list[Detection]:
    return nms(decode(pred, t, cfg, input_size, boxes_per_cell), cfg.nms_iou_thresh, cfg.max_detections)


def format_detections(image_id: str, dets: list[Detection]) -> str:
    return "".join(
        f"{image_id} {d.class_id} {d.score:.6f} {d.box[0]:.6f} {d.box[1]:.6f} {d.box[2]:.6f} {d.box[3]:.6f}\n"
        for d in dets
    )


def parse_detections(text: str) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        box = tuple(float(p) for p in parts[3:])
        out.setdefault(parts[0], []).append(Detection(int(parts[1]), float(parts[2]), box))
    return out
