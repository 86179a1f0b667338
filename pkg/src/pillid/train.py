"""Target assignment, the box/objectness/class loss, SGD training and ablations."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .detector import Model, ModelConfig, build_model
from .imaging import AugmentConfig, BoxList, apply_augment, letterbox, sample_augment_params
from .metrics import EvalReport, GroundTruth, evaluate
from .postprocess import DecodeConfig, detect

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    batch_size: int = 32
    epochs: int = 50
    decay_epoch: int = 30
    decay_factor: float = 0.1
    finetune_lr: float = 0.0001
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_noobj: float = 0.5
    lambda_cls: float = 1.0
    augment_enabled: bool = True
    seed: int = 0
    mode: str = "scratch"
    convergence_ratio: float = 1.05

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.decay_epoch >= self.epochs:
            raise ValueError("decay_epoch must be < epochs")
        if min(self.lambda_box, self.lambda_obj, self.lambda_noobj, self.lambda_cls) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.mode not in ("scratch", "finetune"):
            raise ValueError(f"mode must be scratch or finetune, got {self.mode!r}")


@dataclass
class LossBreakdown:
    box: float = 0.0
    obj: float = 0.0  # lambda_obj * positive + lambda_noobj * negative
    cls: float = 0.0
    total: float = 0.0


@dataclass
class Targets:
    values: np.ndarray      # [N, S, S, B*5 + C]
    mask: np.ndarray        # [N, S, S, B] responsibility
    collisions: int = 0


def lr_schedule(epoch: int, cfg: TrainConfig, mode: str | None = None) -> float:
    mode = mode or cfg.mode
    if mode == "finetune":
        return cfg.finetune_lr
    return cfg.lr0 if epoch < cfg.decay_epoch else cfg.lr0 * cfg.decay_factor


# ---------------------------------------------------------------- targets

def assign_targets(boxes_per_image: list[BoxList], grid: int, boxes_per_cell: int = 1,
                   num_classes: int = 32) -> Targets:
    """The cell holding each box center owns it; a later box landing in an
    occupied cell is dropped and counted."""
    n = len(boxes_per_image)
    b = boxes_per_cell
    values = np.zeros((n, grid, grid, 5 * b + num_classes))
    mask = np.zeros((n, grid, grid, b), dtype=bool)
    collisions = 0
    for i, boxes in enumerate(boxes_per_image):
        for c, (cx, cy, w, h) in zip(boxes.cls, boxes.xywh):
            gx = min(int(math.floor(cx * grid)), grid - 1)
            gy = min(int(math.floor(cy * grid)), grid - 1)
            if mask[i, gy, gx, 0]:
                collisions += 1
                continue
            mask[i, gy, gx, 0] = True
            values[i, gy, gx, 0:5] = (cx * grid - gx, cy * grid - gy, w, h, 1.0)
            values[i, gy, gx, 5 * b + int(c)] = 1.0
    return Targets(values, mask, collisions)


# ---------------------------------------------------------------- loss

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def yolo_loss(pred: np.ndarray, targets: Targets, cfg: TrainConfig = TrainConfig(),
              boxes_per_cell: int = 1) -> tuple[LossBreakdown, np.ndarray]:
    """Loss terms and the gradient w.r.t. the raw predictions.

    Each term is summed over the grid and over the batch: squared
    error on sigmoid box outputs, binary cross-entropy on sigmoid objectness
    and softmax cross-entropy on classes for responsible slots.
    """
    pred = np.asarray(pred, dtype=np.float64)
    tv, mask = targets.values, targets.mask
    if pred.shape != tv.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {tv.shape}")
    b = boxes_per_cell
    grad = np.zeros_like(pred)

    box = pos = neg = cls = 0.0
    resp_any = mask.any(axis=-1)
    for k in range(b):
        m = mask[..., k]
        sl = slice(5 * k, 5 * k + 5)
        sig = _sigmoid(pred[..., sl])
        # box: squared error in sigmoid space on responsible slots
        diff = (sig[..., :4] - tv[..., 5 * k:5 * k + 4]) * m[..., None]
        box += float(np.sum(diff * diff))
        grad[..., 5 * k:5 * k + 4] = cfg.lambda_box * 2 * diff * sig[..., :4] * (1 - sig[..., :4])
        # objectness BCE with probabilities floored away from log(0)
        p = sig[..., 4]
        p_pos_ok = p > EPS
        p_neg_ok = (1 - p) > EPS
        pos_terms = -np.log(np.maximum(p, EPS))
        neg_terms = -np.log(np.maximum(1 - p, EPS))
        pos += float(np.sum(pos_terms[m]))
        neg += float(np.sum(neg_terms[~m]))
        g_pos = np.where(p_pos_ok, -(1 - p), 0.0)
        g_neg = np.where(p_neg_ok, p, 0.0)
        grad[..., 5 * k + 4] = np.where(m, cfg.lambda_obj * g_pos, cfg.lambda_noobj * g_neg)

    logits = pred[..., 5 * b:]
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z)
    prob /= prob.sum(axis=-1, keepdims=True)
    onehot = tv[..., 5 * b:]
    p_true = np.sum(prob * onehot, axis=-1)
    ce = -np.log(np.maximum(p_true, EPS))
    cls = float(np.sum(ce[resp_any]))
    ok = (p_true > EPS) & resp_any
    grad[..., 5 * b:] = cfg.lambda_cls * (prob - onehot) * ok[..., None]

    obj = cfg.lambda_obj * pos + cfg.lambda_noobj * neg
    total = cfg.lambda_box * box + obj + cfg.lambda_cls * cls
    return LossBreakdown(box, obj, cls, total), grad


# ---------------------------------------------------------------- training

@dataclass
class EpochRow:
    epoch: int
    lr: float
    loss: LossBreakdown
    val_map: float | None = None
    val_p: float | None = None
    val_r: float | None = None
    val_loss: float | None = None


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    collisions: int = 0
    convergence_ratio: float = 1.05

    @property
    def epochs_to_converge(self) -> int | None:
        """First epoch (1-based) whose mean total loss is within the ratio of the run minimum."""
        if not self.rows:
            return None
        best = min(r.loss.total for r in self.rows)
        for r in self.rows:
            if r.loss.total < self.convergence_ratio * best or r.loss.total == best:
                return r.epoch + 1
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "box", "obj", "cls", "total", "val_map", "val_p", "val_r"])
        opt = lambda v: "" if v is None else f"{v:.6f}"
        for r in self.rows:
            w.writerow([r.epoch, f"{r.lr:.6g}", f"{r.loss.box:.6f}", f"{r.loss.obj:.6f}",
                        f"{r.loss.cls:.6f}", f"{r.loss.total:.6f}", opt(r.val_map), opt(r.val_p), opt(r.val_r)])
        return buf.getvalue()


def to_batch(images: list[np.ndarray]) -> np.ndarray:
    """HWC float images -> NCHW float32 batch."""
    return np.stack(images).transpose(0, 3, 1, 2).astype(np.float32)


def prepare(samples, input_size: int):
    """Letterbox samples whose frame differs from the model input size."""
    out = []
    for s in samples:
        img, boxes = s.image, s.boxes
        h, w = img.shape[:2]
        if (h, w) != (input_size, input_size):
            img, t = letterbox(img, input_size)
            xyxy = boxes.xyxy() * np.array([w, h, w, h])
            xyxy = t.to_target(xyxy) / input_size
            from .imaging import xyxy_to_xywh
            boxes = BoxList(boxes.cls, xyxy_to_xywh(xyxy))
        out.append((img, boxes))
    return out


def sgd_step(model: Model, lr: float) -> None:
    if lr == 0:
        return
    for layer in model.layers:
        for name, p in layer.params.items():
            p -= np.asarray(lr * layer.grads[name], dtype=p.dtype)


def batch_loss(model: Model, images, boxes, cfg: TrainConfig, train: bool):
    mc = model.config
    targets = assign_targets(boxes, mc.grid_size, mc.boxes_per_cell, mc.num_classes)
    pred = model.forward(to_batch(images), train=train)
    loss, grad = yolo_loss(pred, targets, cfg, mc.boxes_per_cell)
    return loss, grad, targets


def predict(model: Model, images: list[np.ndarray], batch_size: int = 32) -> np.ndarray:
    outs = [model.forward(to_batch(images[i:i + batch_size]), train=False)
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate_model(model: Model, samples, decode_cfg: DecodeConfig = DecodeConfig(),
                   train_cfg: TrainConfig | None = None) -> tuple[EvalReport, float | None]:
    """Detection metrics on prepared ``(image, boxes)`` pairs, plus per-image loss if ``train_cfg``."""
    size = model.config.input_size
    images = [img for img, _ in samples]
    preds = predict(model, images)
    dets, gts = {}, {}
    for k, ((img, boxes), pred) in enumerate(zip(samples, preds)):
        key = f"{k:06d}"
        dets[key] = detect(pred, cfg=decode_cfg, input_size=size, boxes_per_cell=model.config.boxes_per_cell)
        gts[key] = [GroundTruth(int(c), tuple(b)) for c, b in zip(boxes.cls, boxes.xyxy() * size)]
    report = evaluate(dets, gts, decode_cfg.conf_thresh)
    val_loss = None
    if train_cfg is not None:
        mc = model.config
        targets = assign_targets([b for _, b in samples], mc.grid_size, mc.boxes_per_cell, mc.num_classes)
        val_loss = yolo_loss(preds, targets, train_cfg, mc.boxes_per_cell)[0].total / len(samples)
    return report, val_loss


def train(model: Model, dataset, cfg: TrainConfig = TrainConfig(), val=None,
          augment_cfg: AugmentConfig = AugmentConfig(), decode_cfg: DecodeConfig = DecodeConfig(),
          on_epoch=None) -> tuple[Model, TrainLog]:
    """Plain SGD over ``dataset`` (samples with ``.image``/``.boxes``).

    Shuffling and augmentation draw from streams derived from ``cfg.seed``, so
    a run is a pure function of (model, dataset, cfg).
    """
    samples = prepare(dataset, model.config.input_size)
    if not samples:
        raise TrainingError("empty training set")
    if cfg.batch_size > len(samples):
        raise TrainingError(f"batch_size {cfg.batch_size} exceeds dataset size {len(samples)}")
    val_samples = prepare(val, model.config.input_size) if val else None
    tlog = TrainLog(convergence_ratio=cfg.convergence_ratio)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        sums = np.zeros(4)
        for bi, start in enumerate(range(0, len(samples), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images, boxes = [], []
            for i in idx:
                img, bx = samples[i]
                if cfg.augment_enabled:
                    rng = np.random.default_rng([cfg.seed, epoch, int(i), 1])
                    img, bx = apply_augment(img, bx, sample_augment_params(augment_cfg, rng))
                images.append(img)
                boxes.append(bx)
            loss, grad, targets = batch_loss(model, images, boxes, cfg, train=True)
            if not np.isfinite(loss.total):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi}")
            tlog.collisions += targets.collisions
            model.backward(grad)
            sgd_step(model, lr)
            sums += (loss.box, loss.obj, loss.cls, loss.total)
        mean = sums / len(samples)
        row = EpochRow(epoch, lr, LossBreakdown(*mean))
        if val_samples:
            rep, vloss = evaluate_model(model, val_samples, decode_cfg, cfg)
            row.val_map, row.val_p, row.val_r, row.val_loss = rep.map50, rep.precision, rep.recall, vloss
        tlog.rows.append(row)
        log.info("epoch %d lr %.2g loss %.4f (box %.4f obj %.4f cls %.4f)%s", epoch, lr, row.loss.total,
                 row.loss.box, row.loss.obj, row.loss.cls,
                 "" if row.val_map is None else f" val mAP {row.val_map:.3f}")
        if on_epoch is not None:
            on_epoch(row)
    return model, tlog


# ---------------------------------------------------------------- ablation

TOGGLES = ("full", "minus_batchnorm", "minus_augmentation", "minus_leaky_relu")
ROW_LABELS = {
    "full": "Full Custom Model",
    "minus_batchnorm": "Minus Batch Normalization",
    "minus_augmentation": "Minus Data Augmentation",
    "minus_leaky_relu": "Minus Leaky ReLU Activation",
}


@dataclass
class AblationRow:
    toggle: str
    report: EvalReport | None = None       # on the perturbed validation split
    clean_report: EvalReport | None = None
    epochs_to_converge: int | None = None
    final_val_loss: float | None = None
    loss_increase: float | None = None
    log: TrainLog | None = None
    error: str | None = None

    @property
    def label(self) -> str:
        return ROW_LABELS[self.toggle]

    def table_row(self):
        r = self.report
        return (self.label, r.map50, r.precision, r.recall, self.epochs_to_converge, self.loss_increase)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, toggle: str) -> AblationRow:
        return next(r for r in self.rows if r.toggle == toggle)

    def render(self, align: bool = False) -> str:
        from .metrics import render_table
        return render_table([r.table_row() for r in self.rows if r.error is None], "ablation", align)


def toggle_configs(toggle: str, model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[ModelConfig, TrainConfig]:
    if toggle == "full":
        return model_cfg, cfg
    if toggle == "minus_batchnorm":
        return replace(model_cfg, use_batchnorm=False), cfg
    if toggle == "minus_augmentation":
        return model_cfg, replace(cfg, augment_enabled=False)
    if toggle == "minus_leaky_relu":
        return replace(model_cfg, activation="identity"), cfg
    raise ValueError(f"unknown ablation toggle {toggle!r}")


def perturb_split(samples, seed: int = 1234, rotation_deg: float = 20.0, brightness: float = 0.2):
    """Rotation/brightness perturbed copy of prepared ``(image, boxes)`` pairs."""
    from .imaging import AugmentParams
    out = []
    for i, (img, boxes) in enumerate(samples):
        rng = np.random.default_rng([seed, i])
        p = AugmentParams(theta_deg=float(rng.uniform(-rotation_deg, rotation_deg)), scale=1.0,
                          brightness=float(rng.uniform(-brightness, brightness)), saturation=0.0)
        out.append(apply_augment(img, boxes, p))
    return out


def ablate(cfg: TrainConfig, dataset, val, toggles=TOGGLES, model_cfg: ModelConfig = ModelConfig(),
           decode_cfg: DecodeConfig = DecodeConfig(), perturb_seed: int = 1234,
           cache: dict | None = None) -> AblationReport:
    """One training run per toggle; 'full' is the baseline for the loss-increase column.

    ``cache`` maps toggle -> (model, log) for runs already done, so a
    baseline trained elsewhere can be reused.
    """
    toggles = list(toggles)
    if "full" not in toggles:
        raise ValueError("toggles must include 'full' as the baseline")
    val_samples = prepare(val, model_cfg.input_size)
    perturbed = perturb_split(val_samples, perturb_seed)
    rows = []
    for t in toggles:
        row = AblationRow(t)
        try:
            if cache and t in cache:
                model, tlog = cache[t]
            else:
                mc, tc = toggle_configs(t, model_cfg, cfg)
                model, tlog = train(build_model(mc), dataset, tc, decode_cfg=decode_cfg)
            row.log = tlog
            row.epochs_to_converge = tlog.epochs_to_converge
            row.clean_report, row.final_val_loss = evaluate_model(model, val_samples, decode_cfg, cfg)
            row.report, _ = evaluate_model(model, perturbed, decode_cfg)
        except (TrainingError, FloatingPointError, ValueError) as e:
            row.error = str(e)
            log.warning("ablation %s failed: %s", t, e)
        rows.append(row)
    base = next(r for r in rows if r.toggle == "full")
    for r in rows:
        if r.toggle != "full" and r.error is None and base.error is None:
            r.loss_increase = r.final_val_loss / base.final_val_loss - 1.0
    return AblationReport(rows)
