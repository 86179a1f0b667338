"""Post-training 8-bit quantization with an integer-only inference path.

Weights are symmetric per-tensor int8, activations affine per-tensor int8,
biases int32 at scale ``s_in * s_w``.  Batch norm is folded into the
preceding convolution first.  Rescaling between layers uses a 31-bit
mantissa and a right shift with round-half-away-from-zero, so the integer
path is bit-exact and deterministic.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import Model, ModelConfig, config_from_manifest, config_to_manifest, read_kv
from .nn import Activation, BatchNorm2d, Conv2d, MaxPool2d, im2col

log = logging.getLogger(__name__)

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-8
QCHECKPOINT_VERSION = 1


class QuantizationError(ValueError):
    pass


def _sig9(x: float) -> float:
    """Round to the 9 significant digits the checkpoint stores."""
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0
    scheme: str = "symmetric"

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f"scale must be > 0, got {self.scale}")
        if self.scheme not in ("symmetric", "affine"):
            raise QuantizationError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "symmetric" and self.zero_point != 0:
            raise QuantizationError("symmetric scheme requires zero_point == 0")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantizationError(f"zero_point {self.zero_point} outside int8 range")

    @classmethod
    def symmetric(cls, max_abs: float) -> "QuantParams":
        return cls(_sig9(max(max_abs / 127.0, SCALE_FLOOR)), 0, "symmetric")

    @classmethod
    def affine(cls, lo: float, hi: float) -> "QuantParams":
        # the range always covers 0 so that zero padding is exact
        lo, hi = min(lo, 0.0), max(hi, 0.0)
        scale = _sig9(max((hi - lo) / 255.0, SCALE_FLOOR))
        zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
        return cls(scale, zp, "affine")

    @property
    def range(self) -> tuple[float, float]:
        return (QMIN - self.zero_point) * self.scale, (QMAX - self.zero_point) * self.scale


@dataclass
class QTensor:
    data: np.ndarray  # int8
    params: QuantParams

    @property
    def shape(self):
        return self.data.shape


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_tensor(t, p: QuantParams) -> QTensor:
    q = round_half_away(np.asarray(t, dtype=np.float64) / p.scale) + p.zero_point
    return QTensor(np.clip(q, QMIN, QMAX).astype(np.int8), p)


def dequantize_tensor(q: QTensor) -> np.ndarray:
    return (q.data.astype(np.float64) - q.params.zero_point) * q.params.scale


def quantize_multiplier(m: float) -> tuple[int, int]:
    """Real multiplier ``m > 0`` -> (mantissa in [2^30, 2^31), shift) with m ~= mantissa * 2^-shift."""
    if not m > 0:
        raise QuantizationError(f"multiplier must be > 0, got {m}")
    frac, exp = math.frexp(m)          # m = frac * 2^exp, frac in [0.5, 1)
    mantissa = int(round(frac * (1 << 31)))
    if mantissa == 1 << 31:
        mantissa //= 2
        exp += 1
    shift = 31 - exp
    if not 0 <= shift <= 62:
        raise QuantizationError(f"multiplier {m} out of fixed-point range")
    return mantissa, shift


def requantize(acc: np.ndarray, mantissa: int, shift: int) -> np.ndarray:
    """``round_half_away(acc * mantissa / 2^shift)`` in exact int64 arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    if np.abs(acc).max(initial=0) >= 1 << 31:
        raise OverflowError("int32 accumulator overflow")
    prod = acc * np.int64(mantissa)
    mag = (np.abs(prod) + (np.int64(1) << np.int64(shift - 1) if shift else 0)) >> np.int64(shift)
    return np.where(prod < 0, -mag, mag)


# ---------------------------------------------------------------- folded float graph

@dataclass
class FoldedConv:
    weight: np.ndarray          # [Cout, Cin, k, k] float64, BN folded in
    bias: np.ndarray            # [Cout]
    padding: int
    activation: str             # identity for the head
    alpha: float
    pool: bool


def fold(model: Model) -> list[FoldedConv]:
    """Collapse conv [+BN] [+act] [+pool] runs into single folded convolutions."""
    out: list[FoldedConv] = []
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            if layer.stride != 1:
                raise QuantizationError("only stride-1 convolutions are supported")
            out.append(FoldedConv(layer.params["weight"].astype(np.float64),
                                  layer.params["bias"].astype(np.float64), layer.padding, "identity", 0.0, False))
        elif isinstance(layer, BatchNorm2d):
            f = out[-1]
            k = layer.params["gamma"].astype(np.float64) / np.sqrt(
                layer.buffers["running_var"].astype(np.float64) + layer.eps)
            f.weight = f.weight * k[:, None, None, None]
            f.bias = (f.bias - layer.buffers["running_mean"]) * k + layer.params["beta"]
        elif isinstance(layer, Activation):
            out[-1].activation, out[-1].alpha = layer.name, layer.alpha
        elif isinstance(layer, MaxPool2d):
            if (layer.window, layer.stride) != (2, 2):
                raise QuantizationError("only 2x2/2 pooling is supported")
            out[-1].pool = True
        else:
            raise QuantizationError(f"unsupported layer {type(layer).__name__}")
    return out


def _pool2(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def _conv(x, f: FoldedConv):
    k = f.weight.shape[-1]
    cols, ho, wo = im2col(x, k, k, 1, f.padding)
    wmat = f.weight.transpose(2, 3, 1, 0).reshape(-1, f.weight.shape[0])
    return (cols @ wmat).reshape(x.shape[0], ho, wo, -1)


def _act_float(y, f: FoldedConv):
    if f.activation == "leaky_relu":
        return np.maximum(y, f.alpha * y)
    if f.activation == "relu":
        return np.maximum(y, 0.0)
    return y


def folded_forward(graph: list[FoldedConv], images: np.ndarray, observe=None) -> np.ndarray:
    """Float forward through the folded graph; ``observe(edge, tensor)`` sees each edge."""
    x = np.ascontiguousarray(np.asarray(images, dtype=np.float64).transpose(0, 2, 3, 1))
    if observe:
        observe(0, x)
    for i, f in enumerate(graph):
        y = _conv(x, f) + f.bias
        if observe:
            observe(i + 1, y)
        y = _act_float(y, f)
        x = _pool2(y) if f.pool else y
    return x


# ---------------------------------------------------------------- calibration

@dataclass
class Calibration:
    activations: list[QuantParams]        # edge 0 is the input, edge i+1 the output of conv i
    weights: list[QuantParams]
    observed: list[tuple[float, float]]
    constant_edges: int = 0


def calibrate(model: Model, images: np.ndarray, batch_size: int = 16) -> Calibration:
    images = np.asarray(images)
    if images.ndim != 4 or len(images) < 1:
        raise QuantizationError("calibration needs at least one [N,3,H,W] image")
    graph = fold(model)
    lo = [math.inf] * (len(graph) + 1)
    hi = [-math.inf] * (len(graph) + 1)

    def observe(edge, t):
        lo[edge] = min(lo[edge], float(t.min()))
        hi[edge] = max(hi[edge], float(t.max()))

    for s in range(0, len(images), batch_size):
        folded_forward(graph, images[s:s + batch_size], observe)
    constant = 0
    acts = []
    for a, b in zip(lo, hi):
        if a == b:
            constant += 1
            log.warning("constant activation edge (value %g), scale floored", a)
        acts.append(QuantParams.affine(a, b))
    weights = [QuantParams.symmetric(float(np.abs(f.weight).max())) for f in graph]
    return Calibration(acts, weights, list(zip(lo, hi)), constant)


# ---------------------------------------------------------------- quantized model

@dataclass
class QLayer:
    weight: np.ndarray        # int8 [Cout, Cin, k, k]
    bias: np.ndarray          # int32 [Cout]
    w_params: QuantParams
    in_params: QuantParams
    out_params: QuantParams
    mantissa: int
    shift: int
    padding: int
    activation: str
    alpha: float
    pool: bool
    lut: np.ndarray = field(default=None, repr=False)  # leaky relu table for x - zp in [-255, 0]

    def __post_init__(self):
        if self.activation == "leaky_relu" and self.lut is None:
            self.lut = round_half_away(self.alpha * np.arange(-255, 1)).astype(np.int64)


@dataclass
class QuantizedModel:
    config: ModelConfig
    layers: list[QLayer]
    input_params: QuantParams

    @property
    def head_params(self) -> QuantParams:
        return self.layers[-1].out_params

    def payload_bytes(self) -> int:
        """int8 weights + int32 biases + per-edge metadata (scale f32, zero point, mantissa, shift)."""
        tensors = sum(l.weight.size + 4 * l.bias.size for l in self.layers)
        meta = 8 * (len(self.layers) + 1) + 8 * len(self.layers) + 4 * len(self.layers)
        return tensors + meta


def quantize_model(model: Model, calib: Calibration) -> QuantizedModel:
    graph = fold(model)
    if len(calib.weights) != len(graph) or len(calib.activations) != len(graph) + 1:
        raise QuantizationError("calibration does not match the model")
    layers = []
    for i, f in enumerate(graph):
        wp, ip, op = calib.weights[i], calib.activations[i], calib.activations[i + 1]
        w = quantize_tensor(f.weight, wp).data
        bias_scale = ip.scale * wp.scale
        b = round_half_away(f.bias / bias_scale)
        if np.abs(b).max(initial=0) >= 1 << 31:
            raise QuantizationError(f"layer {i}: bias overflows int32")
        m, s = quantize_multiplier(bias_scale / op.scale)
        layers.append(QLayer(w, b.astype(np.int32), wp, ip, op, m, s, f.padding, f.activation, f.alpha, f.pool))
    return QuantizedModel(model.config, layers, calib.activations[0])


def _int_activation(q: np.ndarray, layer: QLayer) -> np.ndarray:
    zp = layer.out_params.zero_point
    if layer.activation == "leaky_relu":
        neg = q < zp
        return np.where(neg, zp + layer.lut[np.minimum(q - zp, 0) + 255], q)
    if layer.activation == "relu":
        return np.maximum(q, zp)
    return q


def quantize_input(images: np.ndarray, p: QuantParams) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64).transpose(0, 2, 3, 1)
    return quantize_tensor(x, p).data.astype(np.int64)


def _accumulate(q: np.ndarray, layer: QLayer) -> np.ndarray:
    x = (q - layer.in_params.zero_point).astype(np.float64)
    k = layer.weight.shape[-1]
    cols, ho, wo = im2col(x, k, k, 1, layer.padding)
    wmat = layer.weight.astype(np.float64).transpose(2, 3, 1, 0).reshape(-1, layer.weight.shape[0])
    return (cols @ wmat).astype(np.int64).reshape(x.shape[0], ho, wo, -1) + layer.bias


def quantized_forward(qm: QuantizedModel, images: np.ndarray, dequantize: bool = True) -> np.ndarray:
    """``[N,3,H,W]`` float images -> ``[N,S,S,D]`` head output.

    Products are accumulated as exact integers: every partial sum stays well
    below 2^53, so the float64 matrix product used for speed is exact and
    order-independent.

    A linear head is read straight from its int32 accumulator at scale
    ``s_in * s_w``, which skips one int8 rounding of the logits.  With
    ``dequantize=False`` the head is requantized to int8 instead.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    q = quantize_input(images, qm.input_params)
    last = len(qm.layers) - 1
    for i, layer in enumerate(qm.layers):
        acc = _accumulate(q, layer)
        if i == last and dequantize and layer.activation == "identity" and not layer.pool:
            return acc * (layer.in_params.scale * layer.w_params.scale)
        y = requantize(acc, layer.mantissa, layer.shift) + layer.out_params.zero_point
        y = np.clip(y, QMIN, QMAX)
        y = _int_activation(y, layer)
        q = _pool2(y) if layer.pool else y
    if not dequantize:
        return q.astype(np.int8)
    p = qm.head_params
    return (q - p.zero_point) * p.scale


# ---------------------------------------------------------------- fidelity

@dataclass
class FidelityReport:
    max_abs_dev: float
    mean_abs_dev: float
    top1_agreement: float
    detection_match_rate: float
    size_ratio: float
    latency_float: float
    latency_quant: float
    head_range: float = 0.0

    def lines(self) -> list[str]:
        return [
            f"max_abs_dev {self.max_abs_dev:.6f}",
            f"mean_abs_dev {self.mean_abs_dev:.6f}",
            f"top1_agreement {self.top1_agreement:.4f}",
            f"detection_match_rate {self.detection_match_rate:.4f}",
            f"size_ratio {self.size_ratio:.4f}",
            f"latency_float_ms {1e3 * self.latency_float:.3f}",
            f"latency_quant_ms {1e3 * self.latency_quant:.3f}",
            f"speedup {self.latency_float / self.latency_quant:.3f}",
        ]


def _median_latency(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def detections_match(a, b, iou_thresh: float = 0.9) -> bool:
    """True if the two detection sets pair up one-to-one by class at IoU >= ``iou_thresh``."""
    from .postprocess import iou
    if len(a) != len(b):
        return False
    free = list(b)
    for d in a:
        best = max((e for e in free if e.class_id == d.class_id), key=lambda e: iou(d.box, e.box), default=None)
        if best is None or iou(d.box, best.box) < iou_thresh:
            return False
        free.remove(best)
    return True


def fidelity_report(model: Model, qm: QuantizedModel, probes: np.ndarray, masks: np.ndarray | None = None,
                    runs: int = 30, quant_fn=quantized_forward, decode_cfg=None) -> FidelityReport:
    """Compare float and quantized heads on ``probes`` ([N,3,H,W]).

    Top-1 agreement is measured over ``masks`` (responsible cells, [N,S,S])
    when given, else over cells the float path scores as objects.
    """
    from .postprocess import DecodeConfig, detect, sigmoid
    decode_cfg = decode_cfg or DecodeConfig()
    probes = np.asarray(probes, dtype=np.float32)
    fp = np.concatenate([model.forward(probes[i:i + 16]) for i in range(0, len(probes), 16)]).astype(np.float64)
    qp = quant_fn(qm, probes)
    dev = np.abs(fp - qp)
    b, c = model.config.boxes_per_cell, model.config.num_classes
    if masks is None:
        masks = sigmoid(fp[..., 4]) > decode_cfg.conf_thresh
        if not masks.any():
            masks = np.ones(fp.shape[:3], dtype=bool)
    masks = np.asarray(masks, dtype=bool)
    top_f = fp[..., 5 * b:].argmax(-1)[masks]
    top_q = qp[..., 5 * b:].argmax(-1)[masks]
    agree = float(np.mean(top_f == top_q)) if top_f.size else 1.0
    size = model.config.input_size
    matched = [
        detections_match(detect(f, cfg=decode_cfg, input_size=size, boxes_per_cell=b),
                         detect(q, cfg=decode_cfg, input_size=size, boxes_per_cell=b))
        for f, q in zip(fp, qp)
    ]
    one = probes[:1]
    lat_f = _median_latency(lambda: model.forward(one), runs)
    lat_q = _median_latency(lambda: quant_fn(qm, one), runs)
    float_bytes = 4 * sum(p.size for _, _, p in model.parameters())
    return FidelityReport(
        max_abs_dev=float(dev.max()), mean_abs_dev=float(dev.mean()), top1_agreement=agree,
        detection_match_rate=float(np.mean(matched)), size_ratio=qm.payload_bytes() / float_bytes,
        latency_float=lat_f, latency_quant=lat_q,
    )


# ---------------------------------------------------------------- checkpoint

def _fmt_params(edge: str, p: QuantParams) -> str:
    return f"{edge}\t{p.scale:.9g}\t{p.zero_point}\t{p.scheme}"


def save_quantized(qm: QuantizedModel, path: str | Path) -> Path:
    """Directory with ``manifest.txt``, int8/int32 payloads and ``qparams.tsv``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    kv = {"format_version": str(QCHECKPOINT_VERSION), **config_to_manifest(qm.config)}
    table = [_fmt_params("input", qm.input_params)]
    for i, l in enumerate(qm.layers):
        (root / f"{i:03d}_weight.i8").write_bytes(np.ascontiguousarray(l.weight, dtype=np.int8).tobytes())
        (root / f"{i:03d}_bias.i32").write_bytes(np.ascontiguousarray(l.bias, dtype="<i4").tobytes())
        kv[f"layer{i}"] = (f"shape={','.join(map(str, l.weight.shape))};padding={l.padding};"
                           f"activation={l.activation};alpha={l.alpha!r};pool={int(l.pool)}")
        table.append(_fmt_params(f"weight{i}", l.w_params))
        table.append(_fmt_params(f"act{i + 1}", l.out_params))
    kv["layers"] = str(len(qm.layers))
    (root / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in kv.items()))
    (root / "qparams.tsv").write_text("edge\tscale\tzero_point\tscheme\n" + "\n".join(table) + "\n")
    return root


def load_quantized(path: str | Path) -> QuantizedModel:
    root = Path(path)
    kv = read_kv(root / "manifest.txt")
    if int(kv.get("format_version", -1)) != QCHECKPOINT_VERSION:
        raise QuantizationError(f"{root}: unsupported quantized checkpoint version")
    params = {}
    for line in (root / "qparams.tsv").read_text().splitlines()[1:]:
        edge, scale, zp, scheme = line.split("\t")
        params[edge] = QuantParams(float(scale), int(zp), scheme)
    layers = []
    prev = params["input"]
    for i in range(int(kv["layers"])):
        meta = dict(item.split("=", 1) for item in kv[f"layer{i}"].split(";"))
        shape = tuple(int(s) for s in meta["shape"].split(","))
        w = np.frombuffer((root / f"{i:03d}_weight.i8").read_bytes(), dtype=np.int8).reshape(shape).copy()
        b = np.frombuffer((root / f"{i:03d}_bias.i32").read_bytes(), dtype="<i4").astype(np.int32)
        wp, op = params[f"weight{i}"], params[f"act{i + 1}"]
        m, s = quantize_multiplier(prev.scale * wp.scale / op.scale)
        layers.append(QLayer(w, b, wp, prev, op, m, s, int(meta["padding"]), meta["activation"],
                             float(meta["alpha"]), meta["pool"] == "1"))
        prev = op
    return QuantizedModel(config_from_manifest(kv), layers, params["input"])
