"""Letterbox preprocessing, box-aware augmentation and PPM image I/O.

Images are float arrays of shape (H, W, 3) with values in [0, 1].  Boxes travel
as a :class:`BoxList` of normalized ``(cx, cy, w, h)`` rows plus class ids.
Pixel coordinates are continuous: pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)``
and its center sits at ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FILL = 0.5
MIN_BOX_PX = 2.0
LUMA = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    pass


@dataclass
class BoxList:
    cls: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    xywh: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        self.xywh = np.asarray(self.xywh, dtype=np.float64).reshape(-1, 4)
        if len(self.cls) != len(self.xywh):
            raise ValueError("class ids and boxes differ in length")

    def __len__(self):
        return len(self.cls)

    def xyxy(self) -> np.ndarray:
        return xywh_to_xyxy(self.xywh)

    def copy(self) -> "BoxList":
        return BoxList(self.cls.copy(), self.xywh.copy())


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_xywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


@dataclass(frozen=True)
class AugmentConfig:
    rot_deg_max: float = 20.0
    scale_min: float = 0.8
    scale_max: float = 1.2
    brightness_max: float = 0.2
    saturation_max: float = 0.1

    def __post_init__(self):
        if self.rot_deg_max < 0:
            raise ValueError("rot_deg_max must be >= 0")
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError("need 0 < scale_min <= scale_max")
        if self.brightness_max < 0 or self.saturation_max < 0:
            raise ValueError("jitter magnitudes must be >= 0")


@dataclass(frozen=True)
class AugmentParams:
    theta_deg: float = 0.0
    scale: float = 1.0
    brightness: float = 0.0
    saturation: float = 0.0


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float = 1.0
    pad_x: float = 0.0
    pad_y: float = 0.0
    orig_w: int = 0
    orig_h: int = 0

    def to_target(self, xyxy: np.ndarray) -> np.ndarray:
        xyxy = np.asarray(xyxy, dtype=np.float64)
        pad = np.array([self.pad_x, self.pad_y, self.pad_x, self.pad_y])
        return xyxy * self.scale + pad


IDENTITY = LetterboxTransform()


# ---------------------------------------------------------------- resampling

def sample_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float = FILL) -> np.ndarray:
    """Sample ``img`` at continuous pixel-center coordinates.

    ``sx``/``sy`` are in index space (pixel ``j`` has its center at ``x == j``).
    Taps outside the frame read ``fill``.
    """
    h, w = img.shape[:2]
    # a fill border lets out-of-frame taps be plain gathers
    padded = np.pad(np.asarray(img, dtype=np.float64), ((1, 2), (1, 2), (0, 0)), constant_values=fill)
    sx = np.clip(sx, -1.0, float(w))
    sy = np.clip(sy, -1.0, float(h))
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    stride = w + 3
    flat = padded.reshape(stride * (h + 3), -1)
    idx = (y0.astype(np.intp) + 1) * stride + x0.astype(np.intp) + 1

    def tap(offset):
        return np.take(flat, idx + offset, axis=0).reshape(idx.shape + img.shape[2:])

    top = tap(0) * (1 - fx) + tap(1) * fx
    bottom = tap(stride) * (1 - fx) + tap(stride + 1) * fx
    return top * (1 - fy) + bottom * fy


def _affine_resample(img: np.ndarray, inv: np.ndarray, out_hw: tuple[int, int], fill: float = FILL) -> np.ndarray:
    """Resample with ``inv`` mapping continuous output coords to input coords."""
    oh, ow = out_hw
    yy, xx = np.meshgrid(np.arange(oh) + 0.5, np.arange(ow) + 0.5, indexing="ij")
    sx = inv[0, 0] * xx + inv[0, 1] * yy + inv[0, 2] - 0.5
    sy = inv[1, 0] * xx + inv[1, 1] * yy + inv[1, 2] - 0.5
    return sample_bilinear(img, sx, sy, fill)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    sx = np.arange(out_w) + 0.5
    sy = np.arange(out_h) + 0.5
    sx = np.clip(sx * (w / out_w) - 0.5, 0, w - 1)
    sy = np.clip(sy * (h / out_h) - 0.5, 0, h - 1)
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    return sample_bilinear(img, gx, gy)


# ---------------------------------------------------------------- letterbox

def letterbox(img: np.ndarray, target: int) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize onto a ``target`` x ``target`` gray canvas."""
    if target < 1:
        raise ImageError("target must be >= 1")
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ImageError(f"zero-extent image {h}x{w}")
    scale = target / max(h, w)
    nh = min(target, max(1, round(h * scale)))
    nw = min(target, max(1, round(w * scale)))
    pad_x = (target - nw) // 2
    pad_y = (target - nh) // 2
    canvas = np.full((target, target, img.shape[2]), FILL)
    canvas[pad_y:pad_y + nh, pad_x:pad_x + nw] = resize_bilinear(img, nh, nw)
    return canvas, LetterboxTransform(scale, float(pad_x), float(pad_y), w, h)


def unletterbox_boxes(xyxy: np.ndarray, t: LetterboxTransform) -> np.ndarray:
    """Map target-space pixel boxes back into the original frame."""
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    pad = np.array([t.pad_x, t.pad_y, t.pad_x, t.pad_y])
    out = (xyxy - pad) / t.scale
    if t.orig_w and t.orig_h:
        out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, t.orig_w)
        out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, t.orig_h)
    return out


# ---------------------------------------------------------------- geometry

def _clip_and_filter(boxes: BoxList, xyxy_px: np.ndarray, w: int, h: int) -> BoxList:
    xyxy_px = xyxy_px.copy()
    xyxy_px[:, [0, 2]] = np.clip(xyxy_px[:, [0, 2]], 0, w)
    xyxy_px[:, [1, 3]] = np.clip(xyxy_px[:, [1, 3]], 0, h)
    keep = ((xyxy_px[:, 2] - xyxy_px[:, 0]) >= MIN_BOX_PX) & ((xyxy_px[:, 3] - xyxy_px[:, 1]) >= MIN_BOX_PX)
    norm = xyxy_px[keep] / np.array([w, h, w, h])
    return BoxList(boxes.cls[keep], xyxy_to_xywh(norm))


def rotation_matrix(theta_deg: float, w: int, h: int) -> np.ndarray:
    """Forward 2x3 map for rotation by ``theta_deg`` about the frame center."""
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    cx, cy = w / 2, h / 2
    return np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])


def _invert_affine(m: np.ndarray) -> np.ndarray:
    a = np.vstack([m, [0, 0, 1]])
    return np.linalg.inv(a)[:2]


def rotate_boxes(boxes: BoxList, theta_deg: float, w: int, h: int) -> BoxList:
    if len(boxes) == 0:
        return boxes.copy()
    m = rotation_matrix(theta_deg, w, h)
    xyxy = boxes.xyxy() * np.array([w, h, w, h])
    x1, y1, x2, y2 = xyxy.T
    corners = np.stack([np.stack([x1, y1], -1), np.stack([x2, y1], -1),
                        np.stack([x2, y2], -1), np.stack([x1, y2], -1)], axis=1)
    rot = corners @ m[:, :2].T + m[:, 2]
    hull = np.concatenate([rot.min(axis=1), rot.max(axis=1)], axis=1)
    return _clip_and_filter(boxes, hull, w, h)


def rotate_aug(img: np.ndarray, boxes: BoxList, theta_deg: float) -> tuple[np.ndarray, BoxList]:
    """Rotate about the image center; boxes become the hull of their rotated corners."""
    if theta_deg == 0:
        return img.copy(), boxes.copy()
    h, w = img.shape[:2]
    inv = _invert_affine(rotation_matrix(theta_deg, w, h))
    return _affine_resample(img, inv, (h, w)), rotate_boxes(boxes, theta_deg, w, h)


def scale_boxes(boxes: BoxList, s: float, w: int, h: int) -> BoxList:
    if len(boxes) == 0:
        return boxes.copy()
    xyxy = boxes.xyxy()
    xyxy = 0.5 + s * (xyxy - 0.5)
    return _clip_and_filter(boxes, xyxy * np.array([w, h, w, h]), w, h)


def scale_aug(img: np.ndarray, boxes: BoxList, s: float) -> tuple[np.ndarray, BoxList]:
    """Zoom by ``s`` about the center; the frame extent stays fixed."""
    if s == 1.0:
        return img.copy(), boxes.copy()
    h, w = img.shape[:2]
    cx, cy = w / 2, h / 2
    inv = np.array([[1 / s, 0, cx - cx / s], [0, 1 / s, cy - cy / s]])
    return _affine_resample(img, inv, (h, w)), scale_boxes(boxes, s, w, h)


def color_jitter(img: np.ndarray, brightness: float, saturation: float) -> np.ndarray:
    out = img * (1.0 + brightness)
    if saturation != 0:
        luma = (out @ LUMA)[..., None]
        out = luma + (1.0 + saturation) * (out - luma)
    return np.clip(out, 0.0, 1.0)


def sample_augment_params(cfg: AugmentConfig, rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        theta_deg=float(rng.uniform(-cfg.rot_deg_max, cfg.rot_deg_max)),
        scale=float(rng.uniform(cfg.scale_min, cfg.scale_max)),
        brightness=float(rng.uniform(-cfg.brightness_max, cfg.brightness_max)),
        saturation=float(rng.uniform(-cfg.saturation_max, cfg.saturation_max)),
    )


def apply_augment(img: np.ndarray, boxes: BoxList, p: AugmentParams) -> tuple[np.ndarray, BoxList]:
    img, boxes = rotate_aug(img, boxes, p.theta_deg)
    img, boxes = scale_aug(img, boxes, p.scale)
    return color_jitter(img, p.brightness, p.saturation), boxes


def augment(img: np.ndarray, boxes: BoxList, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[np.ndarray, BoxList]:
    """Random rotate -> scale -> color jitter, parameters drawn from ``rng``."""
    return apply_augment(img, boxes, sample_augment_params(cfg, rng))


# ---------------------------------------------------------------- PPM I/O

def write_ppm(path: str | Path, img: np.ndarray) -> None:
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError("truncated PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise ImageError(f"{path}: not a binary PPM (P6)")
    (w, h, maxval), off = _ppm_tokens(buf[2:], 3)
    if maxval != 255:
        raise ImageError(f"{path}: only 8-bit PPM supported")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=2 + off)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0
