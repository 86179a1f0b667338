"""Synthetic pill scenes, a Pillbox-style catalog and annotation files.

Scenes are rendered analytically: each pill is a signed-distance shape (disk,
ellipse or stadium) with a seven-segment imprint glyph, composited over a
flat, gradient or noise background.  Label boxes are the tight extents of the
pixels whose centers fall inside the shape.
"""
from __future__ import annotations

import colorsys
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import BoxList, read_ppm, write_ppm, xyxy_to_xywh

log = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
SHAPES = ("round", "oval", "capsule")
N_GLYPHS = 10
BACKGROUNDS = ("flat", "gradient", "noise")
MAX_PLACEMENT_TRIES = 100
MAX_SCENE_IOU = 0.1


def _palette() -> list[tuple[str, tuple[float, float, float]]]:
    names = ["red", "orange", "yellow", "lime", "green", "teal",
             "cyan", "azure", "blue", "violet", "magenta"]
    out = [("white", (0.94, 0.94, 0.94))]
    for k, name in enumerate(names):
        r, g, b = colorsys.hsv_to_rgb(k / len(names), 0.8, 0.92)
        out.append((name, (round(r, 4), round(g, 4), round(b, 4))))
    return out


PALETTE = _palette()
COLOR_NAMES = [n for n, _ in PALETTE]
CAPACITY = len(SHAPES) * len(PALETTE) * N_GLYPHS

# seven-segment strokes on a unit cell [-0.5,0.5]x[-1,1]: a b c d e f g
_SEGMENTS = {
    "a": ((-0.5, -1), (0.5, -1)), "b": ((0.5, -1), (0.5, 0)), "c": ((0.5, 0), (0.5, 1)),
    "d": ((-0.5, 1), (0.5, 1)), "e": ((-0.5, 0), (-0.5, 1)), "f": ((-0.5, -1), (-0.5, 0)),
    "g": ((-0.5, 0), (0.5, 0)),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


class CatalogError(ValueError):
    pass


class LabelParseError(ValueError):
    pass


@dataclass(frozen=True)
class PillRecord:
    class_id: int
    shape: str
    color: tuple[float, float, float]
    imprint: int
    size_mm: float
    active_ingredient: str
    manufacturer: str

    @property
    def color_name(self) -> str:
        return color_name(self.color)


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: BoxList
    image_id: str
    dropped: int = 0


@dataclass
class DatasetManifest:
    root: Path
    catalog_path: str
    entries: list[tuple[str, str, str]] = field(default_factory=list)  # (split, image, label)
    seed: int = 0
    generator_version: str = GENERATOR_VERSION
    meta: dict[str, str] = field(default_factory=dict)

    def split(self, name: str) -> list[tuple[str, str]]:
        return [(img, lab) for s, img, lab in self.entries if s == name]


def color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=np.float64)
    dists = [np.linalg.norm(rgb - np.asarray(c)) for _, c in PALETTE]
    return PALETTE[int(np.argmin(dists))][0]


# ---------------------------------------------------------------- catalog

def make_catalog(num_classes: int = 32, seed: int = 0) -> list[PillRecord]:
    if num_classes < 1:
        raise CatalogError("num_classes must be >= 1")
    if num_classes > CAPACITY:
        raise CatalogError(f"num_classes {num_classes} exceeds catalog capacity {CAPACITY}")
    rng = np.random.default_rng(seed)
    pairs = [(s, c) for s in range(len(SHAPES)) for c in range(len(PALETTE))]
    order = rng.permutation(len(pairs))
    glyphs = {p: list(rng.permutation(N_GLYPHS)) for p in range(len(pairs))}
    lo_hi = {"round": (8.0, 11.0), "oval": (10.0, 13.0), "capsule": (12.0, 15.0)}
    records = []
    for k in range(num_classes):
        p = int(order[k % len(pairs)])
        s, c = pairs[p]
        shape = SHAPES[s]
        lo, hi = lo_hi[shape]
        records.append(PillRecord(
            class_id=k,
            shape=shape,
            color=PALETTE[c][1],
            imprint=int(glyphs[p][k // len(pairs)]),
            size_mm=round(float(rng.uniform(lo, hi)), 1),
            active_ingredient=f"ingredient-{k}",
            manufacturer=f"maker-{k}",
        ))
    return records


def save_catalog(path: str | Path, catalog: list[PillRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "shape", "r", "g", "b", "imprint", "size_mm",
                    "active_ingredient", "manufacturer"])
        for r in catalog:
            w.writerow([r.class_id, r.shape, f"{r.color[0]:.4f}", f"{r.color[1]:.4f}",
                        f"{r.color[2]:.4f}", r.imprint, f"{r.size_mm:.1f}",
                        r.active_ingredient, r.manufacturer])


def load_catalog(path: str | Path) -> list[PillRecord]:
    with open(path, newline="") as fh:
        return [
            PillRecord(int(row["class_id"]), row["shape"],
                       (float(row["r"]), float(row["g"]), float(row["b"])),
                       int(row["imprint"]), float(row["size_mm"]),
                       row["active_ingredient"], row["manufacturer"])
            for row in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- rendering

def _pill_axes(rec: PillRecord, px_per_mm: float) -> tuple[float, float]:
    """Semi-axes (along, across) in pixels."""
    long = rec.size_mm * px_per_mm / 2
    ratio = {"round": 1.0, "oval": 1.5, "capsule": 2.3}[rec.shape]
    return long, long / ratio


def shape_sdf(shape: str, u: np.ndarray, v: np.ndarray, a: float, b: float) -> np.ndarray:
    """Signed distance (pixels, negative inside) in the pill's local frame."""
    if shape == "round":
        return np.hypot(u, v) - a
    if shape == "capsule":
        return np.hypot(np.maximum(np.abs(u) - (a - b), 0.0), v) - b
    # ellipse: first-order distance estimate, exact sign
    k0 = np.hypot(u / a, v / b)
    k1 = np.hypot(u / (a * a), v / (b * b))
    return k0 * (k0 - 1.0) / np.maximum(k1, 1e-12)


def _segment_dist(px, py, p0, p1):
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _extent(angle: float, a: float, b: float) -> tuple[float, float]:
    c, s = abs(math.cos(angle)), abs(math.sin(angle))
    return a * c + b * s, a * s + b * c


def _background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.8) + rng.uniform(-0.05, 0.05, size=3)
    if kind == "flat":
        img = np.broadcast_to(base, (size, size, 3)).copy()
    elif kind == "gradient":
        other = rng.uniform(0.2, 0.8) + rng.uniform(-0.05, 0.05, size=3)
        ang = rng.uniform(0, 2 * math.pi)
        yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        t = np.clip(0.5 + (xx - 0.5) * math.cos(ang) + (yy - 0.5) * math.sin(ang), 0, 1)[..., None]
        img = base * (1 - t) + other * t
    elif kind == "noise":
        img = base + rng.normal(0.0, 0.04, size=(size, size, 3))
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _draw_pill(img, rec, cx, cy, angle, a, b):
    """Composite one pill; return its inside mask (pixel centers inside the shape)."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    sd = shape_sdf(rec.shape, u, v, a, b)
    alpha = np.clip(0.5 - sd, 0.0, 1.0)[..., None]
    # soft shading toward the rim
    rim = np.clip(1.0 + sd / max(b, 1.0), 0.0, 1.0)
    color = np.asarray(rec.color) * (1.0 - 0.25 * rim[..., None] ** 2)
    # imprint glyph: seven-segment digit scaled to the short axis
    gh = 0.45 * b
    gw = 0.5 * gh
    stroke = max(0.7, 0.12 * b)
    gd = np.full(sd.shape, np.inf)
    for seg in _DIGITS[rec.imprint]:
        (x0, y0), (x1, y1) = _SEGMENTS[seg]
        gd = np.minimum(gd, _segment_dist(u, v, (x0 * gw, y0 * gh), (x1 * gw, y1 * gh)))
    ink = np.clip(0.5 - (gd - stroke / 2), 0.0, 1.0)[..., None]
    color = color * (1 - 0.6 * ink)
    img[:] = img * (1 - alpha) + color * alpha
    return sd <= 0


def render_scene(catalog, rng: np.random.Generator, n_pills: int, bg_kind: str = "flat",
                 size: int = 160, classes=None, cell_grid: int | None = 10,
                 image_id: str = "scene") -> AnnotatedImage:
    """Draw ``n_pills`` non-overlapping pills and return the scene with tight boxes.

    ``classes`` optionally fixes the class of each pill.  ``cell_grid`` keeps
    pill centers in distinct cells of that grid.
    """
    if classes is None:
        classes = [int(rng.integers(len(catalog))) for _ in range(n_pills)]
    img = _background(bg_kind, size, rng)
    px_per_mm = size / 160 * rng.uniform(2.0, 2.6)
    placed: list[np.ndarray] = []
    cells: set[tuple[int, int]] = set()
    box_px, cls_out = [], []
    dropped = 0
    for cid in classes[:n_pills]:
        rec = catalog[cid]
        a, b = _pill_axes(rec, px_per_mm)
        angle = (math.pi / 2) * int(rng.integers(2)) + rng.uniform(-0.26, 0.26)
        if rec.shape == "round":
            angle = 0.0
        ex, ey = _extent(angle, a, b)
        for _ in range(MAX_PLACEMENT_TRIES):
            cx = rng.uniform(ex + 1, size - ex - 1)
            cy = rng.uniform(ey + 1, size - ey - 1)
            cand = np.array([cx - ex, cy - ey, cx + ex, cy + ey])
            if any(box_iou(cand, p) > MAX_SCENE_IOU for p in placed):
                continue
            if cell_grid:
                cell = (int(cx / size * cell_grid), int(cy / size * cell_grid))
                if cell in cells:
                    continue
            break
        else:
            dropped += 1
            continue
        if cell_grid:
            cells.add(cell)
        placed.append(cand)
        mask = _draw_pill(img, rec, cx, cy, angle, a, b)
        ys, xs = np.nonzero(mask)
        box_px.append([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
        cls_out.append(cid)
    img *= rng.uniform(0.7, 1.3)
    np.clip(img, 0.0, 1.0, out=img)
    if box_px:
        xywh = xyxy_to_xywh(np.asarray(box_px, dtype=np.float64) / size)
    else:
        xywh = np.zeros((0, 4))
    if dropped:
        log.debug("%s: %d pill(s) could not be placed", image_id, dropped)
    return AnnotatedImage(img, BoxList(cls_out, xywh), image_id, dropped)


def box_iou(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


# ---------------------------------------------------------------- labels

def format_labels(boxes: BoxList) -> str:
    return "".join(
        f"{c} {x:.6f} {y:.6f} {w:.6f} {h:.6f}\n" for c, (x, y, w, h) in zip(boxes.cls, boxes.xywh)
    )


def parse_labels(text: str, source: str = "<labels>") -> BoxList:
    cls, xywh = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 5:
                raise ValueError(f"expected 5 fields, got {len(parts)}")
            c = int(parts[0])
            box = [float(p) for p in parts[1:]]
            if c < 0 or not all(0.0 <= v <= 1.0 for v in box) or box[2] <= 0 or box[3] <= 0:
                raise ValueError("class must be >= 0 and box values normalized to [0, 1]")
        except ValueError as exc:
            raise LabelParseError(f"{source} line {lineno}: {exc}") from None
        cls.append(c)
        xywh.append(box)
    return BoxList(cls, xywh)


def save_labels(path: str | Path, boxes: BoxList) -> None:
    Path(path).write_text(format_labels(boxes))


def load_labels(path: str | Path) -> BoxList:
    return parse_labels(Path(path).read_text(), str(path))


# ---------------------------------------------------------------- splits

def _scene_rng(seed: int, split: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, split, index])


def _plan_split(n_images: int, n_classes: int, rng: np.random.Generator) -> list[list[int]]:
    """Pill counts per scene, classes dealt from reshuffled decks for coverage."""
    counts = rng.integers(1, 7, size=n_images)
    plan, deck = [], []
    for n in counts:
        scene = []
        for _ in range(n):
            if not deck:
                deck = list(rng.permutation(n_classes))
            scene.append(int(deck.pop()))
        plan.append(scene)
    return plan


def generate_split(catalog, n_train: int, n_val: int, seed: int, out_dir: str | Path,
                   size: int = 160) -> DatasetManifest:
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    save_catalog(root / "catalog.csv", catalog)
    manifest = DatasetManifest(root, "catalog.csv", seed=seed,
                               meta={"size": str(size), "classes": str(len(catalog)),
                                     "n_train": str(n_train), "n_val": str(n_val)})
    for split_idx, (split, n) in enumerate((("train", n_train), ("val", n_val))):
        plan = _plan_split(n, len(catalog), np.random.default_rng([seed, split_idx]))
        for i, classes in enumerate(plan):
            rng = _scene_rng(seed, split_idx, i)
            bg = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
            scene = render_scene(catalog, rng, len(classes), bg, size, classes=classes,
                                 image_id=f"{split}_{i:05d}")
            img_rel = f"images/{scene.image_id}.ppm"
            lab_rel = f"labels/{scene.image_id}.txt"
            write_ppm(root / img_rel, scene.image)
            save_labels(root / lab_rel, scene.boxes)
            manifest.entries.append((split, img_rel, lab_rel))
    write_manifest(root / "manifest.tsv", manifest)
    return manifest


def write_manifest(path: str | Path, m: DatasetManifest) -> None:
    lines = [f"catalog\t{m.catalog_path}", f"seed\t{m.seed}", f"generator_version\t{m.generator_version}"]
    lines += [f"{k}\t{v}" for k, v in m.meta.items()]
    lines += [f"{s}\t{img}\t{lab}" for s, img, lab in m.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    m = DatasetManifest(path.parent, "catalog.csv")
    for line in path.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) == 3:
            m.entries.append((parts[0], parts[1], parts[2]))
        elif len(parts) == 2:
            k, v = parts
            if k == "catalog":
                m.catalog_path = v
            elif k == "seed":
                m.seed = int(v)
            elif k == "generator_version":
                m.generator_version = v
            else:
                m.meta[k] = v
    return m


def load_split(manifest: DatasetManifest, split: str) -> list[AnnotatedImage]:
    out = []
    for img_rel, lab_rel in manifest.split(split):
        img = read_ppm(manifest.root / img_rel)
        out.append(AnnotatedImage(img, load_labels(manifest.root / lab_rel), Path(img_rel).stem))
    return out
