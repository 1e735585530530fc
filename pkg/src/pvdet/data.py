"""Dataset ingestion and generation for panel surface defects.

Covers VOC-style XML annotations, defect-centered cropping of large raw
frames, letterboxing, four-image mosaic augmentation, anchor clustering
and a synthetic panel generator for desk-scale experiments. Images are
stored single-channel (the corpus is grayscale) and replicated to three
channels at the model input.

Dataset directory layout, shared by real and synthetic corpora:
    images/        one PNG or JPEG per image
    annotations/   one VOC-style XML per image
    splits/train.txt, splits/val.txt   one image id per line
"""

import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, GenerationError
from .models import FALLBACK_ANCHORS

CLASS_NAMES = ("broken", "hot_spot", "black_border", "scratch",
               "no_electricity")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}

PAD_VALUE = 114
CROP_SIZE = 600
CLUSTER_DILATE = 50

# defect extent ranges (w, h) in pixels at the 600-crop reference scale;
# large classes are clamped to fit smaller canvases
DEFECT_SIZE_RANGES = {
    "scratch": ((3, 6), (24, 40)),
    "black_border": ((3, 6), (30, 44)),
    "broken": ((80, 130), (160, 260)),
    "hot_spot": ((120, 180), (160, 260)),
    "no_electricity": ((280, 420), (380, 560)),
}


@dataclass
class AnnotatedImage:
    """Grayscale pixel buffer plus ground-truth boxes.

    ``boxes`` is (N, 5) float64: class id, cx, cy, w, h in pixels.
    """
    image_id: str
    image: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    def boxes_in_bounds(self):
        if not len(self.boxes):
            return True
        b = self.boxes
        x1 = b[:, 1] - b[:, 3] / 2
        y1 = b[:, 2] - b[:, 4] / 2
        x2 = b[:, 1] + b[:, 3] / 2
        y2 = b[:, 2] + b[:, 4] / 2
        return bool((x1 >= -1e-6).all() and (y1 >= -1e-6).all()
                    and (x2 <= self.width + 1e-6).all()
                    and (y2 <= self.height + 1e-6).all())


@dataclass
class DatasetSplit:
    train: list
    val: list

    def __post_init__(self):
        overlap = set(self.train) & set(self.val)
        if overlap:
            raise AnnotationError("<split>", "splits",
                                  f"train/val overlap: {sorted(overlap)[:5]}")


def to_model_input(image):
    """uint8 (H, W) grayscale -> float32 (3, H, W) in [0, 1]."""
    f = image.astype(np.float32) / 255.0
    return np.repeat(f[None], 3, axis=0)


def per_image_rng(seed, index):
    """Worker-count independent stream for image ``index``."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed), int(index)])))


# ---------------------------------------------------------------------------
# VOC XML annotations


@dataclass
class VocAnnotation:
    filename: str
    width: int
    height: int
    boxes: np.ndarray  # (N, 5): class id, cx, cy, w, h


def _required(parent, tag, path):
    node = parent.find(tag)
    if node is None or (node.text is None and len(node) == 0):
        raise AnnotationError(path, tag, "missing element")
    return node


def parse_voc_xml(path):
    """Parse one VOC-style annotation into center-format pixel boxes.

    Rejects malformed XML, missing fields, unknown class names, inverted
    or out-of-bounds boxes, naming the offending element.
    """
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as e:
        raise AnnotationError(path, "xml", f"malformed file: {e}")
    filename = _required(root, "filename", path).text.strip()
    size = _required(root, "size", path)
    try:
        width = int(_required(size, "width", path).text)
        height = int(_required(size, "height", path).text)
    except ValueError as e:
        raise AnnotationError(path, "size", f"non-integer extent: {e}")
    if width <= 0 or height <= 0:
        raise AnnotationError(path, "size", f"bad extents {width}x{height}")

    boxes = []
    for obj in root.iter("object"):
        name = _required(obj, "name", path).text.strip()
        if name not in CLASS_IDS:
            raise AnnotationError(path, "name",
                                  f"unknown class {name!r}, expected one of "
                                  f"{CLASS_NAMES}")
        bnd = _required(obj, "bndbox", path)
        vals = {}
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            try:
                vals[tag] = float(_required(bnd, tag, path).text)
            except ValueError as e:
                raise AnnotationError(path, tag, f"non-numeric value: {e}")
        if vals["xmax"] <= vals["xmin"] or vals["ymax"] <= vals["ymin"]:
            raise AnnotationError(path, "bndbox",
                                  f"inverted box {vals}")
        if (vals["xmin"] < 0 or vals["ymin"] < 0
                or vals["xmax"] > width or vals["ymax"] > height):
            raise AnnotationError(path, "bndbox",
                                  f"box {vals} outside {width}x{height}")
        boxes.append([CLASS_IDS[name],
                      (vals["xmin"] + vals["xmax"]) / 2,
                      (vals["ymin"] + vals["ymax"]) / 2,
                      vals["xmax"] - vals["xmin"],
                      vals["ymax"] - vals["ymin"]])
    return VocAnnotation(filename, width, height,
                         np.array(boxes, dtype=np.float64).reshape(-1, 5))


def write_voc_xml(ann, path):
    """Emit a VOC-style annotation for an AnnotatedImage."""
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = f"{ann.image_id}.png"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = "1"
    for cls, cx, cy, w, h in ann.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = CLASS_NAMES[int(cls)]
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = f"{cx - w / 2:.2f}"
        ET.SubElement(bnd, "ymin").text = f"{cy - h / 2:.2f}"
        ET.SubElement(bnd, "xmax").text = f"{cx + w / 2:.2f}"
        ET.SubElement(bnd, "ymax").text = f"{cy + h / 2:.2f}"
    ET.ElementTree(root).write(path, encoding="unicode")


def save_dataset(root, images, val_fraction=0.2, seed=0):
    """Write images, annotations and splits in the standard layout."""
    ids = [a.image_id for a in images]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise AnnotationError("<dataset>", "filename",
                              f"duplicate image ids: {dupes[:5]}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    for ann in images:
        Image.fromarray(ann.image, mode="L").save(
            root / "images" / f"{ann.image_id}.png")
        write_voc_xml(ann, root / "annotations" / f"{ann.image_id}.xml")
    ids = [a.image_id for a in images]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_val = int(round(len(ids) * val_fraction))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    (root / "splits" / "train.txt").write_text("".join(f"{i}\n" for i in train))
    (root / "splits" / "val.txt").write_text("".join(f"{i}\n" for i in val))
    return DatasetSplit(train, val)


def load_image(root, image_id):
    root = Path(root)
    for ext in (".png", ".jpg", ".jpeg"):
        p = root / "images" / f"{image_id}{ext}"
        if p.exists():
            img = Image.open(p).convert("L")
            return np.asarray(img, dtype=np.uint8)
    raise FileNotFoundError(f"no image for id {image_id!r} under {root}")


def load_split(root, split):
    """Load one split into AnnotatedImages, validating every annotation."""
    root = Path(root)
    ids = [line.strip() for line in
           (root / "splits" / f"{split}.txt").read_text().splitlines()
           if line.strip()]
    out = []
    for image_id in ids:
        ann = parse_voc_xml(root / "annotations" / f"{image_id}.xml")
        img = load_image(root, image_id)
        if img.shape != (ann.height, ann.width):
            raise AnnotationError(root / "annotations" / f"{image_id}.xml",
                                  "size",
                                  f"pixels {img.shape} disagree with "
                                  f"annotation {ann.height}x{ann.width}")
        out.append(AnnotatedImage(image_id, img, ann.boxes))
    return out


# ---------------------------------------------------------------------------
# preprocessing


def _corners(boxes):
    b = boxes
    return np.stack([b[:, 1] - b[:, 3] / 2, b[:, 2] - b[:, 4] / 2,
                     b[:, 1] + b[:, 3] / 2, b[:, 2] + b[:, 4] / 2], axis=1)


def _cluster_boxes(boxes, dilate):
    """Connected components of boxes dilated by ``dilate`` pixels."""
    n = len(boxes)
    c = _corners(boxes)
    c = c + np.array([-dilate, -dilate, dilate, dilate])
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if (c[i, 0] < c[j, 2] and c[j, 0] < c[i, 2]
                    and c[i, 1] < c[j, 3] and c[j, 1] < c[i, 3]):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def preprocess_crop(raw, crop=CROP_SIZE, cluster_dilate=CLUSTER_DILATE):
    """One ``crop`` x ``crop`` window per defect cluster, clamped to the
    frame; boxes are translated and clipped, empty crops are dropped.

    Returns [] for frames smaller than the crop or without defects.
    """
    h, w = raw.image.shape
    if h < crop or w < crop or not len(raw.boxes):
        return []
    out = []
    for k, members in enumerate(_cluster_boxes(raw.boxes, cluster_dilate)):
        sub = raw.boxes[members]
        cx = (min(sub[:, 1] - sub[:, 3] / 2) + max(sub[:, 1] + sub[:, 3] / 2)) / 2
        cy = (min(sub[:, 2] - sub[:, 4] / 2) + max(sub[:, 2] + sub[:, 4] / 2)) / 2
        x0 = int(np.clip(round(cx - crop / 2), 0, w - crop))
        y0 = int(np.clip(round(cy - crop / 2), 0, h - crop))
        window = raw.image[y0:y0 + crop, x0:x0 + crop]
        kept = []
        for cls, bcx, bcy, bw, bh in raw.boxes:
            x1 = max(bcx - bw / 2 - x0, 0.0)
            y1 = max(bcy - bh / 2 - y0, 0.0)
            x2 = min(bcx + bw / 2 - x0, float(crop))
            y2 = min(bcy + bh / 2 - y0, float(crop))
            if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
                kept.append([cls, (x1 + x2) / 2, (y1 + y2) / 2,
                             x2 - x1, y2 - y1])
        if kept:
            out.append(AnnotatedImage(f"{raw.image_id}_c{k}", window.copy(),
                                      np.array(kept)))
    return out


# ---------------------------------------------------------------------------
# letterboxing


@dataclass
class Affine:
    """Exact record of the letterbox transform, invertible on boxes."""
    scale: float
    pad_x: float
    pad_y: float

    def apply_boxes(self, boxes):
        b = np.array(boxes, dtype=np.float64).reshape(-1, 5)
        b[:, 1] = b[:, 1] * self.scale + self.pad_x
        b[:, 2] = b[:, 2] * self.scale + self.pad_y
        b[:, 3] *= self.scale
        b[:, 4] *= self.scale
        return b

    def invert_boxes(self, boxes):
        b = np.array(boxes, dtype=np.float64).reshape(-1, 5)
        b[:, 1] = (b[:, 1] - self.pad_x) / self.scale
        b[:, 2] = (b[:, 2] - self.pad_y) / self.scale
        b[:, 3] /= self.scale
        b[:, 4] /= self.scale
        return b


def letterbox(image, target=960):
    """Aspect-preserving resize onto a gray square canvas.

    Returns the canvas and the affine record mapping original-image boxes
    to canvas coordinates (and back, exactly).
    """
    h, w = image.shape
    scale = min(target / w, target / h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    if (nw, nh) != (w, h):
        resized = np.asarray(Image.fromarray(image, mode="L").resize(
            (nw, nh), Image.BILINEAR), dtype=np.uint8)
    else:
        resized = image
    canvas = np.full((target, target), PAD_VALUE, dtype=np.uint8)
    px, py = (target - nw) // 2, (target - nh) // 2
    canvas[py:py + nh, px:px + nw] = resized
    return canvas, Affine(scale, float(px), float(py))


def letterbox_annotated(ann, target=960):
    canvas, aff = letterbox(ann.image, target)
    return AnnotatedImage(ann.image_id, canvas, aff.apply_boxes(ann.boxes)), aff


# ---------------------------------------------------------------------------
# mosaic


def mosaic4(images, output=960, rng=None):
    """Compose four annotated images around a random joint point.

    The joint lands in the central half of the canvas; each input is
    scaled to cover its quadrant, cropped against the joint corner, and
    its boxes are remapped, clipped, and dropped below 2 pixels.
    """
    if len(images) != 4:
        raise ValueError(f"mosaic needs 4 images, got {len(images)}")
    rng = rng or np.random.default_rng(0)
    xc = int(rng.integers(output // 4, 3 * output // 4 + 1))
    yc = int(rng.integers(output // 4, 3 * output // 4 + 1))
    canvas = np.full((output, output), PAD_VALUE, dtype=np.uint8)
    quads = [  # (x0, y0, x1, y1), anchor corner = the joint
        (0, 0, xc, yc),
        (xc, 0, output, yc),
        (0, yc, xc, output),
        (xc, yc, output, output),
    ]
    boxes = []
    for ann, (qx0, qy0, qx1, qy1) in zip(images, quads):
        qw, qh = qx1 - qx0, qy1 - qy0
        if qw < 1 or qh < 1:
            continue
        h, w = ann.image.shape
        scale = max(qw / w, qh / h)
        rw, rh = max(qw, int(round(w * scale))), max(qh, int(round(h * scale)))
        resized = np.asarray(Image.fromarray(ann.image, mode="L").resize(
            (rw, rh), Image.BILINEAR), dtype=np.uint8)
        # crop anchored at the joint: keep the corner of the resized image
        # that touches the joint point
        ox = rw - qw if qx1 == xc else 0
        oy = rh - qh if qy1 == yc else 0
        canvas[qy0:qy1, qx0:qx1] = resized[oy:oy + qh, ox:ox + qw]
        sx = rw / w
        sy = rh / h
        for cls, cx, cy, bw, bh in ann.boxes:
            x1 = cx * sx - bw * sx / 2 - ox + qx0
            y1 = cy * sy - bh * sy / 2 - oy + qy0
            x2 = cx * sx + bw * sx / 2 - ox + qx0
            y2 = cy * sy + bh * sy / 2 - oy + qy0
            x1, x2 = max(x1, qx0), min(x2, qx1)
            y1, y2 = max(y1, qy0), min(y2, qy1)
            if x2 - x1 >= 2.0 and y2 - y1 >= 2.0:
                boxes.append([cls, (x1 + x2) / 2, (y1 + y2) / 2,
                              x2 - x1, y2 - y1])
    return AnnotatedImage(f"mosaic_{images[0].image_id}", canvas,
                          np.array(boxes, dtype=np.float64).reshape(-1, 5))


# ---------------------------------------------------------------------------
# anchor clustering


def _wh_iou(wh, anchors):
    """Co-centered IoU of (N,2) boxes against (K,2) anchors."""
    inter = (np.minimum(wh[:, None, 0], anchors[None, :, 0])
             * np.minimum(wh[:, None, 1], anchors[None, :, 1]))
    union = (wh[:, 0] * wh[:, 1])[:, None] + anchors[:, 0] * anchors[:, 1] - inter
    return inter / np.maximum(union, 1e-12)


def adaptive_anchors(boxes_wh, heads, anchors_per_head=3, iterations=300,
                     strides=None):
    """K-means on box extents under the 1 - IoU distance.

    Centers are seeded from area quantiles, iterated to an assignment
    fixpoint (at most ``iterations`` rounds), sorted by area and split
    evenly across heads fine to coarse. Falls back to the documented
    per-stride constants, with a warning, when there are fewer boxes
    than anchors.
    """
    wh = np.asarray(boxes_wh, dtype=np.float64).reshape(-1, 2)
    k = heads * anchors_per_head
    if len(wh) < k:
        if strides is None:
            raise ValueError("too few boxes and no strides for fallback")
        warnings.warn(f"{len(wh)} boxes < {k} anchors, using fallback priors")
        return [np.array(FALLBACK_ANCHORS[s], dtype=np.float64) for s in strides]

    areas = wh[:, 0] * wh[:, 1]
    order = np.argsort(areas)
    centers = wh[order[((np.arange(k) + 0.5) / k * len(wh)).astype(int)]].copy()
    assign = None
    for _ in range(iterations):
        d = 1.0 - _wh_iou(wh, centers)
        new_assign = d.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = wh[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    centers = centers[np.argsort(centers[:, 0] * centers[:, 1])]
    return [centers[i * anchors_per_head:(i + 1) * anchors_per_head]
            for i in range(heads)]


# ---------------------------------------------------------------------------
# synthetic panels


def _clamped_range(rng_pair, limit):
    lo, hi = rng_pair
    hi = min(hi, limit)
    lo = min(lo, hi)
    return lo, hi


def _draw_scratch(canvas, rng, x1, y1, x2, y2):
    canvas[y1:y2, x1:x2] = rng.integers(200, 240)


def _draw_black_border(canvas, rng, x1, y1, x2, y2):
    canvas[y1:y2, x1:x2] = rng.integers(25, 45)


def _draw_hot_spot(canvas, rng, x1, y1, x2, y2):
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r2 = ((yy - cy) / max(cy, 1)) ** 2 + ((xx - cx) / max(cx, 1)) ** 2
    blob = np.clip(235 - 90 * r2, 0, 255)
    region = canvas[y1:y2, x1:x2].astype(np.float64)
    canvas[y1:y2, x1:x2] = np.maximum(region, blob).astype(np.uint8)


def _draw_broken(canvas, rng, x1, y1, x2, y2):
    h, w = y2 - y1, x2 - x1
    mask = np.ones((h, w), dtype=bool)
    # jagged edges: random-walk bites from left and right borders
    depth = max(2, w // 4)
    bite = rng.integers(0, depth, size=h)
    for r in range(h):
        mask[r, :bite[r]] = False
        mask[r, w - int(rng.integers(0, depth)):] = False
    tex = rng.integers(40, 70, size=(h, w)).astype(np.uint8)
    region = canvas[y1:y2, x1:x2]
    region[mask] = tex[mask]


def _draw_no_electricity(canvas, rng, x1, y1, x2, y2):
    canvas[y1:y2, x1:x2] = rng.integers(15, 30)


_DRAWERS = {
    "scratch": _draw_scratch,
    "black_border": _draw_black_border,
    "hot_spot": _draw_hot_spot,
    "broken": _draw_broken,
    "no_electricity": _draw_no_electricity,
}


def _panel_background(rng, size):
    canvas = np.full((size, size), 100, dtype=np.int16)
    canvas += rng.normal(0, 4, size=(size, size)).astype(np.int16)
    cell = max(size // 6, 8)
    for p in range(0, size, cell):          # cell grid lines
        canvas[p:p + 2, :] += 30
        canvas[:, p:p + 2] += 30
    bus = max(cell // 3, 3)
    for p in range(bus // 2, size, bus):    # busbar lines
        canvas[:, p] += 15
    return np.clip(canvas, 0, 255).astype(np.uint8)


def synth_panel(rng, size=CROP_SIZE, counts=None, size_ranges=None,
                image_id="synth", max_overlap=0.3, max_attempts=300):
    """Cell-grid panel image with drawn defects and exact ground truth.

    ``counts`` maps class name to defect count; ``size_ranges`` overrides
    the per-class (w, h) pixel ranges. Default ranges follow the measured
    defect statistics at the 600-pixel reference and scale with the
    canvas; explicit overrides are absolute. Everything is clamped to 80%
    of the canvas. Placement rejects overlap above ``max_overlap`` IoU and
    raises GenerationError when the spec cannot be placed.
    """
    counts = counts or {}
    canvas = _panel_background(rng, size)
    placed = []  # corner boxes
    boxes = []
    f = size / CROP_SIZE
    for name in CLASS_NAMES:            # fixed order keeps runs reproducible
        n = counts.get(name, 0)
        if size_ranges and name in size_ranges:
            wr, hr = size_ranges[name]
        else:
            (wlo, whi), (hlo, hhi) = DEFECT_SIZE_RANGES[name]
            wr = (max(3, round(wlo * f)), max(3, round(whi * f)))
            hr = (max(3, round(hlo * f)), max(3, round(hhi * f)))
        wr = _clamped_range(wr, int(size * 0.8))
        hr = _clamped_range(hr, int(size * 0.8))
        for _ in range(n):
            for attempt in range(max_attempts):
                w = int(rng.integers(wr[0], wr[1] + 1))
                h = int(rng.integers(hr[0], hr[1] + 1))
                x1 = int(rng.integers(2, size - w - 2))
                y1 = int(rng.integers(2, size - h - 2))
                cand = (x1, y1, x1 + w, y1 + h)
                if all(_corner_iou(cand, p) <= max_overlap for p in placed):
                    break
            else:
                raise GenerationError(
                    f"could not place {name} defect {len(placed) + 1} within "
                    f"{max_attempts} attempts (canvas {size}, spec {counts})")
            _DRAWERS[name](canvas, rng, *cand)
            placed.append(cand)
            boxes.append([CLASS_IDS[name], x1 + w / 2, y1 + h / 2,
                          float(w), float(h)])
    return AnnotatedImage(image_id, canvas,
                          np.array(boxes, dtype=np.float64).reshape(-1, 5))


def _corner_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def synth_corpus(seed, count, size=CROP_SIZE, counts=None, size_ranges=None,
                 prefix="panel"):
    """Reproducible list of synthetic panels, one rng stream per image."""
    out = []
    for i in range(count):
        rng = per_image_rng(seed, i)
        out.append(synth_panel(rng, size=size, counts=counts,
                               size_ranges=size_ranges,
                               image_id=f"{prefix}{i:04d}"))
    return out
