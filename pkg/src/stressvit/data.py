"""Data preparation: synthetic field imagery, annotations, windows, folds.

The synthetic generator stands in for real field imagery at desk scale: elliptical
canopy blobs on noisy soil, green for healthy regions and yellow-shifted for
stressed ones, each emitting a labelled bounding box. Real data in the same
layout (images/*.ppm plus VOC XML or a single annotations.csv) drops in
through the same loaders.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention_maps import resize_bilinear
from .autodiff import Tensor
from .ppm import read_ppm

LABELS = {"healthy": 0, "stressed": 1}


@dataclass(frozen=True)
class Box:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}; expected healthy or stressed")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(
                f"inverted box ({self.x_min},{self.y_min},{self.x_max},{self.y_max})")


@dataclass
class AnnotatedImage:
    rgb: np.ndarray  # [H, W, 3] uint8
    boxes: list
    image_id: str = ""

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class Window:
    rgb: np.ndarray  # [h, w, 3] uint8 crop
    label: int       # 0 healthy, 1 stressed
    image_id: str
    box: Box


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 256
    healthy_regions: int = 3
    stressed_regions: int = 2
    canopy_green: tuple = (58, 138, 52)
    yellow_shift: tuple = (120, 28, -26)  # added to canopy green for stressed blobs
    noise_amplitude: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.healthy_regions < 0 or self.stressed_regions < 0:
            raise ValueError("region counts must be non-negative")
        if any(not 0 <= c <= 255 for c in self.canopy_green):
            raise ValueError(f"canopy_green {self.canopy_green} not valid 8-bit")
        if self.noise_amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")
        if self.image_size < 32:
            raise ValueError("image_size below 32 cannot hold canopy regions")


SOIL_BROWN = (121, 96, 70)
_PLACEMENT_RETRIES = 200


def synthesize_field_image(config: SynthConfig) -> AnnotatedImage:
    """Deterministic field image plus labelled boxes from (config, seed).

    Draw order: soil noise field, then per region (healthy before stressed)
    the geometry rejection loop, a colour jitter and the blob noise field.
    Boxes never overlap; placement failure after bounded retries raises.
    """
    rng = np.random.default_rng(config.seed)
    size = config.image_size
    amp = config.noise_amplitude

    canvas = np.empty((size, size, 3), dtype=np.float64)
    canvas[...] = SOIL_BROWN
    furrows = 6.0 * np.sin(np.arange(size) * (2.0 * math.pi / 24.0))
    canvas += furrows[:, None, None]
    canvas += rng.integers(-amp, amp + 1, size=(size, size, 3))

    boxes: list[Box] = []
    total = config.healthy_regions + config.stressed_regions
    yy, xx = np.mgrid[0:size, 0:size]
    for index in range(total):
        healthy = index < config.healthy_regions
        placed = None
        for _ in range(_PLACEMENT_RETRIES):
            a = rng.uniform(0.08, 0.16) * size
            b = rng.uniform(0.08, 0.16) * size
            theta = rng.uniform(0.0, math.pi)
            half_w = math.sqrt((a * math.cos(theta)) ** 2 + (b * math.sin(theta)) ** 2)
            half_h = math.sqrt((a * math.sin(theta)) ** 2 + (b * math.cos(theta)) ** 2)
            cx = rng.uniform(half_w + 1, size - half_w - 1)
            cy = rng.uniform(half_h + 1, size - half_h - 1)
            box = Box(int(math.floor(cx - half_w)), int(math.floor(cy - half_h)),
                      int(math.ceil(cx + half_w)), int(math.ceil(cy + half_h)),
                      "healthy" if healthy else "stressed")
            if all(not _boxes_overlap(box, other) for other in boxes):
                placed = (cx, cy, a, b, theta, box)
                break
        if placed is None:
            raise RuntimeError(
                f"could not place region {index + 1} of {total} after "
                f"{_PLACEMENT_RETRIES} attempts; reduce counts or enlarge the canvas")
        cx, cy, a, b, theta, box = placed
        base = np.array(config.canopy_green, dtype=np.float64)
        if not healthy:
            base = base + np.array(config.yellow_shift, dtype=np.float64)
        base = base + rng.integers(-8, 9, size=3)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        dx, dy = xx - cx, yy - cy
        u = (dx * cos_t + dy * sin_t) / a
        v = (-dx * sin_t + dy * cos_t) / b
        mask = u * u + v * v <= 1.0
        blob_noise = rng.integers(-amp, amp + 1, size=(size, size, 3))
        canvas[mask] = base + blob_noise[mask]
        boxes.append(box)

    rgb = np.clip(canvas, 0, 255).astype(np.uint8)
    return AnnotatedImage(rgb=rgb, boxes=boxes, image_id=f"synth_{config.seed:06d}")


def _boxes_overlap(a: Box, b: Box) -> bool:
    return not (a.x_max <= b.x_min or b.x_max <= a.x_min
                or a.y_max <= b.y_min or b.y_max <= a.y_min)


def synthesize_dataset(num_images: int, base: SynthConfig) -> list[AnnotatedImage]:
    """Images with seeds base.seed, base.seed + 1, ... for per-image diversity."""
    out = []
    for i in range(num_images):
        cfg = SynthConfig(base.image_size, base.healthy_regions, base.stressed_regions,
                          base.canopy_green, base.yellow_shift, base.noise_amplitude,
                          base.seed + i)
        out.append(synthesize_field_image(cfg))
    return out


# ---------------------------------------------------------------------------
# annotations


def parse_annotations(path, format: str) -> list:
    """Read (image_name, Box) pairs from VOC-style XML or a CSV table."""
    if format == "voc-xml":
        return parse_voc_xml(path)
    if format == "csv":
        return parse_annotations_csv(path)
    raise ValueError(f"unknown annotation format {format!r}")


def parse_voc_xml(path) -> list:
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ValueError(f"{path}: malformed XML: {exc}") from None
    name_node = root.find("filename")
    image_name = name_node.text.strip() if name_node is not None and name_node.text else path.stem
    pairs = []
    for i, obj in enumerate(root.iter("object")):
        label_node = obj.find("name")
        bnd = obj.find("bndbox")
        if label_node is None or bnd is None:
            raise ValueError(f"{path}: object {i}: missing name or bndbox")
        coords = {}
        for key in ("xmin", "ymin", "xmax", "ymax"):
            node = bnd.find(key)
            if node is None:
                raise ValueError(f"{path}: object {i}: missing {key}")
            coords[key] = int(float(node.text))
        try:
            box = Box(coords["xmin"], coords["ymin"], coords["xmax"], coords["ymax"],
                      label_node.text.strip())
        except ValueError as exc:
            raise ValueError(f"{path}: object {i}: {exc}") from None
        pairs.append((image_name, box))
    return pairs


def parse_annotations_csv(path) -> list:
    import csv

    path = Path(path)
    pairs = []
    with open(path, newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            if not cells:
                continue
            if len(cells) != 6:
                raise ValueError(f"{path}: line {lineno}: expected 6 cells, got {len(cells)}")
            image_name = cells[0]
            try:
                box = Box(int(cells[1]), int(cells[2]), int(cells[3]), int(cells[4]),
                          cells[5].strip())
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            pairs.append((image_name, box))
    return pairs


def write_annotations_csv(images, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for image in images:
            for box in image.boxes:
                writer.writerow([f"{image.image_id}.ppm",
                                 box.x_min, box.y_min, box.x_max, box.y_max, box.label])


# ---------------------------------------------------------------------------
# windows


def extract_windows(image: AnnotatedImage) -> list:
    """Pixel-exact crops, one per box; out-of-bounds boxes clamp to the image."""
    windows = []
    for box in image.boxes:
        x0 = max(0, box.x_min)
        y0 = max(0, box.y_min)
        x1 = min(image.width, box.x_max)
        y1 = min(image.height, box.y_max)
        if (x1 - x0) * (y1 - y0) < 4:
            raise ValueError(
                f"box ({box.x_min},{box.y_min},{box.x_max},{box.y_max}) on "
                f"{image.image_id or 'image'} leaves under 4 px^2 after clamping")
        windows.append(Window(rgb=image.rgb[y0:y1, x0:x1].copy(),
                              label=LABELS[box.label], image_id=image.image_id, box=box))
    return windows


def preprocess(window: Window, image_size: int = 224) -> Tensor:
    """Bilinear-resize to the model size, scale to [0, 1], channel-first."""
    rgb = window.rgb.astype(np.float64)
    if rgb.size == 0:
        raise ValueError("empty window")
    channels = [resize_bilinear(rgb[:, :, c], image_size, image_size) for c in range(3)]
    return Tensor._wrap(np.stack(channels, axis=0) / 255.0)


def windows_to_arrays(windows, image_size: int):
    """Stacked model inputs [n, 3, s, s] and labels [n] for a window list."""
    X = np.stack([preprocess(w, image_size).data for w in windows])
    y = np.array([w.label for w in windows], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------------------
# splits and batches


def kfold_split(n: int, k: int, seed: int) -> list:
    """Disjoint index folds covering range(n), sizes differing by at most one."""
    if k < 2 or k > n:
        raise ValueError(f"k must satisfy 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [fold.copy() for fold in np.array_split(perm, k)]


def make_batches(indices, batch_size: int, shuffle: bool = False, seed: int = 0) -> list:
    """Chunk indices into batches, keeping the final partial batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.array(indices)
    if shuffle:
        order = np.random.default_rng(seed).permutation(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# dataset layout


def save_dataset(images, root) -> None:
    """Write images/*.ppm and annotations.csv under root."""
    from .ppm import write_ppm

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for image in images:
        write_ppm(root / "images" / f"{image.image_id}.ppm", image.rgb)
    write_annotations_csv(images, root / "annotations.csv")


def load_dataset(root) -> list:
    """Read images/*.ppm with annotations.csv or per-image VOC XML files."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"{image_dir} does not exist")
    by_name: dict[str, list] = {}
    csv_path = root / "annotations.csv"
    xml_dir = root / "annotations"
    if csv_path.is_file():
        for image_name, box in parse_annotations_csv(csv_path):
            by_name.setdefault(image_name, []).append(box)
    elif xml_dir.is_dir():
        for xml_path in sorted(xml_dir.glob("*.xml")):
            for image_name, box in parse_voc_xml(xml_path):
                by_name.setdefault(image_name, []).append(box)
    else:
        raise FileNotFoundError(f"no annotations.csv or annotations/ under {root}")
    images = []
    for ppm_path in sorted(image_dir.glob("*.ppm")):
        rgb = read_ppm(ppm_path)
        images.append(AnnotatedImage(rgb=rgb, boxes=by_name.get(ppm_path.name, []),
                                     image_id=ppm_path.stem))
    return images


def dataset_windows(images) -> list:
    out = []
    for image in images:
        out.extend(extract_windows(image))
    return out
