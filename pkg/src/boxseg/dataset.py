"""Synthetic shape corpus with exact ground truth.

Three foreground shapes with analytically known box filling rates are the
anchors for every downstream statistic: a filled rectangle (rate 1.0), an
inscribed ellipse (rate -> pi/4) and a right triangle over half its box
(rate -> 0.5). Shapes are rasterized by a pixel-center inclusion test, so
counts are unambiguous and reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .validation import check_boxes_within, check_image, check_label_map

# Label value excluded from losses and gradients. Raster files store label
# maps as 8-bit planes, so the sentinel is pinned to 255.
IGNORE = 255

SHAPE_KINDS = ("block", "disc", "wedge", "mixed")

MANIFEST_NAME = "manifest.txt"
MANIFEST_FORMAT = "boxseg-dataset-v1"


class DatasetError(Exception):
    """Raised when a dataset directory is missing files or inconsistent."""


class GenerationError(Exception):
    """Raised when a synthetic sample cannot be placed within retry bounds."""


@dataclass(frozen=True)
class BoxAnnotation:
    """Tight axis-aligned bounding box: [x0, x1) x [y0, y1) in pixel indices."""

    class_id: int
    x0: int
    y0: int
    x1: int
    y1: int
    sub_class_id: int | None = None

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError(f"box class_id must be >= 1 (0 is background), got {self.class_id}")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box: x0={self.x0}, y0={self.y0}, x1={self.x1}, y1={self.y1}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def hflipped(self, canvas_width: int) -> "BoxAnnotation":
        return replace(self, x0=canvas_width - self.x1, x1=canvas_width - self.x0)

    def shifted_clipped(self, dx: int, dy: int, width: int, height: int) -> "BoxAnnotation | None":
        """Translate by (dx, dy) and clip to the canvas; None if nothing remains."""
        x0, x1 = max(self.x0 + dx, 0), min(self.x1 + dx, width)
        y0, y1 = max(self.y0 + dy, 0), min(self.y1 + dy, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x0=x0, y0=y0, x1=x1, y1=y1)


@dataclass
class ImageSample:
    """One raster with its ground-truth label map and tight bounding boxes."""

    id: str
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1], quantized to the 8-bit grid
    gt_labels: np.ndarray  # (H, W) uint8, class indices
    boxes: tuple[BoxAnnotation, ...]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def validate(self, n_classes: int):
        check_image(self.pixels, name=f"{self.id}.pixels")
        check_label_map(self.gt_labels, n_classes, name=f"{self.id}.gt_labels")
        check_boxes_within(self.boxes, self.height, self.width, name=f"{self.id}.boxes")
        return self


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Shape kinds map one-to-one onto class ids 1..len(shapes)."""

    size: int = 64
    channels: int = 1
    shapes: tuple[str, ...] = ("block", "disc", "wedge")
    objects_per_image: tuple[int, int] = (1, 3)
    side_range: tuple[int, int] = (16, 22)
    # Boxes are near-square: the second side is the first times a jitter drawn
    # from this range. Keeps log-aspect spread small relative to the fill-rate
    # gaps the sub-class clustering has to resolve.
    aspect_jitter: tuple[float, float] = (0.85, 1.15)
    fg_intensity: tuple[float, float] = (0.56, 0.95)
    bg_intensity: tuple[float, float] = (0.05, 0.33)
    noise: float = 0.17
    allow_overlap: bool = False
    count: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError(f"canvas size must be >= 8, got {self.size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        bad = [s for s in self.shapes if s not in SHAPE_KINDS]
        if bad:
            raise ValueError(f"unknown shape kinds {bad}; valid kinds: {SHAPE_KINDS}")
        lo, hi = self.side_range
        if lo < 8 or hi < lo:
            raise ValueError(f"side_range must satisfy 8 <= lo <= hi, got {self.side_range}")
        if hi > self.size:
            raise ValueError(f"max box side {hi} exceeds canvas size {self.size}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"objects_per_image must satisfy 0 <= lo <= hi, got {self.objects_per_image}")
        if self.count < 0:
            raise ValueError(f"count must be >= 0, got {self.count}")

    @property
    def n_classes(self) -> int:
        return len(self.shapes) + 1  # class 0 is background

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "channels": self.channels,
            "shapes": list(self.shapes),
            "objects_per_image": list(self.objects_per_image),
            "side_range": list(self.side_range),
            "aspect_jitter": list(self.aspect_jitter),
            "fg_intensity": list(self.fg_intensity),
            "bg_intensity": list(self.bg_intensity),
            "noise": self.noise,
            "allow_overlap": self.allow_overlap,
            "count": self.count,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        known = {f for f in SynthConfig.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown SynthConfig keys: {sorted(bad)}")
        kwargs = dict(d)
        for key in ("shapes", "objects_per_image", "side_range", "aspect_jitter", "fg_intensity", "bg_intensity"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SynthConfig(**kwargs)


def shape_mask(kind: str, width: int, height: int) -> np.ndarray:
    """Rasterize one shape into a (height, width) boolean mask in box-local
    coordinates, by a pixel-center inclusion test.

    The wedge's hypotenuse runs through the centers of the top-right and
    bottom-left corner pixels (integer-exact test), so the mask stays tight
    in its box and the fill rate is 0.5 + (gcd(W-1, H-1) + 1) / (2WH); a
    hypotenuse on the box corners instead would leave the bottom row or
    right column empty for non-square boxes.
    """
    if kind == "block":
        return np.ones((height, width), dtype=bool)
    if kind == "disc":
        xs = (np.arange(width) + 0.5) / width
        ys = (np.arange(height) + 0.5) / height
        u, v = np.meshgrid(xs, ys)
        return (2.0 * u - 1.0) ** 2 + (2.0 * v - 1.0) ** 2 <= 1.0
    if kind == "wedge":
        jj, ii = np.meshgrid(np.arange(width), np.arange(height))
        return ii * (width - 1) + jj * (height - 1) <= (width - 1) * (height - 1)
    raise ValueError(f"unknown shape kind {kind!r}")


def tight_box(mask: np.ndarray, class_id: int) -> BoxAnnotation:
    """Minimal axis-aligned box containing all set pixels of a binary mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"tight_box expects a 2-D mask, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("tight_box: mask has no set pixels")
    return BoxAnnotation(class_id=class_id, x0=int(cols[0]), y0=int(rows[0]), x1=int(cols[-1]) + 1, y1=int(rows[-1]) + 1)


def _quantize(img: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid so raster round trips are lossless."""
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


_PLACEMENT_RETRIES = 200


def _generate_one(cfg: SynthConfig, index: int) -> ImageSample:
    rng = np.random.default_rng((cfg.seed, index))
    sample_id = f"sample_{index:05d}"
    s = cfg.size
    labels = np.zeros((s, s), dtype=np.uint8)
    occupied = np.zeros((s, s), dtype=bool)
    boxes: list[BoxAnnotation] = []
    masks: list[np.ndarray] = []

    lo, hi = cfg.objects_per_image
    n_objects = int(rng.integers(lo, hi + 1))
    for _ in range(n_objects):
        class_id = int(rng.integers(1, len(cfg.shapes) + 1))
        kind = cfg.shapes[class_id - 1]
        if kind == "mixed":
            kind = "block" if rng.random() < 0.5 else "disc"
        placed = False
        for _ in range(_PLACEMENT_RETRIES):
            w = int(rng.integers(cfg.side_range[0], cfg.side_range[1] + 1))
            # draw the second side uniformly over the jitter window clipped to
            # the side range; clamping a rounded draw instead would pile mass
            # onto exact squares, whose diagonal ties bias wedge fill rates
            lo_h = max(cfg.side_range[0], int(np.ceil(w * cfg.aspect_jitter[0])))
            hi_h = min(cfg.side_range[1], s, int(np.floor(w * cfg.aspect_jitter[1])))
            h = int(rng.integers(lo_h, hi_h + 1)) if hi_h >= lo_h else w
            x0 = int(rng.integers(0, s - w + 1))
            y0 = int(rng.integers(0, s - h + 1))
            if not cfg.allow_overlap and occupied[y0:y0 + h, x0:x0 + w].any():
                continue
            local = shape_mask(kind, w, h)
            full = np.zeros((s, s), dtype=bool)
            full[y0:y0 + h, x0:x0 + w] = local
            labels[full] = class_id
            occupied[y0:y0 + h, x0:x0 + w] = True
            boxes.append(tight_box(full, class_id))
            masks.append(full)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"sample {sample_id}: could not place a {kind} shape after "
                f"{_PLACEMENT_RETRIES} attempts (canvas too crowded)"
            )

    img = np.empty((s, s, cfg.channels), dtype=np.float64)
    img[:] = rng.uniform(*cfg.bg_intensity, size=cfg.channels)
    for mask in masks:
        img[mask] = rng.uniform(*cfg.fg_intensity, size=cfg.channels)
    if cfg.noise > 0:
        img += rng.uniform(-cfg.noise, cfg.noise, size=img.shape)
    return ImageSample(id=sample_id, pixels=_quantize(img), gt_labels=labels, boxes=tuple(boxes))


def generate_synthetic(cfg: SynthConfig) -> list[ImageSample]:
    """Generate the corpus. Deterministic for a fixed config: each sample's
    random stream is derived from (seed, sample_index) only."""
    return [_generate_one(cfg, i) for i in range(cfg.count)]


# ---------------------------------------------------------------------------
# Persistence: binary PGM planes plus a JSON manifest. One plane per image
# channel and one for the label map keeps round trips bit-exact with no
# image-codec dependency.

def write_pgm(path: Path, plane: np.ndarray):
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.dtype != np.uint8:
        raise ValueError(f"write_pgm expects a 2-D uint8 array, got {plane.dtype} {plane.shape}")
    h, w = plane.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(plane.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing raster file: {path}")
    data = path.read_bytes()
    try:
        if not data.startswith(b"P5"):
            raise ValueError("bad magic")
        # Three whitespace-separated header fields, then exactly one
        # whitespace byte before the payload. Payload bytes may themselves be
        # whitespace values, so the header is tokenized positionally.
        pos = 2
        fields = []
        while len(fields) < 3:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ValueError("truncated header")
            fields.append(int(data[start:pos]))
        pos += 1  # the single whitespace after maxval
        w, h, maxval = fields
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        payload = data[pos:pos + h * w]
        if len(payload) < h * w:
            raise ValueError(f"expected {h * w} pixel bytes, found {len(payload)}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    except (ValueError, IndexError) as e:
        raise DatasetError(f"corrupt raster file {path}: {e}") from None


def save_dataset(samples: list[ImageSample], out_dir: str | Path, n_classes: int | None = None):
    """Write rasters plus manifest.txt. Re-running with identical samples is byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if n_classes is None:
        n_classes = 1 + max((b.class_id for s in samples for b in s.boxes), default=0)
    records = []
    for s in samples:
        image_rasters = []
        for c in range(s.channels):
            name = f"{s.id}_img{c}.pgm"
            write_pgm(out / name, np.round(s.pixels[:, :, c] * 255.0).astype(np.uint8))
            image_rasters.append(name)
        label_raster = f"{s.id}_gt.pgm"
        write_pgm(out / label_raster, s.gt_labels.astype(np.uint8))
        records.append(
            {
                "id": s.id,
                "width": s.width,
                "height": s.height,
                "channels": s.channels,
                "image_rasters": image_rasters,
                "label_raster": label_raster,
                "boxes": [[b.class_id, b.x0, b.y0, b.x1, b.y1] for b in s.boxes],
            }
        )
    manifest = {"format": MANIFEST_FORMAT, "num_classes": n_classes, "samples": records}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(in_dir: str | Path) -> tuple[list[ImageSample], int]:
    """Load a dataset directory; returns (samples, num_classes)."""
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"corrupt manifest {manifest_path}: {e}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{manifest_path}: unknown format {manifest.get('format')!r}")

    samples = []
    for rec in manifest["samples"]:
        h, w, ch = rec["height"], rec["width"], rec["channels"]
        planes = []
        for name in rec["image_rasters"]:
            plane = read_pgm(root / name)
            if plane.shape != (h, w):
                raise DatasetError(f"{name}: raster is {plane.shape}, manifest says ({h}, {w})")
            planes.append(plane)
        if len(planes) != ch:
            raise DatasetError(f"{rec['id']}: manifest lists {ch} channels but {len(planes)} rasters")
        pixels = (np.stack(planes, axis=2) / 255.0).astype(np.float32)
        gt = read_pgm(root / rec["label_raster"])
        if gt.shape != (h, w):
            raise DatasetError(f"{rec['label_raster']}: raster is {gt.shape}, manifest says ({h}, {w})")
        boxes = tuple(BoxAnnotation(class_id=c, x0=x0, y0=y0, x1=x1, y1=y1) for c, x0, y0, x1, y1 in rec["boxes"])
        samples.append(ImageSample(id=rec["id"], pixels=pixels, gt_labels=gt, boxes=boxes))
    return samples, int(manifest["num_classes"])
