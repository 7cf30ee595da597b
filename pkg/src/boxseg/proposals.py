"""Pixel pseudo-labels from bounding boxes.

Two proposal routes: direct rectangle rasterization ("box-like") and
mean-field inference in a fully-connected CRF with Gaussian pairwise
kernels over positions and intensities ("crf"). Pairwise messages are
naive O(n^2) sums, which is exact and fast enough at 64x64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetError, ImageSample, read_pgm, write_pgm
from .validation import check_boxes_within, check_fraction, check_image, check_prob_map

OVERLAP_POLICIES = ("smallest", "first")
CLAMP_POLICIES = ("boxes", "none")


@dataclass(frozen=True)
class CrfParams:
    """Mean-field settings. Defaults were tuned on the synthetic corpus."""

    iterations: int = 5
    w_appearance: float = 5.0     # weight of the position+intensity kernel
    theta_alpha: float = 20.0     # spatial scale of the appearance kernel, pixels
    theta_beta: float = 0.1       # intensity scale, for intensities in [0, 1]
    w_smooth: float = 3.0         # weight of the position-only kernel
    theta_gamma: float = 3.0      # spatial scale of the smoothness kernel, pixels
    p_fg: float = 0.7             # unary confidence that a box pixel is its class

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("w_appearance", "theta_alpha", "theta_beta", "w_smooth", "theta_gamma"):
            if getattr(self, name) < 0 or (name.startswith("theta") and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        check_fraction(self.p_fg, "p_fg", lo=0.5, hi=1.0, lo_open=True, hi_open=True)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "CrfParams":
        known = set(CrfParams.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown CrfParams keys: {sorted(bad)}")
        return CrfParams(**d)


def _order_boxes(boxes, policy: str):
    """Box processing order so that the last write wins under the policy."""
    if policy not in OVERLAP_POLICIES:
        raise ValueError(f"unknown overlap policy {policy!r}; valid: {OVERLAP_POLICIES}")
    indexed = list(enumerate(boxes))
    if policy == "smallest":
        # Painted in descending (area, class_id, index), so the smallest box
        # ends up on top, ties won by lower class_id then lower box index.
        indexed.sort(key=lambda ib: (ib[1].area, ib[1].class_id, ib[0]), reverse=True)
    else:  # "first": earlier box wins, paint in reverse order
        indexed = indexed[::-1]
    return [b for _, b in indexed]


def rasterize_box_labels(boxes, height: int, width: int, overlap_policy: str = "smallest") -> np.ndarray:
    """Box-like proposals: paint each box's rectangle with its class id."""
    check_boxes_within(boxes, height, width)
    labels = np.zeros((height, width), dtype=np.uint8)
    for b in _order_boxes(boxes, overlap_policy):
        ys, xs = b.slices()
        labels[ys, xs] = b.class_id
    return labels


def unary_from_boxes(box_labels: np.ndarray, p_fg: float, n_classes: int) -> np.ndarray:
    """Initial label distribution per pixel from a box-like label map.

    A pixel painted class c gets p_fg on c and the rest on background; a
    background pixel gets p_fg on background and the rest spread uniformly
    over the foreground classes present in the map (all of it when none are).
    """
    check_fraction(p_fg, "p_fg", lo=0.5, hi=1.0, lo_open=True, hi_open=True)
    labels = np.asarray(box_labels)
    h, w = labels.shape
    present = sorted(int(c) for c in np.unique(labels) if c > 0)
    if present and max(present) >= n_classes:
        raise ValueError(f"box label {max(present)} >= n_classes {n_classes}")
    q = np.zeros((h, w, n_classes), dtype=np.float64)
    bg = labels == 0
    q[bg, 0] = p_fg if present else 1.0
    share = (1.0 - p_fg) / len(present) if present else 0.0
    for c in present:
        q[bg, c] = share
        fg = labels == c
        q[fg, c] = p_fg
        q[fg, 0] = 1.0 - p_fg
    return q


# Position-dependent kernel pieces are identical for every image of a given
# shape, so cache the most recent ones (single-slot: one shape dominates).
_pos_cache: dict = {}
_smooth_cache: dict = {}


def _pairwise_sq_dists(h: int, w: int) -> np.ndarray:
    key = (h, w)
    if key not in _pos_cache:
        _pos_cache.clear()
        ys, xs = np.mgrid[0:h, 0:w]
        p = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
        d = p[:, None, :] - p[None, :, :]
        _pos_cache[key] = np.einsum("ijk,ijk->ij", d, d)
    return _pos_cache[key]


def _smooth_kernel(h: int, w: int, w2: float, theta_gamma: float) -> np.ndarray:
    key = (h, w, w2, theta_gamma)
    if key not in _smooth_cache:
        _smooth_cache.clear()
        _smooth_cache[key] = w2 * np.exp(_pairwise_sq_dists(h, w) / (-2.0 * theta_gamma**2))
    return _smooth_cache[key]


def crf_refine(image: np.ndarray, unary: np.ndarray, params: CrfParams) -> np.ndarray:
    """Run parallel mean-field sweeps and return the refined marginals.

    Each sweep reads the previous sweep's marginals only:
        Q_i(l) proportional to U_i(l) * exp( sum_{j != i} k_ij * Q_j(l) )
    which is the Potts-compatibility update; the label-independent part of
    the message cancels in the per-pixel normalization.
    """
    img = check_image(image, name="image")
    q = check_prob_map(unary, name="unary")
    if img.shape[:2] != q.shape[:2]:
        raise ValueError(f"image {img.shape[:2]} and unary {q.shape[:2]} dimensions differ")
    if params.iterations == 0:
        return q.copy()

    h, w, _ = q.shape
    n = h * w
    if params.w_appearance == 0.0 and params.w_smooth == 0.0:
        # Zero pairwise potentials: every sweep is exactly the identity.
        return q.copy()

    pd2 = _pairwise_sq_dists(h, w)
    intens = img.reshape(n, -1).astype(np.float64)
    sq = (intens * intens).sum(axis=1)
    id2 = sq[:, None] + sq[None, :] - 2.0 * (intens @ intens.T)
    arg = pd2 * (-0.5 / params.theta_alpha**2)
    arg += id2 * (-0.5 / params.theta_beta**2)
    k = np.exp(arg, out=arg)
    k *= params.w_appearance
    k += _smooth_kernel(h, w, params.w_smooth, params.theta_gamma)
    np.fill_diagonal(k, 0.0)

    with np.errstate(divide="ignore"):
        log_u = np.log(q.reshape(n, -1))
    qq = q.reshape(n, -1).copy()
    for _ in range(params.iterations):
        logits = log_u + k @ qq
        logits -= logits.max(axis=1, keepdims=True)
        qq = np.exp(logits)
        qq /= qq.sum(axis=1, keepdims=True)
    return qq.reshape(h, w, -1)


def probmap_to_labels(q: np.ndarray, boxes, clamp_policy: str = "boxes") -> np.ndarray:
    """Per-pixel argmax with box clamping.

    Under the "boxes" policy a pixel may only take background or the class of
    a box covering it; pixels outside all boxes are background. Ties break to
    the lowest class id.
    """
    q = check_prob_map(q)
    if clamp_policy not in CLAMP_POLICIES:
        raise ValueError(f"unknown clamp policy {clamp_policy!r}; valid: {CLAMP_POLICIES}")
    h, w, n = q.shape
    if clamp_policy == "none":
        return np.argmax(q, axis=2).astype(np.uint8)
    check_boxes_within(boxes, h, w)
    allowed = np.zeros((h, w, n), dtype=bool)
    allowed[:, :, 0] = True
    for b in boxes:
        ys, xs = b.slices()
        allowed[ys, xs, b.class_id] = True
    masked = np.where(allowed, q, -np.inf)
    return np.argmax(masked, axis=2).astype(np.uint8)


def _propose_one(sample: ImageSample, n_classes: int, mode: str, params: CrfParams, overlap_policy: str):
    box_map = rasterize_box_labels(sample.boxes, sample.height, sample.width, overlap_policy)
    if mode == "box":
        return box_map
    unary = unary_from_boxes(box_map, params.p_fg, n_classes)
    q = crf_refine(sample.pixels, unary, params)
    return probmap_to_labels(q, sample.boxes)


def generate_proposals(
    samples: list[ImageSample],
    n_classes: int,
    mode: str = "crf",
    params: CrfParams | None = None,
    overlap_policy: str = "smallest",
    n_jobs: int = 1,
) -> list[np.ndarray]:
    """Proposal label maps for a corpus, one per sample, aligned by index.

    Images are independent, so n_jobs > 1 fans them out across processes;
    results keep the input order either way.
    """
    if mode not in ("box", "crf"):
        raise ValueError(f"unknown proposal mode {mode!r}; valid: box, crf")
    params = params or CrfParams()
    if n_jobs == 1 or mode == "box" or len(samples) < 4:
        return [_propose_one(s, n_classes, mode, params, overlap_policy) for s in samples]
    from joblib import Parallel, delayed, parallel_backend

    with parallel_backend("loky", n_jobs=n_jobs, inner_max_num_threads=1):
        return Parallel()(delayed(_propose_one)(s, n_classes, mode, params, overlap_policy) for s in samples)


# ---------------------------------------------------------------------------
# Proposal directory: same manifest structure as a dataset, one label raster
# per sample. IGNORE (255) is representable since rasters are 8-bit.

PROPOSALS_FORMAT = "boxseg-proposals-v1"


def save_label_maps(label_maps: list[np.ndarray], ids: list[str], out_dir: str | Path, meta: dict | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for sample_id, labels in zip(ids, label_maps):
        name = f"{sample_id}_labels.pgm"
        write_pgm(out / name, labels.astype(np.uint8))
        records.append({"id": sample_id, "height": labels.shape[0], "width": labels.shape[1], "label_raster": name})
    manifest = {"format": PROPOSALS_FORMAT, "samples": records, "meta": meta or {}}
    (out / "manifest.txt").write_text(json.dumps(manifest, indent=2) + "\n")


def load_label_maps(in_dir: str | Path) -> tuple[list[np.ndarray], list[str], dict]:
    root = Path(in_dir)
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != PROPOSALS_FORMAT:
        raise DatasetError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    maps, ids = [], []
    for rec in manifest["samples"]:
        labels = read_pgm(root / rec["label_raster"])
        if labels.shape != (rec["height"], rec["width"]):
            raise DatasetError(f"{rec['label_raster']}: raster is {labels.shape}, manifest says "
                               f"({rec['height']}, {rec['width']})")
        maps.append(labels)
        ids.append(rec["id"])
    return maps, ids, manifest.get("meta", {})
