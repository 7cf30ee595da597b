"""Training orchestration, mean-IoU evaluation and the ablation grid."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import ImageSample
from .fcn import (
    Architecture,
    ModelState,
    backward,
    default_architecture,
    downsample_box_masks,
    forward,
    init_model,
    sgd_step,
)
from .fillrate import BoxFillSample, FillRateTable, assign_subclass
from .losses import FrSelectionConfig, total_loss
from .validation import check_fraction

# Named supervision settings: (masking mode, FR selection mode, lambda,
# proposal source). Rows mirror the ablation units: class-wise masking alone
# (cm), box-driven global masking (bgm), full class-wise mask supervision
# (bcm), a shared global selection rate, class-level FR and sub-class FR.
SUPERVISION_PRESETS = {
    "box_like": ("off", "off", 0.0, "box"),
    "crf": ("off", "off", 0.0, "crf"),
    "crf+cm": ("classwise", "off", 0.0, "crf"),
    "crf+bgm": ("global", "off", 0.01, "crf"),
    "crf+bcm": ("classwise", "off", 0.01, "crf"),
    "crf+global": ("off", "global_fr", 0.0, "crf"),
    "crf+fr": ("off", "class_fr", 0.0, "crf"),
    "crf+fr_refined": ("off", "subclass_fr", 0.0, "crf"),
    "crf+bcm+fr": ("classwise", "class_fr", 0.01, "crf"),
    "crf+bcm+fr_refined": ("classwise", "subclass_fr", 0.01, "crf"),
}


@dataclass(frozen=True)
class TrainConfig:
    supervision: str = "crf+bcm+fr_refined"
    masking: str = "classwise"
    fr: FrSelectionConfig = field(default_factory=lambda: FrSelectionConfig(mode="subclass_fr"))
    lam: float = 0.01
    iterations: int = 2000
    base_lr: float = 2e-2
    lr_decay: float = 0.1
    lr_step: int = 1200
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    flip: bool = True
    crop: bool = True
    crop_pad: int = 4
    semi_fraction: float = 0.0
    branch_width: int = 8
    proposal_source: str = "crf"

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.lr_step <= 0 or not (0 < self.lr_decay <= 1):
            raise ValueError(f"bad lr schedule: decay {self.lr_decay}, step {self.lr_step}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        check_fraction(self.semi_fraction, "semi_fraction")
        if self.masking == "off" and self.lam != 0.0:
            raise ValueError("lam > 0 requires masking (the mask loss supervises attention maps)")
        if self.supervision not in SUPERVISION_PRESETS:
            raise ValueError(f"unknown supervision {self.supervision!r}; valid: {sorted(SUPERVISION_PRESETS)}")

    @staticmethod
    def for_supervision(name: str, **overrides) -> "TrainConfig":
        if name not in SUPERVISION_PRESETS:
            raise ValueError(f"unknown supervision {name!r}; valid: {sorted(SUPERVISION_PRESETS)}")
        masking, fr_mode, lam, source = SUPERVISION_PRESETS[name]
        fr = FrSelectionConfig(mode=fr_mode, **overrides.pop("fr_kwargs", {}))
        return TrainConfig(
            supervision=name, masking=masking, fr=fr, lam=lam, proposal_source=source, **overrides
        )

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "fr"}
        d["fr"] = self.fr.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown TrainConfig keys: {sorted(bad)}")
        kwargs = dict(d)
        if "fr" in kwargs:
            kwargs["fr"] = FrSelectionConfig.from_dict(kwargs["fr"])
        return TrainConfig(**kwargs)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class LogRow:
    iteration: int
    lr: float
    l_fr: float
    l_bcm_sum: float
    l_all: float
    selected_counts: np.ndarray

    def as_tsv(self) -> str:
        counts = ",".join(str(int(c)) for c in self.selected_counts)
        return f"{self.iteration}\t{self.lr:.8f}\t{self.l_fr:.6f}\t{self.l_bcm_sum:.6f}\t{self.l_all:.6f}\t{counts}"


LOG_HEADER = "iteration\tlr\tl_fr\tl_bcm_sum\tl_all\tselected_counts"


def write_training_log(path: str | Path, rows: list[LogRow], config: TrainConfig):
    lines = [f"# config {json.dumps(config.to_dict(), sort_keys=True)}", LOG_HEADER]
    lines.extend(r.as_tsv() for r in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def _augment(pixels, labels, boxes, rng, cfg: TrainConfig):
    """Horizontal flip and random crop-with-pad (a small translation)."""
    h, w = labels.shape
    if cfg.flip and rng.random() < 0.5:
        pixels = pixels[:, ::-1]
        labels = labels[:, ::-1]
        boxes = [b.hflipped(w) for b in boxes]
    if cfg.crop and cfg.crop_pad > 0:
        dx = int(rng.integers(-cfg.crop_pad, cfg.crop_pad + 1))
        dy = int(rng.integers(-cfg.crop_pad, cfg.crop_pad + 1))
        if dx or dy:
            shifted_px = np.zeros_like(pixels)
            shifted_lb = np.zeros_like(labels)  # vacated pixels become background
            src_y = slice(max(0, -dy), min(h, h - dy))
            src_x = slice(max(0, -dx), min(w, w - dx))
            dst_y = slice(max(0, dy), min(h, h + dy))
            dst_x = slice(max(0, dx), min(w, w + dx))
            shifted_px[dst_y, dst_x] = pixels[src_y, src_x]
            shifted_lb[dst_y, dst_x] = labels[src_y, src_x]
            pixels, labels = shifted_px, shifted_lb
            boxes = [bb for bb in (b.shifted_clipped(dx, dy, w, h) for b in boxes) if bb is not None]
    return pixels, labels, list(boxes)


def _attach_subclasses(samples, proposals, fr_table: FillRateTable):
    """Resolve each box's sub-class id once, from the unaugmented proposal."""
    out = []
    for s, prop in zip(samples, proposals):
        boxes = []
        for b in s.boxes:
            feat = BoxFillSample.measure(b, prop).feature
            sc = assign_subclass(feat, fr_table.centroids(b.class_id))
            boxes.append(replace(b, sub_class_id=sc))
        out.append(tuple(boxes))
    return out


def _union_masks(class_masks: np.ndarray) -> np.ndarray:
    """(N, h, w) class masks -> (1, h, w) union of the foreground masks."""
    return class_masks[1:].max(axis=0, keepdims=True)


def train(
    samples: list[ImageSample],
    proposals: list[np.ndarray],
    fr_table: FillRateTable | None,
    cfg: TrainConfig,
    n_classes: int,
    arch: Architecture | None = None,
) -> tuple[ModelState, list[LogRow]]:
    """SGD training with step-decayed learning rate; deterministic per config.

    proposals align with samples by index. The semi fraction replaces the
    proposal of a fixed seed-chosen subset with ground-truth labels; those
    samples are fully supervised, so FR selection does not apply to them.
    """
    if len(samples) != len(proposals):
        raise ValueError(f"{len(samples)} samples but {len(proposals)} proposals")
    if not samples:
        raise ValueError("empty training set")
    if cfg.fr.mode in ("class_fr", "subclass_fr"):
        if fr_table is None:
            raise ValueError(f"supervision {cfg.supervision!r} needs a fill-rate table")
        for s in samples:
            for b in s.boxes:
                fr_table.fill_rate(b.class_id)  # raises on missing class entries

    if arch is None:
        arch = default_architecture(
            n_classes, in_channels=samples[0].channels, branch_width=cfg.branch_width, masking=cfg.masking
        )
    elif arch.masking != cfg.masking:
        raise ValueError(f"architecture masking {arch.masking!r} conflicts with config {cfg.masking!r}")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, semi_ss, order_ss, aug_ss = root.spawn(4)
    state = init_model(arch, init_ss)
    semi_rng = np.random.default_rng(semi_ss)
    order_rng = np.random.default_rng(order_ss)
    aug_rng = np.random.default_rng(aug_ss)

    n = len(samples)
    n_gt = int(round(cfg.semi_fraction * n))
    gt_supervised = set(semi_rng.permutation(n)[:n_gt].tolist())

    boxes_per_sample = [s.boxes for s in samples]
    if cfg.fr.mode == "subclass_fr":
        boxes_per_sample = _attach_subclasses(samples, proposals, fr_table)

    stride = arch.feature_stride
    fr_off = FrSelectionConfig(mode="off")
    queue: list[int] = []
    rows: list[LogRow] = []

    for it in range(cfg.iterations):
        lr = cfg.base_lr * cfg.lr_decay ** (it // cfg.lr_step)
        while len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(n).tolist())
        batch_idx = [queue.pop(0) for _ in range(cfg.batch_size)]

        images = []
        per_sample = []
        for i in batch_idx:
            s = samples[i]
            sup = s.gt_labels if i in gt_supervised else proposals[i]
            px, lab, boxes = _augment(s.pixels, sup, list(boxes_per_sample[i]), aug_rng, cfg)
            images.append(np.ascontiguousarray(px.transpose(2, 0, 1)))
            labels_f = lab[::stride, ::stride]
            masks = downsample_box_masks(boxes, n_classes, s.height, s.width, stride)
            if arch.masking == "global":
                masks = _union_masks(masks)
            boxes_f = []
            for b in boxes:
                fb = replace(
                    b,
                    x0=b.x0 // stride, y0=b.y0 // stride,
                    x1=-(-b.x1 // stride), y1=-(-b.y1 // stride),
                )
                boxes_f.append(fb)
            fr_cfg = fr_off if i in gt_supervised else cfg.fr
            per_sample.append((labels_f, boxes_f, masks, fr_cfg))

        batch = np.stack(images).astype(np.float32)
        acts = forward(state, batch)

        d_scores = np.zeros_like(acts.scores)
        d_alpha = np.zeros_like(acts.alpha) if cfg.lam > 0 else None
        breakdown = None
        for b_i, (labels_f, boxes_f, masks, fr_cfg) in enumerate(per_sample):
            bd, ds, da = total_loss(
                acts.scores[b_i], acts.alpha[b_i], boxes_f, labels_f, fr_table, masks, cfg.lam, fr_cfg
            )
            d_scores[b_i] = ds
            if d_alpha is not None:
                d_alpha[b_i] = da
            breakdown = bd if breakdown is None else breakdown.add(bd)

        if not np.isfinite(breakdown.l_all):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        backward(state, acts, d_scores, d_alpha)
        sgd_step(state, lr, cfg.momentum, cfg.batch_size)
        rows.append(
            LogRow(
                iteration=it,
                lr=lr,
                l_fr=breakdown.l_fr,
                l_bcm_sum=float(breakdown.l_bcm.sum()),
                l_all=breakdown.l_all,
                selected_counts=breakdown.selected_counts,
            )
        )
    return state, rows


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # NaN for classes absent from the ground truth
    miou: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    config_fingerprint: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "tp": self.tp.tolist(),
            "fp": self.fp.tolist(),
            "fn": self.fn.tolist(),
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps({"format": "boxseg-eval-v1", **self.to_dict()}, indent=2) + "\n")


def predict_labels(state: ModelState, samples: list[ImageSample], batch_size: int = 16) -> list[np.ndarray]:
    """Argmax of the nearest-neighbor-upsampled score maps, full resolution."""
    stride = state.arch.feature_stride
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        batch = np.stack([np.ascontiguousarray(s.pixels.transpose(2, 0, 1)) for s in chunk]).astype(np.float32)
        scores = forward(state, batch).scores
        up = scores.repeat(stride, axis=2).repeat(stride, axis=3)
        preds.extend(np.argmax(up, axis=1).astype(np.uint8))
    return preds


def confusion_matrix(preds, gts, n_classes: int) -> np.ndarray:
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        idx = g.astype(np.int64).ravel() * n_classes + p.astype(np.int64).ravel()
        mat += np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return mat


def evaluate_miou(
    state: ModelState, samples: list[ImageSample], n_classes: int,
    config_fingerprint: str = "", seed: int = 0,
) -> EvalReport:
    """Mean IoU over classes present in the ground truth, from an accumulated
    pixel confusion matrix."""
    preds = predict_labels(state, samples)
    mat = confusion_matrix(preds, [s.gt_labels for s in samples], n_classes)
    tp = np.diag(mat).astype(np.int64)
    fn = mat.sum(axis=1) - tp
    fp = mat.sum(axis=0) - tp
    present = (tp + fn) > 0
    iou = np.full(n_classes, np.nan)
    denom = tp + fp + fn
    iou[present] = tp[present] / denom[present]
    return EvalReport(
        per_class_iou=iou,
        miou=float(np.nanmean(iou[present])),
        tp=tp, fp=fp, fn=fn,
        config_fingerprint=config_fingerprint,
        seed=seed,
    )


@dataclass
class AblationRow:
    name: str
    seeds: list[int]
    mious: list[float]
    median_miou: float


def _ablation_cell(train_samples, val_samples, n_classes, proposals, fr_table, cfg_s: TrainConfig) -> float:
    state, _ = train(train_samples, proposals, fr_table, cfg_s, n_classes)
    report = evaluate_miou(state, val_samples, n_classes, cfg_s.fingerprint(), cfg_s.seed)
    return report.miou


def run_ablation(
    train_samples: list[ImageSample],
    val_samples: list[ImageSample],
    n_classes: int,
    grid: list[tuple[str, TrainConfig]],
    seeds: list[int],
    proposals_by_source: dict[str, list[np.ndarray]],
    fr_tables_by_source: dict[str, FillRateTable | None],
    n_jobs: int = 1,
) -> list[AblationRow]:
    """Train and evaluate every (config, seed) cell; rows keep grid order and
    report per-seed and median mean IoU. Cells are independent, so n_jobs > 1
    fans them out across processes without changing any result."""
    if not seeds:
        raise ValueError("need at least one seed")
    tasks = []
    for name, cfg in grid:
        if cfg.proposal_source not in proposals_by_source:
            raise ValueError(f"{name}: no proposals for source {cfg.proposal_source!r}")
        for seed in seeds:
            tasks.append((cfg.proposal_source, replace(cfg, seed=seed)))

    if n_jobs == 1:
        mious = [
            _ablation_cell(train_samples, val_samples, n_classes,
                           proposals_by_source[src], fr_tables_by_source.get(src), cfg_s)
            for src, cfg_s in tasks
        ]
    else:
        from joblib import Parallel, delayed, parallel_backend

        with parallel_backend("loky", n_jobs=n_jobs, inner_max_num_threads=1):
            mious = Parallel()(
                delayed(_ablation_cell)(train_samples, val_samples, n_classes,
                                        proposals_by_source[src], fr_tables_by_source.get(src), cfg_s)
                for src, cfg_s in tasks
            )

    rows = []
    for i, (name, _) in enumerate(grid):
        cell = list(mious[i * len(seeds):(i + 1) * len(seeds)])
        rows.append(AblationRow(name=name, seeds=list(seeds), mious=cell, median_miou=float(np.median(cell))))
    return rows


def format_ablation_table(rows: list[AblationRow]) -> str:
    lines = ["name\tmedian_miou\tper_seed_miou"]
    for r in rows:
        per_seed = ",".join(f"{m:.4f}" for m in r.mious)
        lines.append(f"{r.name}\t{r.median_miou:.4f}\t{per_seed}")
    return "\n".join(lines) + "\n"
