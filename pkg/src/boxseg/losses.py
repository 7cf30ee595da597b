"""Training objectives: adaptive top-rate pixel selection, softmax
cross-entropy with an ignore label, and the attention-mask MSE term.

The selection step relabels each box so that only its top-scoring pixels
(the fraction given by the box's filling rate) carry the class label and the
rest are ignored. Selection is recomputed from the current scores on every
forward pass and is gradient-opaque: ranking is piecewise constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import IGNORE, BoxAnnotation
from .fillrate import FillRateTable, fill_rate_for
from .validation import check_fraction, check_same_shape

FR_MODES = ("off", "class_fr", "subclass_fr", "global_fr")
RANKING_BASES = ("all_box_pixels", "proposal_foreground_pixels")


@dataclass(frozen=True)
class FrSelectionConfig:
    """How the top pixels of each box are chosen.

    ranking_base "all_box_pixels" ranks every pixel of the box by its class
    score; "proposal_foreground_pixels" ranks only pixels the proposal labels
    with the box's class. Score ties go to the higher raster index.
    """

    mode: str = "class_fr"
    global_rate: float = 0.6
    ranking_base: str = "all_box_pixels"

    def __post_init__(self):
        if self.mode not in FR_MODES:
            raise ValueError(f"unknown FR mode {self.mode!r}; valid: {FR_MODES}")
        if self.ranking_base not in RANKING_BASES:
            raise ValueError(f"unknown ranking base {self.ranking_base!r}; valid: {RANKING_BASES}")
        check_fraction(self.global_rate, "global_rate", lo=0.0, hi=1.0, lo_open=True)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "global_rate": self.global_rate, "ranking_base": self.ranking_base}

    @staticmethod
    def from_dict(d: dict) -> "FrSelectionConfig":
        known = set(FrSelectionConfig.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown FrSelectionConfig keys: {sorted(bad)}")
        return FrSelectionConfig(**d)


@dataclass
class LossBreakdown:
    """One batch's loss terms; l_all = l_fr + lam * sum(l_bcm) as computed."""

    l_fr: float
    l_bcm: np.ndarray  # one entry per attention head
    lam: float
    l_all: float
    selected_counts: np.ndarray  # pixels labeled per class in the adjusted maps

    def add(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            l_fr=self.l_fr + other.l_fr,
            l_bcm=self.l_bcm + other.l_bcm,
            lam=self.lam,
            l_all=self.l_all + other.l_all,
            selected_counts=self.selected_counts + other.selected_counts,
        )


def _resolve_rate(box: BoxAnnotation, fr_table, cfg: FrSelectionConfig, feature=None) -> float:
    if cfg.mode == "global_fr":
        return cfg.global_rate
    if fr_table is None:
        raise ValueError(f"FR mode {cfg.mode!r} requires a fill-rate table")
    return fill_rate_for(box, fr_table, refined=(cfg.mode == "subclass_fr"), feature=feature)


def fr_select(
    scores: np.ndarray,
    boxes,
    proposal: np.ndarray,
    fr_table: FillRateTable | None,
    cfg: FrSelectionConfig,
    box_features=None,
) -> np.ndarray:
    """Adjusted label map: per box, the top ceil(rate * area) candidate pixels
    by class score keep the class label, every other box pixel becomes IGNORE.

    Boxes are processed smallest-area first; pixels already holding a
    foreground label are never reassigned. scores, proposal and boxes must
    share one resolution. box_features optionally supplies (ratio, log aspect)
    per box for sub-class lookup when boxes carry no sub_class_id.
    """
    if cfg.mode == "off":
        return proposal.copy()
    n, h, w = scores.shape
    if proposal.shape != (h, w):
        raise ValueError(f"proposal shape {proposal.shape} does not match scores {scores.shape[1:]}")
    out = proposal.copy()
    assigned = np.zeros((h, w), dtype=bool)

    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].area, boxes[i].class_id, i))
    for i in order:
        b = boxes[i]
        if b.x1 > w or b.y1 > h:
            raise ValueError(f"box {b} exceeds score map {scores.shape[1:]}")
        rate = _resolve_rate(b, fr_table, cfg, None if box_features is None else box_features[i])
        ys, xs = b.slices()
        window_scores = scores[b.class_id, ys, xs].reshape(-1)
        free = ~assigned[ys, xs].reshape(-1)
        if cfg.ranking_base == "proposal_foreground_pixels":
            candidates = np.flatnonzero(free & (proposal[ys, xs].reshape(-1) == b.class_id))
        else:
            candidates = np.flatnonzero(free)
        top = min(int(np.ceil(rate * b.area)), candidates.size)
        # Descending score; equal scores won by the higher raster index.
        order_in_box = candidates[np.lexsort((-candidates, -window_scores[candidates]))]
        chosen = order_in_box[:top]

        window_out = out[ys, xs].reshape(-1)
        window_out[free] = IGNORE
        window_out[chosen] = b.class_id
        out[ys, xs] = window_out.reshape(b.height, b.width)
        window_assigned = assigned[ys, xs].reshape(-1)
        window_assigned[chosen] = True
        assigned[ys, xs] = window_assigned.reshape(b.height, b.width)
    return out


def softmax_ce(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over non-IGNORE pixels of one sample.

    Returns (loss, dL/dscores); the gradient is zero at IGNORE pixels and
    (softmax - onehot) / count elsewhere. All-IGNORE input gives (0, zeros).
    """
    n, h, w = scores.shape
    labels = np.asarray(labels)
    check_same_shape(labels, scores[0], "labels", "scores[0]")
    valid = labels != IGNORE
    if valid.any() and labels[valid].max() >= n:
        raise ValueError(f"label {labels[valid].max()} out of range for {n} classes")
    grad = np.zeros_like(scores)
    count = int(valid.sum())
    if count == 0:
        return 0.0, grad

    shifted = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)
    log_p = shifted - np.log(e.sum(axis=0, keepdims=True))

    lab = labels[valid].astype(int)
    picked = log_p[:, valid][lab, np.arange(count)]
    loss = float(-picked.sum() / count)

    g = p[:, valid]
    g[lab, np.arange(count)] -= 1.0
    grad[:, valid] = g / count
    return loss, grad


def bcm_loss(alpha: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed squared error between one attention map and its box mask.

    The sum (not mean) follows the mask-supervision definition; the combined
    loss's lambda absorbs the scale. Gradient is 2 * (alpha - mask).
    """
    check_same_shape(alpha, mask, "alpha", "mask")
    diff = alpha.astype(np.float64) - mask
    return float((diff * diff).sum()), (2.0 * diff)


def total_loss(
    scores: np.ndarray,
    alphas: np.ndarray,
    boxes,
    proposal: np.ndarray,
    fr_table: FillRateTable | None,
    masks: np.ndarray,
    lam: float,
    cfg: FrSelectionConfig,
    box_features=None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Combined objective for one sample at feature resolution.

    Runs fr_select (fixed during differentiation), cross-entropy on the
    adjusted labels, and the mask loss per attention head. Returns the
    breakdown plus dL/dscores and dL/dalphas.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    labels = fr_select(scores, boxes, proposal, fr_table, cfg, box_features)
    l_fr, d_scores = softmax_ce(scores, labels)

    n_heads = alphas.shape[0]
    check_same_shape(alphas, masks, "alphas", "masks")
    l_bcm = np.zeros(n_heads)
    d_alphas = np.zeros_like(alphas, dtype=np.float64)
    for a in range(n_heads):
        l_bcm[a], da = bcm_loss(alphas[a], masks[a])
        d_alphas[a] = lam * da

    n = scores.shape[0]
    counts = np.array([(labels == c).sum() for c in range(n)], dtype=np.int64)
    l_all = l_fr + lam * float(l_bcm.sum())
    return LossBreakdown(l_fr=l_fr, l_bcm=l_bcm, lam=lam, l_all=l_all, selected_counts=counts), d_scores, d_alphas
