"""Per-class mean filling rates and their sub-class refinement.

A box's filling rate is the fraction of its pixels the proposal labels with
the box's class. Class means drive the adaptive loss; k-means over the
2-D feature (fill ratio, log aspect ratio) splits a class into sub-classes
so shape and pose variants keep separate rates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import IGNORE, BoxAnnotation


@dataclass(frozen=True)
class BoxFillSample:
    """Fill statistics of one box under one proposal map."""

    class_id: int
    box_area: int
    proposal_fg: int
    ratio: float
    feature: tuple[float, float]  # (fill ratio, log aspect ratio)

    @staticmethod
    def measure(box: BoxAnnotation, proposal: np.ndarray) -> "BoxFillSample":
        ys, xs = box.slices()
        window = proposal[ys, xs]
        if (window == IGNORE).any():
            raise ValueError(f"proposal contains IGNORE pixels inside box {box}")
        fg = int((window == box.class_id).sum())
        area = box.area
        return BoxFillSample(
            class_id=box.class_id,
            box_area=area,
            proposal_fg=fg,
            ratio=fg / area,
            feature=(fg / area, float(np.log(box.aspect))),
        )


def collect_fill_samples(label_maps, boxes_per_image) -> list[BoxFillSample]:
    """One BoxFillSample per box, over parallel per-image sequences."""
    if len(label_maps) != len(boxes_per_image):
        raise ValueError(f"{len(label_maps)} label maps but {len(boxes_per_image)} box lists")
    out = []
    for i, (labels, boxes) in enumerate(zip(label_maps, boxes_per_image)):
        labels = np.asarray(labels)
        for b in boxes:
            if b.x1 > labels.shape[1] or b.y1 > labels.shape[0]:
                raise ValueError(f"image {i}: box {b} exceeds proposal map {labels.shape}")
            out.append(BoxFillSample.measure(b, labels))
    return out


def mean_fill_rates(samples: list[BoxFillSample]) -> dict[int, tuple[float, int]]:
    """Unweighted mean fill ratio and sample count per class."""
    per_class: dict[int, list[float]] = {}
    for s in samples:
        per_class.setdefault(s.class_id, []).append(s.ratio)
    return {c: (float(np.mean(rs)), len(rs)) for c, rs in sorted(per_class.items())}


# ---------------------------------------------------------------------------
# k-means with k-means++ seeding. Small and deterministic; assignments break
# ties toward the lowest centroid id, and k collapses to the number of
# distinct points when there are fewer than k.

def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations until assignments are stable; returns (centroids, labels)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError(f"kmeans needs a non-empty (n, d) array, got shape {points.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = np.unique(points, axis=0)
    k = min(k, distinct.shape[0])

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)  # first minimum: lowest id wins ties
        for j in range(k):
            member = new_labels == j
            if member.any():
                centroids[j] = points[member].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its centroid.
                worst = int(np.argmax(d2[np.arange(len(points)), new_labels]))
                centroids[j] = points[worst]
                new_labels[worst] = j
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return centroids, labels


def kmeans_objective(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def cluster_subclasses(samples: list[BoxFillSample], k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster one class's boxes; returns (centroids, per-sample sub-class ids)."""
    if not samples:
        raise ValueError("cluster_subclasses: no samples")
    feats = np.array([s.feature for s in samples], dtype=np.float64)
    return kmeans(feats, k, seed)


def assign_subclass(feature, centroids: np.ndarray) -> int:
    """Nearest centroid by Euclidean distance; ties to the lowest sub-class id."""
    feature = np.asarray(feature, dtype=np.float64)
    d2 = ((centroids - feature) ** 2).sum(axis=1)
    return int(np.argmin(d2))


@dataclass(frozen=True)
class SubclassStats:
    centroid: tuple[float, float]
    fill_rate: float
    count: int


@dataclass(frozen=True)
class ClassStats:
    fill_rate: float
    count: int
    subclasses: tuple[SubclassStats, ...]


@dataclass(frozen=True)
class FillRateTable:
    """Frozen per-class and per-sub-class mean filling rates."""

    k: int
    seed: int
    classes: dict[int, ClassStats]

    def fill_rate(self, class_id: int) -> float:
        if class_id not in self.classes:
            raise KeyError(f"class {class_id} has no fill-rate entry")
        return self.classes[class_id].fill_rate

    def centroids(self, class_id: int) -> np.ndarray:
        if class_id not in self.classes:
            raise KeyError(f"class {class_id} has no fill-rate entry")
        return np.array([s.centroid for s in self.classes[class_id].subclasses])

    def subclass_fill_rate(self, class_id: int, sub_class_id: int) -> float:
        if class_id not in self.classes:
            raise KeyError(f"class {class_id} has no fill-rate entry")
        subs = self.classes[class_id].subclasses
        if not 0 <= sub_class_id < len(subs):
            raise KeyError(f"class {class_id} has no sub-class {sub_class_id} (k={len(subs)})")
        return subs[sub_class_id].fill_rate

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "classes": {
                str(c): {
                    "fill_rate": st.fill_rate,
                    "count": st.count,
                    "subclasses": [
                        {"centroid": list(s.centroid), "fill_rate": s.fill_rate, "count": s.count}
                        for s in st.subclasses
                    ],
                }
                for c, st in sorted(self.classes.items())
            },
        }

    @staticmethod
    def from_dict(d: dict) -> "FillRateTable":
        classes = {}
        for c, st in d["classes"].items():
            subs = tuple(
                SubclassStats(centroid=(s["centroid"][0], s["centroid"][1]), fill_rate=s["fill_rate"], count=s["count"])
                for s in st["subclasses"]
            )
            classes[int(c)] = ClassStats(fill_rate=st["fill_rate"], count=st["count"], subclasses=subs)
        return FillRateTable(k=d["k"], seed=d["seed"], classes=classes)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps({"format": "boxseg-frtable-v1", **self.to_dict()}, indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "FillRateTable":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "boxseg-frtable-v1":
            raise ValueError(f"{path}: unknown fill-rate table format {d.get('format')!r}")
        return FillRateTable.from_dict(d)


def build_fill_rate_table(samples: list[BoxFillSample], k: int, seed: int) -> FillRateTable:
    """Class means plus k-means sub-classes; classes with fewer than k samples
    keep a single sub-class equal to the class itself."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    by_class: dict[int, list[BoxFillSample]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)

    classes = {}
    for c, cls_samples in sorted(by_class.items()):
        ratios = np.array([s.ratio for s in cls_samples])
        k_eff = k if len(cls_samples) >= k else 1
        centroids, assign = cluster_subclasses(cls_samples, k_eff, seed)
        subs = []
        for j in range(centroids.shape[0]):
            member = assign == j
            subs.append(
                SubclassStats(
                    centroid=(float(centroids[j, 0]), float(centroids[j, 1])),
                    fill_rate=float(ratios[member].mean()),
                    count=int(member.sum()),
                )
            )
        classes[c] = ClassStats(fill_rate=float(ratios.mean()), count=len(cls_samples), subclasses=tuple(subs))
    return FillRateTable(k=k, seed=seed, classes=classes)


def fill_rate_for(box: BoxAnnotation, table: FillRateTable, refined: bool, feature=None) -> float:
    """FR_c, or the sub-class rate when refined. Sub-class resolution uses the
    box's stored sub_class_id, falling back to nearest-centroid assignment of
    the given feature."""
    if not refined:
        return table.fill_rate(box.class_id)
    sc = box.sub_class_id
    if sc is None:
        if feature is None:
            raise ValueError(f"box {box} has no sub_class_id and no feature was given")
        sc = assign_subclass(feature, table.centroids(box.class_id))
    return table.subclass_fill_rate(box.class_id, sc)


def format_report(table: FillRateTable) -> str:
    """Human-readable per-class report with a simple bar."""
    lines = [f"fill rates (k={table.k}, seed={table.seed})"]
    for c, st in sorted(table.classes.items()):
        bar = "#" * int(round(st.fill_rate * 40))
        lines.append(f"  class {c}: FR={st.fill_rate:.4f} n={st.count:5d} |{bar}")
        if len(st.subclasses) > 1:
            for j, s in enumerate(st.subclasses):
                lines.append(
                    f"    sub {j}: FR={s.fill_rate:.4f} n={s.count:5d} "
                    f"centroid=({s.centroid[0]:.3f}, {s.centroid[1]:+.3f})"
                )
    return "\n".join(lines)
