"""Input validation helpers shared across the package.

All checks raise ValueError with a message naming the offending input, so
callers (and the CLI) can surface one-line diagnostics.
"""

from __future__ import annotations

import numpy as np


def check_image(pixels, name="image"):
    """Validate an image array: (H, W) or (H, W, C) with C in {1, 3}, values in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name}: expected (H, W) or (H, W, C) with C in {{1, 3}}, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: empty spatial dimensions {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: intensities must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
    return arr


def check_label_map(labels, n_classes, ignore=None, name="labels"):
    """Validate a (H, W) integer label map with values in [0, n_classes) plus an optional ignore sentinel."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected 2-D label map, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name}: expected integer dtype, got {arr.dtype}")
    vals = arr if ignore is None else arr[arr != ignore]
    if vals.size and (vals.min() < 0 or vals.max() >= n_classes):
        raise ValueError(f"{name}: label values must lie in [0, {n_classes}), got range [{vals.min()}, {vals.max()}]")
    return arr


def check_boxes_within(boxes, height, width, name="boxes"):
    """Validate that every box lies inside a (height, width) canvas."""
    for i, b in enumerate(boxes):
        if b.x0 < 0 or b.y0 < 0 or b.x1 > width or b.y1 > height:
            raise ValueError(
                f"{name}[{i}] (class {b.class_id}, x0={b.x0}, y0={b.y0}, x1={b.x1}, y1={b.y1}) "
                f"outside {width}x{height} canvas"
            )
    return boxes


def check_prob_map(q, name="prob_map", tol=1e-6):
    """Validate a (H, W, N) probability map: non-negative, per-pixel sums equal 1 within tol."""
    arr = np.asarray(q)
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected (H, W, N), got shape {arr.shape}")
    if arr.min() < 0:
        raise ValueError(f"{name}: negative probabilities")
    dev = np.abs(arr.sum(axis=2) - 1.0).max()
    if dev > tol:
        raise ValueError(f"{name}: per-pixel sums deviate from 1 by {dev:.3g} (> {tol:.1g})")
    return arr


def check_same_shape(a, b, name_a, name_b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{name_a} shape {a.shape} does not match {name_b} shape {b.shape}")
    return a, b


def check_fraction(x, name, lo=0.0, hi=1.0, lo_open=False, hi_open=False):
    if not np.isfinite(x):
        raise ValueError(f"{name}: must be finite, got {x}")
    if x < lo or x > hi or (lo_open and x == lo) or (hi_open and x == hi):
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise ValueError(f"{name}: must lie in {lo_b}{lo}, {hi}{hi_b}, got {x}")
    return x
