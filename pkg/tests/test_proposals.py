import numpy as np
import pytest

from boxseg.dataset import BoxAnnotation, SynthConfig, generate_synthetic
from boxseg.proposals import (
    CrfParams,
    crf_refine,
    generate_proposals,
    load_label_maps,
    probmap_to_labels,
    rasterize_box_labels,
    save_label_maps,
    unary_from_boxes,
)


def straight_line_refine(image, unary, p):
    """Independent mean-field implementation: explicit O(n^2) double loop."""
    img = image if image.ndim == 3 else image[:, :, None]
    h, w, n = unary.shape
    q = unary.reshape(h * w, n).astype(float).copy()
    u = q.copy()
    pos = [(i, j) for i in range(h) for j in range(w)]
    intens = img.reshape(h * w, -1).astype(float)
    k = np.zeros((h * w, h * w))
    for a in range(h * w):
        for b in range(h * w):
            if a == b:
                continue
            pd2 = (pos[a][0] - pos[b][0]) ** 2 + (pos[a][1] - pos[b][1]) ** 2
            id2 = float(((intens[a] - intens[b]) ** 2).sum())
            k[a, b] = p.w_appearance * np.exp(-pd2 / (2 * p.theta_alpha**2) - id2 / (2 * p.theta_beta**2)) \
                + p.w_smooth * np.exp(-pd2 / (2 * p.theta_gamma**2))
    for _ in range(p.iterations):
        with np.errstate(divide="ignore"):
            logits = np.log(u) + k @ q
        logits -= logits.max(axis=1, keepdims=True)
        q = np.exp(logits)
        q /= q.sum(axis=1, keepdims=True)
    return q.reshape(h, w, n)


def test_rasterize_no_boxes():
    assert (rasterize_box_labels([], 8, 8) == 0).all()


def test_rasterize_single_box():
    labels = rasterize_box_labels([BoxAnnotation(2, 1, 2, 11, 12)], 16, 16)
    assert (labels == 2).sum() == 100
    assert (labels == 0).sum() == 156


def test_rasterize_nested_smallest_wins():
    big = BoxAnnotation(2, 0, 0, 10, 10)
    small = BoxAnnotation(1, 3, 3, 6, 6)
    labels = rasterize_box_labels([big, small], 12, 12)
    # hand-applied policy: the 3x3 interior belongs to class 1, the ring to 2
    assert (labels[3:6, 3:6] == 1).all()
    ring = labels[0:10, 0:10].copy()
    ring[3:6, 3:6] = 2
    assert (ring == 2).all()
    assert (labels[10:, :] == 0).all() and (labels[:, 10:] == 0).all()


def test_rasterize_tie_lower_class_wins():
    a = BoxAnnotation(2, 0, 0, 4, 4)
    b = BoxAnnotation(1, 2, 2, 6, 6)  # same area, overlapping corner
    labels = rasterize_box_labels([a, b], 8, 8)
    assert (labels[2:4, 2:4] == 1).all()


def test_rasterize_outside_canvas_errors():
    with pytest.raises(ValueError, match="class 1"):
        rasterize_box_labels([BoxAnnotation(1, 4, 4, 10, 10)], 8, 8)


def test_unary_foreground_pixel():
    labels = rasterize_box_labels([BoxAnnotation(1, 0, 0, 2, 2)], 4, 4)
    q = unary_from_boxes(labels, 0.9, 3)
    assert np.allclose(q[0, 0], [0.1, 0.9, 0.0])


def test_unary_background_pixel_two_classes():
    boxes = [BoxAnnotation(1, 0, 0, 2, 2), BoxAnnotation(2, 4, 4, 6, 6)]
    q = unary_from_boxes(rasterize_box_labels(boxes, 8, 8), 0.9, 3)
    assert np.allclose(q[0, 7], [0.9, 0.05, 0.05])


def test_unary_rows_sum_to_one(small_corpus):
    _, samples = small_corpus
    s = samples[0]
    labels = rasterize_box_labels(s.boxes, s.height, s.width)
    q = unary_from_boxes(labels, 0.7, 4)
    assert np.abs(q.sum(axis=2) - 1.0).max() == 0.0


def test_unary_no_boxes_all_background():
    q = unary_from_boxes(np.zeros((4, 4), dtype=np.uint8), 0.7, 3)
    assert (q[:, :, 0] == 1.0).all()
    assert (q[:, :, 1:] == 0.0).all()


def test_crf_zero_pairwise_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((6, 6)).astype(np.float32)
    labels = rasterize_box_labels([BoxAnnotation(1, 1, 1, 4, 4)], 6, 6)
    unary = unary_from_boxes(labels, 0.7, 2)
    params = CrfParams(iterations=4, w_appearance=0.0, w_smooth=0.0)
    out = crf_refine(img, unary, params)
    assert np.array_equal(out, unary)


def test_crf_zero_iterations_is_identity():
    rng = np.random.default_rng(1)
    img = rng.random((5, 5)).astype(np.float32)
    unary = unary_from_boxes(rasterize_box_labels([BoxAnnotation(1, 0, 0, 3, 3)], 5, 5), 0.8, 2)
    out = crf_refine(img, unary, CrfParams(iterations=0))
    assert np.array_equal(out, unary)


def test_crf_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    img = (np.round(rng.random((8, 8)) * 255) / 255).astype(np.float32)
    unary = unary_from_boxes(rasterize_box_labels([BoxAnnotation(1, 2, 2, 7, 6)], 8, 8), 0.7, 2)
    params = CrfParams(iterations=3)
    mine = crf_refine(img, unary, params)
    oracle = straight_line_refine(img, unary, params)
    assert np.abs(mine - oracle).max() <= 1e-6


def test_crf_normalized_after_every_sweep():
    rng = np.random.default_rng(3)
    img = (np.round(rng.random((10, 10)) * 255) / 255).astype(np.float32)
    unary = unary_from_boxes(rasterize_box_labels([BoxAnnotation(1, 2, 2, 8, 8)], 10, 10), 0.7, 2)
    for t in range(1, 6):
        q = crf_refine(img, unary, CrfParams(iterations=t))
        assert np.abs(q.sum(axis=2) - 1.0).max() <= 1e-6


def test_crf_two_region_erodes_loose_box():
    img = np.full((8, 8), 0.85, dtype=np.float32)
    img[2:6, 2:6] = 0.15  # dark block on bright ground
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[2:6, 2:6] = 1
    loose = [BoxAnnotation(1, 1, 1, 7, 7)]
    box_map = rasterize_box_labels(loose, 8, 8)
    q = crf_refine(img, unary_from_boxes(box_map, 0.7, 2), CrfParams())
    refined = probmap_to_labels(q, loose)
    box_fg_on_bg = int(((box_map == 1) & (gt == 0)).sum())
    crf_fg_on_bg = int(((refined == 1) & (gt == 0)).sum())
    assert crf_fg_on_bg < box_fg_on_bg


def test_crf_permutation_equivariant():
    rng = np.random.default_rng(11)
    img = (np.round(rng.random((8, 8)) * 255) / 255).astype(np.float32)
    boxes = [BoxAnnotation(1, 0, 0, 4, 4), BoxAnnotation(2, 4, 4, 8, 8)]
    unary = unary_from_boxes(rasterize_box_labels(boxes, 8, 8), 0.7, 3)
    params = CrfParams(iterations=3)
    out = crf_refine(img, unary, params)
    # swap the two foreground classes in the unary; output must swap too
    perm = [0, 2, 1]
    out_perm = crf_refine(img, unary[:, :, perm], params)
    assert np.abs(out_perm - out[:, :, perm]).max() <= 1e-12


def test_crf_smoothing_erodes_isolated_speckle():
    img = np.full((9, 9), 0.5, dtype=np.float32)  # constant image
    unary = np.zeros((9, 9, 2))
    unary[:, :, 0] = 0.9
    unary[:, :, 1] = 0.1
    unary[4, 4] = [0.3, 0.7]  # single-pixel foreground seed
    params = CrfParams(iterations=5, w_appearance=0.0, w_smooth=3.0, theta_gamma=3.0)
    q = crf_refine(img, unary, params)
    assert q[4, 4, 0] > q[4, 4, 1]


def test_crf_dimension_mismatch_errors():
    with pytest.raises(ValueError, match="dimensions differ"):
        crf_refine(np.zeros((4, 4), dtype=np.float32), np.full((5, 5, 2), 0.5), CrfParams())


def test_probmap_uniform_ties_to_background():
    q = np.full((6, 6, 2), 0.5)
    labels = probmap_to_labels(q, [BoxAnnotation(1, 1, 1, 4, 4)])
    assert (labels == 0).all()


def test_probmap_one_hot_ground_truth_recovered(small_corpus):
    _, samples = small_corpus
    s = samples[0]
    n = 4
    q = np.zeros((s.height, s.width, n))
    idx = np.indices(s.gt_labels.shape)
    q[idx[0], idx[1], s.gt_labels.astype(int)] = 1.0
    labels = probmap_to_labels(q, s.boxes)
    assert np.array_equal(labels, s.gt_labels)


def test_probmap_clamps_outside_boxes():
    q = np.zeros((4, 4, 3))
    q[:, :, 2] = 1.0  # peaked on class 2 everywhere
    labels = probmap_to_labels(q, [BoxAnnotation(2, 0, 0, 2, 2)])
    assert (labels[0:2, 0:2] == 2).all()
    assert (labels[2:, :] == 0).all() and (labels[:, 2:] == 0).all()
    unclamped = probmap_to_labels(q, [], clamp_policy="none")
    assert (unclamped == 2).all()


def test_box_containment_property(small_corpus):
    _, samples = small_corpus
    rng = np.random.default_rng(0)
    for s in samples[:6]:
        q = rng.random((s.height, s.width, 4))
        q /= q.sum(axis=2, keepdims=True)
        labels = probmap_to_labels(q, s.boxes)
        for c in range(1, 4):
            inside = np.zeros_like(labels, dtype=bool)
            for b in s.boxes:
                if b.class_id == c:
                    ys, xs = b.slices()
                    inside[ys, xs] = True
            assert not ((labels == c) & ~inside).any()


def test_crf_t0_proposals_equal_box_proposals(small_corpus):
    cfg, samples = small_corpus
    box = generate_proposals(samples[:4], cfg.n_classes, mode="box")
    crf0 = generate_proposals(samples[:4], cfg.n_classes, mode="crf", params=CrfParams(iterations=0))
    for a, b in zip(box, crf0):
        assert np.array_equal(a, b)


def test_label_maps_round_trip(tmp_path, small_corpus):
    cfg, samples = small_corpus
    maps = generate_proposals(samples[:4], cfg.n_classes, mode="box")
    save_label_maps(maps, [s.id for s in samples[:4]], tmp_path / "p", meta={"mode": "box"})
    loaded, ids, meta = load_label_maps(tmp_path / "p")
    assert ids == [s.id for s in samples[:4]]
    assert meta["mode"] == "box"
    for a, b in zip(maps, loaded):
        assert np.array_equal(a, b)


def test_crf_params_validation():
    with pytest.raises(ValueError):
        CrfParams(p_fg=0.4)
    with pytest.raises(ValueError):
        CrfParams(theta_alpha=0.0)
    with pytest.raises(ValueError, match="unknown CrfParams keys"):
        CrfParams.from_dict({"w_appearence": 1.0})
