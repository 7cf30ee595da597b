import numpy as np
import pytest

from boxseg.dataset import (
    BoxAnnotation,
    DatasetError,
    GenerationError,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    read_pgm,
    save_dataset,
    shape_mask,
    tight_box,
    write_pgm,
)


def test_block_fills_box_exactly():
    mask = shape_mask("block", 10, 10)
    assert mask.sum() == 100
    assert mask.sum() / mask.size == 1.0


def test_disc_32_fill_matches_pixel_center_oracle():
    # oracle: count pixel centers satisfying the ellipse inequality directly
    count = 0
    for i in range(32):
        for j in range(32):
            u = (j + 0.5) / 32.0
            v = (i + 0.5) / 32.0
            if (2 * u - 1) ** 2 + (2 * v - 1) ** 2 <= 1.0:
                count += 1
    mask = shape_mask("disc", 32, 32)
    assert mask.sum() == count
    assert 0.76 <= count / 1024 <= 0.80


def test_wedge_fill_matches_pixel_center_oracle():
    # hypotenuse through the corner pixel centers: center (j, i) is inside
    # iff j/(W-1) + i/(H-1) <= 1, evaluated in exact integer arithmetic
    count = 0
    for i in range(20):
        for j in range(14):
            if i * 13 + j * 19 <= 13 * 19:
                count += 1
    assert shape_mask("wedge", 14, 20).sum() == count


def test_wedge_mask_is_tight():
    for w, h in [(14, 20), (16, 16), (17, 22), (22, 16)]:
        mask = shape_mask("wedge", w, h)
        assert mask[0].all()          # top row: full leg
        assert mask[:, 0].all()       # left column: full leg
        assert mask[h - 1, 0]         # bottom-left corner pixel present
        assert mask[0, w - 1]         # top-right corner pixel present


@pytest.mark.parametrize("side", [8, 16, 21, 33])
def test_wedge_square_fill_bound(side):
    fill = shape_mask("wedge", side, side).sum() / side**2
    assert abs(fill - 0.5) <= 1.0 / side


@pytest.mark.parametrize("side", [16, 24, 32, 40])
def test_disc_fill_near_analytic(side):
    # pixel-center rasterization leaves a few small squares (16, 19) just
    # past 0.02, so the per-box bound is 0.035; the mean is tested separately
    fill = shape_mask("disc", side, side).sum() / side**2
    assert abs(fill - np.pi / 4) <= 0.035


def test_disc_fill_mean_near_analytic():
    rng = np.random.default_rng(0)
    fills = []
    for _ in range(300):
        w = int(rng.integers(16, 41))
        h = int(np.clip(round(w * rng.uniform(0.85, 1.15)), 16, 40))
        fills.append(shape_mask("disc", w, h).sum() / (w * h))
    assert abs(np.mean(fills) - np.pi / 4) <= 0.02


def test_generate_deterministic():
    cfg = SynthConfig(count=6, seed=9)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    for sa, sb in zip(a, b):
        assert sa.id == sb.id
        assert np.array_equal(sa.pixels, sb.pixels)
        assert np.array_equal(sa.gt_labels, sb.gt_labels)
        assert sa.boxes == sb.boxes


def test_boxes_are_tight(small_corpus):
    cfg, samples = small_corpus
    for s in samples:
        for b in s.boxes:
            ys, xs = b.slices()
            region = np.zeros_like(s.gt_labels, dtype=bool)
            region[ys, xs] = s.gt_labels[ys, xs] == b.class_id
            assert tight_box(region, b.class_id) == b


def test_shape_fill_rates_per_box(small_corpus):
    cfg, samples = small_corpus
    kinds = {i + 1: k for i, k in enumerate(cfg.shapes)}
    for s in samples:
        for b in s.boxes:
            ys, xs = b.slices()
            fill = (s.gt_labels[ys, xs] == b.class_id).mean()
            kind = kinds[b.class_id]
            if kind == "block":
                assert fill == 1.0
            elif kind == "wedge":
                assert abs(fill - 0.5) <= 1.0 / min(b.width, b.height)
            elif kind == "disc":
                assert abs(fill - np.pi / 4) <= 0.035


def test_nonoverlap_masks_disjoint(small_corpus):
    _, samples = small_corpus
    for s in samples:
        total_box_area = sum(b.area for b in s.boxes)
        covered = np.zeros_like(s.gt_labels, dtype=bool)
        for b in s.boxes:
            ys, xs = b.slices()
            covered[ys, xs] = True
        assert covered.sum() == total_box_area  # boxes do not overlap


def test_tight_box_examples():
    mask = np.zeros((6, 7), dtype=bool)
    mask[3, 5] = True
    assert tight_box(mask, 1) == BoxAnnotation(1, 5, 3, 6, 4)

    assert tight_box(np.ones((4, 5), dtype=bool), 2) == BoxAnnotation(2, 0, 0, 5, 4)

    corners = np.zeros((4, 5), dtype=bool)
    corners[0, 0] = corners[3, 4] = True
    assert tight_box(corners, 1) == BoxAnnotation(1, 0, 0, 5, 4)

    with pytest.raises(ValueError):
        tight_box(np.zeros((3, 3), dtype=bool), 1)


def test_generation_error_names_sample():
    # four disjoint 8x8 boxes cannot be randomly placed on a 16x16 canvas
    cfg = SynthConfig(size=16, side_range=(8, 8), objects_per_image=(4, 4), count=1, seed=0)
    with pytest.raises(GenerationError, match="sample_00000"):
        generate_synthetic(cfg)


def test_save_load_round_trip(tmp_path, small_corpus):
    cfg, samples = small_corpus
    subset = samples[:10]
    save_dataset(subset, tmp_path / "d", n_classes=cfg.n_classes)
    loaded, n_classes = load_dataset(tmp_path / "d")
    assert n_classes == cfg.n_classes
    assert len(loaded) == 10
    for a, b in zip(subset, loaded):
        assert a.id == b.id
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.gt_labels, b.gt_labels)
        assert a.boxes == b.boxes


def test_save_is_byte_identical(tmp_path, small_corpus):
    cfg, samples = small_corpus
    for d in ("a", "b"):
        save_dataset(samples[:5], tmp_path / d, n_classes=cfg.n_classes)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_rgb_round_trip(tmp_path):
    cfg = SynthConfig(count=3, seed=4, channels=3)
    samples = generate_synthetic(cfg)
    assert samples[0].channels == 3
    save_dataset(samples, tmp_path / "rgb", n_classes=cfg.n_classes)
    loaded, _ = load_dataset(tmp_path / "rgb")
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.pixels, b.pixels)


def test_missing_raster_named_in_error(tmp_path, small_corpus):
    cfg, samples = small_corpus
    save_dataset(samples[:3], tmp_path / "d", n_classes=cfg.n_classes)
    victim = samples[1].id + "_gt.pgm"
    (tmp_path / "d" / victim).unlink()
    with pytest.raises(DatasetError, match=victim):
        load_dataset(tmp_path / "d")


def test_dimension_mismatch_is_format_error(tmp_path, small_corpus):
    cfg, samples = small_corpus
    save_dataset(samples[:1], tmp_path / "d", n_classes=cfg.n_classes)
    victim = tmp_path / "d" / (samples[0].id + "_gt.pgm")
    write_pgm(victim, np.zeros((8, 8), dtype=np.uint8))
    with pytest.raises(DatasetError, match="manifest says"):
        load_dataset(tmp_path / "d")


def test_empty_dataset_round_trip(tmp_path):
    save_dataset([], tmp_path / "empty", n_classes=4)
    loaded, n_classes = load_dataset(tmp_path / "empty")
    assert loaded == []
    assert n_classes == 4


def test_pgm_round_trip(tmp_path):
    arr = np.arange(48, dtype=np.uint8).reshape(6, 8)
    write_pgm(tmp_path / "x.pgm", arr)
    assert np.array_equal(read_pgm(tmp_path / "x.pgm"), arr)


def test_pgm_payload_starting_with_whitespace_bytes(tmp_path):
    # newline (10) and space (32) values at the start of the payload must
    # not be eaten by header parsing
    arr = np.full((4, 4), 10, dtype=np.uint8)
    arr[0, 1] = 32
    arr[0, 2] = 9
    write_pgm(tmp_path / "ws.pgm", arr)
    assert np.array_equal(read_pgm(tmp_path / "ws.pgm"), arr)


def test_pgm_corrupt_named(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P5\n8 8\n255\nshort")
    with pytest.raises(DatasetError, match="bad.pgm"):
        read_pgm(tmp_path / "bad.pgm")


def test_box_annotation_validation():
    with pytest.raises(ValueError):
        BoxAnnotation(0, 0, 0, 4, 4)  # background cannot own a box
    with pytest.raises(ValueError):
        BoxAnnotation(1, 4, 0, 4, 4)  # zero width


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(side_range=(4, 10))  # below the 8-pixel floor
    with pytest.raises(ValueError):
        SynthConfig(shapes=("block", "hexagon"))
    with pytest.raises(ValueError, match="unknown SynthConfig keys"):
        SynthConfig.from_dict({"sizes": 64})
