import colorsys
import csv

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from wdtmd.errors import ConfigError, IngestionError, ValidationError
from wdtmd.image import (
    HsvImage,
    ManifestRow,
    PreprocessConfig,
    Sample,
    clahe,
    clip_histogram,
    decompose_hsv,
    hsv_variance_report,
    load_dataset,
    preprocess,
    read_png16,
    recompose_hsv,
    resize_bilinear,
    resize_mask,
    split_samples,
    tile_mappings,
    write_manifest,
    write_png16,
)


def global_he(levels):
    """Midpoint-CDF equalization written directly from counts."""
    n = levels.size
    out = np.empty(levels.shape)
    for lvl in np.unique(levels):
        below = np.count_nonzero(levels < lvl)
        same = np.count_nonzero(levels == lvl)
        out[levels == lvl] = (below + same / 2.0) / n
    return out


def clipped_tile_oracle(tile_levels, clip):
    hist = [0.0] * 256
    for lvl in tile_levels.ravel():
        hist[int(lvl)] += 1
    limit = max(clip * tile_levels.size / 256.0, 1.0)
    excess = sum(max(h - limit, 0.0) for h in hist)
    return np.array([min(h, limit) + excess / 256.0 for h in hist])


# ----------------------------------------------------------------- HSV

def test_value_is_channel_max():
    img = decompose_hsv(np.array([[[0.2, 0.5, 0.9]]]))
    assert img.value[0, 0] == 0.9


def test_grayscale_has_no_saturation():
    g = np.random.default_rng(0).random((5, 5))
    img = decompose_hsv(np.repeat(g[..., None], 3, axis=-1))
    assert np.all(img.saturation == 0)


def test_hsv_matches_colorsys():
    rgb = np.random.default_rng(1).random((1000, 1, 3))
    img = decompose_hsv(rgb)
    ref = np.array([colorsys.rgb_to_hsv(*px) for px in rgb[:, 0]])
    np.testing.assert_allclose(img.hue[:, 0], ref[:, 0], atol=1e-12)
    np.testing.assert_allclose(img.saturation[:, 0], ref[:, 1], atol=1e-12)
    np.testing.assert_allclose(img.value[:, 0], ref[:, 2], atol=0)
    back = recompose_hsv(img)
    assert np.abs(back - rgb).max() <= 1 / 255


@given(arrays(np.uint8, (4, 5, 3)))
def test_hsv_roundtrip_8bit(rgb8):
    rgb = rgb8 / 255.0
    back = recompose_hsv(decompose_hsv(rgb))
    assert np.abs(np.round(back * 255) - rgb8).max() <= 1


def test_hsv_planes_must_agree():
    with pytest.raises(ValidationError):
        HsvImage(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


# ----------------------------------------------------------------- CLAHE

def test_uniform_plane_stays_mid_gray():
    out = clahe(np.full((32, 32), 0.5))
    # 0.5 quantizes to level 128 = 0.50196, so one 8-bit step is the resolution
    assert np.abs(out - 0.5).max() <= 1 / 255


def test_single_tile_unclipped_is_global_he():
    v = np.random.default_rng(2).random((24, 20))
    levels = np.round(v * 255).astype(int)
    np.testing.assert_allclose(clahe(v, (1, 1), np.inf), global_he(levels), atol=1e-12)


def test_per_tile_histograms_two_tone():
    v = np.full((16, 16), 0.2)
    v[:, 9:] = 0.8
    v[5:11, 3:6] = 0.8
    levels = np.round(v * 255).astype(int)
    hists, _ = tile_mappings(levels, (8, 8), 2.0)
    for i in range(8):
        for j in range(8):
            tile = levels[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            np.testing.assert_allclose(hists[i, j], clipped_tile_oracle(tile, 2.0), atol=1e-12)


def test_tile_centre_uses_own_mapping():
    v = np.random.default_rng(3).random((32, 32))
    levels = np.round(v * 255).astype(int)
    _, maps = tile_mappings(levels, (4, 4), 2.0)
    out = clahe(v, (4, 4), 2.0)
    # tile (1, 2) spans rows 8..15, cols 16..23; its centre 11.5 falls between pixels, so
    # check the corner tile, whose pixels all clamp to a single map
    np.testing.assert_allclose(out[0, 0], maps[0, 0, levels[0, 0]], atol=1e-12)
    np.testing.assert_allclose(out[31, 31], maps[3, 3, levels[31, 31]], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 24), elements=st.floats(0, 1)), st.floats(0.5, 8.0))
def test_clahe_range_and_determinism(v, clip):
    a = clahe(v, (4, 4), clip)
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, clahe(v, (4, 4), clip))


def test_clahe_is_monotone_within_a_tile_map():
    v = np.linspace(0, 1, 64).reshape(8, 8)
    out = clahe(v, (1, 1), 2.0)
    assert np.all(np.diff(out.ravel()) >= 0)


@given(arrays(np.float64, 256, elements=st.floats(0, 50)), st.floats(0.5, 40))
def test_clip_histogram_conserves_mass(hist, limit):
    out = clip_histogram(hist, limit)
    assert out.sum() == pytest.approx(hist.sum(), rel=1e-12, abs=1e-9)
    assert out.max() <= max(limit, 0) + hist.sum() / 256 + 1e-9


@pytest.mark.parametrize("kwargs", [dict(tiles=(0, 4)), dict(clip_limit=0.0), dict(tiles=(9, 2))])
def test_clahe_config_errors(kwargs):
    with pytest.raises(ConfigError):
        clahe(np.zeros((8, 8)), **kwargs)


# ----------------------------------------------------------------- resize

def bilinear_point(img, y, x):
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, img.shape[0] - 1), min(x0 + 1, img.shape[1] - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def test_resize_identity_bit_exact():
    v = np.random.default_rng(4).random((6, 8))
    out = resize_bilinear(v, (8, 6))
    np.testing.assert_array_equal(out, v)
    assert out is not v


def test_checkerboard_upscale():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = resize_bilinear(board, (4, 4))
    for (y, x) in [(0, 0), (0, 3), (3, 0), (3, 3)]:
        assert out[y, x] == board[y // 3, x // 3]
    centre = out[1:3, 1:3]
    assert np.all((centre > 0) & (centre < 1))


def test_downscale_matches_direct_formula():
    img = np.random.default_rng(5).random((10, 10))
    out = resize_bilinear(img, (6, 4))
    for i in range(4):
        for j in range(6):
            expected = bilinear_point(img, i * 9 / 3, j * 9 / 5)
            assert abs(out[i, j] - expected) <= 1e-12


def test_resize_rgb_stack():
    img = np.random.default_rng(6).random((10, 12, 3))
    out = resize_bilinear(img, (6, 4))
    np.testing.assert_allclose(out[..., 1], resize_bilinear(img[..., 1], (6, 4)), atol=1e-15)


@pytest.mark.parametrize("target", [(7, 4), (4, 5), (0, 2)])
def test_resize_rejects_bad_targets(target):
    with pytest.raises(ConfigError):
        resize_bilinear(np.zeros((4, 4)), target)


def test_mask_resize_stays_binary():
    m = np.zeros((20, 30), dtype=np.uint8)
    m[5:9, 10:14] = 1
    out = resize_mask(m, (16, 10))
    assert set(np.unique(out)) <= {0, 1}
    assert out.any()


# ----------------------------------------------------------------- samples and loading

def test_sample_label_and_mask_binarization():
    img = decompose_hsv(np.zeros((4, 4, 3)))
    m = np.zeros((4, 4))
    m[1, 1] = 0.7
    s = Sample(img, m)
    assert s.label == 1 and s.mask.dtype == np.uint8 and s.mask.sum() == 1
    assert Sample(img, np.zeros((4, 4))).label == 0
    with pytest.raises(ValidationError):
        Sample(img, np.zeros((3, 4)))


def _write_corpus(tmp_path, n=3, abnormal=(1,)):
    rows = []
    rng = np.random.default_rng(7)
    (tmp_path / "img").mkdir()
    for i in range(n):
        Image.fromarray((rng.random((8, 10, 3)) * 255).astype(np.uint8)).save(tmp_path / "img" / f"{i}.png")
        mask = ""
        if i in abnormal:
            m = np.zeros((8, 10), dtype=np.uint8)
            m[2, 3] = 255
            Image.fromarray(m).save(tmp_path / "img" / f"{i}_m.png")
            mask = f"img/{i}_m.png"
        rows.append(ManifestRow(f"s{i}", f"img/{i}.png", mask, "train"))
    write_manifest(tmp_path / "m.csv", rows)
    return tmp_path / "m.csv"


def test_load_dataset_labels(tmp_path):
    manifest = _write_corpus(tmp_path)
    cfg = PreprocessConfig(clahe=True, clahe_tiles=(2, 2), resize=(10, 8))
    samples = load_dataset(tmp_path, manifest, cfg)
    assert [s.id for s in samples] == ["s0", "s1", "s2"]
    assert [s.label for s in samples] == [0, 1, 0]
    again = load_dataset(tmp_path, manifest, cfg, workers=2)
    for a, b in zip(samples, again):
        np.testing.assert_array_equal(a.image.value, b.image.value)


def test_empty_manifest(tmp_path):
    write_manifest(tmp_path / "m.csv", [])
    assert load_dataset(tmp_path, tmp_path / "m.csv") == []


def test_missing_file_names_path(tmp_path):
    write_manifest(tmp_path / "m.csv", [ManifestRow("x", "nope.png", "", "test")])
    with pytest.raises(IngestionError, match="nope.png"):
        load_dataset(tmp_path, tmp_path / "m.csv")


def test_mask_shape_mismatch(tmp_path):
    manifest = _write_corpus(tmp_path, n=2)
    Image.fromarray(np.zeros((5, 5), dtype=np.uint8)).save(tmp_path / "img" / "1_m.png")
    with pytest.raises(ValidationError):
        load_dataset(tmp_path, manifest, PreprocessConfig(resize=(10, 8)))


def test_manifest_header(tmp_path):
    write_manifest(tmp_path / "m.csv", [ManifestRow("a", "a.png", "", "val")])
    with open(tmp_path / "m.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["id", "image_path", "mask_path", "split"]


def test_preprocess_order_and_shapes():
    rgb = np.random.default_rng(8).random((20, 30, 3))
    img, m = preprocess(rgb, np.zeros((20, 30)), PreprocessConfig(clahe_tiles=(2, 2), resize=(16, 10)))
    assert img.shape == (10, 16) and m.shape == (10, 16)
    expected = resize_bilinear(clahe(decompose_hsv(rgb).value, (2, 2), 2.0), (16, 10))
    np.testing.assert_allclose(img.value, np.clip(expected, 0, 1), atol=1e-15)


def test_png16_roundtrip(tmp_path):
    v = np.random.default_rng(9).random((6, 8))
    write_png16(tmp_path / "v.png", v)
    assert np.abs(read_png16(tmp_path / "v.png") - v).max() <= 0.5 / 65535 + 1e-12


def test_split_and_variance_report():
    rng = np.random.default_rng(10)
    samples = [Sample(decompose_hsv(rng.random((4, 4, 3))), np.zeros((4, 4)), split) for split in
               ("train", "val", "train")]
    assert len(split_samples(samples, "train")) == 2
    rep = hsv_variance_report(samples)
    assert set(rep) == {"hue", "saturation", "value", "value_dominant"}
