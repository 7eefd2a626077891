import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import scene
from epiflow import feat
from epiflow.errors import ConfigError, InvalidInputError, ParseError
from epiflow.feat import FeatureMap, build_pyramid, extract_features, sample_feature, sample_features


def noise_image(h=128, w=160, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((h // 4, w // 4))
    return np.kron(img, np.ones((4, 4)))  # smooth enough to survive box filtering


def random_map(h, w, c=8, seed=0):
    rng = np.random.default_rng(seed)
    data, valid = feat.normalize_descriptors(rng.normal(size=(h, w, c)))
    return FeatureMap(data, valid, 4)


def test_constant_image_gives_zero_descriptors():
    fmap = extract_features(np.full((64, 64), 0.5), "fine")
    assert not fmap.valid.any()
    assert np.all(fmap.data == 0)


def test_empty_image_rejected():
    with pytest.raises(InvalidInputError):
        extract_features(np.zeros((0, 0)), "fine")
    with pytest.raises(InvalidInputError):
        extract_features(np.ones((16, 16)), "medium")


def test_extraction_is_deterministic():
    img = scene("plane").images[0]
    a = extract_features(img, "fine")
    b = extract_features(img.copy(), "fine")
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(a.valid, b.valid)


@pytest.mark.parametrize("stage,shape", [("coarse", (8, 10)), ("fine", (32, 40))])
def test_stage_resolution(stage, shape):
    fmap = extract_features(scene("plane").images[0], stage)
    assert (fmap.height, fmap.width) == shape
    assert fmap.channels == 32
    assert fmap.scale == feat.STAGE_SCALE[stage]
    assert fmap.data.dtype == np.float32


def test_padding_to_multiple_of_16():
    fmap = extract_features(noise_image(100, 90), "coarse")
    assert (fmap.height, fmap.width) == (7, 6)


def test_descriptors_are_shift_equivariant():
    img = noise_image()
    shifted = np.roll(img, 8, axis=1)  # 2 pixels at fine resolution
    a = extract_features(img, "fine")
    b = extract_features(shifted, "fine")
    # window radius 3 plus the Sobel radius keeps 4 pixels away from borders and the wrap seam
    np.testing.assert_allclose(b.data[4:-4, 6:-4], a.data[4:-4, 4:-6], atol=1e-4)


def test_descriptors_are_unit_norm_and_zero_mean():
    fmap = extract_features(scene("sphere").images[1], "fine")
    norms = np.linalg.norm(fmap.data[fmap.valid], axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-4)
    np.testing.assert_allclose(fmap.data[fmap.valid].mean(axis=-1), 0.0, atol=1e-6)


@given(arrays(np.float64, (5, 6, 4), elements=st.floats(-10, 10)))
def test_normalized_descriptors_bound_similarity(desc):
    data, valid = feat.normalize_descriptors(desc)
    flat = data[valid].astype(np.float64)
    assert np.all(np.abs(np.linalg.norm(flat, axis=-1) - 1) < 1e-4)
    if len(flat) > 1:
        sims = flat @ flat.T
        assert np.all(np.abs(sims) <= 1 + 1e-4)
    assert np.all(data[~valid] == 0)


# --------------------------------------------------------------------------
# pyramid
# --------------------------------------------------------------------------

def test_pyramid_single_level_is_input():
    fmap = random_map(8, 8)
    pyr = build_pyramid(fmap, 1)
    assert len(pyr) == 1 and pyr.levels[0] is fmap


def test_pyramid_of_constant_map():
    v = np.zeros(8)
    v[0], v[1] = 0.6, -0.8
    fmap = FeatureMap(np.tile(v, (4, 4, 1)).astype(np.float32), np.ones((4, 4), bool), 4)
    pyr = build_pyramid(fmap, 3)
    for lvl in pyr.levels:
        np.testing.assert_allclose(lvl.data, np.broadcast_to(v, lvl.data.shape), atol=1e-6)


def test_pyramid_level_one_is_block_mean():
    fmap = random_map(8, 8, seed=3)
    lvl = build_pyramid(fmap, 2).levels[1]
    block = fmap.data[0:2, 0:2].astype(np.float64).reshape(4, -1).mean(axis=0)
    np.testing.assert_allclose(lvl.data[0, 0], block / np.linalg.norm(block), atol=1e-6)
    assert (lvl.height, lvl.width) == (4, 4)


def test_pyramid_odd_sizes_use_ceiling():
    pyr = build_pyramid(random_map(5, 7), 3)
    assert [(l.height, l.width) for l in pyr.levels] == [(5, 7), (3, 4), (2, 2)]


def test_pyramid_too_deep():
    with pytest.raises(ConfigError):
        build_pyramid(random_map(8, 10), 5)
    with pytest.raises(ConfigError):
        build_pyramid(random_map(8, 10), 0)
    assert len(build_pyramid(random_map(8, 10), 4)) == 4


@given(st.integers(1, 4).map(lambda k: 2 ** k), st.integers(1, 4).map(lambda k: 2 ** k), st.integers(0, 99))
def test_pyramid_preserves_area_weighted_mass(h, w, seed):
    fmap = random_map(h * 2, w * 2, seed=seed)
    pyr = build_pyramid(fmap, 2)
    mass0 = pyr.pooled[0].sum(axis=(0, 1))
    mass1 = 4 * pyr.pooled[1].sum(axis=(0, 1))
    np.testing.assert_allclose(mass1, mass0, rtol=1e-3, atol=1e-9)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def test_sample_integer_position_is_stored_descriptor():
    fmap = random_map(6, 7)
    np.testing.assert_allclose(sample_feature(fmap, (3, 2)), fmap.data[2, 3], atol=1e-7)


def test_sample_midpoint_is_renormalized_average():
    fmap = random_map(6, 7, seed=1)
    avg = 0.5 * (fmap.data[2, 3].astype(np.float64) + fmap.data[2, 4])
    np.testing.assert_allclose(sample_feature(fmap, (3.5, 2)), avg / np.linalg.norm(avg), atol=1e-6)


def test_sample_out_of_frame_is_sentinel():
    fmap = random_map(6, 7)
    assert sample_feature(fmap, (-5, 2)) is None
    assert sample_feature(fmap, (2, 6.6)) is None
    assert sample_feature(fmap, (np.nan, 1)) is None


def test_sample_half_pixel_margin_takes_border_value():
    fmap = random_map(6, 7)
    np.testing.assert_allclose(sample_feature(fmap, (-0.5, 0)), fmap.data[0, 0], atol=1e-7)
    np.testing.assert_allclose(sample_feature(fmap, (6.5, 5.5)), fmap.data[5, 6], atol=1e-7)


def test_sample_touching_zero_descriptor_is_invalid():
    fmap = random_map(4, 4)
    valid = fmap.valid.copy()
    valid[1, 1] = False
    data = fmap.data.copy()
    data[1, 1] = 0
    holed = FeatureMap(data, valid, 4)
    _, ok = sample_features(holed, np.array([[0.5, 0.5], [0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(ok, [False, True, True])


# --------------------------------------------------------------------------
# descriptor files
# --------------------------------------------------------------------------

def test_feature_file_round_trip(tmp_path):
    fmap = extract_features(scene("plane").images[0], "coarse")
    path = tmp_path / "f.bin"
    feat.write_feature_file(fmap, path)
    raw = path.read_bytes()
    assert raw[:4] == b"EFM1" and len(raw) == 16 + 4 * fmap.data.size
    back = feat.read_feature_file(path)
    np.testing.assert_allclose(back.data, fmap.data, atol=1e-6)
    np.testing.assert_array_equal(back.valid, fmap.valid)
    assert back.scale == 16


def test_feature_file_errors(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ParseError, match="magic"):
        feat.read_feature_file(p)
    fmap = random_map(2, 2)
    feat.write_feature_file(fmap, p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ParseError, match="expected"):
        feat.read_feature_file(p)
