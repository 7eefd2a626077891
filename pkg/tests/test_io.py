import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import look_at, simple_camera
from epiflow import io
from epiflow.errors import ConfigError, EpiflowError, InvalidInputError, ParseError
from epiflow.pipeline import DepthField, PipelineConfig

CAMERA_TEXT = """extrinsic
1 0 0 0
0 1 0 0
0 0 1 0
0 0 0 1

intrinsic
500 0 320
0 500 240
0 0 1

425 935
"""


# --------------------------------------------------------------------------
# cameras
# --------------------------------------------------------------------------

def test_camera_example():
    cam = io.parse_camera_text(CAMERA_TEXT, width=640, height=480)
    np.testing.assert_array_equal(cam.rotation, np.eye(3))
    np.testing.assert_array_equal(cam.translation, np.zeros(3))
    np.testing.assert_array_equal(cam.intrinsics, [[500, 0, 320], [0, 500, 240], [0, 0, 1]])
    assert (cam.depth_min, cam.depth_max) == (425, 935)
    assert (cam.width, cam.height) == (640, 480)


def test_camera_four_number_range():
    text = CAMERA_TEXT.replace("425 935", "425 2.5 192 935")
    cam = io.parse_camera_text(text, width=640, height=480)
    assert (cam.depth_min, cam.depth_max) == (425, 935)


def test_camera_size_defaults_from_principal_point():
    cam = io.parse_camera_text(CAMERA_TEXT)
    assert (cam.width, cam.height) == (641, 481)
    cam = io.parse_camera_text(CAMERA_TEXT + "image_size 640 480\n")
    assert (cam.width, cam.height) == (640, 480)


def test_camera_non_orthonormal_rotation():
    text = CAMERA_TEXT.replace("1 0 0 0\n0 1", "1.1 0 0 0\n0 1", 1)
    with pytest.raises(ParseError, match=r":2: rotation"):
        io.parse_camera_text(text, "cam.txt")


def test_camera_rounded_rotation_is_snapped():
    R, T = look_at([0.3, 0.1, -1.0], target=(0, 0, 2.0))
    ext = np.vstack([np.hstack([R, T[:, None]]), [0, 0, 0, 1]])
    rows = "\n".join(" ".join(f"{v:.6f}" for v in row) for row in ext)
    text = CAMERA_TEXT.replace("1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1", rows)
    R_back = io.parse_camera_text(text).rotation
    np.testing.assert_allclose(R_back.T @ R_back, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(R_back, R, atol=1e-5)


@pytest.mark.parametrize("mutate,where", [
    (lambda t: t.replace("extrinsic", "extrinsics"), ":1:"),
    (lambda t: t.replace("0 0 1 0", "0 0 1"), ":4:"),
    (lambda t: t.replace("intrinsic\n", ""), "intrinsic"),
    (lambda t: t.replace("425 935", "935 425"), "depth range"),
    (lambda t: t.replace("425 935", "425 935 1"), ":12:"),
    (lambda t: t.replace("500 0 320", "500 0 abc"), ":8:"),
    (lambda t: t + "something else\n", "unexpected"),
])
def test_camera_malformed(mutate, where):
    with pytest.raises(ParseError, match=where):
        io.parse_camera_text(mutate(CAMERA_TEXT), "cam.txt")


def test_camera_file_round_trip(tmp_path):
    R, T = look_at([0.4, -0.2, 0.1], target=(0, 0, 3.0))
    cam = simple_camera(f=612.5, cx=300.25, cy=211.5, R=R, T=T, w=600, h=420, d_min=0.75, d_max=12.0)
    path = tmp_path / "c.txt"
    io.save_camera_file(cam, path)
    back = io.load_camera_file(path)
    np.testing.assert_allclose(back.intrinsics, cam.intrinsics, rtol=0, atol=0)
    np.testing.assert_allclose(back.rotation, cam.rotation, atol=1e-15)
    np.testing.assert_array_equal(back.translation, cam.translation)
    assert (back.depth_min, back.depth_max, back.width, back.height) == (0.75, 12.0, 600, 420)


def test_missing_camera_file(tmp_path):
    with pytest.raises(ParseError, match="cannot read"):
        io.load_camera_file(tmp_path / "nope.txt")


@given(st.text(max_size=300))
def test_camera_parser_is_total(text):
    try:
        io.parse_camera_text(text)
    except ParseError:
        pass


@given(st.lists(st.sampled_from(["extrinsic", "intrinsic", "1 0 0 0", "0 1 0 0", "0 0 1 0", "0 0 0 1",
                                 "500 0 320", "0 500 240", "0 0 1", "1 2", "nan 1", "image_size 4 4",
                                 "", "1e400 2"]), max_size=16))
def test_camera_parser_is_total_on_structured_junk(lines):
    try:
        io.parse_camera_text("\n".join(lines))
    except ParseError:
        pass


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

@pytest.mark.parametrize("little", [True, False])
def test_pfm_round_trip_is_bit_identical(tmp_path, little):
    rng = np.random.default_rng(0)
    data = rng.uniform(0.5, 20, (7, 5)).astype(np.float32)
    path = tmp_path / "d.pfm"
    io.write_pfm(data, path, little)
    back = io.read_pfm(path)
    assert back.tobytes() == data.tobytes()


def test_pfm_rows_are_stored_bottom_up(tmp_path):
    data = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    for little, dtype, scale in ((True, "<f4", b"-1.0"), (False, ">f4", b"1.0")):
        path = tmp_path / "d.pfm"
        io.write_pfm(data, path, little)
        raw = path.read_bytes()
        header = b"Pf\n2 2\n" + scale + b"\n"
        assert raw.startswith(header)
        np.testing.assert_array_equal(np.frombuffer(raw[len(header):], dtype), [3, 4, 1, 2])


def test_pfm_zero_is_masked(tmp_path):
    path = tmp_path / "d.pfm"
    io.write_depth_pfm(DepthField(np.array([[2.0, 3.0]]), np.array([[True, False]])), path)
    back = io.read_depth_pfm(path)
    np.testing.assert_array_equal(back.valid, [[True, False]])
    assert back.depth[0, 0] == 2.0
    assert io.read_pfm(path)[0, 1] == 0.0


@pytest.mark.parametrize("raw,msg", [
    (b"P6\n2 2\n255\n" + bytes(12), "bad header"),
    (b"PF\n1 1\n-1.0\n" + bytes(12), "colour"),
    (b"Pf\n2 2\n-1.0\n" + bytes(12), "expected 16"),
    (b"Pf\n0 2\n-1.0\n", "zero"),
    (b"Pf\n1 1\n0\n" + bytes(4), "zero"),
])
def test_pfm_bad_files(tmp_path, raw, msg):
    path = tmp_path / "bad.pfm"
    path.write_bytes(raw)
    with pytest.raises(ParseError, match=msg):
        io.read_pfm(path)


def test_pfm_rejects_non_2d(tmp_path):
    with pytest.raises(InvalidInputError):
        io.write_pfm(np.zeros((2, 2, 3)), tmp_path / "x.pfm")


@given(st.binary(max_size=64))
def test_pfm_reader_is_total(raw):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.pfm"
        path.write_bytes(raw)
        try:
            io.read_pfm(path)
        except ParseError:
            pass


# --------------------------------------------------------------------------
# pair lists and source selection
# --------------------------------------------------------------------------

def test_pairs_round_trip():
    pairs = [[1, 2], [0, 2], [1, 0]]
    assert io.parse_pairs(io.format_pairs(pairs)) == pairs


@pytest.mark.parametrize("text", ["", "2\n0\n1 1 1.0\n", "2\n0\n1 0 1.0\n1\n1 0 1.0\n",
                                  "2\n0\n2 1 1.0\n1\n1 0 1.0\n", "2\n0\n1 5 1.0\n1\n1 0 1.0\n",
                                  "2\n0\n1 1 x\n1\n1 0 1.0\n", "2\n0\n1 1 1.0\n0\n1 1 1.0\n"])
def test_pairs_malformed(text):
    with pytest.raises(ParseError):
        io.parse_pairs(text)


@given(st.text(max_size=200))
def test_pair_parser_is_total(text):
    try:
        io.parse_pairs(text)
    except ParseError:
        pass


def ring(n):
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        R, T = look_at([np.cos(a), np.sin(a), 0.0], target=(0, 0, 3.0))
        cams.append(simple_camera(R=R, T=T))
    return cams


def test_two_views_give_one_source():
    cams = ring(2)
    assert io.select_sources([[1], [0]], cams, 1) == [[1], [0]]
    with pytest.raises(ConfigError):
        io.select_sources([[1], [0]], cams, 2)


def test_first_n_listed_sources_are_kept():
    cams = ring(11)
    pairs = [[j for j in range(11) if j != i] for i in range(11)]
    pairs[0] = [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]
    chosen = io.select_sources(pairs, cams, 5)
    assert chosen[0] == [10, 9, 8, 7, 6]
    assert all(len(c) == 5 for c in chosen)


def test_short_lists_are_padded_with_nearest_views():
    cams = ring(6)
    chosen = io.select_sources([[3], [0], [0], [0], [0], [0]], cams, 3)
    assert chosen[0][0] == 3
    assert set(chosen[0][1:]) == {1, 5}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def test_config_defaults_and_round_trip():
    cfg = io.config_from_dict({})
    assert io.config_to_dict(cfg) == io.config_to_dict(PipelineConfig())
    d = {"n_sources": 3, "coarse": {"iterations": 6, "m_s": 3, "m_p": 7}, "backend": "deterministic",
         "seed": 4, "views": [0, 2]}
    assert io.config_to_dict(io.config_from_dict(d)) == {**io.config_to_dict(PipelineConfig()), **d,
                                                         "coarse": d["coarse"]}


@pytest.mark.parametrize("d", [
    {"bogus": 1},
    {"n_sources": 0},
    {"coarse": {"iterations": 0}},
    {"fine": {"m_p": 4}},
    {"fine": {"depth": 2}},
    {"backend": "magic"},
    {"views": "all"},
    [],
])
def test_config_schema_errors(d):
    with pytest.raises(ConfigError):
        io.config_from_dict(d)


def test_config_file_errors(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text("{ not json")
    with pytest.raises(ConfigError, match=":1:"):
        io.load_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        io.load_config(tmp_path / "missing.json")
    p.write_text(json.dumps({"seed": 9}))
    assert io.load_config(p).seed == 9


# --------------------------------------------------------------------------
# scene directories
# --------------------------------------------------------------------------

def tiny_scene(tmp_path, n=3, w=64, h=48):
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, (h, w, 3), dtype=np.uint8) for _ in range(n)]
    cams = []
    for c in ring(n):
        cams.append(simple_camera(f=60, cx=(w - 1) / 2, cy=(h - 1) / 2, R=c.rotation, T=c.translation, w=w, h=h))
    pairs = [[j for j in range(n) if j != i] for i in range(n)]
    return io.write_scene(tmp_path / "scene", images, cams, pairs, name="tiny"), images, cams


def test_scene_round_trip(tmp_path):
    root, images, cams = tiny_scene(tmp_path)
    bundle = io.load_scene(root)
    assert bundle.name == "tiny" and len(bundle.views) == 3
    assert bundle.pairs == [[1, 2], [0, 2], [0, 1]]
    for img, back in zip(images, bundle.load_images()):
        np.testing.assert_array_equal(img, back)
    np.testing.assert_allclose(bundle.cameras[1].rotation, cams[1].rotation, atol=1e-14)


def test_two_view_scene_has_one_source(tmp_path):
    root, _, _ = tiny_scene(tmp_path, n=2)
    assert io.load_scene(root).pairs == [[1], [0]]


def test_image_size_mismatch(tmp_path):
    root, _, cams = tiny_scene(tmp_path)
    io.save_image(np.zeros((48, 65, 3), np.uint8), root / "images" / "00000001.png")
    with pytest.raises(ParseError, match="65x48"):
        io.load_scene(root)


def test_declared_640_camera_rejects_641_image(tmp_path):
    root, _, _ = tiny_scene(tmp_path, w=640, h=480)
    io.save_image(np.zeros((480, 641, 3), np.uint8), root / "images" / "00000000.png")
    with pytest.raises(ParseError, match="641x480 but 00000000_cam.txt declares 640x480"):
        io.load_scene(root)


def test_undeclared_size_is_taken_from_the_image(tmp_path):
    root, _, cams = tiny_scene(tmp_path, w=640, h=480)
    io.save_camera_file(cams[0], root / "cams" / "00000000_cam.txt", with_size=False)
    bundle = io.load_scene(root)
    assert (bundle.cameras[0].width, bundle.cameras[0].height) == (640, 480)


@pytest.mark.parametrize("remove", ["pair.txt", "images/00000002.png", "cams/00000002_cam.txt"])
def test_scene_missing_files(tmp_path, remove):
    root, _, _ = tiny_scene(tmp_path)
    (root / remove).unlink()
    with pytest.raises(ParseError):
        io.load_scene(root)


def test_undecodable_image(tmp_path):
    root, _, _ = tiny_scene(tmp_path)
    (root / "images" / "00000000.png").write_bytes(b"\x89PNG junk")
    with pytest.raises(ParseError, match="decode"):
        io.load_scene(root)


def test_all_loader_errors_share_a_base():
    assert issubclass(ParseError, EpiflowError) and issubclass(ConfigError, EpiflowError)


def test_scene_keeps_first_five_of_ten_sources(tmp_path):
    root, _, _ = tiny_scene(tmp_path, n=11)
    listed = [[(i + k) % 11 for k in range(10, 0, -1)] for i in range(11)]
    (root / "pair.txt").write_text(io.format_pairs(listed))
    cfg = PipelineConfig(n_sources=5).validate()
    bundle = io.load_scene(root, cfg)
    assert bundle.n_sources == 5
    assert bundle.pairs == [src[:5] for src in listed]
