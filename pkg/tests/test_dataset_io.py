import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from merid.camera import Camera, look_at, qvec_to_rotmat, rotmat_to_qvec
from merid.data import (DegradationSpec, SceneManifest, SplitSpec, View, apply_degradation, downsample,
                        load_manifest, make_splits, parse_colmap_text, read_image, sample_fewshot,
                        smooth_illumination, write_colmap_text, write_image)
from merid.synth import Sphere, SceneSpec, ring_cameras, single_sphere_spec, synth_scene, write_scene


def _cam(i=0):
    rot, t = look_at(np.array([3.0 * math.cos(i), -1.0, 3.0 * math.sin(i)]), np.zeros(3))
    return Camera(40.0, 42.0, 15.5, 12.5, rot, t, 32, 24)


def _manifest(n):
    return SceneManifest("s", [View(f"v{i:03d}", None, None, _cam(i)) for i in range(n)], (32, 24))


# --- cameras / COLMAP ---------------------------------------------------------------


def test_identity_quaternion():
    np.testing.assert_array_equal(qvec_to_rotmat([1, 0, 0, 0]), np.eye(3))


def test_quaternion_x_180_matches_scipy():
    expected = Rotation.from_quat([1, 0, 0, 0]).as_matrix()  # scipy is (x, y, z, w)
    np.testing.assert_allclose(qvec_to_rotmat([0, 1, 0, 0]), expected, atol=1e-12)
    np.testing.assert_allclose(qvec_to_rotmat([0, 1, 0, 0]), np.diag([1.0, -1.0, -1.0]), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_matches_scipy(q):
    q = np.asarray(q) / np.linalg.norm(q)
    expected = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    np.testing.assert_allclose(qvec_to_rotmat(q), expected, atol=1e-10)
    np.testing.assert_allclose(qvec_to_rotmat(rotmat_to_qvec(expected)), expected, atol=1e-10)


def test_camera_validation():
    rot, t = look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(-1.0, 10.0, 5.0, 5.0, rot, t, 10, 10)
    with pytest.raises(ValueError):
        Camera(10.0, 10.0, 10.0, 5.0, rot, t, 10, 10)
    with pytest.raises(ValueError):
        Camera(10.0, 10.0, 5.0, 5.0, rot * 1.01, t, 10, 10)


def test_look_at_degenerate():
    with pytest.raises(ValueError, match="degenerate camera placement"):
        look_at(np.zeros(3), np.zeros(3))


def _write_colmap(tmp_path, cams, model="PINHOLE"):
    write_colmap_text(cams, tmp_path)
    if model != "PINHOLE":
        text = (tmp_path / "cameras.txt").read_text().replace("PINHOLE", model)
        (tmp_path / "cameras.txt").write_text(text)
    return tmp_path / "cameras.txt", tmp_path / "images.txt"


def test_colmap_round_trip(tmp_path):
    cams = {f"v{i}.png": _cam(i) for i in range(5)}
    parsed = parse_colmap_text(*_write_colmap(tmp_path, cams))
    assert sorted(parsed) == sorted(cams)
    for name, cam in cams.items():
        assert np.linalg.norm(parsed[name].rotation - cam.rotation) < 1e-6
        np.testing.assert_allclose(parsed[name].translation, cam.translation, atol=1e-9)
        assert (parsed[name].fx, parsed[name].fy, parsed[name].cx, parsed[name].cy) == (cam.fx, cam.fy, cam.cx, cam.cy)


def test_colmap_simple_pinhole(tmp_path):
    (tmp_path / "cameras.txt").write_text("# c\n1 SIMPLE_PINHOLE 32 24 50.0 16.0 12.0\n")
    (tmp_path / "images.txt").write_text("# i\n1 1 0 0 0 0 0 4 1 a.png\n\n")
    cam = parse_colmap_text(tmp_path / "cameras.txt", tmp_path / "images.txt")["a.png"]
    assert cam.fx == cam.fy == 50.0
    np.testing.assert_array_equal(cam.rotation, np.eye(3))


def test_colmap_unsupported_model(tmp_path):
    (tmp_path / "cameras.txt").write_text("1 OPENCV 32 24 50 50 16 12 0 0 0 0\n")
    (tmp_path / "images.txt").write_text("")
    with pytest.raises(ValueError, match="unsupported camera model OPENCV"):
        parse_colmap_text(tmp_path / "cameras.txt", tmp_path / "images.txt")


def test_colmap_non_unit_quaternion(tmp_path):
    (tmp_path / "cameras.txt").write_text("1 PINHOLE 32 24 50 50 16 12\n")
    (tmp_path / "images.txt").write_text("1 1.01 0 0 0 0 0 4 1 a.png\n\n")
    with pytest.raises(ValueError, match="quaternion"):
        parse_colmap_text(tmp_path / "cameras.txt", tmp_path / "images.txt")


# --- manifest loading ---------------------------------------------------------------


def _layout(tmp_path, names, pose_names=None):
    img = np.full((24, 32, 3), 0.5, dtype=np.float32)
    for sub in ("low", "normal"):
        (tmp_path / sub).mkdir(exist_ok=True)
    for n in names:
        write_image(tmp_path / "low" / f"{n}.png", img)
        write_image(tmp_path / "normal" / f"{n}.png", img)
    pose_names = names if pose_names is None else pose_names
    write_colmap_text({f"{n}.png": _cam(i) for i, n in enumerate(pose_names)}, tmp_path / "colmap")


def test_load_manifest_pairs(tmp_path):
    _layout(tmp_path, ["b", "a"])
    m = load_manifest(tmp_path)
    assert m.view_ids == ["a", "b"]
    assert m.resolution == (32, 24)


def test_load_manifest_unpaired(tmp_path):
    _layout(tmp_path, ["a", "b"])
    (tmp_path / "normal" / "b.png").unlink()
    with pytest.raises(ValueError, match="unpaired view b"):
        load_manifest(tmp_path)


def test_load_manifest_empty(tmp_path):
    (tmp_path / "low").mkdir()
    (tmp_path / "normal").mkdir()
    with pytest.raises(ValueError, match="no views found"):
        load_manifest(tmp_path)


def test_load_manifest_pose_count_mismatch(tmp_path):
    _layout(tmp_path, ["a", "b"], pose_names=["a"])
    with pytest.raises(ValueError, match="images.txt"):
        load_manifest(tmp_path)


def test_unreadable_image_names_path(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(OSError, match="x.png"):
        read_image(bad)


def test_image_range_and_min_side(tmp_path):
    write_image(tmp_path / "a.png", np.linspace(0, 1, 8 * 8 * 3).reshape(8, 8, 3))
    img = read_image(tmp_path / "a.png")
    assert img.min() >= 0 and img.max() <= 1 and img.dtype == np.float32
    write_image(tmp_path / "small.png", np.zeros((4, 8, 3)))
    with pytest.raises(ValueError):
        read_image(tmp_path / "small.png")


def test_manifest_json_round_trip(tmp_path):
    m, _ = synth_scene(single_sphere_spec(), 4, (16, 16), seed=3, supersample=1)
    written = write_scene(m, tmp_path)
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert set(data) >= {"scene", "resolution", "views"}
    assert set(data["views"][0]["camera"]) >= {"fx", "fy", "cx", "cy", "qvec", "tvec"}
    loaded = load_manifest(tmp_path)
    assert loaded.view_ids == written.view_ids
    for a, b in zip(loaded.views, m.views):
        assert np.linalg.norm(a.camera.rotation - b.camera.rotation) < 1e-9
        assert np.abs(a.read_normal() - b.read_normal()).max() <= 0.5 / 255 + 1e-6
    # the COLMAP export alone reproduces the same manifest
    (tmp_path / "manifest.json").unlink()
    assert load_manifest(tmp_path).view_ids == written.view_ids


def test_duplicate_view_ids():
    with pytest.raises(ValueError):
        SceneManifest("s", [View("a", None, None, _cam()), View("a", None, None, _cam(1))], (32, 24))


# --- splits --------------------------------------------------------------------------


@pytest.mark.parametrize("n,counts", [(16, (12, 4, 2)), (8, (6, 2, 1)), (100, (75, 25, 12))])
def test_split_counts(n, counts):
    s = make_splits(_manifest(n))
    assert (len(s.preprocess_train), len(s.reconstruction), len(s.test)) == counts


@settings(max_examples=60, deadline=None)
@given(st.integers(8, 400))
def test_split_partition(n):
    m = _manifest(n)
    s = make_splits(m)
    train, rec, test = set(s.preprocess_train), set(s.reconstruction), set(s.test)
    assert train | rec == set(m.view_ids) and not train & rec
    assert test <= rec
    assert abs(len(train) - 0.75 * n) <= 1
    assert len(test) == math.floor(0.125 * n)
    assert s == make_splits(m)


def test_split_needs_eight_views():
    with pytest.raises(ValueError):
        make_splits(_manifest(7))


def test_reconstruction_spacing_is_uniform():
    s = make_splits(_manifest(16))
    idx = [int(v[1:]) for v in s.reconstruction]
    assert np.ptp(np.diff(idx)) == 0


def test_fewshot_stride():
    split = SplitSpec(tuple(f"v{i:03d}" for i in range(100)), (), ())
    assert sample_fewshot(split, 10) == [f"v{i:03d}" for i in range(0, 100, 10)]
    assert sample_fewshot(split, 100) == list(split.preprocess_train)
    with pytest.raises(ValueError):
        sample_fewshot(split, 101)


def test_fewshot_default_is_ten():
    s = make_splits(_manifest(48))
    picked = sample_fewshot(s)
    assert len(picked) == 10 and set(picked) <= set(s.preprocess_train)


# --- downsampling / degradation -------------------------------------------------------


def test_downsample_factor_eight():
    img = np.random.default_rng(0).random((3024 // 8 * 8, 4032 // 8 * 8, 3)).astype(np.float32)[:378 * 8, :504 * 8]
    out = downsample(img, (504, 378))
    assert out.shape == (378, 504, 3)
    np.testing.assert_allclose(out[5, 7], img[40:48, 56:64].mean(axis=(0, 1)), atol=1e-6)


def test_downsample_checkerboard_and_constant():
    board = np.array([[0, 1], [1, 0]], dtype=np.float32)[..., None].repeat(3, -1)
    np.testing.assert_allclose(downsample(board, (1, 1)), 0.5)
    np.testing.assert_allclose(downsample(np.full((30, 20, 3), 0.3), (7, 9)), 0.3, atol=1e-12)


def test_downsample_non_integer_matches_area_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((6, 9, 3))
    out = downsample(img, (6, 4))
    # oracle: upsample to the lcm grid by repetition, then block-average
    big = img.repeat(2, axis=0).repeat(2, axis=1)  # 12 x 18
    expected = big.reshape(4, 3, 6, 3, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_downsample_rejects_upscale():
    with pytest.raises(ValueError):
        downsample(np.zeros((8, 8, 3)), (16, 8))


def test_degradation_identity_and_attenuation():
    img = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(apply_degradation(img, DegradationSpec()), img, atol=1e-7)
    np.testing.assert_allclose(apply_degradation(np.ones((8, 8, 3)), DegradationSpec(attenuation=0.1)), 0.1, atol=1e-7)


def test_degradation_seeded_noise():
    img = np.full((16, 16, 3), 0.5)
    spec = lambda seed: DegradationSpec(noise_read=0.05, noise_shot=50, seed=seed)
    a, b, c = apply_degradation(img, spec(1)), apply_degradation(img, spec(1)), apply_degradation(img, spec(2))
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 3), st.floats(0.01, 1), st.integers(0, 10))
def test_degradation_monotone_without_noise(gamma, att, seed):
    ramp = np.linspace(0, 1, 64).reshape(8, 8, 1).repeat(3, -1)
    spec = DegradationSpec(gamma, att, smooth_illumination(8, 8, 0.5, seed))
    lo, hi = apply_degradation(ramp, spec), apply_degradation(np.clip(ramp + 0.05, 0, 1), spec)
    assert (hi >= lo).all()


def test_illumination_field_range():
    f = smooth_illumination(20, 30, 0.4, 5)
    assert f.shape == (20, 30) and f.min() >= 0.6 - 1e-12 and f.max() <= 1


# --- synthetic scenes ------------------------------------------------------------------


def test_synth_red_disc_and_determinism():
    spec = single_sphere_spec((0.9, 0.1, 0.1))
    a, gt = synth_scene(spec, 4, (24, 24), seed=4)
    b, _ = synth_scene(spec, 4, (24, 24), seed=4)
    for va, vb in zip(a.views, b.views):
        np.testing.assert_array_equal(va.read_low(), vb.read_low())
        center = va.read_normal()[12, 12]
        assert center[0] > 2 * center[1] and center[0] > 2 * center[2]
        assert np.allclose(va.read_normal()[0, 0], spec.background, atol=1e-6)
    assert len(gt) > 0


def test_synth_errors():
    with pytest.raises(ValueError):
        synth_scene(single_sphere_spec(), 1)
    spec = SceneSpec([Sphere((0, 0, 0), 0.5, (1, 0, 0))], ring_radius=0.0)
    with pytest.raises(ValueError, match="degenerate camera placement"):
        ring_cameras(spec, 4, 16, 16)
