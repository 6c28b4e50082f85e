import json

import numpy as np
import pytest
from PIL import Image

from factorfield.data import (DatasetError, DenseGridField, _to_float_rgb, export_scene, load_llff,
                              load_nerf_synthetic, make_oracle_scene, oracle_grids, save_png, sphere_poses)
from factorfield.renderer import composite, sample_points


@pytest.fixture(scope="module")
def small_scene():
    return make_oracle_scene("sphere", seed=3, n_grid=24, n_train=3, n_test=2, width=24)


def write_dataset(root, images, poses, angle=0.6911112):
    root.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (img, pose) in enumerate(zip(images, poses)):
        Image.fromarray(img).save(root / f"r_{i}.png")
        frames.append({"file_path": f"./r_{i}", "transform_matrix": np.asarray(pose).tolist()})
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))


def test_focal_from_field_of_view(tmp_path):
    write_dataset(tmp_path, [np.zeros((4, 800, 3), np.uint8)], [np.eye(4)])
    sc = load_nerf_synthetic(tmp_path)
    assert sc.focal == pytest.approx(1111.111, abs=1e-3)
    assert sc.width == 800 and sc.height == 4


def test_transparent_pixels_become_white():
    px = np.array([[[10, 200, 30, 0], [255, 0, 0, 255]]], np.uint8)
    rgb, has_alpha = _to_float_rgb(px, "x")
    assert has_alpha
    np.testing.assert_array_equal(rgb[0, 0], [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(rgb[0, 1], [1.0, 0.0, 0.0])


def test_background_follows_alpha(tmp_path):
    write_dataset(tmp_path / "a", [np.zeros((3, 3, 4), np.uint8)], [np.eye(4)])
    write_dataset(tmp_path / "b", [np.zeros((3, 3, 3), np.uint8)], [np.eye(4)])
    assert np.all(load_nerf_synthetic(tmp_path / "a").background == 1.0)
    assert np.all(load_nerf_synthetic(tmp_path / "b").background == 0.0)


def test_pose_round_trip(tmp_path):
    poses = sphere_poses(4, seed=2)
    write_dataset(tmp_path, [np.zeros((2, 2, 3), np.uint8)] * 4, poses)
    sc = load_nerf_synthetic(tmp_path)
    for fr, p in zip(sc.frames, poses):
        np.testing.assert_allclose(fr.pose @ np.linalg.inv(p), np.eye(4), atol=1e-6)
        # rotation block is orthonormal
        np.testing.assert_allclose(fr.pose[:3, :3].T @ fr.pose[:3, :3], np.eye(3), atol=1e-12)


def test_loader_is_pure(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 6, 4), dtype=np.uint8)
    write_dataset(tmp_path, [img], [np.eye(4)])
    a, b = load_nerf_synthetic(tmp_path), load_nerf_synthetic(tmp_path)
    np.testing.assert_array_equal(a.frames[0].image, b.frames[0].image)
    assert a.focal == b.focal


def test_loader_errors_name_path_and_key(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_nerf_synthetic(tmp_path)
    (tmp_path / "transforms_train.json").write_text(json.dumps({"frames": []}))
    with pytest.raises(DatasetError, match="camera_angle_x"):
        load_nerf_synthetic(tmp_path)
    (tmp_path / "transforms_train.json").write_text("{not json")
    with pytest.raises(DatasetError, match="transforms_train.json"):
        load_nerf_synthetic(tmp_path)
    (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5, "frames": [{"file_path": "x"}]}))
    with pytest.raises(DatasetError, match="transform_matrix"):
        load_nerf_synthetic(tmp_path)
    (tmp_path / "transforms_train.json").write_text(
        json.dumps({"camera_angle_x": 0.5, "frames": [{"file_path": "missing", "transform_matrix": np.eye(4).tolist()}]}))
    with pytest.raises(DatasetError, match="missing"):
        load_nerf_synthetic(tmp_path)


def test_optional_bbox_key(tmp_path):
    write_dataset(tmp_path, [np.zeros((2, 2, 3), np.uint8)], [np.eye(4)])
    meta = json.loads((tmp_path / "transforms_train.json").read_text())
    meta["bbox"] = [[-1, -2, -3], [1, 2, 3]]
    (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
    lo, hi = load_nerf_synthetic(tmp_path).bbox
    np.testing.assert_array_equal(lo, [-1, -2, -3])
    np.testing.assert_array_equal(hi, [1, 2, 3])


def test_llff_pose_bounds(tmp_path):
    n = 3
    rows = []
    for i in range(n):
        m = np.zeros((3, 5))
        m[:, :3] = np.eye(3)
        m[:, 3] = [0.1 * i, 0.0, 0.0]
        m[:, 4] = [8, 10, 12.0]
        rows.append(np.concatenate([m.ravel(), [2.0, 10.0]]))
    np.save(tmp_path / "poses_bounds.npy", np.array(rows))
    (tmp_path / "images").mkdir()
    for i in range(n):
        Image.fromarray(np.zeros((8, 10, 3), np.uint8)).save(tmp_path / "images" / f"{i}.png")
    sc = load_llff(tmp_path)
    assert sc.ndc and len(sc.frames) == n
    assert sc.focal == pytest.approx(12.0)
    for fr in sc.frames:
        np.testing.assert_allclose(np.linalg.det(fr.pose[:3, :3]), 1.0, atol=1e-12)
    with pytest.raises(DatasetError):
        load_llff(tmp_path / "nowhere")


def test_sphere_density_peak_at_center():
    dens, rgb = oracle_grids("sphere", n=9, peak=40.0)
    assert dens[4, 4, 4] == pytest.approx(40.0)
    assert dens[0, 0, 0] == 0.0
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    fld = DenseGridField(dens, rgb, (-0.6,) * 3, (0.6,) * 3)
    assert fld.sigma(np.zeros((1, 3)))[0] == pytest.approx(40.0)


def test_unknown_oracle_kind():
    with pytest.raises(ValueError, match="sphere"):
        oracle_grids("torus")


@pytest.mark.parametrize("kind", ["two-blobs", "checker-cube"])
def test_other_oracle_kinds(kind):
    dens, rgb = oracle_grids(kind, n=12)
    assert dens.max() > 0 and dens.min() == 0.0
    assert rgb.shape == dens.shape + (3,)


def test_ray_missing_the_sphere_is_white(small_scene):
    # image corners look past the grid
    for fr in small_scene.data.frames:
        np.testing.assert_allclose(fr.image[0, 0], 1.0, atol=1e-12)
        assert fr.image.min() < 0.9


def test_oracle_energy_budget(small_scene, rng):
    fld = small_scene.field
    lo, hi = fld.bbox
    o = rng.uniform(-2, 2, (100, 3))
    d = -o + rng.normal(0, 0.2, (100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    smp = sample_points(o, d, lo, hi, small_scene.step)
    sigma = fld.sigma(smp.positions)
    rgb = fld.rgb(smp.positions, d[smp.ray_index])
    _, _, acc, w, _ = composite(smp, sigma, rgb, np.ones(3))
    optical = np.bincount(smp.ray_index, sigma * smp.delta, minlength=100)
    residual = np.exp(-optical)
    sums = np.bincount(smp.ray_index, w, minlength=100)
    np.testing.assert_allclose(sums + residual, 1.0, atol=1e-12)
    np.testing.assert_allclose(acc, sums, atol=1e-12)


def test_oracle_is_reproducible(small_scene):
    again = make_oracle_scene("sphere", seed=3, n_grid=24, n_train=3, n_test=2, width=24)
    for a, b in zip(small_scene.data.frames + small_scene.test.frames, again.data.frames + again.test.frames):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.pose, b.pose)
    assert small_scene.data.bbox is None


def test_export_then_load(small_scene, tmp_path):
    export_scene(small_scene, tmp_path, include_bbox=True)
    sc = load_nerf_synthetic(tmp_path, "train")
    assert len(sc.frames) == 3 and np.all(sc.background == 1.0)
    assert sc.focal == pytest.approx(small_scene.data.focal, rel=1e-12)
    for a, b in zip(sc.frames, small_scene.data.frames):
        # 8-bit quantization of color and alpha
        assert np.abs(a.image - b.image).max() < 2.5 / 255
        np.testing.assert_allclose(a.pose, b.pose)
    np.testing.assert_allclose(sc.bbox[0], small_scene.bbox[0])
    assert len(load_nerf_synthetic(tmp_path, "test").frames) == 2


def test_save_png_rounds_and_clips(tmp_path):
    save_png(tmp_path / "x.png", np.array([[[-0.5, 0.5, 2.0]]]))
    np.testing.assert_array_equal(np.array(Image.open(tmp_path / "x.png"))[0, 0], [0, 128, 255])
