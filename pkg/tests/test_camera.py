"""Unit tests for the pinhole camera, patch alignment, and masking."""

import logging

import numpy as np
import pytest

from splatmae.camera import (INVALID_PATCH, CameraModel, MaskPair, align_patches,
                             complementary_masks, load_camera, look_at, project,
                             project_many, projection_jacobian, save_camera,
                             unproject)
from splatmae.pointcloud import PatchSet
from oracles import finite_diff, max_rel_err


def identity_cam(fx=100.0, fy=100.0, cx=128.0, cy=176.0, width=352, height=256):
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, rotation=np.eye(3),
                       translation=np.zeros(3), width=width, height=height)


def patchset_of_centers(centers):
    centers = np.asarray(centers, dtype=np.float64)
    m = len(centers)
    return PatchSet(centers=centers, members=np.zeros((m, 1), dtype=np.intp),
                    local_coords=np.zeros((m, 1, 3)))


def test_on_axis_projection():
    pixel, depth, valid = project(identity_cam(), [0.0, 0.0, 1.0])
    assert valid
    np.testing.assert_allclose(pixel, [128.0, 176.0])
    assert depth == pytest.approx(1.0)


def test_offset_projection():
    pixel, _, valid = project(identity_cam(), [0.5, 0.0, 1.0])
    assert valid
    np.testing.assert_allclose(pixel, [178.0, 176.0])


def test_behind_camera_is_invalid():
    _, _, valid = project(identity_cam(), [0.0, 0.0, -1.0])
    assert not valid


def test_project_many_agrees_with_project():
    cam = identity_cam()
    rng = np.random.default_rng(0)
    pts = rng.normal(0.0, 1.0, size=(50, 3)) + [0, 0, 2.0]
    pix_many, z_many, valid_many = project_many(cam, pts)
    for i, p in enumerate(pts):
        pix, z, valid = project(cam, p)
        assert valid == valid_many[i]
        if valid:
            np.testing.assert_allclose(pix_many[i], pix)
            assert z_many[i] == pytest.approx(z)


def test_unproject_round_trip():
    rot, trans = look_at([1.0, 2.0, 1.5], [2.0, 1.5, 0.5])
    cam = CameraModel(fx=80.0, fy=80.0, cx=31.5, cy=31.5, rotation=rot,
                      translation=trans, width=64, height=64)
    p = np.array([2.2, 1.1, 0.6])
    pixel, depth, valid = project(cam, p)
    assert valid
    np.testing.assert_allclose(unproject(cam, pixel, depth), p, atol=1e-9)


def test_rotation_validation():
    bad = np.eye(3)
    bad[0, 0] = 1.1
    with pytest.raises(ValueError, match="orthonormal"):
        CameraModel(fx=1, fy=1, cx=0, cy=0, rotation=bad, translation=np.zeros(3),
                    width=8, height=8)
    reflection = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="determinant"):
        CameraModel(fx=1, fy=1, cx=0, cy=0, rotation=reflection,
                    translation=np.zeros(3), width=8, height=8)


def test_jacobian_on_axis_unit_depth():
    cam = identity_cam(fx=1.0, fy=1.0)
    j = projection_jacobian(cam, [0.0, 0.0, 1.0])
    np.testing.assert_allclose(j, [[1, 0, 0], [0, 1, 0]])


def test_jacobian_depth_scaling_law():
    cam = identity_cam(fx=2.0, fy=3.0)
    p = np.array([0.4, -0.2, 1.0])
    j1 = projection_jacobian(cam, p)
    j2 = projection_jacobian(cam, p * [1.0, 1.0, 2.0])
    np.testing.assert_allclose(j2[:, 2], j1[:, 2] / 4.0)
    np.testing.assert_allclose(np.diag(j2[:, :2]), np.diag(j1[:, :2]) / 2.0)


def test_jacobian_matches_finite_differences():
    cam = identity_cam(fx=77.0, fy=55.0)
    rng = np.random.default_rng(1)
    for _ in range(5):
        p = rng.normal(size=3) * 0.3 + [0, 0, 2.0]
        j = projection_jacobian(cam, p)

        def proj_u(q):
            return cam.fx * q[0] / q[2] + cam.cx

        def proj_v(q):
            return cam.fy * q[1] / q[2] + cam.cy

        num_u = finite_diff(proj_u, [p.copy()], eps=1e-6)[0]
        num_v = finite_diff(proj_v, [p.copy()], eps=1e-6)[0]
        assert max_rel_err(j[0], num_u) < 1e-6
        assert max_rel_err(j[1], num_v) < 1e-6


def test_jacobian_rejects_near_plane():
    with pytest.raises(ValueError):
        projection_jacobian(identity_cam(), [0.0, 0.0, 0.0])


def test_align_patch_zero():
    cam = identity_cam(cx=0.0, cy=0.0)
    patches = patchset_of_centers([[0.0, 0.0, 1.0]])  # projects to pixel (0, 0)
    out = align_patches(patches, cam, 16, (16, 22))
    np.testing.assert_array_equal(out, [0])


def test_align_last_patch_index():
    cam = identity_cam(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
    patches = patchset_of_centers([[351.0, 255.0, 1.0]])  # pixel (351, 255)
    out = align_patches(patches, cam, 16, (16, 22))
    np.testing.assert_array_equal(out, [15 * 22 + 21])


def test_align_behind_camera_and_outside_frame():
    cam = identity_cam(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
    patches = patchset_of_centers([[0.0, 0.0, -1.0], [400.0, 0.0, 1.0]])
    out = align_patches(patches, cam, 16, (16, 22))
    np.testing.assert_array_equal(out, [INVALID_PATCH, INVALID_PATCH])


def test_align_rejects_mismatched_grid():
    cam = identity_cam()
    patches = patchset_of_centers([[0.0, 0.0, 1.0]])
    with pytest.raises(ValueError):
        align_patches(patches, cam, 16, (10, 22))


def test_masks_exact_count_and_complementarity():
    rng = np.random.default_rng(0)
    m, t, ratio = 64, 352, 0.6
    for seed in range(200):
        alignment = rng.integers(-1, t, size=m)
        masks = complementary_masks(alignment, m, t, ratio, seed)
        assert int((~masks.point_visible).sum()) == 38
        hidden = np.flatnonzero(~masks.point_visible)
        for j in hidden:
            if alignment[j] != INVALID_PATCH:
                assert masks.image_visible[alignment[j]]


def test_masks_all_aligned_to_patch_zero():
    m, t = 8, 4
    alignment = np.zeros(m, dtype=np.intp)
    masks = complementary_masks(alignment, m, t, 0.5, 1)
    assert masks.image_visible[0]


def test_masks_deterministic_per_seed():
    alignment = np.arange(16) % 6
    a = complementary_masks(alignment, 16, 6, 0.5, 42)
    b = complementary_masks(alignment, 16, 6, 0.5, 42)
    np.testing.assert_array_equal(a.point_visible, b.point_visible)
    np.testing.assert_array_equal(a.image_visible, b.image_visible)


def test_masks_relaxation_warns(caplog):
    # Every image patch is forced visible by some masked point patch, so the
    # image mask quota cannot be met.
    m, t = 40, 4
    alignment = np.arange(m) % t
    with caplog.at_level(logging.WARNING):
        masks = complementary_masks(alignment, m, t, 0.6, 0)
    assert masks.relaxed
    assert any("relaxing" in r.message for r in caplog.records)


def test_masks_invalid_ratio():
    with pytest.raises(ValueError):
        complementary_masks(np.zeros(4, dtype=np.intp), 4, 4, 1.0, 0)


def test_camera_file_round_trip(tmp_path):
    rot, trans = look_at([0.5, 0.5, 0.5], [2.0, 1.0, 0.0])
    cam = CameraModel(fx=123.25, fy=117.5, cx=31.5, cy=15.5, rotation=rot,
                      translation=trans, width=64, height=32)
    path = tmp_path / "cam.txt"
    save_camera(cam, path)
    loaded = load_camera(path)
    assert (loaded.fx, loaded.fy, loaded.cx, loaded.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
    np.testing.assert_array_equal(loaded.rotation, cam.rotation)
    np.testing.assert_array_equal(loaded.translation, cam.translation)
    assert (loaded.width, loaded.height) == (cam.width, cam.height)


def test_camera_file_rejects_malformed(tmp_path):
    path = tmp_path / "cam.txt"
    path.write_text("1 2 3\n")
    with pytest.raises(ValueError):
        load_camera(path)


def test_look_at_faces_target():
    eye = np.array([1.0, 1.0, 1.0])
    target = np.array([3.0, 2.0, 0.5])
    rot, trans = look_at(eye, target)
    cam_dir = rot @ (target - eye)
    # Target lies straight ahead: +z in camera coordinates.
    assert cam_dir[2] > 0
    np.testing.assert_allclose(cam_dir[:2], 0.0, atol=1e-9)
    np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
