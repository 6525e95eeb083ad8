"""Pinhole camera model and the point-patch / image-patch bridge.

Pixel centers sit at integer coordinates and patch binning uses floor, so a
projection at pixel (u, v) lands in image patch floor(v/p)*cols + floor(u/p).
Points at or behind z_near are flagged invalid rather than raising.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PatchSet

log = logging.getLogger(__name__)

Z_NEAR = 1e-4
INVALID_PATCH = -1


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal (tolerance 1e-9)")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {np.linalg.det(r)} != +1")

    def to_camera(self, p_world):
        return self.rotation @ np.asarray(p_world, dtype=np.float64) + self.translation

    def camera_center(self):
        return -self.rotation.T @ self.translation


def project(cam: CameraModel, p_world):
    """Project a world point; returns (pixel (2,), depth, valid)."""
    p = cam.to_camera(p_world)
    z = p[2]
    if z <= Z_NEAR:
        return np.array([np.nan, np.nan]), z, False
    pixel = np.array([cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy])
    return pixel, z, True


def project_many(cam: CameraModel, pts_world):
    """Vectorized projection of (N, 3) points -> (pixels (N, 2), depth (N,), valid (N,))."""
    p = np.asarray(pts_world, dtype=np.float64) @ cam.rotation.T + cam.translation
    z = p[:, 2]
    valid = z > Z_NEAR
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * p[:, 0] / z + cam.cx
        v = cam.fy * p[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1), z, valid


def unproject(cam: CameraModel, pixel, depth):
    """Inverse of project for a known camera-z depth."""
    u, v = pixel
    p_cam = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.rotation.T @ (p_cam - cam.translation)


def projection_jacobian(cam: CameraModel, p_cam):
    """d(pixel)/d(p_cam) of the pinhole map, the 2x3 affine-approximation Jacobian."""
    x, y, z = np.asarray(p_cam, dtype=np.float64)
    if z <= Z_NEAR:
        raise ValueError(f"projection jacobian undefined at depth {z} <= {Z_NEAR}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / z ** 2],
        [0.0, cam.fy / z, -cam.fy * y / z ** 2],
    ])


def align_patches(patches: PatchSet, cam: CameraModel, patch_px: int, grid):
    """Map each point-patch center to the image-patch index it projects into.

    grid is (rows, cols); returns (M,) int array with INVALID_PATCH for
    centers behind the camera or outside the frame.
    """
    rows, cols = grid
    if rows * patch_px != cam.height or cols * patch_px != cam.width:
        raise ValueError(f"grid {grid} x patch {patch_px} does not match "
                         f"camera {cam.width}x{cam.height}")
    pix, _, valid = project_many(cam, patches.centers)
    out = np.full(len(patches.centers), INVALID_PATCH, dtype=np.intp)
    u, v = pix[:, 0], pix[:, 1]
    inside = valid & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    pu = np.floor(u[inside] / patch_px).astype(np.intp)
    pv = np.floor(v[inside] / patch_px).astype(np.intp)
    out[inside] = pv * cols + pu
    return out


@dataclass
class MaskPair:
    point_visible: np.ndarray  # (M,) bool
    image_visible: np.ndarray  # (T,) bool
    relaxed: bool = False      # image mask quota was reduced to honor complementarity


def complementary_masks(alignment, m, t, mask_ratio, rng_seed) -> MaskPair:
    """Mask floor(mask_ratio*m) point patches; force their aligned image
    patches visible; mask image patches up to the same ratio elsewhere."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    alignment = np.asarray(alignment, dtype=np.intp)
    rng = np.random.default_rng(rng_seed)

    n_point_masked = int(np.floor(mask_ratio * m))
    masked_points = rng.choice(m, size=n_point_masked, replace=False)
    point_visible = np.ones(m, dtype=bool)
    point_visible[masked_points] = False

    forced = np.zeros(t, dtype=bool)
    aligned = alignment[masked_points]
    forced[aligned[aligned != INVALID_PATCH]] = True

    n_image_masked = int(np.floor(mask_ratio * t))
    candidates = np.flatnonzero(~forced)
    relaxed = False
    if n_image_masked > len(candidates):
        log.warning("complementarity forces %d image patches visible; relaxing "
                    "image mask count from %d to %d", forced.sum(), n_image_masked,
                    len(candidates))
        n_image_masked = len(candidates)
        relaxed = True
    masked_images = rng.choice(candidates, size=n_image_masked, replace=False)
    image_visible = np.ones(t, dtype=bool)
    image_visible[masked_images] = False
    return MaskPair(point_visible=point_visible, image_visible=image_visible, relaxed=relaxed)


# -- camera file I/O ---------------------------------------------------------


def save_camera(cam: CameraModel, path):
    with open(path, "w") as f:
        f.write(f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}\n")
        for row in cam.rotation:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        f.write(" ".join(f"{v:.17g}" for v in cam.translation) + "\n")
        f.write(f"{cam.width} {cam.height}\n")


def load_camera(path) -> CameraModel:
    with open(path) as f:
        lines = [ln.split() for ln in f if ln.strip()]
    if len(lines) != 6:
        raise ValueError(f"{path}: expected 6 lines of camera data, got {len(lines)}")
    try:
        fx, fy, cx, cy = map(float, lines[0])
        rot = np.array([[float(v) for v in lines[1 + i]] for i in range(3)])
        trans = np.array([float(v) for v in lines[4]])
        width, height = int(lines[5][0]), int(lines[5][1])
    except (ValueError, IndexError) as e:
        raise ValueError(f"{path}: malformed camera record ({e})") from None
    return CameraModel(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot,
                       translation=trans, width=width, height=height)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation/translation for a camera at `eye` looking at
    `target` (camera convention: +x right, +y down, +z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    # Re-orthonormalize so the orthonormality check passes at 1e-9.
    u_mat, _, vt = np.linalg.svd(rot)
    rot = u_mat @ vt
    return rot, -rot @ eye
