"""Synthetic desk-scale scenes with analytic ground truth, plus RGB-D ingestion.

Scenes are rooms containing axis-aligned boxes and rectangles.  Ground-truth
frames come from a per-pixel raycaster against the analytic surfaces (flat
Lambert shading, fixed light) that shares no code with the splatting
rasterizer, so splat fits are checked against an independent renderer.

Dataset directory layout:
    frames/NNNN.ppm   RGB, binary PPM
    depth/NNNN.png    16-bit depth in millimeters, 0 = invalid
    cams/NNNN.txt     camera text record (see camera.save_camera)
    cloud.ply         optional point cloud
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, load_camera, look_at, save_camera
from .images import read_depth_png, read_png, read_ppm, write_depth_png, write_ppm
from .pointcloud import PointCloud, load_ply, save_ply

AMBIENT = 0.3
LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError(f"degenerate box {self.lo}..{self.hi}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError(f"albedo out of [0,1]: {self.albedo}")


@dataclass
class Rect:
    """Axis-aligned rectangle: perpendicular to `axis` at `coord`, spanning
    lo..hi in the two remaining axes (in ascending axis order)."""
    axis: int
    coord: float
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError(f"degenerate rectangle {self.lo}..{self.hi}")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError(f"albedo out of [0,1]: {self.albedo}")

    @property
    def area(self):
        return float(np.prod(self.hi - self.lo))


@dataclass
class SceneSpec:
    room: tuple            # (x, y, z) extents in meters; room spans [0, e] per axis
    seed: int = 0
    boxes: list = field(default_factory=list)
    planes: list = field(default_factory=list)


@dataclass
class FrameRecord:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) meters, 0 = invalid
    camera: CameraModel


@dataclass
class Scene:
    spec: SceneSpec
    surfaces: list  # Rect instances, including the room walls


def _box_faces(box: Box):
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for coord in (box.lo[axis], box.hi[axis]):
            faces.append(Rect(axis=axis, coord=float(coord),
                              lo=box.lo[others], hi=box.hi[others], albedo=box.albedo))
    return faces


def generate_scene(spec: SceneSpec) -> Scene:
    """Expand a spec into raycastable surfaces; deterministic, validated."""
    if not spec.boxes and not spec.planes:
        raise ValueError("scene spec contains no primitives")
    room = np.asarray(spec.room, dtype=np.float64)
    surfaces = []
    wall_albedos = [np.array([0.75, 0.72, 0.68]), np.array([0.7, 0.74, 0.7]),
                    np.array([0.68, 0.7, 0.76]), np.array([0.72, 0.68, 0.72]),
                    np.array([0.6, 0.6, 0.62]), np.array([0.85, 0.85, 0.82])]
    i = 0
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for coord in (0.0, float(room[axis])):
            surfaces.append(Rect(axis=axis, coord=coord, lo=np.zeros(2),
                                 hi=room[others], albedo=wall_albedos[i % 6]))
            i += 1
    for box in spec.boxes:
        if np.any(box.lo < 0) or np.any(box.hi > room):
            raise ValueError(f"box {box.lo}..{box.hi} outside room extents {room}")
        surfaces.extend(_box_faces(box))
    for rect in spec.planes:
        surfaces.append(rect)
    return Scene(spec=spec, surfaces=surfaces)


def random_scene_spec(seed, n_boxes=4, room=(4.0, 3.0, 2.5)):
    """Random boxes on the floor of the room, deterministic per seed."""
    rng = np.random.default_rng(seed)
    room = np.asarray(room, dtype=np.float64)
    boxes = []
    for _ in range(n_boxes):
        size = rng.uniform(0.25, 0.9, size=3) * np.array([1.0, 1.0, 0.8])
        lo_xy = rng.uniform(0.2, room[:2] - size[:2] - 0.2)
        lo = np.array([lo_xy[0], lo_xy[1], 0.0])
        boxes.append(Box(lo=lo, hi=lo + size, albedo=rng.uniform(0.1, 0.95, size=3)))
    return SceneSpec(room=tuple(room), seed=int(seed), boxes=boxes)


def render_ground_truth(scene: Scene, cam: CameraModel) -> FrameRecord:
    """Per-pixel raycast with flat Lambert shading; misses give black, depth 0.

    Ray parameterization puts camera-space z at the ray parameter, so the
    nearest-hit t is directly the stored depth.
    """
    h, w = cam.height, cam.width
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy,
                         np.ones_like(xs)], axis=-1)
    dirs = dirs_cam @ cam.rotation  # = R^T d, (H, W, 3)
    origin = cam.camera_center()

    best_t = np.full((h, w), np.inf)
    image = np.zeros((h, w, 3))
    for surf in scene.surfaces:
        a = surf.axis
        others = [ax for ax in range(3) if ax != a]
        da = dirs[:, :, a]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (surf.coord - origin[a]) / da
        hit = np.isfinite(t) & (t > 1e-9) & (t < best_t)
        if not hit.any():
            continue
        p0 = origin[others[0]] + t * dirs[:, :, others[0]]
        p1 = origin[others[1]] + t * dirs[:, :, others[1]]
        hit &= (p0 >= surf.lo[0]) & (p0 <= surf.hi[0]) & (p1 >= surf.lo[1]) & (p1 <= surf.hi[1])
        if not hit.any():
            continue
        # Double-sided: shade with the face normal pointing back along the ray.
        normal_dot = np.abs(LIGHT_DIR[a])
        shade = AMBIENT + (1.0 - AMBIENT) * normal_dot
        image[hit] = surf.albedo * shade
        best_t[hit] = t[hit]

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return FrameRecord(image=image, depth=depth, camera=cam)


def sample_point_cloud(scene: Scene, count, seed=None) -> PointCloud:
    """Area-weighted uniform samples on all scene surfaces."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(scene.spec.seed if seed is None else seed)
    areas = np.array([s.area for s in scene.surfaces])
    probs = areas / areas.sum()
    choice = rng.choice(len(scene.surfaces), size=count, p=probs)
    pts = np.empty((count, 3))
    uv = rng.uniform(size=(count, 2))
    for i, si in enumerate(choice):
        s = scene.surfaces[si]
        others = [ax for ax in range(3) if ax != s.axis]
        pts[i, s.axis] = s.coord
        pts[i, others[0]] = s.lo[0] + uv[i, 0] * (s.hi[0] - s.lo[0])
        pts[i, others[1]] = s.lo[1] + uv[i, 1] * (s.hi[1] - s.lo[1])
    return PointCloud(pts)


def default_cameras(spec: SceneSpec, n_views, width, height, fov_deg=60.0):
    """Cameras on an arc inside the room, all looking at the room center."""
    room = np.asarray(spec.room, dtype=np.float64)
    center = room / 2.0
    fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    cams = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / max(n_views, 1) + 0.3
        eye = center + np.array([0.38 * room[0] * np.cos(ang),
                                 0.38 * room[1] * np.sin(ang),
                                 0.25 * room[2]])
        rot, trans = look_at(eye, center - np.array([0.0, 0.0, 0.2 * room[2]]))
        cams.append(CameraModel(fx=fx, fy=fx, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                                rotation=rot, translation=trans, width=width, height=height))
    return cams


def backproject_depth(frame: FrameRecord) -> PointCloud:
    """World-space points from all valid depth pixels."""
    cam = frame.camera
    h, w = frame.depth.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    valid = frame.depth > 0
    z = frame.depth[valid]
    u = xs[valid]
    v = ys[valid]
    p_cam = np.stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z], axis=1)
    pts = (p_cam - cam.translation) @ cam.rotation
    return PointCloud(pts)


# -- dataset I/O -------------------------------------------------------------


def save_frames(frames, out_dir, cloud: PointCloud | None = None):
    for sub in ("frames", "depth", "cams"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(frame.image, os.path.join(out_dir, "frames", f"{i:04d}.ppm"))
        write_depth_png(frame.depth, os.path.join(out_dir, "depth", f"{i:04d}.png"))
        save_camera(frame.camera, os.path.join(out_dir, "cams", f"{i:04d}.txt"))
    if cloud is not None:
        save_ply(cloud, os.path.join(out_dir, "cloud.ply"), binary=True)


def load_rgbd_frames(path):
    """Load a dataset directory -> list of (FrameRecord, PointCloud).

    The per-frame cloud is back-projected from the depth map; a shared
    cloud.ply, when present, is attached instead for every frame.
    """
    frames_dir = os.path.join(path, "frames")
    if not os.path.isdir(frames_dir):
        raise FileNotFoundError(f"{path}: missing frames/ directory")
    names = sorted(os.listdir(frames_dir))
    if not names:
        raise FileNotFoundError(f"{path}: frames/ directory is empty")
    shared = None
    cloud_path = os.path.join(path, "cloud.ply")
    if os.path.exists(cloud_path):
        shared = load_ply(cloud_path)
    out = []
    for name in names:
        stem = os.path.splitext(name)[0]
        img_path = os.path.join(frames_dir, name)
        image = read_ppm(img_path) if name.endswith(".ppm") else read_png(img_path)
        depth_path = os.path.join(path, "depth", stem + ".png")
        cam_path = os.path.join(path, "cams", stem + ".txt")
        for req in (depth_path, cam_path):
            if not os.path.exists(req):
                raise FileNotFoundError(f"{path}: frame {stem} missing {req}")
        depth = read_depth_png(depth_path)
        cam = load_camera(cam_path)
        if image.shape[:2] != (cam.height, cam.width) or depth.shape != (cam.height, cam.width):
            raise ValueError(f"{path}: frame {stem} extents do not match camera "
                             f"{cam.width}x{cam.height}")
        frame = FrameRecord(image=image, depth=depth, camera=cam)
        out.append((frame, shared if shared is not None else backproject_depth(frame)))
    return out


# -- scene spec files --------------------------------------------------------


def save_scene_spec(spec: SceneSpec, path):
    payload = {
        "room": list(spec.room),
        "seed": spec.seed,
        "boxes": [{"lo": b.lo.tolist(), "hi": b.hi.tolist(), "albedo": b.albedo.tolist()}
                  for b in spec.boxes],
        "planes": [{"axis": p.axis, "coord": p.coord, "lo": p.lo.tolist(),
                    "hi": p.hi.tolist(), "albedo": p.albedo.tolist()}
                   for p in spec.planes],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)


def load_scene_spec(path) -> SceneSpec:
    with open(path) as f:
        payload = json.load(f)
    try:
        return SceneSpec(
            room=tuple(payload["room"]),
            seed=int(payload.get("seed", 0)),
            boxes=[Box(lo=b["lo"], hi=b["hi"], albedo=b["albedo"])
                   for b in payload.get("boxes", [])],
            planes=[Rect(axis=p["axis"], coord=p["coord"], lo=p["lo"], hi=p["hi"],
                         albedo=p["albedo"]) for p in payload.get("planes", [])],
        )
    except KeyError as e:
        raise ValueError(f"{path}: scene spec missing field {e}") from None
