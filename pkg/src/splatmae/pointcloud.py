"""Point-cloud sampling, patching, and the Chamfer distance.

FPS seeds at index 0 and breaks all distance ties by lowest point index, so
results are reproducible without any RNG.  Chamfer is the symmetric mean of
squared nearest-neighbor distances and comes in two flavors: a fast numpy
version for plain arrays and a Tensor version that participates in the
autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64, meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray       # (M, 3)
    members: np.ndarray       # (M, k) indices into the source cloud
    local_coords: np.ndarray  # (M, k, 3) = points[members] - centers[:, None]


def _sq_dists(a, b):
    """Pairwise squared distances, (|a|, |b|)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def fps_indices(points, count):
    """Farthest point sampling: seed at index 0, ties to the lowest index.

    np.argmax returns the first maximizer, which is exactly the lowest-index
    tie-break.
    """
    n = len(points)
    chosen = np.empty(count, dtype=np.intp)
    chosen[0] = 0
    min_d = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(min_d))
        chosen[i] = nxt
        np.minimum(min_d, np.sum((points - points[nxt]) ** 2, axis=1), out=min_d)
    return chosen


def downsample(pc: PointCloud, target: int) -> PointCloud:
    """FPS down to `target` points; small clouds pad by cyclic repetition."""
    if target < 1:
        raise ValueError("target must be >= 1")
    n = len(pc)
    if n >= target:
        return PointCloud(pc.points[fps_indices(pc.points, target)])
    reps = np.arange(target) % n
    return PointCloud(pc.points[reps])


def knn_indices(query, points, k):
    """Indices of the k nearest points for each query row; ties by lowest index.

    np.argsort with stable kind preserves index order among equal distances.
    """
    d = _sq_dists(query, points)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def fps_knn_patches(pc: PointCloud, m: int, k: int) -> PatchSet:
    """Partition a cloud into m patches of k nearest neighbors of FPS centers."""
    n = len(pc)
    if m > n:
        raise ValueError(f"requested {m} patches from {n} points")
    if k > n:
        raise ValueError(f"requested {k} neighbors from {n} points")
    center_idx = fps_indices(pc.points, m)
    centers = pc.points[center_idx]
    members = knn_indices(centers, pc.points, k)
    local = pc.points[members] - centers[:, None, :]
    return PatchSet(centers=centers, members=members, local_coords=local)


def chamfer(a, b):
    """Symmetric Chamfer distance (mean of min squared distances, both ways).

    Accepts (N, 3) arrays / PointClouds (returns a float) or Tensors (returns
    a scalar Tensor differentiable w.r.t. both inputs).
    """
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return chamfer_tensor(Tensor._wrap(a if not isinstance(a, PointCloud) else a.points),
                              Tensor._wrap(b if not isinstance(b, PointCloud) else b.points))
    pa = a.points if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.points if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance of an empty cloud")
    d = _sq_dists(pa, pb)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable Chamfer distance between (N, 3) tensors."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance of an empty cloud")
    diff = a.reshape(a.shape[0], 1, 3) - b.reshape(1, b.shape[0], 3)
    d = (diff * diff).sum(axis=2)  # (|a|, |b|)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def chamfer_batch_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Mean Chamfer over a batch of paired patches, shapes (P, k, 3)."""
    p, ka, _ = a.shape
    kb = b.shape[1]
    diff = a.reshape(p, ka, 1, 3) - b.reshape(p, 1, kb, 3)
    d = (diff * diff).sum(axis=3)  # (P, ka, kb)
    per_patch = d.min(axis=2).mean(axis=1) + d.min(axis=1).mean(axis=1)
    return per_patch.mean()


# -- PLY I/O -----------------------------------------------------------------


def save_ply(pc: PointCloud, path, binary=False):
    n = len(pc)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(pc.points.astype("<f4").tobytes())
        else:
            for x, y, z in pc.points:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n".encode("ascii"))


def load_ply(path) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    fmt = None
    count = None
    props = []
    in_vertex = False
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append((tok[1], tok[2]))
    if count is None:
        raise ValueError(f"{path}: no vertex element")
    names = [p[1] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"{path}: vertex element missing property '{axis}'")

    if fmt == "ascii":
        rows = np.loadtxt(body.decode("ascii").splitlines(), dtype=np.float64, ndmin=2)
        if rows.shape[0] != count:
            raise ValueError(f"{path}: expected {count} vertices, found {rows.shape[0]}")
        cols = [names.index(a) for a in ("x", "y", "z")]
        return PointCloud(rows[:, cols])
    if fmt == "binary_little_endian":
        sizes = {"float": 4, "float32": 4, "double": 8, "float64": 8,
                 "uchar": 1, "uint8": 1, "char": 1, "int8": 1,
                 "short": 2, "ushort": 2, "int": 4, "uint": 4}
        np_types = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
        stride = sum(sizes[t] for t, _ in props)
        if len(body) < count * stride:
            raise ValueError(f"{path}: truncated binary body")
        out = np.empty((count, 3))
        offsets = {}
        off = 0
        for t, name in props:
            offsets[name] = (off, t)
            off += sizes[t]
        buf = np.frombuffer(body[: count * stride], dtype=np.uint8).reshape(count, stride)
        for j, axis in enumerate(("x", "y", "z")):
            o, t = offsets[axis]
            if t not in np_types:
                raise ValueError(f"{path}: property '{axis}' has non-float type {t}")
            w = sizes[t]
            out[:, j] = buf[:, o:o + w].copy().view(np_types[t])[:, 0]
        return PointCloud(out)
    raise ValueError(f"{path}: unsupported PLY format '{fmt}'")
