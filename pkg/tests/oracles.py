"""Independent reference implementations used to verify the package.

Everything here is deliberately written from the mathematical definitions,
sharing no code with the package: plain loops, no clever vectorization, no
autodiff.  Slow is fine; these run on small instances only.
"""

import numpy as np


def finite_diff(fn, arrays, eps=1e-5):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. each array."""
    grads = []
    for target in arrays:
        g = np.zeros_like(target)
        flat = target.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*arrays)
            flat[i] = orig - eps
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-4):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def brute_chamfer(a, b):
    """Symmetric mean of min squared distances, O(n*m) loops."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total_ab = 0.0
    for p in a:
        total_ab += min(float(np.sum((p - q) ** 2)) for q in b)
    total_ba = 0.0
    for q in b:
        total_ba += min(float(np.sum((q - p) ** 2)) for p in a)
    return total_ab / len(a) + total_ba / len(b)


def brute_fps(points, count):
    """Farthest point sampling by definition: seed index 0, ties to the
    lowest index."""
    points = np.asarray(points, dtype=np.float64)
    chosen = [0]
    for _ in range(count - 1):
        best_idx = None
        best_d = -1.0
        for i in range(len(points)):
            d = min(float(np.sum((points[i] - points[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_d = d
                best_idx = i
        chosen.append(best_idx)
    return np.array(chosen)


def brute_knn(query, points, k):
    """k nearest neighbors per query row, distance ties broken by lowest index."""
    query = np.asarray(query, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    out = np.empty((len(query), k), dtype=np.intp)
    for qi, q in enumerate(query):
        ranked = sorted(range(len(points)),
                        key=lambda i: (float(np.sum((points[i] - q) ** 2)), i))
        out[qi] = ranked[:k]
    return out


def ref_quat_rotation(q):
    """Rotation matrix of a (possibly unnormalized) quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def ref_covariance(quat, log_scale):
    """R S S^T R^T from a quaternion and per-axis log scales."""
    rot = ref_quat_rotation(quat)
    s = np.diag(np.exp(np.asarray(log_scale, dtype=np.float64)))
    return rot @ s @ s.T @ rot.T


def brute_composite(gs_params, cam, lowpass=0.3, alpha_max=0.99):
    """Per-pixel front-to-back alpha compositing over every Gaussian.

    No tiling, no early exit, no skip thresholds: the naive full sum.
    gs_params is a dict of plain arrays: mu (N,3), quat (N,4),
    log_scale (N,3), color_logit (N,3), opacity_logit (N,).
    """
    mu = np.asarray(gs_params["mu"], dtype=np.float64)
    n = len(mu)
    splats = []
    for i in range(n):
        p_cam = cam.rotation @ mu[i] + cam.translation
        z = p_cam[2]
        if z <= 1e-4:
            continue
        x, y = p_cam[0], p_cam[1]
        jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                        [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
        cov3 = ref_covariance(gs_params["quat"][i], gs_params["log_scale"][i])
        cov2 = jac @ cam.rotation @ cov3 @ cam.rotation.T @ jac.T + lowpass * np.eye(2)
        mean2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        color = 1.0 / (1.0 + np.exp(-np.asarray(gs_params["color_logit"][i])))
        alpha = 1.0 / (1.0 + np.exp(-float(gs_params["opacity_logit"][i])))
        splats.append((float(z), i, mean2, np.linalg.inv(cov2), color, alpha))
    splats.sort(key=lambda s: (s[0], s[1]))

    img = np.zeros((cam.height, cam.width, 3))
    for v in range(cam.height):
        for u in range(cam.width):
            trans = 1.0
            pixel = np.zeros(3)
            for _, _, mean2, inv_cov, color, alpha in splats:
                d = np.array([u, v]) - mean2
                weight = np.exp(-0.5 * d @ inv_cov @ d)
                a_eff = min(alpha_max, alpha * weight)
                pixel += trans * a_eff * color
                trans *= 1.0 - a_eff
            img[v, u] = pixel
    return img
