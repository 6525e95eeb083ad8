"""Differentiable 3D Gaussian splatting: representation, rasterizer, metrics.

Each Gaussian carries a center, a unit-quaternion rotation, per-axis log
scales, an RGB color logit and an opacity logit, so every constrained
quantity (PSD covariance, positive scales, (0,1) color/opacity) is met by
construction.  The rasterizer projects Gaussians to 2D splats with the
affine (Jacobian) approximation, sorts front-to-back by depth with index
tie-break, and alpha-composites through the autodiff graph so every Gaussian
parameter receives gradients.  Depth sort order is treated as constant per
render.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, minimum, stack, where_const
from .camera import CameraModel, Z_NEAR
from .optim import AdamW

LOWPASS = 0.3        # pixel-space dilation added to the 2D covariance diagonal
ALPHA_MAX = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4


class DivergenceError(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class GaussianSet:
    """Learnable Gaussian primitives; all fields are autodiff leaf tensors."""

    def __init__(self, mu, quat, log_scale, color_logit, opacity_logit):
        self.mu = Tensor(mu, requires_grad=True)
        self.quat = Tensor(quat, requires_grad=True)
        self.log_scale = Tensor(log_scale, requires_grad=True)
        self.color_logit = Tensor(color_logit, requires_grad=True)
        self.opacity_logit = Tensor(opacity_logit, requires_grad=True)
        n = self.mu.shape[0]
        for name, t, shape in [("quat", self.quat, (n, 4)), ("log_scale", self.log_scale, (n, 3)),
                               ("color_logit", self.color_logit, (n, 3)),
                               ("opacity_logit", self.opacity_logit, (n,))]:
            if t.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {t.shape}")

    @property
    def count(self):
        return self.mu.shape[0]

    @classmethod
    def from_points(cls, points, color=0.5, opacity=0.1):
        """Seed Gaussians at point positions; scale from mean 3-NN distance."""
        points = np.asarray(points, dtype=np.float64)
        n = len(points)
        if n == 0:
            raise ValueError("cannot initialize Gaussians from an empty cloud")
        diff = points[:, None, :] - points[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(d, np.inf)
        kn = min(3, n - 1)
        if kn == 0:
            mean_nn = np.full(n, 0.1)
        else:
            mean_nn = np.sort(d, axis=1)[:, :kn].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-6)
        quat = np.zeros((n, 4))
        quat[:, 0] = 1.0
        return cls(
            mu=points,
            quat=quat,
            log_scale=np.log(mean_nn)[:, None].repeat(3, axis=1),
            color_logit=np.full((n, 3), _logit(color)),
            opacity_logit=np.full(n, _logit(opacity)),
        )

    def parameters(self):
        return {"mu": self.mu, "quat": self.quat, "log_scale": self.log_scale,
                "color_logit": self.color_logit, "opacity_logit": self.opacity_logit}

    def colors(self):
        return self.color_logit.sigmoid()

    def alphas(self):
        return self.opacity_logit.sigmoid()

    def centers(self):
        return self.mu.data.copy()

    def covariances(self):
        return build_covariances(self.quat, self.log_scale)


def _rotation_from_quats(quat: Tensor) -> Tensor:
    """(N, 4) quaternions (normalized here) -> (N, 3, 3) rotation matrices."""
    norms = np.sqrt((quat.data ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("zero quaternion has no defined rotation")
    q = quat * ((quat * quat).sum(axis=1, keepdims=True)) ** -0.5
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    one = Tensor(np.ones(quat.shape[0]))
    rows = [
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), one - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), one - 2.0 * (x * x + y * y),
    ]
    return stack(rows, axis=1).reshape(quat.shape[0], 3, 3)


def build_covariances(quat: Tensor, log_scale: Tensor) -> Tensor:
    """Batched R S S^T R^T from (N, 4) quaternions and (N, 3) log scales."""
    rot = _rotation_from_quats(quat)
    s2 = (2.0 * log_scale).exp()  # squared scales, (N, 3)
    return (rot * s2.reshape(-1, 1, 3)) @ rot.transpose(0, 2, 1)


def build_covariance(quat, log_scale) -> Tensor:
    """Single-Gaussian covariance from a 4-vector quaternion and 3-vector log scale."""
    q = Tensor._wrap(quat).reshape(1, 4)
    s = Tensor._wrap(log_scale).reshape(1, 3)
    return build_covariances(q, s).reshape(3, 3)


@dataclass
class Splat2D:
    mean2d: np.ndarray   # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) after low-pass dilation
    depth: float
    color: np.ndarray    # (3,) activated
    alpha: float         # activated opacity
    index: int


def project_gaussian(mu, cov3d, color, alpha, cam: CameraModel, index=0):
    """Project one Gaussian to a 2D splat; returns None when culled.

    Culls behind-camera Gaussians and splats whose 3-sigma extent misses the
    frame entirely.
    """
    mu_cam = cam.rotation @ np.asarray(mu, dtype=np.float64) + cam.translation
    z = mu_cam[2]
    if z <= Z_NEAR:
        return None
    x, y = mu_cam[0], mu_cam[1]
    j = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    cov_cam = cam.rotation @ np.asarray(cov3d, dtype=np.float64) @ cam.rotation.T
    cov2d = j @ cov_cam @ j.T + LOWPASS * np.eye(2)
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    # 3-sigma frame test via the larger eigenvalue of cov2d
    a, b, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = 3.0 * np.sqrt(lam_max)
    if (mean2d[0] < -r or mean2d[0] > cam.width - 1 + r or
            mean2d[1] < -r or mean2d[1] > cam.height - 1 + r):
        return None
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(z),
                   color=np.asarray(color, dtype=np.float64),
                   alpha=float(alpha), index=index)


def rasterize(gs: GaussianSet, cam: CameraModel, early_exit=True, return_aux=False):
    """Render the Gaussian set to an (H, W, 3) image tensor, black background.

    With early_exit the per-splat 1/255 alpha cutoff and the 1e-4
    transmittance stop are active; disabling both makes the render an exact
    full-sum composite (used by the oracle comparison tests).
    """
    n = gs.count
    if n == 0:
        raise ValueError("rasterize requires at least one Gaussian")
    h, w = cam.height, cam.width

    rot = Tensor(cam.rotation)
    mu_cam = gs.mu @ rot.transpose() + Tensor(cam.translation)  # (N, 3)
    z_raw = mu_cam[:, 2]
    depth_ok = z_raw.data > Z_NEAR
    # Behind-camera rows would produce inf/nan that leak into gradients even
    # at zero weight; substitute unit depth for rows that are culled anyway.
    dm = depth_ok.astype(np.float64)
    z = z_raw * Tensor(dm) + Tensor(1.0 - dm)
    x, y = mu_cam[:, 0], mu_cam[:, 1]
    iz = z ** -1.0

    cov_cam = rot @ gs.covariances() @ rot.transpose()  # (N, 3, 3) via broadcast
    zero = Tensor(np.zeros(n))
    j00 = cam.fx * iz
    j02 = -cam.fx * x * iz * iz
    j11 = cam.fy * iz
    j12 = -cam.fy * y * iz * iz
    jac = stack([j00, zero, j02, zero, j11, j12], axis=1).reshape(n, 2, 3)
    cov2 = jac @ cov_cam @ jac.transpose(0, 2, 1)
    a = cov2[:, 0, 0] + LOWPASS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + LOWPASS
    det = a * c - b * b
    inv_a = c / det
    inv_b = -1.0 * b / det
    inv_c = a / det
    u = cam.fx * x * iz + cam.cx
    v = cam.fy * y * iz + cam.cy

    # Frustum cull on detached values (sort order and culling are constants
    # of the render).
    lam_max = 0.5 * (a.data + c.data) + np.sqrt(np.maximum(0.25 * (a.data - c.data) ** 2 + b.data ** 2, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    keep = depth_ok & (u.data >= -radius) & (u.data <= w - 1 + radius) \
        & (v.data >= -radius) & (v.data <= h - 1 + radius)
    kept = np.flatnonzero(keep)
    order = kept[np.argsort(z_raw.data[kept], kind="stable")]  # depth ties -> lower index first

    colors = gs.colors()  # (N, 3)
    alphas = gs.alphas()  # (N,)

    ys_grid, xs_grid = np.meshgrid(np.arange(h, dtype=np.float64),
                                   np.arange(w, dtype=np.float64), indexing="ij")
    xs_t, ys_t = Tensor(xs_grid), Tensor(ys_grid)

    img = Tensor(np.zeros((h, w, 3)))
    trans = Tensor(np.ones((h, w)))
    weight_sum = np.zeros((h, w))

    for i in order:
        if early_exit and not np.any(trans.data >= T_STOP):
            break
        dx = xs_t - u[i]
        dy = ys_t - v[i]
        quad = inv_a[i] * dx * dx + 2.0 * inv_b[i] * dx * dy + inv_c[i] * dy * dy
        weight = (quad * -0.5).exp()
        a_eff = minimum(alphas[i] * weight, ALPHA_MAX)
        if early_exit:
            active = (a_eff.data >= ALPHA_SKIP) & (trans.data >= T_STOP)
            if not active.any():
                continue
            a_eff = where_const(active, a_eff)
        contrib = a_eff * trans  # (H, W)
        img = img + contrib.reshape(h, w, 1) * colors[i].reshape(1, 1, 3)
        weight_sum += contrib.data
        trans = trans * (1.0 - a_eff)

    if return_aux:
        return img, {"weight_sum": weight_sum, "transmittance": trans.data.copy(),
                     "n_rendered": len(order)}
    return img


# -- image metrics -----------------------------------------------------------


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def _blur_matrix(n, kernel):
    """(n - size + 1, n) matrix applying a valid-mode 1-D correlation."""
    size = len(kernel)
    if n < size:
        raise ValueError(f"image extent {n} smaller than SSIM window {size}")
    out = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        out[i, i:i + size] = kernel
    return out


def ssim(a, b, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean windowed SSIM over channels; differentiable when inputs are Tensors."""
    ta, tb = Tensor._wrap(a), Tensor._wrap(b)
    if ta.shape != tb.shape:
        raise ad.ShapeError("ssim", ta.shape, tb.shape)
    if ta.ndim == 2:
        ta = ta.reshape(*ta.shape, 1)
        tb = tb.reshape(*tb.shape, 1)
    h, w, ch = ta.shape
    kernel = _gaussian_window(window_size, sigma)
    bh = Tensor(_blur_matrix(h, kernel))
    bwt = Tensor(_blur_matrix(w, kernel).T)

    def blur(t):
        return bh @ t @ bwt

    vals = []
    for j in range(ch):
        x, yimg = ta[:, :, j], tb[:, :, j]
        mu1, mu2 = blur(x), blur(yimg)
        s11 = blur(x * x) - mu1 * mu1
        s22 = blur(yimg * yimg) - mu2 * mu2
        s12 = blur(x * yimg) - mu1 * mu2
        num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
        den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
        vals.append((num / den).mean())
    total = vals[0]
    for vv in vals[1:]:
        total = total + vv
    return total * (1.0 / ch)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 1; +inf for identical images."""
    da = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise ad.ShapeError("psnr", da.shape, db.shape)
    mse = float(np.mean((da - db) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(1.0 / mse))


# -- losses ------------------------------------------------------------------


def volume_term(gs: GaussianSet) -> Tensor:
    """Mean product of per-axis scales over all Gaussians."""
    return gs.log_scale.sum(axis=1).exp().mean()


def gs_photometric_loss(img_gs, img_gt, gs: GaussianSet, lambda_ssim=0.2, gamma=0.01):
    """L1 + lambda_ssim * (1 - SSIM) + gamma * mean Gaussian volume."""
    diff = Tensor._wrap(img_gs) - Tensor._wrap(img_gt)
    loss = diff.abs().mean()
    if lambda_ssim:
        loss = loss + lambda_ssim * (1.0 - ssim(img_gs, img_gt))
    if gamma:
        loss = loss + gamma * volume_term(gs)
    return loss


def gs_image_loss(img_gs, img_gt, lam=0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM)."""
    diff = Tensor._wrap(img_gs) - Tensor._wrap(img_gt)
    loss = (1.0 - lam) * diff.abs().mean()
    if lam:
        loss = loss + lam * (1.0 - ssim(img_gs, img_gt))
    return loss


def gs_point_loss(p_gs, p_rec):
    """Symmetric Chamfer between Gaussian centers and the reconstructed cloud."""
    from .pointcloud import chamfer
    return chamfer(p_gs, p_rec)


@dataclass
class GSHyper:
    lr: float = 0.03
    lambda_ssim: float = 0.2
    gamma: float = 0.01
    betas: tuple = (0.9, 0.999)
    # Position and shape move slower than appearance, as in standard
    # splatting practice.
    lr_scale: dict = field(default_factory=lambda: {
        "mu": 0.3, "quat": 0.5, "log_scale": 1.0,
        "color_logit": 5.0, "opacity_logit": 5.0,
    })


def optimize_gaussians(gs: GaussianSet, views, iters, hyper: GSHyper | None = None,
                       early_exit=True, callback=None):
    """Fit Gaussians to (CameraModel, image) view pairs by AdamW on the
    photometric loss summed over views.  Returns (gs, loss_history)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not views:
        raise ValueError("at least one view is required")
    hyper = hyper or GSHyper()
    opt = AdamW(gs.parameters(), lr=hyper.lr, betas=hyper.betas,
                weight_decay=0.0, lr_scale=hyper.lr_scale)
    history = []
    for it in range(iters):
        total = None
        for cam, img_gt in views:
            rendered = rasterize(gs, cam, early_exit=early_exit)
            loss = gs_photometric_loss(rendered, img_gt, gs,
                                       lambda_ssim=hyper.lambda_ssim, gamma=hyper.gamma)
            total = loss if total is None else total + loss
        val = total.item()
        if not np.isfinite(val):
            raise DivergenceError(it, f"loss became {val}")
        history.append(val)
        opt.zero_grad()
        total.backward()
        opt.step()
        if callback is not None:
            callback(it, val)
    return gs, history


# -- PLY export --------------------------------------------------------------


def save_gaussians_ply(gs: GaussianSet, path):
    n = gs.count
    colors = gs.colors().data
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float scale_0\nproperty float scale_1\nproperty float scale_2\n"
        "property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n"
        "property float opacity\n"
        "property float red\nproperty float green\nproperty float blue\n"
        "end_header\n"
    )
    with open(path, "w") as f:
        f.write(header)
        for i in range(n):
            row = np.concatenate([gs.mu.data[i], gs.log_scale.data[i], gs.quat.data[i],
                                  [gs.opacity_logit.data[i]], colors[i]])
            f.write(" ".join(f"{vv:.9g}" for vv in row) + "\n")
