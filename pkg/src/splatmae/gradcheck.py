"""Finite-difference gradient verification, exposed through the CLI.

Central differences with a configurable step; relative error is measured
against max(|numeric|, floor) so near-zero gradients do not blow up the
ratio.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concatenate, gather, layer_norm, maximum, minimum, softmax, stack
from .camera import CameraModel
from .gsplat import (GaussianSet, build_covariance, gs_image_loss,
                     gs_photometric_loss, rasterize, ssim)
from .pointcloud import chamfer_tensor


def finite_difference(fn, arrays, eps=1e-5):
    """Numeric gradient of scalar fn(*arrays) w.r.t. every array."""
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


def check(fn, arrays, eps=1e-5, floor=1e-4):
    """Max relative error between analytic and numeric gradients."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()
    numeric = finite_difference(lambda *xs: fn(*[Tensor(x) for x in xs]).item(),
                                [a.copy() for a in arrays], eps=eps)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        rel = np.abs(ana - num) / np.maximum(np.abs(num), floor)
        worst = max(worst, float(rel.max()))
    return worst


def _op_cases(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    v = rng.normal(size=(5,))
    return [
        ("add", lambda x, y: (x + y).sum(), [a.copy(), a.copy()]),
        ("mul", lambda x, y: (x * y).sum(), [a.copy(), a.copy()]),
        ("matmul", lambda x, y: ((x @ y) ** 2).sum(), [a.copy(), b.copy()]),
        ("exp", lambda x: x.exp().sum(), [a.copy()]),
        ("log", lambda x: (x.abs() + 1.0).log().sum(), [a.copy()]),
        ("sigmoid", lambda x: x.sigmoid().sum(), [v.copy()]),
        ("gelu", lambda x: x.gelu().sum(), [v.copy()]),
        ("softmax", lambda x: (softmax(x, axis=-1) ** 2).sum(), [a.copy()]),
        ("layer_norm", lambda x: layer_norm(x).abs().sum(), [a.copy()]),
        ("reduce_min", lambda x: x.min(axis=1).sum(), [a.copy()]),
        ("reduce_mean", lambda x: x.mean(axis=0).sum(), [a.copy()]),
        ("gather", lambda x: gather(x, np.array([0, 2, 2]), axis=0).exp().sum(), [a.copy()]),
        ("concatenate", lambda x, y: concatenate([x, y.transpose()], axis=0).sigmoid().sum(),
         [a.copy(), b.copy()]),
        ("stack", lambda x, y: stack([x, y], axis=1).tanh().sum(), [v.copy(), v.copy()]),
        ("maximum", lambda x, y: maximum(x, y).sum() + minimum(x, 2.0 * y).sum(),
         [v.copy(), v.copy() + 0.05]),
        ("slice", lambda x: x[1:, ::2].sum(), [a.copy()]),
    ]


def run_suite(module=None, trials=5, seed=0, eps=1e-5):
    """Run gradient checks; returns a list of (name, max_rel_err) tuples."""
    rng = np.random.default_rng(seed)
    results = []

    if module in (None, "autodiff"):
        for trial in range(trials):
            for name, fn, arrays in _op_cases(rng):
                results.append((f"autodiff.{name}[{trial}]", check(fn, arrays, eps=eps)))
        for trial in range(trials):
            w1 = rng.normal(size=(4, 8)) / 2
            w2 = rng.normal(size=(8, 8)) / 2
            w3 = rng.normal(size=(8, 1)) / 2
            x = rng.normal(size=(3, 4))
            results.append((f"autodiff.mlp[{trial}]",
                            check(lambda a, b, c, d: ((a @ b).gelu() @ c).tanh().__matmul__(d).sum(),
                                  [x, w1, w2, w3], eps=eps)))

    if module in (None, "chamfer"):
        for trial in range(trials):
            pa = rng.normal(size=(6, 3))
            pb = rng.normal(size=(5, 3))
            results.append((f"chamfer[{trial}]",
                            check(lambda a, b: chamfer_tensor(a, b), [pa, pb], eps=eps)))

    if module in (None, "gsplat"):
        for trial in range(trials):
            q = rng.normal(size=4)
            s = rng.normal(size=3) * 0.3
            results.append((f"gsplat.covariance[{trial}]",
                            check(lambda a, b: (build_covariance(a, b) ** 2).sum(),
                                  [q, s], eps=eps)))
        cam = CameraModel(fx=18.0, fy=18.0, cx=5.5, cy=5.5, rotation=np.eye(3),
                          translation=np.zeros(3), width=12, height=12)
        for trial in range(trials):
            n = 4
            gt = rng.uniform(0, 1, size=(12, 12, 3))

            def render_loss(mu, quat, log_scale, color_logit, opacity_logit):
                gs = GaussianSet.__new__(GaussianSet)
                gs.mu, gs.quat, gs.log_scale = mu, quat, log_scale
                gs.color_logit, gs.opacity_logit = color_logit, opacity_logit
                img = rasterize(gs, cam, early_exit=False)
                return (gs_photometric_loss(img, gt, gs, 0.2, 0.01)
                        + gs_image_loss(img, gt, 0.2))

            arrays = [rng.normal(0, 0.25, size=(n, 3)) + np.array([0, 0, 1.5]),
                      rng.normal(size=(n, 4)),
                      rng.normal(-1.5, 0.3, size=(n, 3)),
                      rng.normal(size=(n, 3)),
                      rng.normal(size=n)]
            results.append((f"gsplat.render_losses[{trial}]",
                            check(render_loss, arrays, eps=eps, floor=1e-3)))
        for trial in range(trials):
            ia = rng.uniform(0.05, 0.95, size=(12, 12, 3))
            ib = rng.uniform(0.05, 0.95, size=(12, 12, 3))
            results.append((f"gsplat.ssim[{trial}]",
                            check(lambda a, b: ssim(a, b), [ia, ib], eps=eps)))
    return results
