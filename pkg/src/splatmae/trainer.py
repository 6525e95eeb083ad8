"""Two-stage training orchestration.

Stage 1 optimizes the dual-branch masked autoencoder.  Stage 2 re-runs the
stage-1 forward per scene, fits a Gaussian set initialized at the
reconstructed cloud, and adds the splatting-branch loss: the Chamfer term
backpropagates into the network through the reconstructed cloud while the
optimized Gaussian centers and the rendered image act as fixed targets
(differentiating through the inner splat optimization is deliberately
avoided).

All randomness derives from one root seed through a fixed key-derivation
hash, so identical configs produce byte-identical metrics streams.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tensor
from .gsplat import (DivergenceError, GaussianSet, GSHyper, optimize_gaussians,
                     gs_image_loss, psnr, rasterize)
from .mae import (DualBranchMAE, LossReport, MAEConfig, load_checkpoint,
                  reconstruct_full_cloud, save_checkpoint)
from .optim import AdamW
from .pointcloud import PointCloud, chamfer, chamfer_tensor, downsample, load_ply
from .scene import (FrameRecord, default_cameras, generate_scene, load_rgbd_frames,
                    random_scene_spec, render_ground_truth, sample_point_cloud)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, checkpoint):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 1
    fraction: float = 1.0
    seed: int = 0
    checkpoint_every: int = 10
    # splatting branch
    gs_iters: int = 500
    gs_lr: float = 0.03
    lambda_ssim: float = 0.2
    lam: float = 0.2
    gamma: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0
    # synthetic data generation
    n_scenes: int = 4
    views_per_scene: int = 2
    n_boxes: int = 4
    mae: MAEConfig = field(default_factory=MAEConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if isinstance(self.mae, dict):
            self.mae = MAEConfig(**self.mae)


def derive_seed(root, *keys):
    """Stable sub-seed from a root seed and a key path."""
    h = hashlib.sha256(repr((int(root),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") % (2 ** 63)


# -- config files ------------------------------------------------------------


def save_train_config(cfg: TrainConfig, path):
    with open(path, "w") as f:
        for key, value in asdict(cfg).items():
            if key == "mae":
                for mk, mv in value.items():
                    f.write(f"mae.{mk} = {mv!r}\n")
            else:
                f.write(f"{key} = {value!r}\n")


def load_train_config(path) -> TrainConfig:
    """Parse a `key = value` config file; `mae.`-prefixed keys configure the
    autoencoder."""
    values = {}
    mae_values = {}
    valid = {f.name for f in fields(TrainConfig)}
    valid_mae = {f.name for f in fields(MAEConfig)}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            try:
                value = ast.literal_eval(raw)
            except (ValueError, SyntaxError):
                value = raw
            if key.startswith("mae."):
                sub = key[4:]
                if sub not in valid_mae:
                    raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
                mae_values[sub] = value
            else:
                if key not in valid:
                    raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
                values[key] = value
    values["mae"] = MAEConfig(**mae_values)
    return TrainConfig(**values)


# -- data --------------------------------------------------------------------


@dataclass
class SceneSample:
    name: str
    cloud: PointCloud
    frames: list


def make_synthetic_dataset(cfg: TrainConfig):
    """Deterministic synthetic scenes sized to the autoencoder config."""
    samples = []
    for i in range(cfg.n_scenes):
        spec = random_scene_spec(derive_seed(cfg.seed, "scene", i), n_boxes=cfg.n_boxes)
        scene = generate_scene(spec)
        cams = default_cameras(spec, cfg.views_per_scene,
                               cfg.mae.image_width, cfg.mae.image_height)
        frames = [render_ground_truth(scene, cam) for cam in cams]
        cloud = downsample(sample_point_cloud(scene, 2 * cfg.mae.n_points,
                                              seed=derive_seed(cfg.seed, "cloud", i)),
                           cfg.mae.n_points)
        samples.append(SceneSample(name=f"synthetic_{i:03d}", cloud=cloud, frames=frames))
    return samples


def load_dataset(path):
    """A dataset directory is either one frame layout or a directory of them."""
    if os.path.isdir(os.path.join(path, "frames")):
        entries = [("scene", path)]
    else:
        entries = [(name, os.path.join(path, name)) for name in sorted(os.listdir(path))
                   if os.path.isdir(os.path.join(path, name))]
        if not entries:
            raise FileNotFoundError(f"{path}: no scene directories found")
    samples = []
    for name, scene_dir in entries:
        pairs = load_rgbd_frames(scene_dir)
        cloud = pairs[0][1]
        samples.append(SceneSample(name=name, cloud=cloud,
                                   frames=[frame for frame, _ in pairs]))
    return samples


def select_fraction(samples, fraction, seed):
    """Deterministic prefix of the seed-shuffled sample list."""
    order = np.random.default_rng(derive_seed(seed, "fraction")).permutation(len(samples))
    count = max(1, int(np.floor(fraction * len(samples))))
    return [samples[i] for i in order[:count]]


class MetricsWriter:
    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            open(path, "w").close()

    def write(self, report: LossReport):
        self.records.append(report)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


# -- stage 1 -----------------------------------------------------------------


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.parameters().items()}


def _restore(model, snap):
    for name, p in model.parameters().items():
        p.data = snap[name].copy()


def _fill_missing_grads(model):
    """Zero the gradient of parameters a step did not touch.

    Some parameters are legitimately unused on a given example, for instance
    the cross-modal head when no masked point patch aligns with the image.
    The optimizer insists on a gradient for every parameter, so give those a
    zero one."""
    for p in model.parameters().values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train_stage1(samples, cfg: TrainConfig, out_dir=None, model=None):
    """Returns (model, list of LossReport).  Writes metrics.jsonl and
    checkpoints under out_dir when given."""
    if not samples:
        raise ValueError("no training samples")
    samples = select_fraction(samples, cfg.fraction, cfg.seed)
    if model is None:
        model = DualBranchMAE(cfg.mae, seed=derive_seed(cfg.seed, "init"))
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    ckpt_path = os.path.join(out_dir, "stage1.ckpt") if out_dir else None

    examples = [(s, frame) for s in samples for frame in s.frames]
    step = 0
    last_good = _snapshot(model)
    for epoch in range(cfg.epochs):
        for ei, (sample, frame) in enumerate(examples):
            step += 1
            # Mask seed is a function of the example, not the step, so a
            # frozen model sees a constant loss on a fixed example.
            out = model.stage1_forward(sample.cloud, frame.image, frame.camera,
                                       seed=derive_seed(cfg.seed, "mask", ei), step=step)
            if not np.isfinite(out.report.stage1):
                _restore(model, last_good)
                path = None
                if out_dir:
                    path = os.path.join(out_dir, "last_good.ckpt")
                    save_checkpoint(path, model, extra={"step": step - 1})
                raise TrainingDiverged(step, path)
            opt.zero_grad()
            out.loss.backward()
            _fill_missing_grads(model)
            opt.step()
            last_good = _snapshot(model)
            metrics.write(out.report)
        if ckpt_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_path, model, extra={"epoch": epoch + 1, "step": step})
    if ckpt_path:
        save_checkpoint(ckpt_path, model, extra={"epoch": cfg.epochs, "step": step})
    return model, metrics.records


# -- stage 2 -----------------------------------------------------------------


def _fit_scene_gaussians(p_rec_points, frames, cfg: TrainConfig):
    gs = GaussianSet.from_points(p_rec_points)
    hyper = GSHyper(lr=cfg.gs_lr, lambda_ssim=cfg.lambda_ssim, gamma=cfg.gamma)
    if cfg.gs_iters > 0:
        views = [(frame.camera, frame.image) for frame in frames]
        optimize_gaussians(gs, views, cfg.gs_iters, hyper)
    return gs


def train_stage2(samples, cfg: TrainConfig, stage1_ckpt, out_dir=None):
    """One (or more) epochs of the joint loop; returns (model, reports)."""
    model, _ = load_checkpoint(stage1_ckpt)
    if not samples:
        raise ValueError("no training samples")
    samples = select_fraction(samples, cfg.fraction, cfg.seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None)
    ckpt_path = os.path.join(out_dir, "stage2.ckpt") if out_dir else None

    step = 0
    for epoch in range(cfg.epochs):
        for ei, sample in enumerate(samples):
            step += 1
            frame = sample.frames[0]
            out = model.stage1_forward(sample.cloud, frame.image, frame.camera,
                                       seed=derive_seed(cfg.seed, "mask", ei), step=step)
            p_rec = reconstruct_full_cloud(out.recon_local, out.patches)

            try:
                gs = _fit_scene_gaussians(p_rec.data.copy(), sample.frames, cfg)
            except DivergenceError as err:
                log.warning("scene %s: splat optimization diverged (%s); skipping",
                            sample.name, err)
                continue

            # Optimized centers and renders are fixed targets for the network.
            loss_gs_point = chamfer_tensor(Tensor(gs.centers()), p_rec)
            rendered = rasterize(gs, frame.camera)
            loss_gs_image = float(gs_image_loss(rendered.data, frame.image, cfg.lam).item())
            branch = cfg.alpha * Tensor(loss_gs_image) + cfg.beta * loss_gs_point
            total = out.loss + branch

            opt.zero_grad()
            total.backward()
            _fill_missing_grads(model)
            opt.step()

            report = out.report
            report.gs_image = loss_gs_image
            report.gs_point = loss_gs_point.item()
            report.gs_branch = branch.item()
            report.stage2 = total.item()
            report.psnr = psnr(rendered.data, frame.image)
            metrics.write(report)
    if ckpt_path:
        save_checkpoint(ckpt_path, model, extra={"stage": 2, "step": step})
    return model, metrics.records


# -- evaluation --------------------------------------------------------------


def evaluate(model_or_ckpt, samples, cfg: TrainConfig):
    """Per-scene PSNR of splat renders and Chamfer of the reconstruction."""
    if isinstance(model_or_ckpt, (str, os.PathLike)):
        model, _ = load_checkpoint(model_or_ckpt)
    else:
        model = model_or_ckpt
    per_scene = []
    for i, sample in enumerate(samples):
        frame = sample.frames[0]
        out = model.stage1_forward(sample.cloud, frame.image, frame.camera,
                                   seed=derive_seed(cfg.seed, "eval", i))
        p_rec = reconstruct_full_cloud(out.recon_local, out.patches)
        rec_chamfer = chamfer(p_rec.data, sample.cloud.points)
        gs = _fit_scene_gaussians(p_rec.data.copy(), sample.frames, cfg)
        psnrs = [psnr(rasterize(gs, f.camera).data, f.image) for f in sample.frames]
        per_scene.append({"scene": sample.name,
                          "psnr": float(np.mean(psnrs)),
                          "chamfer": rec_chamfer})
    mean_psnr = float(np.mean([s["psnr"] for s in per_scene]))
    mean_chamfer = float(np.mean([s["chamfer"] for s in per_scene]))
    return {"mean_psnr": mean_psnr, "mean_chamfer": mean_chamfer, "scenes": per_scene}
