"""Command-line interface.

Subcommands:
    pretrain   run stage-1 or stage-2 training
    render     fit Gaussians from a checkpoint on a scene and write renders
    gradcheck  finite-difference verification of analytic gradients
    evaluate   PSNR / Chamfer metrics of a checkpoint on a dataset
    export-ply write the reconstructed cloud (and fitted Gaussians) as PLY
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .gsplat import rasterize, save_gaussians_ply
from .images import write_png, write_ppm
from .mae import load_checkpoint, reconstruct_full_cloud
from .pointcloud import PointCloud, save_ply
from .scene import (default_cameras, generate_scene, load_scene_spec,
                    render_ground_truth, sample_point_cloud)
from .trainer import (TrainConfig, derive_seed, evaluate, load_dataset,
                      load_train_config, make_synthetic_dataset, train_stage1,
                      train_stage2, _fit_scene_gaussians)


def _load_data(args, cfg):
    if args.data:
        return load_dataset(args.data)
    return make_synthetic_dataset(cfg)


def _config(args):
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.fraction is not None:
        cfg.fraction = args.fraction
    return cfg


def cmd_pretrain(args):
    cfg = _config(args)
    cfg.stage = args.stage
    out_dir = args.out or f"runs/stage{args.stage}"
    os.makedirs(out_dir, exist_ok=True)
    data = _load_data(args, cfg)
    if args.stage == 1:
        train_stage1(data, cfg, out_dir=out_dir)
    else:
        ckpt = args.ckpt or os.path.join("runs/stage1", "stage1.ckpt")
        if not os.path.exists(ckpt):
            sys.exit(f"stage-2 training needs a stage-1 checkpoint (looked at {ckpt}); "
                     "pass --ckpt")
        train_stage2(data, cfg, ckpt, out_dir=out_dir)
    print(f"done; outputs in {out_dir}")


def _scene_sample_from_spec(path, cfg):
    spec = load_scene_spec(path)
    scene = generate_scene(spec)
    cams = default_cameras(spec, cfg.views_per_scene, cfg.mae.image_width,
                           cfg.mae.image_height)
    frames = [render_ground_truth(scene, cam) for cam in cams]
    from .pointcloud import downsample
    cloud = downsample(sample_point_cloud(scene, 2 * cfg.mae.n_points), cfg.mae.n_points)
    return frames, cloud


def cmd_render(args):
    model, extra = load_checkpoint(args.ckpt)
    cfg = _config(args)
    cfg.mae = model.cfg
    frames, cloud = _scene_sample_from_spec(args.scene, cfg)
    os.makedirs(args.out, exist_ok=True)
    out = model.stage1_forward(cloud, frames[0].image, frames[0].camera,
                               seed=derive_seed(cfg.seed, "render"))
    p_rec = reconstruct_full_cloud(out.recon_local, out.patches)
    gs = _fit_scene_gaussians(p_rec.data.copy(), frames, cfg)
    for i, frame in enumerate(frames):
        img = rasterize(gs, frame.camera).data
        write_ppm(img, os.path.join(args.out, f"render_{i:04d}.ppm"))
        write_png(img, os.path.join(args.out, f"render_{i:04d}.png"))
        write_ppm(frame.image, os.path.join(args.out, f"gt_{i:04d}.ppm"))
    print(f"wrote {len(frames)} renders to {args.out}")


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    results = run_suite(module=args.module, trials=args.trials, eps=args.eps)
    worst = 0.0
    failed = 0
    for name, err in results:
        ok = err < args.tol
        failed += not ok
        worst = max(worst, err)
        print(f"{'PASS' if ok else 'FAIL'}  {name:36s} max rel err {err:.3e}")
    print(f"{len(results) - failed}/{len(results)} checks passed (worst {worst:.3e})")
    if failed:
        sys.exit(1)


def cmd_evaluate(args):
    cfg = _config(args)
    data = _load_data(args, cfg)
    result = evaluate(args.ckpt, data, cfg)
    print(json.dumps(result, indent=2, default=str))


def cmd_export_ply(args):
    model, _ = load_checkpoint(args.ckpt)
    cfg = _config(args)
    cfg.mae = model.cfg
    if args.scene:
        frames, cloud = _scene_sample_from_spec(args.scene, cfg)
    else:
        sample = make_synthetic_dataset(cfg)[0]
        frames, cloud = sample.frames, sample.cloud
    out = model.stage1_forward(cloud, frames[0].image, frames[0].camera,
                               seed=derive_seed(cfg.seed, "export"))
    p_rec = reconstruct_full_cloud(out.recon_local, out.patches)
    save_ply(PointCloud(p_rec.data), args.out, binary=False)
    if args.gaussians:
        gs = _fit_scene_gaussians(p_rec.data.copy(), frames, cfg)
        save_gaussians_ply(gs, args.gaussians)
        print(f"wrote cloud to {args.out} and Gaussians to {args.gaussians}")
    else:
        print(f"wrote cloud to {args.out}")


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="splatmae")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--fraction", type=float, default=None,
                       help="use this fraction of the shuffled dataset")

    p = sub.add_parser("pretrain", help="run stage-1 or stage-2 training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    common(p)
    p.add_argument("--data", help="dataset directory (default: synthetic scenes)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--ckpt", help="stage-1 checkpoint (stage 2 only)")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("render", help="render a scene through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--module", choices=("autodiff", "chamfer", "gsplat"))
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory (default: synthetic scenes)")
    common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("export-ply", help="export reconstructed cloud / Gaussians")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output PLY path for the cloud")
    p.add_argument("--scene", help="scene spec JSON (default: synthetic scene)")
    p.add_argument("--gaussians", help="also write fitted Gaussians to this PLY path")
    common(p)
    p.set_defaults(fn=cmd_export_ply)

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
