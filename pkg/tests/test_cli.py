"""End-to-end smoke tests for the command-line interface."""

import os

import pytest

from splatmae.cli import main
from splatmae.scene import random_scene_spec, save_scene_spec

TINY_CONFIG = """\
epochs = 1
n_scenes = 1
views_per_scene = 1
n_boxes = 2
gs_iters = 2
checkpoint_every = 0
mae.embed_dim = 32
mae.heads = 2
mae.branch_depth = 1
mae.shared_depth = 1
mae.shared_decoder_depth = 1
mae.decoder_depth = 1
mae.num_patches = 8
mae.patch_points = 8
mae.n_points = 64
mae.patch_px = 16
mae.image_height = 32
mae.image_width = 32
"""


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture()
def stage1_dir(tmp_path, config_path):
    out = str(tmp_path / "run1")
    main(["pretrain", "--stage", "1", "--config", config_path, "--out", out])
    return out


def test_pretrain_both_stages(tmp_path, config_path, stage1_dir, capsys):
    assert os.path.exists(os.path.join(stage1_dir, "stage1.ckpt"))
    assert os.path.exists(os.path.join(stage1_dir, "metrics.jsonl"))
    out2 = str(tmp_path / "run2")
    main(["pretrain", "--stage", "2", "--config", config_path,
          "--ckpt", os.path.join(stage1_dir, "stage1.ckpt"), "--out", out2])
    assert os.path.exists(os.path.join(out2, "stage2.ckpt"))
    assert "done" in capsys.readouterr().out


def test_pretrain_stage2_requires_checkpoint(tmp_path, config_path):
    with pytest.raises(SystemExit):
        main(["pretrain", "--stage", "2", "--config", config_path,
              "--ckpt", str(tmp_path / "missing.ckpt"),
              "--out", str(tmp_path / "run")])


def test_gradcheck_command(capsys):
    main(["gradcheck", "--module", "chamfer", "--trials", "1"])
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL  " not in out


def test_evaluate_command(config_path, stage1_dir, capsys):
    main(["evaluate", "--ckpt", os.path.join(stage1_dir, "stage1.ckpt"),
          "--config", config_path])
    out = capsys.readouterr().out
    assert "mean_psnr" in out and "mean_chamfer" in out


def test_export_ply_command(tmp_path, config_path, stage1_dir, capsys):
    cloud_path = str(tmp_path / "cloud.ply")
    gauss_path = str(tmp_path / "gauss.ply")
    main(["export-ply", "--ckpt", os.path.join(stage1_dir, "stage1.ckpt"),
          "--config", config_path, "--out", cloud_path, "--gaussians", gauss_path])
    assert os.path.exists(cloud_path) and os.path.exists(gauss_path)
    assert "wrote cloud" in capsys.readouterr().out


def test_render_command(tmp_path, config_path, stage1_dir):
    spec_path = str(tmp_path / "scene.json")
    save_scene_spec(random_scene_spec(0, n_boxes=2), spec_path)
    out = str(tmp_path / "renders")
    main(["render", "--ckpt", os.path.join(stage1_dir, "stage1.ckpt"),
          "--config", config_path, "--scene", spec_path, "--out", out])
    assert os.path.exists(os.path.join(out, "render_0000.ppm"))
    assert os.path.exists(os.path.join(out, "render_0000.png"))
    assert os.path.exists(os.path.join(out, "gt_0000.ppm"))
