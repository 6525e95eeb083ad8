"""Dual-branch masked autoencoder over point clouds and images.

The point branch tokenizes FPS-kNN patches with a small PointNet (shared MLP
+ channel max), the image branch patchifies in ViT style.  Both branches
encode their visible tokens, a shared encoder-decoder fuses the concatenated
sequences, and modality-specific decoders reconstruct the masked patches.
A prediction head additionally regresses the image-branch encoder features
of the image patch each masked point patch projects into (targets detached),
tying the two modalities together.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concatenate, gather
from .camera import INVALID_PATCH, CameraModel, align_patches, complementary_masks, MaskPair
from .nn import (LayerNorm, Linear, MLP, Module, TransformerStack, load_state)
from .pointcloud import PatchSet, PointCloud, chamfer_batch_tensor, downsample, fps_knn_patches

CKPT_MAGIC = b"SMAECKP1"


@dataclass
class MAEConfig:
    embed_dim: int = 96
    heads: int = 4
    branch_depth: int = 2
    shared_depth: int = 2
    shared_decoder_depth: int = 1
    decoder_depth: int = 1
    mask_ratio: float = 0.6
    num_patches: int = 64    # point patches per cloud
    patch_points: int = 32   # points per patch
    n_points: int = 2048     # cloud size after downsampling
    patch_px: int = 16
    image_height: int = 256
    image_width: int = 352

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.image_height % self.patch_px or self.image_width % self.patch_px:
            raise ValueError(f"image {self.image_width}x{self.image_height} not divisible "
                             f"by patch size {self.patch_px}")

    @property
    def grid(self):
        return (self.image_height // self.patch_px, self.image_width // self.patch_px)

    @property
    def num_image_patches(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self):
        return self.patch_px * self.patch_px * 3


@dataclass
class TokenBatch:
    tokens: Tensor        # (count, C) embeddings, positional part not yet added
    pos: Tensor           # (count, C) positional embeddings
    modality: str         # "point" | "image"
    visible: np.ndarray | None = None


@dataclass
class LossReport:
    step: int = 0
    point_rec: float = 0.0
    image_rec: float = 0.0
    cross_rec: float = 0.0
    stage1: float = 0.0
    gs_image: float = 0.0
    gs_point: float = 0.0
    gs_branch: float = 0.0
    stage2: float = 0.0
    psnr: float = 0.0
    chamfer: float = 0.0

    def to_dict(self):
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, float) and not np.isfinite(value):
                out[key] = "inf" if value > 0 else "-inf"
        return out


@dataclass
class Stage1Output:
    loss: Tensor              # scalar L_stage1
    point_rec: Tensor
    image_rec: Tensor
    cross_rec: Tensor
    recon_local: Tensor       # (M, k, 3): gt for visible patches, predictions for masked
    recon_image: np.ndarray   # (H, W, 3) with masked patches replaced by predictions
    pred_cross: Tensor | None
    target_cross: Tensor | None
    patches: PatchSet
    masks: MaskPair
    alignment: np.ndarray
    report: LossReport


def _mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()


class DualBranchMAE(Module):
    def __init__(self, cfg: MAEConfig, seed=0):
        rng = np.random.default_rng(seed)
        c = cfg.embed_dim
        self.cfg = cfg
        self.point_embed = MLP(3, 128, c, rng)
        self.point_pos = MLP(3, 64, c, rng)
        self.image_embed = Linear(cfg.patch_dim, c, rng)
        self.image_pos = Tensor(rng.normal(0, 0.02, size=(cfg.num_image_patches, c)),
                                requires_grad=True)
        self.modality_point = Tensor(rng.normal(0, 0.02, size=c), requires_grad=True)
        self.modality_image = Tensor(rng.normal(0, 0.02, size=c), requires_grad=True)
        self.mask_token_point = Tensor(rng.normal(0, 0.02, size=c), requires_grad=True)
        self.mask_token_image = Tensor(rng.normal(0, 0.02, size=c), requires_grad=True)
        self.point_encoder = TransformerStack(c, cfg.heads, cfg.branch_depth, rng)
        self.image_encoder = TransformerStack(c, cfg.heads, cfg.branch_depth, rng)
        self.shared_encoder = TransformerStack(c, cfg.heads, cfg.shared_depth, rng)
        self.shared_decoder = TransformerStack(c, cfg.heads, cfg.shared_decoder_depth, rng)
        self.point_decoder = TransformerStack(c, cfg.heads, cfg.decoder_depth, rng)
        self.image_decoder = TransformerStack(c, cfg.heads, cfg.decoder_depth, rng)
        self.point_norm = LayerNorm(c)
        self.image_norm = LayerNorm(c)
        self.point_head = Linear(c, cfg.patch_points * 3, rng)
        self.image_head = Linear(c, cfg.patch_dim, rng)
        self.cross_head = MLP(c, c, c, rng)

    # -- tokenizers ----------------------------------------------------------

    def tokenize_points(self, patches: PatchSet) -> TokenBatch:
        local = Tensor(patches.local_coords)          # (M, k, 3)
        feats = self.point_embed(local)               # (M, k, C)
        tokens = feats.max(axis=1)                    # channel max over the patch
        pos = self.point_pos(Tensor(patches.centers))
        return TokenBatch(tokens=tokens, pos=pos, modality="point")

    def tokenize_image(self, image) -> TokenBatch:
        cfg = self.cfg
        patches = patchify(image, cfg.patch_px)       # (T, patch_dim) ndarray
        tokens = self.image_embed(Tensor(patches))
        return TokenBatch(tokens=tokens, pos=self.image_pos, modality="image")

    # -- stage-1 forward -----------------------------------------------------

    def stage1_forward(self, pc: PointCloud, image, cam: CameraModel, seed=0,
                       step=0) -> Stage1Output:
        cfg = self.cfg
        if image.shape[:2] != (cfg.image_height, cfg.image_width):
            raise ValueError(f"image shape {image.shape[:2]} does not match config "
                             f"{(cfg.image_height, cfg.image_width)}")
        if len(pc) != cfg.n_points:
            pc = downsample(pc, cfg.n_points)
        patches = fps_knn_patches(pc, cfg.num_patches, cfg.patch_points)
        ptb = self.tokenize_points(patches)
        itb = self.tokenize_image(image)

        t = cfg.num_image_patches
        alignment = align_patches(patches, cam, cfg.patch_px, cfg.grid)
        masks = complementary_masks(alignment, cfg.num_patches, t, cfg.mask_ratio, seed)

        vis_p = np.flatnonzero(masks.point_visible)
        hid_p = np.flatnonzero(~masks.point_visible)
        vis_i = np.flatnonzero(masks.image_visible)
        hid_i = np.flatnonzero(~masks.image_visible)

        p_in = gather(ptb.tokens + ptb.pos, vis_p) + self.modality_point
        i_in = gather(itb.tokens + itb.pos, vis_i) + self.modality_image
        p_enc = self.point_encoder(p_in)
        i_enc = self.image_encoder(i_in)

        joint = self.shared_encoder(concatenate([p_enc, i_enc], axis=0))
        joint = self.shared_decoder(joint)
        p_vis_out = joint[: len(vis_p)]
        i_vis_out = joint[len(vis_p):]

        p_full = self._fill_masked(p_vis_out, vis_p, hid_p,
                                   self.mask_token_point, ptb.pos)
        i_full = self._fill_masked(i_vis_out, vis_i, hid_i,
                                   self.mask_token_image, itb.pos)
        p_dec = self.point_norm(self.point_decoder(p_full))
        i_dec = self.image_norm(self.image_decoder(i_full))

        # point reconstruction: Chamfer on center-subtracted coordinates
        if len(hid_p):
            pred_local = self.point_head(gather(p_dec, hid_p)) \
                .reshape(len(hid_p), cfg.patch_points, 3)
            loss_point = chamfer_batch_tensor(pred_local,
                                              Tensor(patches.local_coords[hid_p]))
        else:
            pred_local = None
            loss_point = Tensor(0.0)

        # image reconstruction: raw-pixel MSE on masked patches
        img_patches = patchify(image, cfg.patch_px)
        if len(hid_i):
            pred_pix = self.image_head(gather(i_dec, hid_i))
            loss_image = _mse(pred_pix, Tensor(img_patches[hid_i]))
        else:
            pred_pix = None
            loss_image = Tensor(0.0)

        # cross-modal: masked point tokens -> aligned visible image features.
        # The prediction runs through a second fusion pass with the image
        # tokens detached, so this loss cannot move any image-branch
        # parameter: the targets are constants and so is the image context.
        row_of_patch = {int(pidx): row for row, pidx in enumerate(vis_i)}
        cross_src = [j for j in hid_p if alignment[j] != INVALID_PATCH]
        pred_cross = target_cross = None
        if cross_src:
            rows_p = np.array(cross_src, dtype=np.intp)
            rows_i = np.array([row_of_patch[int(alignment[j])] for j in cross_src],
                              dtype=np.intp)
            joint_c = self.shared_decoder(self.shared_encoder(
                concatenate([p_enc, i_enc.detach()], axis=0)))
            p_full_c = self._fill_masked(joint_c[: len(vis_p)], vis_p, hid_p,
                                         self.mask_token_point, ptb.pos)
            p_dec_c = self.point_norm(self.point_decoder(p_full_c))
            pred_cross = self.cross_head(gather(p_dec_c, rows_p))
            target_cross = gather(i_enc, rows_i).detach()
            loss_cross = _mse(pred_cross, target_cross)
        else:
            loss_cross = Tensor(0.0)

        loss = loss_point + loss_image + loss_cross

        recon_local = self._merge_rows(
            Tensor(patches.local_coords[vis_p]), pred_local, vis_p, hid_p,
            fallback=Tensor(patches.local_coords))
        recon_image = image.copy()
        if pred_pix is not None:
            recon_image = unpatchify_into(recon_image, np.clip(pred_pix.data, 0.0, 1.0),
                                          hid_i, cfg.patch_px)

        report = LossReport(step=step,
                            point_rec=loss_point.item(),
                            image_rec=loss_image.item(),
                            cross_rec=loss_cross.item(),
                            stage1=loss.item())
        return Stage1Output(loss=loss, point_rec=loss_point, image_rec=loss_image,
                            cross_rec=loss_cross, recon_local=recon_local,
                            recon_image=recon_image, pred_cross=pred_cross,
                            target_cross=target_cross, patches=patches, masks=masks,
                            alignment=alignment, report=report)

    @staticmethod
    def _fill_masked(visible_out, vis_idx, hid_idx, mask_token, pos):
        """Reassemble the full token sequence: decoded visible tokens plus the
        branch mask token (with positional embedding) at masked slots."""
        if len(hid_idx) == 0:
            return visible_out
        masked = mask_token.reshape(1, -1) + gather(pos, hid_idx)
        combined = concatenate([visible_out, masked], axis=0)
        perm = np.argsort(np.concatenate([vis_idx, hid_idx]), kind="stable")
        return gather(combined, perm)

    @staticmethod
    def _merge_rows(vis_rows, hid_rows, vis_idx, hid_idx, fallback):
        if hid_rows is None:
            return fallback
        combined = concatenate([vis_rows, hid_rows], axis=0)
        perm = np.argsort(np.concatenate([vis_idx, hid_idx]), kind="stable")
        return gather(combined, perm)


def patchify(image, patch_px):
    """(H, W, 3) -> (T, patch_px*patch_px*3), row-major patch order."""
    image = np.asarray(image, dtype=np.float64)
    h, w, ch = image.shape
    if h % patch_px or w % patch_px:
        raise ValueError(f"image {w}x{h} not divisible by patch size {patch_px}")
    rows, cols = h // patch_px, w // patch_px
    blocks = image.reshape(rows, patch_px, cols, patch_px, ch).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(rows * cols, patch_px * patch_px * ch)


def unpatchify_into(image, patch_values, patch_indices, patch_px):
    """Write flattened patches back into `image` at the given patch indices."""
    h, w, ch = image.shape
    cols = w // patch_px
    for idx, values in zip(patch_indices, patch_values):
        r, c = divmod(int(idx), cols)
        image[r * patch_px:(r + 1) * patch_px, c * patch_px:(c + 1) * patch_px] = \
            values.reshape(patch_px, patch_px, ch)
    return image


def reconstruct_full_cloud(recon_local, patches: PatchSet):
    """De-normalize patch-local coordinates into a world-space cloud (M*k, 3).

    Returns a Tensor when given a Tensor (gradients flow into the predicted
    patches), otherwise a PointCloud.
    """
    m, k, _ = patches.local_coords.shape
    centers = patches.centers[:, None, :]
    if isinstance(recon_local, Tensor):
        return (recon_local + Tensor(centers)).reshape(m * k, 3)
    return PointCloud((np.asarray(recon_local) + centers).reshape(m * k, 3))


# -- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(path, model: DualBranchMAE, extra=None):
    """Self-describing binary checkpoint: magic, version, JSON config block,
    then named float32 little-endian parameter blobs."""
    meta = {"config": asdict(model.cfg), "extra": extra or {}}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", 1, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.ndim))
            for dim in p.shape:
                f.write(struct.pack("<I", dim))
            f.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (model, extra dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", f.read(4))
        state = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            state[name] = data.astype(np.float64)
    cfg = MAEConfig(**meta["config"])
    model = DualBranchMAE(cfg, seed=0)
    load_state(model, state)
    return model, meta.get("extra", {})
