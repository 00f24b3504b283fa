"""Vision encoder and its two pretraining objectives.

The encoder is a small pre-norm transformer over flattened patch tokens.
Pretraining combines:

* masked reconstruction — a share of patch tokens is replaced by a learned
  mask embedding and a light two-layer decoder predicts their raw pixels;
  the loss is MSE over masked, non-padding pixels only;
* inter-image contrastive learning — per study, sub-image pooled features
  from two independently masked passes run through an auxiliary context
  transformer; the mean-pooled study vectors form positive pairs in a
  symmetric InfoNCE over the batch.

Position information is semantic (patch-within-tile, image index, slice
index), never list order, so permuting sub-image order permutes outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, substream_seed
from .errors import BatchTooSmallError, ConfigError, ShapeError
from .nn import Embedding, FeedForward, LayerNorm, Linear, TransformerBlock, key_padding_mask
from .tokenizer import PatchTokenSet


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: np.ndarray  # sorted unique token indices
    ratio: float
    seed: int


def plan_mask(n_tokens: int, ratio: float, seed: int, eligible: np.ndarray | None = None) -> MaskPlan:
    """Uniform sample without replacement; reproducible per seed.

    |masked| = max(1, round(ratio * n_tokens)), capped at the eligible count.
    Fully padded patches are excluded by passing their complement as
    ``eligible``.
    """
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"mask ratio must be in (0,1), got {ratio}")
    if n_tokens < 1:
        raise ConfigError("need at least one token")
    if eligible is None:
        eligible = np.arange(n_tokens, dtype=np.int64)
    else:
        eligible = np.asarray(eligible, dtype=np.int64)
    count = min(max(1, int(np.floor(ratio * n_tokens + 0.5))), eligible.size)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(eligible, size=count, replace=False)
    return MaskPlan(masked_indices=np.sort(chosen), ratio=ratio, seed=seed)


class VisionEncoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.embed_dim
        p2 = cfg.patch_size * cfg.patch_size
        self.patch_embed = Linear(rng, p2, d, "vision.patch_embed")
        self.patch_pos = Embedding(rng, cfg.patches_per_sub_image, d, "vision.patch_pos")
        self.image_emb = Embedding(rng, cfg.max_images, d, "vision.image_emb")
        self.slice_emb = Embedding(rng, cfg.max_slices, d, "vision.slice_emb")
        self.mask_token = ad.parameter(rng.normal(0.0, 0.02, size=(1, d)))
        self.blocks = [TransformerBlock(rng, d, f"vision.block{i}") for i in range(cfg.vision_layers)]
        self.ln_out = LayerNorm(d, "vision.ln_out")

    def named_parameters(self):
        out = {"vision.mask_token": self.mask_token}
        for mod in (self.patch_embed, self.patch_pos, self.image_emb, self.slice_emb, self.ln_out):
            out.update(mod.named_parameters())
        for blk in self.blocks:
            out.update(blk.named_parameters())
        return out

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def _embed(self, patches: PatchTokenSet, plan: MaskPlan | None) -> Tensor:
        pos = patches.positions
        if patches.tokens.shape[1] != self.cfg.patch_size**2:
            raise ShapeError(
                f"token length {patches.tokens.shape[1]} != P*P = {self.cfg.patch_size ** 2}"
            )
        if pos[:, 0].max() >= self.cfg.max_images:
            raise ConfigError("image_index exceeds max_images")
        if pos[:, 1].max() >= self.cfg.max_slices:
            raise ConfigError("slice_index exceeds max_slices")
        base = self.patch_embed(ad.Tensor(patches.tokens))
        if plan is not None:
            keep = np.ones((patches.n_tokens, 1))
            keep[plan.masked_indices] = 0.0
            base = ad.add(ad.mul(base, keep), ad.mul(self.mask_token, 1.0 - keep))
        x = ad.add(base, self.patch_pos(pos[:, 3]))
        x = ad.add(x, self.image_emb(pos[:, 0]))
        return ad.add(x, self.slice_emb(pos[:, 1]))

    def __call__(self, patches: PatchTokenSet, plan: MaskPlan | None = None):
        """Returns (per-token features (N,d), per-sub-image pooled features (M,d)).

        Fully padded patches are excluded as attention keys; pooled features
        are the plain mean over each sub-image's tokens.
        """
        x = self._embed(patches, plan)
        padded = patches.fully_padded()
        mask = key_padding_mask(patches.n_tokens, padded) if padded.any() else None
        for blk in self.blocks:
            x = blk(x, mask)
        feats = self.ln_out(x)
        n_per = self.cfg.patches_per_sub_image
        pooled = ad.mean(ad.reshape(feats, (patches.n_sub_images, n_per, self.cfg.embed_dim)), axis=1)
        return feats, pooled


class PixelDecoder:
    """Two-layer MLP head predicting raw pixel values per token."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        p2 = cfg.patch_size * cfg.patch_size
        self.fc1 = Linear(rng, d, d, "pixdec.fc1")
        self.fc2 = Linear(rng, d, p2, "pixdec.fc2")

    def __call__(self, feats: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(feats)))

    def named_parameters(self):
        return {**self.fc1.named_parameters(), **self.fc2.named_parameters()}

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag


class ContextTransformer:
    """Auxiliary transformer over sub-image pooled features; mean-pooled output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.blocks = [TransformerBlock(rng, d, f"ctx.block{i}") for i in range(cfg.icc_layers)]
        self.ln_out = LayerNorm(d, "ctx.ln_out")

    def __call__(self, pooled: Tensor) -> Tensor:
        x = pooled
        for blk in self.blocks:
            x = blk(x)
        return ad.mean(self.ln_out(x), axis=0)

    def named_parameters(self):
        out = self.ln_out.named_parameters()
        for blk in self.blocks:
            out.update(blk.named_parameters())
        return out

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag


def masked_pixel_mse(recon: np.ndarray, patches: PatchTokenSet, plan: MaskPlan) -> float:
    """Reference loss on a plain reconstruction array (no graph).

    Mean squared error over masked, non-padding pixels only — perturbing the
    reconstruction anywhere else cannot change the value.
    """
    idx = plan.masked_indices
    keep = ~patches.pad[idx]
    diff = (recon[idx] - patches.tokens[idx]) * keep
    denom = keep.sum()
    if denom == 0:
        return 0.0
    return float((diff * diff).sum() / denom)


def mim_loss(patches: PatchTokenSet, plan: MaskPlan, encoder: VisionEncoder,
             decoder: PixelDecoder, targets: np.ndarray | None = None):
    """Masked-reconstruction loss; returns (loss tensor, pooled features, recon array).

    targets defaults to the input pixels; augmented inputs may pass the clean
    pixels so reconstruction doubles as denoising.
    """
    feats, pooled = encoder(patches, plan)
    recon = decoder(feats)
    idx = plan.masked_indices
    keep = (~patches.pad[idx]).astype(np.float64)
    denom = keep.sum()
    target = (patches.tokens if targets is None else targets)[idx]
    diff = ad.mul(ad.add(ad.rows(recon, idx), -target), keep)
    if denom == 0:
        loss = ad.mul(ad.sum_(ad.mul(diff, diff)), 0.0)
    else:
        loss = ad.mul(ad.sum_(ad.mul(diff, diff)), 1.0 / denom)
    return loss, pooled, recon


def info_nce(za: Tensor, zb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities of two aligned passes.

    Row i of each pass is the same study; candidates per anchor are all
    passes' counterparts in the batch, positive on the diagonal.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    b = za.shape[0]
    if b < 2:
        raise BatchTooSmallError("contrastive batch needs >= 2 studies")

    def normalize(z):
        norm = ad.power(ad.sum_(ad.mul(z, z), axis=1, keepdims=True), 0.5)
        return ad.div(z, norm)

    sim = ad.mul(ad.matmul(normalize(za), ad.transpose(normalize(zb), (1, 0))), 1.0 / temperature)
    diag = (np.arange(b), np.arange(b))
    loss_ab = ad.mul(ad.mean(ad.take(ad.log_softmax(sim, axis=1), diag)), -1.0)
    loss_ba = ad.mul(ad.mean(ad.take(ad.log_softmax(sim, axis=0), diag)), -1.0)
    return ad.mul(ad.add(loss_ab, loss_ba), 0.5)


def icc_loss(pooled_a, pooled_b, ctx: ContextTransformer, temperature: float,
             context_ids=None) -> Tensor:
    """Contrastive loss over contextualized study vectors from two passes.

    pooled_a/pooled_b: aligned lists of (M_i, d) pooled sub-image features,
    one entry per study. context_ids defaults to list position.
    """
    if len(pooled_a) != len(pooled_b):
        raise ShapeError("passes must contain the same studies")
    ids = list(context_ids) if context_ids is not None else list(range(len(pooled_a)))
    if len(set(ids)) < 2:
        raise BatchTooSmallError("need >= 2 distinct context_ids")
    za = ad.concat([ad.reshape(ctx(p), (1, -1)) for p in pooled_a], axis=0)
    zb = ad.concat([ad.reshape(ctx(p), (1, -1)) for p in pooled_b], axis=0)
    return info_nce(za, zb, temperature)


def _with_pixel_noise(patches: PatchTokenSet, sigma: float, rng) -> PatchTokenSet:
    noise = rng.normal(0.0, sigma, size=patches.tokens.shape) * ~patches.pad
    return PatchTokenSet(
        tokens=patches.tokens + noise, positions=patches.positions, pad=patches.pad,
        sub_image_size=patches.sub_image_size, patch_size=patches.patch_size,
    )


def ccmim_step(token_sets, encoder: VisionEncoder, decoder: PixelDecoder,
               ctx: ContextTransformer, cfg: ModelConfig, step_seed: int,
               pixel_noise: float = 0.0):
    """One combined pretraining evaluation over a batch of studies.

    Each study gets two independently masked (and, with pixel_noise > 0,
    independently noised) passes. The reconstruction loss averages both
    passes and targets the clean pixels, so the encoder is pushed toward
    denoising; the contrastive loss contrasts the two passes' study vectors,
    pushing study representations to be invariant to masking and noise.
    Returns (total, mim, icc) tensors; total = mim + icc_weight * icc.
    """
    mim_terms = []
    pooled_a, pooled_b = [], []
    for i, patches in enumerate(token_sets):
        eligible = np.flatnonzero(~patches.fully_padded())
        for pass_id, bucket in ((0, pooled_a), (1, pooled_b)):
            seed = substream_seed(step_seed, "mask", i * 2 + pass_id)
            plan = plan_mask(patches.n_tokens, cfg.mask_ratio, seed, eligible)
            view = patches
            if pixel_noise > 0:
                rng = np.random.default_rng(substream_seed(step_seed, "pixnoise", i * 2 + pass_id))
                view = _with_pixel_noise(patches, pixel_noise, rng)
            loss, pooled, _ = mim_loss(view, plan, encoder, decoder, targets=patches.tokens)
            mim_terms.append(loss)
            bucket.append(pooled)
    total_mim = ad.mul(sum(mim_terms[1:], mim_terms[0]), 1.0 / len(mim_terms))
    if len(token_sets) >= 2:
        total_icc = icc_loss(pooled_a, pooled_b, ctx, cfg.temperature)
    else:
        total_icc = ad.Tensor(0.0)
    total = ad.add(total_mim, ad.mul(total_icc, cfg.icc_weight))
    return total, total_mim, total_icc
