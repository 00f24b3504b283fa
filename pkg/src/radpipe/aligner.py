"""Multi-image, instruction-aware query transformer bridging vision and text.

A fixed set of K learned query tokens is refined layer by layer:

* self-attention runs over [queries ; instruction tokens] with an asymmetric
  mask — queries attend to everything, instruction tokens attend only to
  instruction tokens;
* cross-attention lets the queries read the concatenation of all images'
  token features, with an image-index embedding added on the key side;
* a feed-forward block completes the layer.

Output is always K x d regardless of how many images came in.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import NoImageError
from .nn import (
    NEG_INF,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
)


@dataclass
class QueryBundle:
    queries: Tensor              # (K, d)
    instruction_digest: str
    source_image_count: int


def instruction_mask(n_queries: int, n_instr: int) -> np.ndarray:
    """Additive self-attention mask over [queries ; instruction].

    Queries see both segments; instruction tokens never see queries.
    """
    t = n_queries + n_instr
    mask = np.zeros((t, t))
    mask[n_queries:, :n_queries] = NEG_INF
    return mask


def digest_tokens(token_ids) -> str:
    blob = np.asarray(token_ids, dtype=np.int64).tobytes()
    return hashlib.sha256(blob).hexdigest()[:16]


class AlignerLayer:
    def __init__(self, rng, d: int, name: str):
        self.ln_self = LayerNorm(d, f"{name}.ln_self")
        self.self_attn = MultiHeadAttention(rng, d, f"{name}.self_attn")
        self.ln_cross = LayerNorm(d, f"{name}.ln_cross")
        self.cross_attn = MultiHeadAttention(rng, d, f"{name}.cross_attn")
        self.ln_ffn = LayerNorm(d, f"{name}.ln_ffn")
        self.ffn = FeedForward(rng, d, f"{name}.ffn")

    def __call__(self, x: Tensor, n_queries: int, keys: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln_self(x)
        x = ad.add(x, self.self_attn(h, h, mask))
        queries = ad.slice_(x, slice(0, n_queries))
        attended = self.cross_attn(self.ln_cross(queries), keys)
        x = ad.concat([ad.add(queries, attended), ad.slice_(x, slice(n_queries, None))], axis=0)
        return ad.add(x, self.ffn(self.ln_ffn(x)))

    def named_parameters(self):
        out = {}
        for mod in (self.ln_self, self.self_attn, self.ln_cross, self.cross_attn, self.ln_ffn, self.ffn):
            out.update(mod.named_parameters())
        return out


class Aligner:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, vocab_size: int):
        d = cfg.embed_dim
        self.cfg = cfg
        self.query_tokens = ad.parameter(rng.normal(0.0, 0.02, size=(cfg.num_queries, d)))
        self.instr_emb = Embedding(rng, vocab_size, d, "aligner.instr_emb")
        self.instr_pos = Embedding(rng, cfg.max_seq_len, d, "aligner.instr_pos")
        self.key_image_emb = Embedding(rng, cfg.max_images, d, "aligner.key_image_emb")
        self.layers = [AlignerLayer(rng, d, f"aligner.layer{i}") for i in range(cfg.qformer_layers)]
        self.ln_out = LayerNorm(d, "aligner.ln_out")

    def named_parameters(self):
        out = {"aligner.query_tokens": self.query_tokens}
        for mod in (self.instr_emb, self.instr_pos, self.key_image_emb, self.ln_out):
            out.update(mod.named_parameters())
        for layer in self.layers:
            out.update(layer.named_parameters())
        return out

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def __call__(self, features_per_image, instruction_ids=None) -> QueryBundle:
        """Compress any number of images' token features into K query vectors.

        features_per_image: list of (N_i, d) token feature tensors, one per
        image. instruction_ids: int token ids (may be empty).
        """
        if not features_per_image:
            raise NoImageError("aligner needs at least one image")
        instruction_ids = np.asarray(
            [] if instruction_ids is None else instruction_ids, dtype=np.int64
        )
        k = self.cfg.num_queries
        keyed = []
        for img_index, feats in enumerate(features_per_image):
            idx = np.full(feats.shape[0], min(img_index, self.cfg.max_images - 1), dtype=np.int64)
            keyed.append(ad.add(feats, self.key_image_emb(idx)))
        keys = keyed[0] if len(keyed) == 1 else ad.concat(keyed, axis=0)

        x = self.query_tokens
        if instruction_ids.size:
            instr = ad.add(
                self.instr_emb(instruction_ids),
                self.instr_pos(np.arange(instruction_ids.size)),
            )
            x = ad.concat([x, instr], axis=0)
        mask = instruction_mask(k, instruction_ids.size)
        for layer in self.layers:
            x = layer(x, k, keys, mask)
        queries = self.ln_out(ad.slice_(x, slice(0, k)))
        return QueryBundle(
            queries=queries,
            instruction_digest=digest_tokens(instruction_ids),
            source_image_count=len(features_per_image),
        )


class LmProjection:
    """Affine bridge from aligner queries to decoder prefix embeddings."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.proj = Linear(rng, cfg.embed_dim, cfg.embed_dim, "bridge.proj")

    def __call__(self, bundle: QueryBundle) -> Tensor:
        return self.proj(bundle.queries)

    def named_parameters(self):
        return self.proj.named_parameters()

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag
