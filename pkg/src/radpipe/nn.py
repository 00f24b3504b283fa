"""Transformer building blocks and the AdamW optimizer, numpy/autodiff based.

Every module exposes named_parameters() as a flat dict so checkpoints are a
plain name -> array mapping. Initialization is fully seeded through the rng
passed at construction; forward passes are pure given fixed weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -np.inf


def heads_for_dim(d: int) -> int:
    if d % 4 == 0 and d >= 32:
        return 4
    if d % 2 == 0 and d >= 16:
        return 2
    return 1


class Module:
    def named_parameters(self) -> dict:
        raise NotImplementedError

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, name: str, bias: bool = True,
                 std: float | None = None):
        self.name = name
        if std is None:
            std = 1.0 / np.sqrt(n_in)
        self.w = ad.parameter(rng.normal(0.0, std, size=(n_in, n_out)))
        self.b = ad.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        return ad.add(y, self.b) if self.b is not None else y

    def named_parameters(self):
        out = {f"{self.name}.w": self.w}
        if self.b is not None:
            out[f"{self.name}.b"] = self.b
        return out


class Embedding(Module):
    def __init__(self, rng, n: int, d: int, name: str, std: float = 0.02):
        self.name = name
        self.weight = ad.parameter(rng.normal(0.0, std, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        return ad.rows(self.weight, ids)

    def named_parameters(self):
        return {f"{self.name}.weight": self.weight}


class LayerNorm(Module):
    def __init__(self, d: int, name: str):
        self.name = name
        self.gamma = ad.parameter(np.ones(d))
        self.beta = ad.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)

    def named_parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (T, d) inputs, optional additive mask."""

    def __init__(self, rng, d: int, name: str, n_heads: int | None = None):
        self.d = d
        self.n_heads = n_heads or heads_for_dim(d)
        assert d % self.n_heads == 0
        self.dh = d // self.n_heads
        self.name = name
        self.wq = Linear(rng, d, d, f"{name}.wq")
        # key bias shifts every logit equally and softmax cancels it; omit
        self.wk = Linear(rng, d, d, f"{name}.wk", bias=False)
        self.wv = Linear(rng, d, d, f"{name}.wv")
        self.wo = Linear(rng, d, d, f"{name}.wo")

    def _split(self, x: Tensor, t: int) -> Tensor:
        # (T, d) -> (heads, T, dh)
        return ad.transpose(ad.reshape(x, (t, self.n_heads, self.dh)), (1, 0, 2))

    def _split_batched(self, x: Tensor, b: int, t: int) -> Tensor:
        # (B, T, d) -> (B, heads, T, dh)
        return ad.transpose(ad.reshape(x, (b, t, self.n_heads, self.dh)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Self/cross attention over (T, d) inputs, or (B, T, d) batched.

        mask is additive: (Tq, Tk) in both modes, optionally (B, 1, Tq, Tk)
        when batched (e.g. per-sample key padding).
        """
        if q_in.ndim == 3:
            b, tq = q_in.shape[0], q_in.shape[1]
            tk = kv_in.shape[1]
            q = self._split_batched(self.wq(q_in), b, tq)
            k = self._split_batched(self.wk(kv_in), b, tk)
            v = self._split_batched(self.wv(kv_in), b, tk)
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.dh))
            if mask is not None:
                scores = ad.add(scores, mask if mask.ndim == 4 else mask[np.newaxis, np.newaxis])
            attn = ad.softmax(scores, axis=-1)
            ctx = ad.matmul(attn, v)  # (B, heads, Tq, dh)
            merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.d))
            return self.wo(merged)
        tq, tk = q_in.shape[0], kv_in.shape[0]
        q = self._split(self.wq(q_in), tq)
        k = self._split(self.wk(kv_in), tk)
        v = self._split(self.wv(kv_in), tk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.dh))
        if mask is not None:
            scores = ad.add(scores, mask[np.newaxis, :, :])
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)  # (heads, Tq, dh)
        merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (tq, self.d))
        return self.wo(merged)

    def named_parameters(self):
        out = {}
        for sub in (self.wq, self.wk, self.wv, self.wo):
            out.update(sub.named_parameters())
        return out


class FeedForward(Module):
    def __init__(self, rng, d: int, name: str, hidden_mult: int = 4):
        self.fc1 = Linear(rng, d, hidden_mult * d, f"{name}.fc1")
        self.fc2 = Linear(rng, hidden_mult * d, d, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def named_parameters(self):
        return {**self.fc1.named_parameters(), **self.fc2.named_parameters()}


class TransformerBlock(Module):
    """Pre-norm self-attention block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, rng, d: int, name: str, n_heads: int | None = None):
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = MultiHeadAttention(rng, d, f"{name}.attn", n_heads)
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.ffn = FeedForward(rng, d, f"{name}.ffn")

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h, mask))
        return ad.add(x, self.ffn(self.ln2(x)))

    def named_parameters(self):
        out = {}
        for sub in (self.ln1, self.attn, self.ln2, self.ffn):
            out.update(sub.named_parameters())
        return out


def causal_mask(t: int) -> np.ndarray:
    """Additive mask: position i may attend to positions <= i."""
    mask = np.zeros((t, t))
    mask[np.triu_indices(t, k=1)] = NEG_INF
    return mask


def key_padding_mask(t: int, padded_keys: np.ndarray) -> np.ndarray:
    """Exclude padded keys for every query, keeping self-attention edges valid."""
    mask = np.zeros((t, t))
    mask[:, padded_keys] = NEG_INF
    np.fill_diagonal(mask, 0.0)
    return mask


class AdamW:
    """Adam with decoupled weight decay; state is serializable for resume.

    lr_scales maps parameter-name prefixes to learning-rate multipliers
    (longest matching prefix wins), letting slow-to-wake submodules train
    faster without a second optimizer.
    """

    def __init__(self, params: dict, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, lr_scales: dict | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.scale = {}
        for k in self.params:
            self.scale[k] = 1.0
            for prefix in sorted(lr_scales or {}, key=len):
                if k.startswith(prefix):
                    self.scale[k] = (lr_scales or {})[prefix]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * (g * g)
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * self.scale[k] * update

    def state_dict(self) -> dict:
        out = {"t": np.asarray(self.t)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup: int = 0, min_lr: float = 0.0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    frac = (step - warmup) / max(1, total_steps - warmup)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * min(1.0, frac)))
