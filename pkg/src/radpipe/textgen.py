"""Word-level vocabulary, causal decoder, conditional LM loss, and prompts.

The tokenizer is a lowercase, punctuation-separating word tokenizer that
treats "<img N>" and "<tag:key=value>" markers as atomic tokens. Keeping the
LM and the text metrics on the same tokenization makes scores auditable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .datamodel import ReportStudy, make_tag
from .errors import (
    ConfigError,
    EmptyCorpusError,
    EmptyTargetError,
    MissingPriorError,
    ValidationError,
)
from .nn import NEG_INF, Embedding, LayerNorm, Linear, TransformerBlock, causal_mask
from .tokenizer import weave_context, weave_pair_text

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
CORE_SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_MARKER_RE = re.compile(r"<img \d+>|<tag:[a-z]+=[^>\s]+>")
_TOKEN_RE = re.compile(r"<img \d+>|<tag:[a-z]+=[^>\s]+>|[a-z0-9]+|[^\sa-z0-9]")


def word_tokenize(text: str) -> list:
    return _TOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    """Canonical text form: tokenization joined by single spaces."""
    return " ".join(word_tokenize(text))


def is_marker(token: str) -> bool:
    return bool(_MARKER_RE.fullmatch(token))


def _marker_sort_key(token: str):
    if token.startswith("<img "):
        return (0, int(token[5:-1]), token)
    return (1, 0, token)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    index: dict

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        return np.asarray(
            [self.index.get(tok, UNK_ID) for tok in word_tokenize(text)], dtype=np.int64
        )

    def decode_tokens(self, ids) -> list:
        return [self.tokens[int(i)] for i in ids]

    def detokenize(self, ids) -> str:
        """Render ids to text, stripping core specials and tag/image markers."""
        kept = [
            tok
            for tok in self.decode_tokens(ids)
            if tok not in CORE_SPECIALS and not is_marker(tok)
        ]
        return " ".join(kept)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = tuple(Path(path).read_text(encoding="utf-8").splitlines())
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


def build_vocab(texts, cap: int) -> Vocabulary:
    """Frequency-then-lexicographic vocabulary, size <= cap, deterministic.

    Core specials sit at fixed low ids; marker-class tokens found in the
    corpus are reserved right after them.
    """
    texts = list(texts)
    if not texts:
        raise EmptyCorpusError("vocabulary needs at least one text")
    counts = {}
    markers = set()
    for text in texts:
        for tok in word_tokenize(text):
            if is_marker(tok):
                markers.add(tok)
            else:
                counts[tok] = counts.get(tok, 0) + 1
    reserved = list(CORE_SPECIALS) + sorted(markers, key=_marker_sort_key)
    if cap < len(reserved):
        raise ConfigError(f"vocab cap {cap} below specials count {len(reserved)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = reserved + [tok for tok, _ in ranked[: cap - len(reserved)]]
    return Vocabulary(tokens=tuple(tokens), index={t: i for i, t in enumerate(tokens)})


@dataclass
class LMBatch:
    """One sequence for the conditional LM.

    prefix: (K, d) visual prefix embeddings (autodiff tensor or None).
    ids:    (T,) token ids starting with <bos>, ending with <eos>.
    loss_mask: (T,) bool, True only on target text positions — never on
    <bos>, padding, or image-placeholder positions.
    """

    prefix: Tensor | None
    ids: np.ndarray
    loss_mask: np.ndarray


def make_lm_batch(prefix, vocab: Vocabulary, prompt: str, target: str) -> LMBatch:
    prompt_ids = vocab.encode(prompt)
    target_ids = vocab.encode(target)
    ids = np.concatenate([[BOS_ID], prompt_ids, target_ids, [EOS_ID]]).astype(np.int64)
    mask = np.zeros(ids.size, dtype=bool)
    lo = 1 + prompt_ids.size
    mask[lo : lo + target_ids.size + 1] = True  # targets plus the closing <eos>
    marker = np.array([is_marker(vocab.tokens[i]) or i == PAD_ID for i in ids])
    mask &= ~marker
    mask[0] = False
    return LMBatch(prefix=prefix, ids=ids, loss_mask=mask)


class DecoderLM:
    """Small causal transformer conditioned on a visual prefix."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, vocab_size: int):
        d = cfg.embed_dim
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_emb = Embedding(rng, vocab_size, d, "lm.tok_emb")
        self.pos_emb = Embedding(rng, cfg.max_seq_len, d, "lm.pos_emb")
        self.blocks = [TransformerBlock(rng, d, f"lm.block{i}") for i in range(cfg.lm_layers)]
        self.ln_f = LayerNorm(d, "lm.ln_f")
        self.head = Linear(rng, d, vocab_size, "lm.head")

    def named_parameters(self):
        out = {}
        for mod in (self.tok_emb, self.pos_emb, self.ln_f, self.head):
            out.update(mod.named_parameters())
        for blk in self.blocks:
            out.update(blk.named_parameters())
        return out

    def set_trainable(self, flag: bool):
        for p in self.named_parameters().values():
            p.requires_grad = flag

    def __call__(self, prefix, ids) -> Tensor:
        """Logits over all positions of [prefix ; tokens], strict causal mask."""
        ids = np.asarray(ids, dtype=np.int64)
        x = self.tok_emb(ids)
        if prefix is not None:
            x = ad.concat([prefix, x], axis=0)
        t = x.shape[0]
        if t > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = ad.add(x, self.pos_emb(np.arange(t)))
        mask = causal_mask(t)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.ln_f(x))

    def forward_batch(self, prefix, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Batched logits over [prefix ; tokens] rows, (B, K+T, V).

        ids is (B, T) right-padded; lengths gives each row's real token count.
        Padded key positions are masked out of attention for every query.
        """
        ids = np.asarray(ids, dtype=np.int64)
        b, t = ids.shape
        x = self.tok_emb(ids)
        k = 0
        if prefix is not None:
            k = prefix.shape[1]
            x = ad.concat([prefix, x], axis=1)
        total = k + t
        if total > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {total} exceeds max_seq_len {self.cfg.max_seq_len}")
        x = ad.add(x, self.pos_emb(np.arange(total)))
        mask = np.broadcast_to(causal_mask(total), (b, 1, total, total)).copy()
        for row, length in enumerate(lengths):
            mask[row, :, :, k + int(length):] = NEG_INF
        np.einsum("bhii->bhi", mask)[:] = 0.0  # keep self-edges valid on padded rows
        for blk in self.blocks:
            x = blk(x, mask)
        return self.head(self.ln_f(x))


def sequence_cross_entropy(logits: Tensor, ids, loss_mask, prefix_len: int) -> Tensor:
    """Mean token cross-entropy over loss-masked positions.

    logits cover [prefix ; tokens]; the logit row predicting ids[j] is at
    prefix_len + j - 1. Logit rows outside the mask cannot affect the value.
    """
    ids = np.asarray(ids, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if loss_mask[0]:
        raise ValidationError("loss mask must be False on the <bos> position")
    target_idx = np.flatnonzero(loss_mask)
    if target_idx.size == 0:
        raise EmptyTargetError("loss mask selects no target positions")
    rows = prefix_len + target_idx - 1
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take(logp, (rows, ids[target_idx]))
    return ad.mul(ad.mean(picked), -1.0)


def clm_loss(batch: LMBatch, model: DecoderLM) -> Tensor:
    prefix_len = 0 if batch.prefix is None else batch.prefix.shape[0]
    logits = model(batch.prefix, batch.ids)
    return sequence_cross_entropy(logits, batch.ids, batch.loss_mask, prefix_len)


def clm_loss_batched(batches, model: DecoderLM) -> Tensor:
    """Mean over samples of each sample's mean target cross-entropy.

    Right-pads the id rows, stacks the prefixes, and runs one batched
    forward; numerically the same objective as averaging clm_loss over the
    batch (padded positions are masked out of attention and loss).
    """
    b = len(batches)
    if b == 1:
        return clm_loss(batches[0], model)
    t_max = max(x.ids.size for x in batches)
    ids = np.full((b, t_max), PAD_ID, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    rows_idx, cols_tok, weights = [], [], []
    k = batches[0].prefix.shape[0] if batches[0].prefix is not None else 0
    for row, x in enumerate(batches):
        n = x.ids.size
        ids[row, :n] = x.ids
        lengths[row] = n
        target_idx = np.flatnonzero(x.loss_mask)
        if target_idx.size == 0:
            raise EmptyTargetError("loss mask selects no target positions")
        if x.loss_mask[0]:
            raise ValidationError("loss mask must be False on the <bos> position")
        for j in target_idx:
            rows_idx.append((row, k + j - 1, int(x.ids[j])))
            weights.append(1.0 / (target_idx.size * b))
    prefix = ad.stack([x.prefix for x in batches], axis=0) if k else None
    logits = model.forward_batch(prefix, ids, lengths)
    logp = ad.log_softmax(logits, axis=-1)
    bi = np.array([r[0] for r in rows_idx])
    pi = np.array([r[1] for r in rows_idx])
    ti = np.array([r[2] for r in rows_idx])
    picked = ad.take(logp, (bi, pi, ti))
    return ad.mul(ad.sum_(ad.mul(picked, -np.array(weights))), 1.0)


def generate(model: DecoderLM, prefix, prompt_ids, max_len: int, mode: str = "greedy",
             temperature: float = 1.0, seed: int = 0) -> np.ndarray:
    """Generate up to max_len tokens; stops at <eos> (not included in output)."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown generation mode {mode!r}")
    rng = np.random.default_rng(seed)
    ids = np.concatenate([[BOS_ID], np.asarray(prompt_ids, dtype=np.int64)]).astype(np.int64)
    out = []
    for _ in range(max_len):
        logits = model(prefix, ids).data[-1]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = (logits - logits.max()) / max(temperature, 1e-9)
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        ids = np.append(ids, nxt)
    return np.asarray(out, dtype=np.int64)


PROMPT_SETTINGS = ("none", "prior_report", "prior_images", "both")


def _study_tags(study: ReportStudy, prior: bool):
    tags = study.prior_tags_per_image if prior else study.tags_per_image
    images = study.prior_images if prior else study.images
    if tags is None:
        return [frozenset()] * len(images)
    return list(tags)


def build_prompt(study: ReportStudy, setting: str):
    """Compose the report-generation prompt for one of the four settings.

    Returns (prompt string, images in marker order). Templates:
      none:          "current images: <tags/markers> report:"
      prior_report:  "prior report: <text> current images: ... report:"
      prior_images:  "prior images: <tags/markers> current images: ... report:"
      both:          "prior images: ... prior report: <text> current images: ... report:"
    """
    if setting not in PROMPT_SETTINGS:
        raise ConfigError(f"unknown prompt setting {setting!r}")
    needs_images = setting in ("prior_images", "both")
    needs_report = setting in ("prior_report", "both")
    if needs_images and not study.prior_images:
        raise MissingPriorError(f"setting={setting} requires prior images")
    if needs_report and not study.prior_report:
        raise MissingPriorError(f"setting={setting} requires a prior report")

    parts = []
    images = []
    offset = 0
    if needs_images:
        priors = list(study.prior_images)
        woven = weave_context([""] * len(priors), _study_tags(study, prior=True), start_index=0)
        parts.append(f"prior images: {woven}")
        images.extend(priors)
        offset = len(priors)
    if needs_report:
        parts.append(f"prior report: {study.prior_report.strip()}")
    current = list(study.images)
    woven = weave_context([""] * len(current), _study_tags(study, prior=False), start_index=offset)
    parts.append(f"current images: {woven}")
    images.extend(current)
    parts.append("report:")
    return " ".join(parts), images


def vqa_prompt(item):
    """Prompt for a VQA item: woven context + the question."""
    tags = []
    meta = item.meta or {}
    base = frozenset(
        make_tag(k, str(meta[k])) for k in ("modality", "organ") if meta.get(k)
    )
    tags = [base] * len(item.images)
    woven = weave_context([""] * len(item.images), tags)
    return f"{woven} question: {item.question.strip()} answer:", list(item.images)


def caption_prompt(pair):
    woven = weave_pair_text("", pair.tags_per_image)
    return f"{woven} caption:", list(pair.images)
