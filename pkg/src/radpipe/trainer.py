"""Two-stage pretraining, task fine-tuning, checkpoints, and ablation grids.

Stage flow: the vision stage trains encoder + pixel decoder + context
transformer with the combined masked/contrastive objective; the alignment
stage freezes the encoder and trains aligner + bridge + decoder with the
conditional LM loss over interleaved sequences; fine-tuning keeps the
encoder frozen and adapts all non-vision parameters to a task.

Randomness is stateless per step (derived from plan seed + step index), so
resuming from a checkpoint reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aligner import Aligner, LmProjection
from .config import ModelConfig, substream, substream_seed
from .datamodel import tag_key
from .errors import CheckpointMismatchError, ConfigError
from .nn import AdamW, cosine_lr
from .textgen import (
    DecoderLM,
    clm_loss_batched,
    Vocabulary,
    build_prompt,
    build_vocab,
    caption_prompt,
    clm_loss,
    generate,
    make_lm_batch,
    vqa_prompt,
)
from .tokenizer import PatchTokenSet, tokenize_images
from .vision import ContextTransformer, PixelDecoder, VisionEncoder, ccmim_step

TASKS = ("vqa", "caption", "report")
STAGES = ("vision", "align", "finetune")


@dataclass
class TrainPlan:
    stage: str
    steps: int = 100
    batch_size: int = 8
    lr: float = 3e-4
    schedule: str = "cosine"          # cosine | const
    data_fraction: float = 1.0
    seed: int = 42
    checkpoint_every: int = 0         # 0 = only at the end
    task: str = "vqa"                 # finetune only
    prompt_setting: str = "none"      # report prompts
    n_per_seq: int = 3                # interleaving block size
    weight_decay: float = 0.01
    feature_noise: float = 0.0        # train-time jitter on frozen features
    pixel_noise: float = 0.0          # train-time pixel augmentation (LM stages)
    aligner_lr_scale: float = 1.0     # lr multiplier for aligner+bridge params

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if not (0.0 < self.data_fraction <= 1.0):
            raise ConfigError(f"data_fraction must be in (0,1], got {self.data_fraction}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.schedule not in ("cosine", "const"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_flat(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, values: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


class RunLog:
    """Append-only JSONL step log; the loss trajectory is the replay contract."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")
        else:
            self._fh = None

    def log(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()

    @staticmethod
    def read(path) -> list:
        return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l]


# ---------------------------------------------------------------------------
# model bundle and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    cfg: ModelConfig
    vocab: Vocabulary
    encoder: VisionEncoder
    pixel_decoder: PixelDecoder
    context: ContextTransformer
    aligner: Aligner
    bridge: LmProjection
    lm: DecoderLM

    def vision_parameters(self) -> dict:
        out = {}
        for mod in (self.encoder, self.pixel_decoder, self.context):
            out.update(mod.named_parameters())
        return out

    def language_parameters(self) -> dict:
        out = {}
        for mod in (self.aligner, self.bridge, self.lm):
            out.update(mod.named_parameters())
        return out

    def named_parameters(self) -> dict:
        return {**self.vision_parameters(), **self.language_parameters()}


def build_model(cfg: ModelConfig, vocab: Vocabulary, seed: int | None = None) -> ModelBundle:
    seed = cfg.seed if seed is None else seed
    return ModelBundle(
        cfg=cfg,
        vocab=vocab,
        encoder=VisionEncoder(cfg, substream(seed, "init:vision")),
        pixel_decoder=PixelDecoder(cfg, substream(seed, "init:pixdec")),
        context=ContextTransformer(cfg, substream(seed, "init:ctx")),
        aligner=Aligner(cfg, substream(seed, "init:aligner"), len(vocab)),
        bridge=LmProjection(cfg, substream(seed, "init:bridge")),
        lm=DecoderLM(cfg, substream(seed, "init:lm"), len(vocab)),
    )


def save_checkpoint(path, bundle: ModelBundle, stage: str, step: int = 0,
                    optimizer: AdamW | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": p.data for k, p in bundle.named_parameters().items()}
    arrays["meta/config"] = np.array(json.dumps(bundle.cfg.to_dict()))
    arrays["meta/vocab"] = np.array("\n".join(bundle.vocab.tokens))
    arrays["meta/stage"] = np.array(stage)
    arrays["meta/step"] = np.array(step)
    if optimizer is not None:
        for k, v in optimizer.state_dict().items():
            arrays[f"opt/{k}"] = v
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, expected_cfg: ModelConfig | None = None):
    """Rebuild a ModelBundle with bit-identical parameters.

    Returns (bundle, stage, step, optimizer_state or None).
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        cfg = ModelConfig.from_dict(json.loads(str(data["meta/config"])))
        if expected_cfg is not None and expected_cfg.config_hash() != cfg.config_hash():
            raise CheckpointMismatchError(
                f"checkpoint config hash {cfg.config_hash()} != expected {expected_cfg.config_hash()}"
            )
        tokens = tuple(str(data["meta/vocab"]).split("\n"))
        vocab = Vocabulary(tokens=tokens, index={t: i for i, t in enumerate(tokens)})
        bundle = build_model(cfg, vocab)
        params = bundle.named_parameters()
        for key in data.files:
            if key.startswith("param/"):
                params[key[len("param/"):]].data = np.array(data[key])
        opt_state = {k[len("opt/"):]: np.array(data[k]) for k in data.files if k.startswith("opt/")}
        stage = str(data["meta/stage"])
        step = int(data["meta/step"])
    return bundle, stage, step, (opt_state or None)


# ---------------------------------------------------------------------------
# deterministic nested subsampling
# ---------------------------------------------------------------------------

def subsample(items, fraction: float, seed: int, strata_fn=None) -> list:
    """Seeded, nested subsample: the fraction-f set contains the fraction-f'
    set for every f > f' at the same seed.

    Items are ordered by a round-robin over per-stratum seeded shuffles, then
    the first max(1, round(fraction * n)) are taken, so counts are exact and
    strata stay balanced.
    """
    items = list(items)
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0,1], got {fraction}")
    if not items:
        return []
    strata = {}
    for i, item in enumerate(items):
        key = strata_fn(item) if strata_fn else ""
        strata.setdefault(key, []).append(i)
    queues = []
    for key in sorted(strata):
        idx = strata[key]
        order = substream(seed, f"subsample:{key}").permutation(len(idx))
        queues.append([idx[j] for j in order])
    priority = []
    pos = 0
    while any(queues):
        for q in queues:
            if pos < len(q):
                priority.append(q[pos])
        pos += 1
        if all(pos >= len(q) for q in queues):
            break
    count = max(1, int(np.floor(fraction * len(items) + 0.5)))
    return [items[i] for i in priority[:count]]


def pair_group_key(pair) -> str:
    return tag_key(pair.tags_per_image[0])


# ---------------------------------------------------------------------------
# stage runners
# ---------------------------------------------------------------------------

def _save_every(plan, bundle, out_dir, stage, step, optimizer):
    if plan.checkpoint_every and step % plan.checkpoint_every == 0:
        save_checkpoint(Path(out_dir) / f"ckpt_step{step:06d}.npz", bundle, stage, step, optimizer)


def _lr_at(plan: TrainPlan, step: int) -> float:
    if plan.schedule == "const":
        return plan.lr
    return cosine_lr(step, plan.steps, plan.lr)


def run_vision_stage(plan: TrainPlan, pairs, cfg: ModelConfig, out_dir,
                     bundle: ModelBundle | None = None, resume_from=None) -> Path:
    """Combined masked/contrastive pretraining over validated pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_pairs = [p for p in pairs if p.split == "train"]
    selected = subsample(train_pairs, plan.data_fraction, plan.seed, pair_group_key)
    if len(selected) < 2:
        raise ConfigError("vision stage needs at least 2 training pairs")
    start_step = 0
    optimizer = None
    if resume_from is not None:
        bundle, _, start_step, opt_state = load_checkpoint(resume_from, expected_cfg=cfg)
        optimizer = AdamW(bundle.vision_parameters(), lr=plan.lr)
        if opt_state:
            optimizer.load_state_dict(opt_state)
    if bundle is None:
        vocab = Vocabulary(tokens=("<pad>", "<bos>", "<eos>", "<unk>"),
                           index={"<pad>": 0, "<bos>": 1, "<eos>": 2, "<unk>": 3})
        bundle = build_model(cfg, vocab)
    token_sets = [tokenize_images(p.images, cfg.sub_image_size, cfg.patch_size) for p in selected]
    params = bundle.vision_parameters()
    if optimizer is None:
        optimizer = AdamW(params, lr=plan.lr)
    log = RunLog(out_dir / "runlog.jsonl")
    cfg_hash = cfg.config_hash()
    batch = min(plan.batch_size, len(token_sets))
    for step in range(start_step, plan.steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng(substream_seed(plan.seed, "vision-batch", step))
        chosen = rng.choice(len(token_sets), size=batch, replace=False)
        step_seed = substream_seed(plan.seed, "vision-step", step)
        total, mim, icc = ccmim_step(
            [token_sets[i] for i in chosen], bundle.encoder, bundle.pixel_decoder,
            bundle.context, cfg, step_seed, pixel_noise=plan.pixel_noise,
        )
        optimizer.zero_grad()
        total.backward()
        optimizer.step(_lr_at(plan, step))
        log.log({
            "step": step, "loss_total": total.item(), "loss_mim": mim.item(),
            "loss_icc": icc.item(), "lr": _lr_at(plan, step),
            "wall_clock": time.perf_counter() - t0, "seed": plan.seed,
            "config_hash": cfg_hash,
        })
        _save_every(plan, bundle, out_dir, "vision", step + 1, optimizer)
    log.close()
    ckpt = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, bundle, "vision", plan.steps, optimizer)
    return ckpt


class _FeatureCache:
    """Per-image encoder features at frozen weights, keyed by image identity.

    With pixel_noise > 0 the cache stores token sets instead and re-encodes
    per use with fresh seeded noise on real (non-padding) pixels, so training
    sees a new rendering of each image every step.
    """

    def __init__(self, bundle: ModelBundle, pixel_noise: float = 0.0):
        self.bundle = bundle
        self.pixel_noise = pixel_noise
        self._token_sets = {}
        self._feats = {}

    def _token_set(self, img):
        key = id(img)
        if key not in self._token_sets:
            self._token_sets[key] = tokenize_images(
                [img], self.bundle.cfg.sub_image_size, self.bundle.cfg.patch_size
            )
        return self._token_sets[key]

    def features(self, images, noise_rng=None) -> list:
        out = []
        for img in images:
            ts = self._token_set(img)
            if self.pixel_noise > 0 and noise_rng is not None:
                noise = noise_rng.normal(0.0, self.pixel_noise, size=ts.tokens.shape)
                ts_step = PatchTokenSet(
                    tokens=ts.tokens + noise * ~ts.pad, positions=ts.positions,
                    pad=ts.pad, sub_image_size=ts.sub_image_size, patch_size=ts.patch_size,
                )
                feats, _ = self.bundle.encoder(ts_step)
            elif id(img) in self._feats:
                feats = self._feats[id(img)]
            else:
                feats, _ = self.bundle.encoder(ts)
                self._feats[id(img)] = feats
            out.append(feats)
        return out


def _lm_example(bundle: ModelBundle, cache: _FeatureCache, prompt: str, target: str,
                images, instruction: str, noise_rng=None, feature_noise: float = 0.0):
    feats = cache.features(images, noise_rng=noise_rng)
    if noise_rng is not None and feature_noise > 0:
        # extra jitter on the frozen features; regularizes against memorizing
        # per-image signatures
        feats = [
            ad.add(f, noise_rng.normal(0.0, feature_noise, size=f.shape))
            for f in feats
        ]
    bundle_q = bundle.aligner(feats, bundle.vocab.encode(instruction))
    prefix = bundle.bridge(bundle_q)
    return make_lm_batch(prefix, bundle.vocab, prompt, target)


def _train_lm_examples(plan: TrainPlan, bundle: ModelBundle, examples, out_dir,
                       stage: str, start_step: int = 0, optimizer: AdamW | None = None,
                       loss_key: str = "loss_clm") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle.encoder.set_trainable(False)
    bundle.pixel_decoder.set_trainable(False)
    bundle.context.set_trainable(False)
    cache = _FeatureCache(bundle, pixel_noise=plan.pixel_noise)
    params = bundle.language_parameters()
    if optimizer is None:
        scales = None
        if plan.aligner_lr_scale != 1.0:
            scales = {"aligner.": plan.aligner_lr_scale, "bridge.": plan.aligner_lr_scale}
        optimizer = AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay,
                          lr_scales=scales)
    log = RunLog(out_dir / "runlog.jsonl")
    cfg_hash = bundle.cfg.config_hash()
    batch = min(plan.batch_size, len(examples))
    if batch < 1:
        raise ConfigError("no training examples")
    for step in range(start_step, plan.steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng(substream_seed(plan.seed, f"{stage}-batch", step))
        chosen = rng.choice(len(examples), size=batch, replace=False)
        noise_rng = (
            np.random.default_rng(substream_seed(plan.seed, f"{stage}-noise", step))
            if plan.feature_noise > 0 or plan.pixel_noise > 0 else None
        )
        lm_batches = []
        for i in chosen:
            prompt, target, images, instruction = examples[i]
            lm_batches.append(
                _lm_example(bundle, cache, prompt, target, images, instruction,
                            noise_rng, plan.feature_noise)
            )
        total = clm_loss_batched(lm_batches, bundle.lm)
        optimizer.zero_grad()
        total.backward()
        optimizer.step(_lr_at(plan, step))
        log.log({
            "step": step, "loss_total": total.item(), loss_key: total.item(),
            "lr": _lr_at(plan, step), "wall_clock": time.perf_counter() - t0,
            "seed": plan.seed, "config_hash": cfg_hash,
        })
        _save_every(plan, bundle, out_dir, stage, step + 1, optimizer)
    log.close()
    ckpt = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, bundle, stage, plan.steps, optimizer)
    return ckpt


def sequences_to_examples(sequences) -> list:
    """Interleaved sequences as conditional-LM examples (empty prompt)."""
    out = []
    for seq in sequences:
        images = seq["images"] if isinstance(seq, dict) else seq.images
        text = seq["template_text"] if isinstance(seq, dict) else seq.template_text
        out.append(("", text, list(images), ""))
    return out


def prompt_literal_texts() -> list:
    """Template literals every prompt can emit; included in the vocabulary."""
    return [
        "question: answer: caption: report: prior report: prior images: current images:",
        "yes no",
    ]


def run_align_stage(plan: TrainPlan, sequences, vision_checkpoint, cfg: ModelConfig,
                    out_dir, vocab: Vocabulary | None = None,
                    extra_vocab_texts=None, random_encoder: bool = False,
                    resume_from=None) -> Path:
    """Conditional-LM alignment over interleaved sequences, encoder frozen.

    The vocabulary defaults to one built from the sequences' rendered text,
    the prompt template literals, and any extra_vocab_texts (pass downstream
    task questions/answers here so fine-tuning never hits <unk>).
    random_encoder=True skips loading vision weights (ablation control).
    """
    if resume_from is not None:
        bundle, stage, step, opt_state = load_checkpoint(resume_from, expected_cfg=cfg)
        optimizer = AdamW(bundle.language_parameters(), lr=plan.lr, weight_decay=plan.weight_decay)
        if opt_state:
            optimizer.load_state_dict(opt_state)
        examples = subsample(sequences_to_examples(sequences), plan.data_fraction, plan.seed)
        return _train_lm_examples(plan, bundle, examples, out_dir, "align",
                                  start_step=step, optimizer=optimizer)
    texts = [
        (seq["template_text"] if isinstance(seq, dict) else seq.template_text)
        for seq in sequences
    ]
    if vocab is None:
        vocab = build_vocab(
            texts + prompt_literal_texts() + list(extra_vocab_texts or []), cfg.vocab_cap
        )
    bundle = build_model(cfg, vocab)
    if not random_encoder:
        trained, _, _, _ = load_checkpoint(vision_checkpoint, expected_cfg=cfg)
        vision_params = bundle.vision_parameters()
        for k, p in trained.vision_parameters().items():
            vision_params[k].data = p.data
    examples = subsample(
        sequences_to_examples(sequences), plan.data_fraction, plan.seed,
    )
    return _train_lm_examples(plan, bundle, examples, out_dir, "align")


def task_examples(task: str, dataset, prompt_setting: str = "none") -> list:
    """(prompt, target, images, instruction) tuples for a fine-tuning task."""
    out = []
    if task == "vqa":
        for item in dataset:
            prompt, images = vqa_prompt(item)
            out.append((prompt, item.answer, images, item.question))
    elif task == "caption":
        for pair in dataset:
            prompt, images = caption_prompt(pair)
            out.append((prompt, pair.text, images, "describe the image"))
    elif task == "report":
        for study in dataset:
            prompt, images = build_prompt(study, prompt_setting)
            out.append((prompt, study.report, images, prompt))
    else:
        raise ConfigError(f"unknown task {task!r}")
    return out


def run_finetune(plan: TrainPlan, dataset, checkpoint, out_dir,
                 resume_from=None) -> Path:
    """Adapt all non-vision parameters to a task dataset."""
    start_step = 0
    optimizer = None
    if resume_from is not None:
        bundle, _, start_step, opt_state = load_checkpoint(resume_from)
        optimizer = AdamW(bundle.language_parameters(), lr=plan.lr, weight_decay=plan.weight_decay)
        if opt_state:
            optimizer.load_state_dict(opt_state)
    else:
        bundle, _, _, _ = load_checkpoint(checkpoint)
    train_items = [x for x in dataset if getattr(x, "split", "train") == "train"]
    examples = task_examples(plan.task, train_items, plan.prompt_setting)
    examples = subsample(examples, plan.data_fraction, plan.seed)
    return _train_lm_examples(plan, bundle, examples, out_dir, "finetune",
                              start_step=start_step, optimizer=optimizer)


def generate_predictions(checkpoint, dataset, task: str, prompt_setting: str = "none",
                         max_len: int = 48, mode: str = "greedy", seed: int = 0) -> list:
    """Greedy/sampled generation over a dataset; returns [{id, prediction}]."""
    bundle, _, _, _ = load_checkpoint(checkpoint)
    bundle.encoder.set_trainable(False)
    for p in bundle.named_parameters().values():
        p.requires_grad = False
    cache = _FeatureCache(bundle)
    examples = task_examples(task, dataset, prompt_setting)
    ids = [_dataset_id(x) for x in dataset]
    out = []
    for item_id, (prompt, _target, images, instruction) in zip(ids, examples):
        feats = cache.features(images)
        qb = bundle.aligner(feats, bundle.vocab.encode(instruction))
        prefix = bundle.bridge(qb)
        token_ids = generate(
            bundle.lm, prefix, bundle.vocab.encode(prompt), max_len=max_len,
            mode=mode, seed=seed,
        )
        out.append({"id": item_id, "prediction": bundle.vocab.detokenize(token_ids)})
    return out


def _dataset_id(item) -> str:
    for attr in ("item_id", "study_id", "pair_id"):
        if hasattr(item, attr):
            return getattr(item, attr)
    raise ConfigError(f"cannot identify dataset item {item!r}")
