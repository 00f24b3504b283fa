import dataclasses
import hashlib

import numpy as np
import pytest

from radpipe.config import ModelConfig
from radpipe.datamodel import as_volume
from radpipe.errors import CheckpointMismatchError
from radpipe.interleave import build_sequences, group_pairs
from radpipe.synthetic import SyntheticSpec, gen_synthetic
from radpipe.textgen import build_vocab
from radpipe.tokenizer import tokenize_images
from radpipe.trainer import (
    RunLog,
    TrainPlan,
    build_model,
    generate_predictions,
    load_checkpoint,
    pair_group_key,
    run_align_stage,
    run_finetune,
    run_vision_stage,
    save_checkpoint,
    subsample,
    task_examples,
)


@pytest.fixture(scope="module")
def small_corpus():
    return gen_synthetic(SyntheticSpec(n_studies=14, seed=21))


@pytest.fixture(scope="module")
def fast_cfg():
    return ModelConfig(
        sub_image_size=16, patch_size=8, embed_dim=16, vision_layers=1,
        icc_layers=1, qformer_layers=1, num_queries=2, lm_layers=1,
        vocab_cap=512, seed=0, mask_ratio=0.5,
    )


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()


class TestSubsample:
    def test_exact_count(self):
        out = subsample(list(range(100)), 0.5, seed=3)
        assert len(out) == 50

    def test_nested_subsets(self):
        items = list(range(40))
        small = set(subsample(items, 0.25, seed=7))
        large = set(subsample(items, 0.75, seed=7))
        assert small <= large

    def test_deterministic(self):
        items = list(range(30))
        assert subsample(items, 0.4, seed=9) == subsample(items, 0.4, seed=9)

    def test_stratified_balance(self, small_corpus):
        pairs = small_corpus.pairs
        out = subsample(pairs, 0.5, seed=1, strata_fn=pair_group_key)
        keys_all = {pair_group_key(p) for p in pairs}
        keys_sub = {pair_group_key(p) for p in out}
        assert keys_sub == keys_all


class TestVisionStage:
    def test_zero_steps_equals_init(self, fast_cfg, small_corpus, tmp_path):
        plan = TrainPlan(stage="vision", steps=0, batch_size=4, seed=3)
        ckpt = run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "v")
        bundle, stage, step, _ = load_checkpoint(ckpt)
        fresh = build_model(fast_cfg, bundle.vocab)
        for k, p in fresh.vision_parameters().items():
            assert np.array_equal(p.data, bundle.vision_parameters()[k].data)

    def test_fixed_seed_reproduces_losses(self, fast_cfg, small_corpus, tmp_path):
        plan = TrainPlan(stage="vision", steps=5, batch_size=4, seed=3)
        run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "a")
        run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "b")
        la = [r["loss_total"] for r in RunLog.read(tmp_path / "a" / "runlog.jsonl")]
        lb = [r["loss_total"] for r in RunLog.read(tmp_path / "b" / "runlog.jsonl")]
        assert la == lb

    def test_checkpoint_round_trip_bit_identical_forward(self, fast_cfg, small_corpus, tmp_path, rng):
        plan = TrainPlan(stage="vision", steps=3, batch_size=4, seed=3)
        ckpt = run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "v")
        bundle, _, _, _ = load_checkpoint(ckpt)
        ts = tokenize_images([as_volume(rng.random((16, 16)))],
                             fast_cfg.sub_image_size, fast_cfg.patch_size)
        feats1, _ = bundle.encoder(ts)
        bundle2, _, _, _ = load_checkpoint(ckpt)
        feats2, _ = bundle2.encoder(ts)
        assert np.array_equal(feats1.data, feats2.data)

    def test_config_hash_mismatch(self, fast_cfg, small_corpus, tmp_path):
        plan = TrainPlan(stage="vision", steps=1, batch_size=4, seed=3)
        ckpt = run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "v")
        other = dataclasses.replace(fast_cfg, embed_dim=32)
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(ckpt, expected_cfg=other)


@pytest.fixture(scope="module")
def align_setup(fast_cfg, small_corpus, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("align")
    plan = TrainPlan(stage="vision", steps=3, batch_size=4, seed=3)
    vck = run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp / "vision")
    train_pairs = [p for p in small_corpus.pairs if p.split == "train"]
    seqs = build_sequences(group_pairs(train_pairs), 2, seed=5)
    return tmp, vck, seqs


class TestAlignStage:
    def test_vision_weights_frozen(self, fast_cfg, align_setup):
        tmp, vck, seqs = align_setup
        before, _, _, _ = load_checkpoint(vck)
        h_before = params_hash(before.vision_parameters())
        plan = TrainPlan(stage="align", steps=4, batch_size=2, seed=6)
        ack = run_align_stage(plan, seqs, vck, fast_cfg, tmp / "a1")
        after, _, _, _ = load_checkpoint(ack)
        assert params_hash(after.vision_parameters()) == h_before

    def test_resume_reproduces_trajectory(self, fast_cfg, align_setup):
        """Resuming an interrupted plan from its mid-run checkpoint replays
        the remaining steps bit-identically."""
        tmp, vck, seqs = align_setup
        plan = TrainPlan(stage="align", steps=6, batch_size=2, seed=6, checkpoint_every=3)
        run_align_stage(plan, seqs, vck, fast_cfg, tmp / "full")
        mid = tmp / "full" / "ckpt_step000003.npz"
        assert mid.exists()
        run_align_stage(plan, seqs, vck, fast_cfg, tmp / "resumed", resume_from=mid)
        lf = [r["loss_total"] for r in RunLog.read(tmp / "full" / "runlog.jsonl")]
        lr = [r["loss_total"] for r in RunLog.read(tmp / "resumed" / "runlog.jsonl")]
        assert lf[3:] == lr

    def test_random_encoder_differs_from_trained(self, fast_cfg, align_setup):
        tmp, vck, seqs = align_setup
        plan = TrainPlan(stage="align", steps=1, batch_size=2, seed=6)
        a = run_align_stage(plan, seqs, vck, fast_cfg, tmp / "t1")
        b = run_align_stage(plan, seqs, vck, fast_cfg, tmp / "t2", random_encoder=True)
        ba, _, _, _ = load_checkpoint(a)
        bb, _, _, _ = load_checkpoint(b)
        trained, _, _, _ = load_checkpoint(vck)
        assert params_hash(ba.vision_parameters()) == params_hash(trained.vision_parameters())
        assert params_hash(bb.vision_parameters()) != params_hash(trained.vision_parameters())


class TestFinetune:
    def test_zero_steps_keeps_predictions(self, fast_cfg, small_corpus, align_setup):
        tmp, vck, seqs = align_setup
        plan = TrainPlan(stage="align", steps=2, batch_size=2, seed=6)
        ack = run_align_stage(plan, seqs, vck, fast_cfg, tmp / "base",
                              extra_vocab_texts=[f"{i.question} {i.answer}"
                                                 for i in small_corpus.vqa_items])
        ft = TrainPlan(stage="finetune", task="vqa", steps=0, batch_size=2, seed=7)
        fck = run_finetune(ft, small_corpus.vqa_items, ack, tmp / "ft0")
        items = [i for i in small_corpus.vqa_items if i.split == "test"][:3] or small_corpus.vqa_items[:3]
        base_preds = generate_predictions(ack, items, "vqa", max_len=3)
        ft_preds = generate_predictions(fck, items, "vqa", max_len=3)
        assert base_preds == ft_preds

    def test_task_examples_prompt_shapes(self, small_corpus):
        vqa = task_examples("vqa", small_corpus.vqa_items[:2])
        assert all("question:" in prompt for prompt, _, _, _ in vqa)
        studies = [s for s in small_corpus.studies if s.visit_index == 0][:2]
        rep = task_examples("report", studies, "none")
        assert all(prompt.endswith("report:") for prompt, _, _, _ in rep)


class TestRunLogReplay:
    def test_runlog_fields(self, fast_cfg, small_corpus, tmp_path):
        plan = TrainPlan(stage="vision", steps=2, batch_size=4, seed=3)
        run_vision_stage(plan, small_corpus.pairs, fast_cfg, tmp_path / "v")
        records = RunLog.read(tmp_path / "v" / "runlog.jsonl")
        assert len(records) == 2
        for rec in records:
            for key in ("step", "loss_total", "loss_mim", "loss_icc", "wall_clock",
                        "seed", "config_hash"):
                assert key in rec


class TestPlanFiles:
    def test_flat_round_trip(self, tmp_path):
        from radpipe.config import load_kv_config, save_kv_config

        plan = TrainPlan(stage="finetune", steps=7, task="report", data_fraction=0.5)
        save_kv_config(tmp_path / "plan.cfg", plan.to_flat())
        loaded = TrainPlan.from_flat(load_kv_config(tmp_path / "plan.cfg"))
        assert loaded == plan
