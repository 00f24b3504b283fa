"""Command-line entry point wiring every pipeline stage.

Exit codes: 0 success, 1 validation/data errors, 2 configuration errors
(argparse uses 2 for unknown flags/subcommands as well). Each run echoes
its effective configuration into the output directory as config.lock.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ModelConfig, load_kv_config, save_kv_config
from .errors import ConfigError, RadpipeError, SchemaError, ValidationError

_CONFIG_FIELDS = tuple(ModelConfig().to_dict())


def _model_config(args) -> ModelConfig:
    values = {}
    if getattr(args, "config", None):
        file_values = load_kv_config(args.config)
        values.update({k: v for k, v in file_values.items() if k in _CONFIG_FIELDS})
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return ModelConfig.from_dict(values)


def _write_lock(out_dir, cfg: ModelConfig, extra: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = dict(cfg.to_dict())
    if extra:
        values.update(extra)
    save_kv_config(out_dir / "config.lock", values)


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    for name in ("sub-image-size", "patch-size", "embed-dim", "vision-layers",
                 "icc-layers", "qformer-layers", "num-queries", "lm-layers", "vocab-cap"):
        parser.add_argument(f"--{name}", type=int, dest=name.replace("-", "_"), default=None)
    for name in ("mask-ratio", "temperature", "icc-weight"):
        parser.add_argument(f"--{name}", type=float, dest=name.replace("-", "_"), default=None)


def _add_plan_flags(parser, stage: str):
    parser.add_argument("--steps", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--schedule", choices=("cosine", "const"), default="cosine")
    parser.add_argument("--data-fraction", type=float, default=1.0)
    parser.add_argument("--checkpoint-every", type=int, default=0)
    parser.add_argument("--resume-from", default=None)
    parser.add_argument("--weight-decay", type=float, default=0.01)
    parser.add_argument("--pixel-noise", type=float, default=0.0,
                        help="train-time pixel augmentation sigma")
    parser.set_defaults(stage=stage)


def _plan(args, **overrides):
    from .trainer import TrainPlan

    return TrainPlan(
        stage=args.stage, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
        schedule=args.schedule, data_fraction=args.data_fraction,
        seed=args.seed if args.seed is not None else 42,
        checkpoint_every=args.checkpoint_every,
        weight_decay=args.weight_decay, pixel_noise=args.pixel_noise, **overrides,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    from .data_io import save_pairs, save_studies, save_vqa, _write_jsonl
    from .synthetic import SyntheticSpec, gen_synthetic

    cfg = _model_config(args)
    spec = SyntheticSpec(n_studies=args.n, seed=args.seed if args.seed is not None else 42)
    corpus = gen_synthetic(spec)
    out = Path(args.out)
    save_pairs(corpus.pairs, out / "pairs.jsonl")
    save_vqa(corpus.vqa_items, out / "vqa.jsonl")
    save_studies(corpus.studies, out / "studies.jsonl")
    _write_jsonl(out / "latent_findings.jsonl",
                 [{"study_id": k, "findings": v} for k, v in sorted(corpus.findings_truth.items())])
    _write_lock(out, cfg, {"n_studies": args.n})
    print(f"wrote {len(corpus.pairs)} pairs, {len(corpus.vqa_items)} vqa items, "
          f"{len(corpus.studies)} studies to {out}")
    return 0


def cmd_corpus_clean(args) -> int:
    from .data_io import clean_corpus, load_pairs, save_pairs

    pairs = load_pairs(Path(args.pairs))
    patterns = None
    if args.patterns:
        patterns = [l for l in Path(args.patterns).read_text("utf-8").splitlines()
                    if l.strip() and not l.startswith("#")]
    cleaned, manifest = clean_corpus(pairs, patterns)
    out = Path(args.out)
    save_pairs(cleaned, out / "pairs.jsonl")
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2), "utf-8")
    print(f"kept {manifest.n_kept}/{manifest.n_input} "
          f"(sensitive {manifest.n_dropped_sensitive}, duplicate {manifest.n_dropped_duplicate})")
    return 0


def cmd_ita_build(args) -> int:
    from .data_io import load_pairs, save_interleaved
    from .interleave import build_sequences, group_pairs

    pairs = [p for p in load_pairs(Path(args.pairs)) if p.split == "train"]
    groups = group_pairs(pairs)
    sequences = build_sequences(groups, args.n_per_seq, args.seed if args.seed is not None else 42)
    save_interleaved(sequences, Path(args.out) / "interleaved.jsonl")
    print(f"wrote {len(sequences)} sequences from {len(pairs)} pairs "
          f"({len(groups)} groups) to {args.out}")
    return 0


def cmd_pretrain_vision(args) -> int:
    from .data_io import load_pairs
    from .trainer import run_vision_stage

    cfg = _model_config(args)
    pairs = load_pairs(Path(args.pairs))
    plan = _plan(args)
    _write_lock(args.out, cfg, plan.to_flat())
    ckpt = run_vision_stage(plan, pairs, cfg, args.out, resume_from=args.resume_from)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_pretrain_align(args) -> int:
    from .data_io import load_interleaved, load_vqa, load_studies
    from .trainer import run_align_stage

    cfg = _model_config(args)
    sequences = load_interleaved(Path(args.sequences))
    extra_texts = []
    for path in args.vocab_extra or []:
        path = Path(path)
        if "vqa" in path.name:
            extra_texts.extend(f"{i.question} {i.answer}" for i in load_vqa(path))
        else:
            extra_texts.extend(s.report for s in load_studies(path))
    plan = _plan(args)
    _write_lock(args.out, cfg, plan.to_flat())
    ckpt = run_align_stage(
        plan, sequences, args.vision_checkpoint, cfg, args.out,
        extra_vocab_texts=extra_texts, random_encoder=args.random_encoder,
        resume_from=args.resume_from,
    )
    print(f"checkpoint: {ckpt}")
    return 0


def _load_task_dataset(task: str, path: Path):
    from .data_io import load_pairs, load_studies, load_vqa

    if task == "vqa":
        return load_vqa(path)
    if task == "caption":
        return load_pairs(path)
    return load_studies(path)


def cmd_finetune(args) -> int:
    from .trainer import run_finetune

    cfg = _model_config(args)
    dataset = _load_task_dataset(args.task, Path(args.data))
    plan = _plan(args, task=args.task, prompt_setting=args.setting)
    _write_lock(args.out, cfg, plan.to_flat())
    ckpt = run_finetune(plan, dataset, args.checkpoint, args.out, resume_from=args.resume_from)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_generate(args) -> int:
    from .errors import MissingPriorError
    from .trainer import generate_predictions

    dataset = _load_task_dataset(args.task, Path(args.data))
    dataset = [x for x in dataset if getattr(x, "split", "test") == args.split]
    if args.task == "report" and args.setting in ("prior_images", "both"):
        dataset = [s for s in dataset if s.prior_images]
    elif args.task == "report" and args.setting == "prior_report":
        dataset = [s for s in dataset if s.prior_report]
    preds = generate_predictions(
        args.checkpoint, dataset, args.task, prompt_setting=args.setting,
        max_len=args.max_len, mode=args.mode,
        seed=args.seed if args.seed is not None else 0,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p) + "\n")
    print(f"wrote {len(preds)} predictions to {out}")
    return 0


def _records_for_eval(task, data_path, pred_path, split):
    from .metrics import EvalRecord
    from .textgen import word_tokenize

    dataset = _load_task_dataset(task, Path(data_path))
    dataset = [x for x in dataset if getattr(x, "split", "test") == split]
    preds = {}
    for line in Path(pred_path).read_text("utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            preds[rec["id"]] = rec["prediction"]
    records = []
    refs = {}
    for item in dataset:
        if task == "vqa":
            item_id, reference = item.item_id, item.answer
            strata = {
                "image_count": len(item.images),
                "question_len": len(word_tokenize(item.question)),
                "organ": (item.meta or {}).get("organ"),
                "modality": (item.meta or {}).get("modality"),
            }
        elif task == "caption":
            item_id, reference = item.pair_id, item.text
            strata = {"image_count": len(item.images)}
        else:
            item_id, reference = item.study_id, item.report
            strata = {"image_count": len(item.images)}
        if item_id not in preds:
            continue
        records.append(EvalRecord(id=item_id, prediction=preds[item_id],
                                  references=(reference,), strata=strata))
        refs[item_id] = reference
    return records, refs


def cmd_evaluate(args) -> int:
    from .clinical import clinical_f1
    from .metrics import evaluate_records, render_table, stratified_report

    metric_names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    clinical = "clinical_f1" in metric_names
    metric_names = tuple(m for m in metric_names if m != "clinical_f1")
    records, refs = _records_for_eval(args.task, args.data, args.pred, args.split)
    if not records:
        print("no overlapping records between predictions and dataset", file=sys.stderr)
        return 1
    seed = args.seed if args.seed is not None else 0
    if args.strata:
        report = stratified_report(records, metric_names, args.strata,
                                   n_resamples=args.bootstrap, seed=seed)
    else:
        report = evaluate_records(records, metric_names, n_resamples=args.bootstrap, seed=seed)
    payload = report.to_dict()
    if clinical:
        payload["clinical_f1"] = clinical_f1(
            [r.prediction for r in records], [refs[r.id] for r in records]
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2), "utf-8")
    print(render_table(report, title=f"{args.task} [{args.strata or 'overall'}]"))
    if clinical:
        print(f" clinical macro F1: {payload['clinical_f1']['macro_f1']:.4f}")
    print(f"report: {out}")
    return 0


def cmd_fraction_grid(args) -> int:
    """Fine-tune/evaluate over a data-fraction grid (nested subsets) x seeds."""
    from .metrics import EvalRecord, vqa_accuracy
    from .trainer import TrainPlan, generate_predictions, run_finetune

    dataset = _load_task_dataset(args.task, Path(args.data))
    test_items = [x for x in dataset if getattr(x, "split", "test") == "test"]
    if args.task == "vqa":
        test_items = [i for i in test_items if i.answer_type == "closed"]
    fractions = [float(f) for f in args.fractions.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = {}
    for fraction in fractions:
        per_seed = []
        for seed in seeds:
            plan = TrainPlan(stage="finetune", task=args.task, steps=args.steps,
                             batch_size=args.batch_size, lr=args.lr,
                             data_fraction=fraction, seed=seed)
            run_dir = out_dir / f"f{fraction:g}_s{seed}"
            ckpt = run_finetune(plan, dataset, args.checkpoint, run_dir)
            preds = generate_predictions(ckpt, test_items, args.task, max_len=args.max_len)
            records = [
                EvalRecord(id=i.item_id, prediction=p["prediction"], references=(i.answer,))
                for i, p in zip(test_items, preds)
            ]
            per_seed.append(vqa_accuracy(records))
        table[f"{fraction:g}"] = {
            "per_seed": per_seed,
            "median": sorted(per_seed)[len(per_seed) // 2],
            "mean": sum(per_seed) / len(per_seed),
        }
        print(f"fraction {fraction:g}: median={table[f'{fraction:g}']['median']:.3f} "
              f"values={['%.3f' % v for v in per_seed]}")
    (out_dir / "fraction_grid.json").write_text(json.dumps(
        {"task": args.task, "metric": "accuracy", "fractions": table}, indent=2), "utf-8")
    print(f"table: {out_dir / 'fraction_grid.json'}")
    return 0


def cmd_humaneval_serve(args) -> int:
    import uvicorn

    from .rating import RatingStore, build_app, load_items, load_raters

    store = RatingStore(
        items=load_items(args.items), raters=load_raters(args.raters),
        log_path=args.log, seed=args.seed if args.seed is not None else 0,
    )
    app = build_app(store)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_humaneval_report(args) -> int:
    from .rating import RatingStore, load_items, load_raters

    store = RatingStore(
        items=load_items(args.items), raters=load_raters(args.raters),
        log_path=args.log, seed=args.seed if args.seed is not None else 0,
    )
    summary = store.aggregate()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2), "utf-8")
    for source, dims in summary["overall"].items():
        print(f"{source}: all-dimension mean {dims['all_dimensions_mean']:.3f}")
    print(f"report: {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radpipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic benchmark")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("corpus-clean", help="clean an image-text pair corpus")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patterns", help="extra sensitive-pattern file")
    p.set_defaults(fn=cmd_corpus_clean)

    p = sub.add_parser("ita-build", help="build interleaved training sequences")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-seq", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_ita_build)

    p = sub.add_parser("pretrain-vision", help="masked/contrastive vision pretraining")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    _add_plan_flags(p, "vision")
    p.set_defaults(fn=cmd_pretrain_vision)

    p = sub.add_parser("pretrain-align", help="vision-language alignment pretraining")
    p.add_argument("--sequences", required=True)
    p.add_argument("--vision-checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-extra", nargs="*", help="task datasets whose text joins the vocab")
    p.add_argument("--random-encoder", action="store_true",
                   help="ablation: keep the encoder at random init")
    _add_config_flags(p)
    _add_plan_flags(p, "align")
    p.set_defaults(fn=cmd_pretrain_align)

    p = sub.add_parser("finetune", help="task fine-tuning")
    p.add_argument("--task", choices=("vqa", "caption", "report"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--setting", choices=("none", "prior_report", "prior_images", "both"),
                   default="none")
    _add_config_flags(p)
    _add_plan_flags(p, "finetune")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("generate", help="generate predictions over a dataset")
    p.add_argument("--task", choices=("vqa", "caption", "report"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--setting", choices=("none", "prior_report", "prior_images", "both"),
                   default="none")
    p.add_argument("--max-len", type=int, default=48)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against a dataset")
    p.add_argument("--task", choices=("vqa", "caption", "report"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default="accuracy,token_f1,bleu4,rougel,meteor")
    p.add_argument("--strata", choices=("image_count", "question_len_bucket", "organ", "modality"),
                   default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("fraction-grid", help="data-fraction ablation (nested subsets)")
    p.add_argument("--task", choices=("vqa", "caption", "report"), default="vqa")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.1,0.5,1.0")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--max-len", type=int, default=8)
    p.set_defaults(fn=cmd_fraction_grid)

    p = sub.add_parser("humaneval-serve", help="run the blinded rating service")
    p.add_argument("--items", required=True)
    p.add_argument("--raters", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_humaneval_serve)

    p = sub.add_parser("humaneval-report", help="aggregate rating scores")
    p.add_argument("--items", required=True)
    p.add_argument("--raters", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_humaneval_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError,) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, SchemaError, RadpipeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
