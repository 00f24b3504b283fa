import json
from pathlib import Path

import pytest

from radpipe.cli import main


TINY = [
    "--sub-image-size", "16", "--patch-size", "8", "--embed-dim", "16",
    "--vision-layers", "1", "--icc-layers", "1", "--qformer-layers", "1",
    "--num-queries", "2", "--lm-layers", "1",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth-gen", "--n", "12", "--seed", "4", "--out", str(root / "data")]) == 0
    return root


class TestSynthGen:
    def test_outputs_exist(self, workspace):
        data = workspace / "data"
        for name in ("pairs.jsonl", "vqa.jsonl", "studies.jsonl",
                     "latent_findings.jsonl", "config.lock"):
            assert (data / name).exists()

    def test_byte_identical_rerun(self, tmp_path):
        assert main(["synth-gen", "--n", "6", "--seed", "9", "--out", str(tmp_path / "a")]) == 0
        assert main(["synth-gen", "--n", "6", "--seed", "9", "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "pairs.jsonl").read_bytes()
        b = (tmp_path / "b" / "pairs.jsonl").read_bytes()
        assert a == b
        img_a = sorted(p for p in (tmp_path / "a" / "images").rglob("*") if p.is_file())
        img_b = sorted(p for p in (tmp_path / "b" / "images").rglob("*") if p.is_file())
        rel_a = [p.relative_to(tmp_path / "a") for p in img_a]
        rel_b = [p.relative_to(tmp_path / "b") for p in img_b]
        assert rel_a == rel_b
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(img_a, img_b))


class TestCleanAndIta:
    def test_corpus_clean(self, workspace, tmp_path):
        assert main(["corpus-clean", "--pairs", str(workspace / "data" / "pairs.jsonl"),
                     "--out", str(tmp_path / "clean")]) == 0
        manifest = json.loads((tmp_path / "clean" / "manifest.json").read_text())
        assert manifest["n_kept"] > 0

    def test_ita_build(self, workspace, tmp_path):
        assert main(["ita-build", "--pairs", str(workspace / "data" / "pairs.jsonl"),
                     "--out", str(tmp_path / "ita"), "--seed", "2"]) == 0
        lines = (tmp_path / "ita" / "interleaved.jsonl").read_text().splitlines()
        assert lines
        rec = json.loads(lines[0])
        assert set(rec) == {"group_key", "source_pair_ids", "template_text", "images"}


class TestTrainingChain:
    def test_smoke_chain(self, workspace, tmp_path):
        data = workspace / "data"
        run = tmp_path
        assert main(["ita-build", "--pairs", str(data / "pairs.jsonl"),
                     "--out", str(run / "ita"), "--seed", "2"]) == 0
        assert main(["pretrain-vision", "--pairs", str(data / "pairs.jsonl"),
                     "--out", str(run / "vision"), "--steps", "2", "--batch-size", "4",
                     "--seed", "3", *TINY]) == 0
        assert main(["pretrain-align", "--sequences", str(run / "ita" / "interleaved.jsonl"),
                     "--vision-checkpoint", str(run / "vision" / "checkpoint.npz"),
                     "--out", str(run / "align"), "--steps", "2", "--batch-size", "2",
                     "--seed", "3", "--vocab-extra", str(data / "vqa.jsonl"), *TINY]) == 0
        assert main(["finetune", "--task", "vqa", "--data", str(data / "vqa.jsonl"),
                     "--checkpoint", str(run / "align" / "checkpoint.npz"),
                     "--out", str(run / "ft"), "--steps", "2", "--batch-size", "2",
                     "--seed", "3", *TINY]) == 0
        assert main(["generate", "--task", "vqa", "--data", str(data / "vqa.jsonl"),
                     "--checkpoint", str(run / "ft" / "checkpoint.npz"),
                     "--out", str(run / "preds.jsonl"), "--max-len", "3"]) == 0
        assert main(["evaluate", "--task", "vqa", "--data", str(data / "vqa.jsonl"),
                     "--pred", str(run / "preds.jsonl"), "--out", str(run / "report.json"),
                     "--metrics", "accuracy,token_f1", "--bootstrap", "50"]) == 0
        report = json.loads((run / "report.json").read_text())
        assert set(report["metrics"]) == {"accuracy", "token_f1"}
        assert (run / "vision" / "config.lock").exists()

    def test_evaluate_with_strata(self, workspace, tmp_path):
        data = workspace / "data"
        vqa = [json.loads(l) for l in (data / "vqa.jsonl").read_text().splitlines()]
        test_ids = [r["item_id"] for r in vqa if r.get("split") == "test"]
        preds = [{"id": i, "prediction": "yes"} for i in test_ids]
        pred_path = tmp_path / "p.jsonl"
        pred_path.write_text("\n".join(json.dumps(p) for p in preds))
        assert main(["evaluate", "--task", "vqa", "--data", str(data / "vqa.jsonl"),
                     "--pred", str(pred_path), "--out", str(tmp_path / "r.json"),
                     "--metrics", "accuracy", "--strata", "image_count",
                     "--bootstrap", "50"]) == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["strata"]

    def test_exit_codes(self, tmp_path):
        assert main(["pretrain-vision", "--pairs", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "x")]) in (1, 2)
        with pytest.raises(SystemExit) as err:
            main(["definitely-not-a-command"])
        assert err.value.code == 2


class TestHumanEvalCli:
    def test_report_from_synthetic_log(self, tmp_path):
        from radpipe.rating import save_items
        import sys
        sys.path.insert(0, str(Path(__file__).parent))
        from test_rating import card, make_items

        items = make_items(4)
        save_items(items, tmp_path / "items.jsonl")
        raters = [{"rater_id": "r1", "group": "senior", "years_experience": 12}]
        (tmp_path / "raters.jsonl").write_text("\n".join(json.dumps(r) for r in raters))
        log = [card(items[0].item_id, "r1", 4), card(items[1].item_id, "r1", 5)]
        (tmp_path / "log.jsonl").write_text("\n".join(json.dumps(c) for c in log))
        assert main(["humaneval-report", "--items", str(tmp_path / "items.jsonl"),
                     "--raters", str(tmp_path / "raters.jsonl"),
                     "--log", str(tmp_path / "log.jsonl"),
                     "--out", str(tmp_path / "agg.json")]) == 0
        agg = json.loads((tmp_path / "agg.json").read_text())
        assert agg["n_cards"] == 2
