"""CLI surface: all six subcommands plus error behaviour."""

import json

import pytest

from concaps.cli import main
from concaps.corpus import DictionaryTagger, corpus_stats, load_corpus


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated corpus plus one tiny trained checkpoint, shared per module."""
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(
        "build-corpus", "--out-dir", root / "data", "--docs", 10,
        "--images-per-doc", "3.0", "--seed", 5,
        "--split-fractions", "0.6,0.0,0.4",
    ) == 0
    assert run_cli(
        "train",
        "--corpus", root / "data" / "corpus.jsonl",
        "--entities", root / "data" / "entities.tsv",
        "--features", root / "data" / "features",
        "--out-dir", root / "run",
        "--steps", 4, "--seed", 1, "--batch-size", 5,
        "--d-model", 16, "--n-heads", 2, "--d-ff", 32, "--max-len", 24,
        "--scorer-hidden", 16, "--window-tokens", 32,
    ) == 0
    return root


class TestBuildCorpusAndStats:
    def test_build_corpus_writes_all_outputs(self, workdir, capsys):
        data = workdir / "data"
        assert (data / "corpus.jsonl").exists()
        assert (data / "entities.tsv").exists()
        assert (data / "features" / "manifest.json").exists()

    def test_stats_matches_library_computation(self, workdir, capsys):
        data = workdir / "data"
        assert run_cli(
            "stats", "--corpus", data / "corpus.jsonl", "--entities", data / "entities.tsv",
        ) == 0
        printed = json.loads(capsys.readouterr().out)
        corpus = load_corpus(data / "corpus.jsonl")
        tagger = DictionaryTagger.from_tsv(data / "entities.tsv")
        expected = corpus_stats(corpus, tagger).to_dict()
        assert printed == json.loads(json.dumps(expected))

    def test_stats_writes_out_file(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        out = tmp_path / "stats.json"
        assert run_cli(
            "stats", "--corpus", data / "corpus.jsonl",
            "--entities", data / "entities.tsv", "--out", out,
        ) == 0
        capsys.readouterr()
        assert json.loads(out.read_text())["n_docs"] == 10


class TestTrain:
    def test_checkpoint_and_manifest_written(self, workdir):
        assert (workdir / "run" / "checkpoint.pt").exists()
        manifest = json.loads((workdir / "run" / "manifest.json").read_text())
        assert len(manifest["steps"]) == 4

    def test_config_file_with_flag_overrides(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        cfg = {
            "corpus": str(data / "corpus.jsonl"),
            "entities": str(data / "entities.tsv"),
            "features": str(data / "features"),
            "train": {
                "total_steps": 3,
                "seed": 2,
                "batch_size": 5,
                "window_tokens": 32,
                "model": {"d_model": 16, "n_heads": 2, "d_ff": 32, "max_len": 24},
                "scorer_hidden": 16,
            },
        }
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps(cfg))
        assert run_cli(
            "train", "--config", cfg_path, "--out-dir", tmp_path / "out", "--steps", 2,
        ) == 0
        capsys.readouterr()
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert len(manifest["steps"]) == 2  # flag beats config file
        assert manifest["seed"] == 2

    def test_env_seed_beats_everything(self, workdir, tmp_path, capsys, monkeypatch):
        data = workdir / "data"
        monkeypatch.setenv("CONCAPS_SEED", "99")
        assert run_cli(
            "train",
            "--corpus", data / "corpus.jsonl",
            "--entities", data / "entities.tsv",
            "--features", data / "features",
            "--out-dir", tmp_path / "out",
            "--steps", 2, "--seed", 1, "--batch-size", 5,
            "--d-model", 16, "--n-heads", 2, "--d-ff", 32, "--max-len", 24,
            "--scorer-hidden", 16, "--window-tokens", 32,
        ) == 0
        capsys.readouterr()
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["seed"] == 99

    def test_missing_corpus_is_machine_readable_error(self, tmp_path, capsys):
        code = run_cli(
            "train", "--corpus", tmp_path / "nope.jsonl",
            "--entities", tmp_path / "nope.tsv",
            "--features", tmp_path / "nofeat", "--out-dir", tmp_path / "out",
        )
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "FileNotFoundError"


class TestGenerateEvaluateCohscore:
    def decode(self, workdir, out, extra=()):
        data = workdir / "data"
        return run_cli(
            "generate",
            "--checkpoint", workdir / "run" / "checkpoint.pt",
            "--corpus", data / "corpus.jsonl",
            "--features", data / "features",
            "--out", out, "--split", "test", "--beam-size", 2, "--max-len", 12,
            *extra,
        )

    def test_generate_covers_test_split(self, workdir, tmp_path, capsys):
        out = tmp_path / "decoded.jsonl"
        assert self.decode(workdir, out) == 0
        capsys.readouterr()
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        corpus = load_corpus(workdir / "data" / "corpus.jsonl")
        expected = {
            (d.doc_id, img.image_id)
            for d in corpus if d.split == "test" for img in d.images
        }
        assert {(r["doc_id"], r["image_id"]) for r in rows} == expected
        assert all(
            set(r) == {"doc_id", "image_id", "caption", "gen_score", "vert_score", "seq_score"}
            for r in rows
        )

    def test_generate_deterministic(self, workdir, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert self.decode(workdir, a) == 0
        assert self.decode(workdir, b) == 0
        capsys.readouterr()
        assert a.read_bytes() == b.read_bytes()

    def test_evaluate_report_structure_and_determinism(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        decoded = tmp_path / "decoded.jsonl"
        assert self.decode(workdir, decoded) == 0
        r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
        for out in (r1, r2):
            assert run_cli(
                "evaluate", "--decoded", decoded,
                "--corpus", data / "corpus.jsonl",
                "--entities", data / "entities.tsv", "--out", out,
            ) == 0
        capsys.readouterr()
        assert r1.read_bytes() == r2.read_bytes()
        report = json.loads(r1.read_text())
        assert set(report["metrics"]) == {
            "bleu4", "rouge_l", "cider", "ne_precision", "ne_recall",
            "hori_coh_1", "hori_coh_2",
        }
        assert report["corpus"]["n_docs"] == 10
        assert report["n_scored"] > 0

    def test_cohscore_true_vs_scrambled_structure(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        metric_dir = tmp_path / "metric1"
        assert run_cli(
            "train",
            "--corpus", data / "corpus.jsonl",
            "--entities", data / "entities.tsv",
            "--features", data / "features",
            "--out-dir", metric_dir,
            "--steps", 3, "--seed", 3, "--batch-size", 5,
            "--d-model", 16, "--n-heads", 2, "--d-ff", 32, "--max-len", 24,
            "--scorer-hidden", 16, "--window-tokens", 32,
            "--lambda-gen", 0, "--lambda-vert", 0, "--lambda-hori1", 1, "--lambda-hori2", 0,
        ) == 0
        out_true = tmp_path / "true.json"
        assert run_cli(
            "cohscore", "--corpus", data / "corpus.jsonl",
            "--features", data / "features",
            "--metric1", metric_dir / "checkpoint.pt",
            "--captions", "true", "--split", "test", "--out", out_true,
        ) == 0
        out_scram = tmp_path / "scrambled.json"
        assert run_cli(
            "cohscore", "--corpus", data / "corpus.jsonl",
            "--features", data / "features",
            "--metric1", metric_dir / "checkpoint.pt",
            "--captions", "scrambled", "--entities", data / "entities.tsv",
            "--scramble-seed", 4, "--split", "test", "--out", out_scram,
        ) == 0
        capsys.readouterr()
        payload = json.loads(out_true.read_text())
        assert payload["captions"] == "true"
        scores = payload["scores"]["hori_coh_1"]
        assert isinstance(scores["mean"], float)
        assert all("doc_id" in e and "score" in e for e in scores["per_doc"])
        scrambled = json.loads(out_scram.read_text())
        assert scrambled["captions"] == "scrambled"

    def test_cohscore_requires_a_metric(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        code = run_cli(
            "cohscore", "--corpus", data / "corpus.jsonl", "--features", data / "features",
        )
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "ConfigError"

    def test_evaluate_coherence_requires_features(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        decoded = tmp_path / "decoded.jsonl"
        assert self.decode(workdir, decoded) == 0
        code = run_cli(
            "evaluate", "--decoded", decoded,
            "--corpus", data / "corpus.jsonl",
            "--entities", data / "entities.tsv",
            "--hori1-checkpoint", workdir / "run" / "checkpoint.pt",
        )
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "ConfigError"

    def test_mean_images_per_doc_honored(self, tmp_path, capsys):
        assert run_cli(
            "build-corpus", "--out-dir", tmp_path / "dense", "--docs", 400,
            "--images-per-doc", "4.45", "--seed", 8,
        ) == 0
        capsys.readouterr()
        corpus = load_corpus(tmp_path / "dense" / "corpus.jsonl")
        mean = sum(len(d.images) for d in corpus) / len(corpus)
        assert mean == pytest.approx(4.45, abs=0.2)
