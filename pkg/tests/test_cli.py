import json
from pathlib import Path

import numpy as np
import pytest

from rlqfs import corpus as cp
from rlqfs.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_parser, main
from rlqfs.corpus import make_synthetic_qfs, save_qfs_jsonl

FIXTURE = Path(__file__).parent / "data" / "forum_dump.jsonl"


@pytest.fixture
def qfs_corpus(tmp_path):
    examples = make_synthetic_qfs(4, 2, np.random.default_rng(0))
    path = tmp_path / "train.jsonl"
    save_qfs_jsonl(path, examples)
    return path, examples


def write_config(tmp_path, train_path, **extra) -> Path:
    lines = [
        "seed = 7",
        f'out_dir = "{tmp_path / "run"}"',
        "[model]",
        "d_model = 16",
        "n_heads = 2",
        "n_enc_layers = 1",
        "n_dec_layers = 1",
        "ffn_dim = 32",
        "max_positions = 96",
        "[train]",
        "eta = 1.0",
        "epochs = 1",
        "batch_size = 4",
        "checkpoint_every = 0",
        "min_freq = 1",
        "[gen]",
        "beam_size = 2",
        "min_tokens = 2",
        "max_tokens = 12",
        "[data]",
        f'train_path = "{train_path}"',
    ]
    for section, kv in extra.items():
        lines.append(f"[{section}]") if section else None
        for k, v in kv.items():
            lines.append(f"{k} = {v}")
    cfg = tmp_path / "run.toml"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg


class TestHelp:
    def test_every_flag_documented(self, capsys):
        parser = build_parser()
        sub_actions = next(
            a for a in parser._actions if isinstance(a, type(parser._subparsers._group_actions[0]))
        )
        for name, sp in sub_actions.choices.items():
            help_text = sp.format_help()
            for action in sp._actions:
                for opt in action.option_strings:
                    assert opt in help_text, f"{name}: {opt} missing from --help"

    def test_main_requires_subcommand(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2


class TestTrainQfs:
    def test_sl_run_completes_with_artifacts(self, tmp_path, qfs_corpus, capsys):
        train_path, examples = qfs_corpus
        cfg = write_config(tmp_path, train_path)
        assert main(["train-qfs", str(cfg)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "R-L" in out
        run = tmp_path / "run"
        assert (run / "metrics.jsonl").exists()
        assert (run / "final.ckpt").exists()
        assert (run / "vocab.txt").exists()
        assert (run / "eval.json").exists()
        lines = (run / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2  # 8 examples / batch 4, 1 epoch
        rec = json.loads(lines[0])
        assert {"step", "mle_loss", "pg_loss", "total"} <= set(rec)

    def test_missing_corpus_path_names_field(self, tmp_path, capsys):
        cfg = write_config(tmp_path, tmp_path / "absent.jsonl")
        assert main(["train-qfs", str(cfg)]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "data.train_path" in err

    def test_fixed_seed_reruns_byte_identical(self, tmp_path, qfs_corpus):
        train_path, _ = qfs_corpus
        logs = []
        for attempt in range(2):
            cfg = write_config(tmp_path, train_path)
            assert main(["train-qfs", str(cfg), "--set", f'out_dir="{tmp_path / f"r{attempt}"}"']) == EXIT_OK
            logs.append((tmp_path / f"r{attempt}" / "metrics.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_env_seed_override_changes_run(self, tmp_path, qfs_corpus, monkeypatch):
        train_path, _ = qfs_corpus
        runs = []
        for seed in ("3", "4"):
            monkeypatch.setenv("RLQFS_SEED", seed)
            cfg = write_config(tmp_path, train_path)
            assert main(["train-qfs", str(cfg), "--set", f'out_dir="{tmp_path / ("s" + seed)}"']) == EXIT_OK
            runs.append((tmp_path / ("s" + seed) / "metrics.jsonl").read_bytes())
        assert runs[0] != runs[1]

    def test_rl_mode_with_rouge_reward(self, tmp_path, qfs_corpus):
        train_path, _ = qfs_corpus
        cfg = write_config(tmp_path, train_path)
        rc = main(
            [
                "train-qfs",
                str(cfg),
                "--set",
                "train.eta=0.1",
                "--set",
                "train.total_steps=2",
                "--set",
                'train.reward="rouge_l"',
            ]
        )
        assert rc == EXIT_OK
        rec = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
        assert rec["mean_reward"] is not None

    def test_bad_preset_rejected(self, tmp_path, qfs_corpus, capsys):
        train_path, _ = qfs_corpus
        cfg = write_config(tmp_path, train_path)
        assert main(["train-qfs", str(cfg), "--set", 'preset="huge"']) == EXIT_CONFIG


class TestTrainEmbedder:
    def test_synthetic_run_reports_separation(self, tmp_path, capsys):
        out_dir = tmp_path / "emb"
        cfg = tmp_path / "emb.toml"
        cfg.write_text(
            "\n".join(
                [
                    "seed = 5",
                    f'out_dir = "{out_dir}"',
                    "[model]",
                    "d_model = 16",
                    "n_heads = 2",
                    "n_enc_layers = 1",
                    "ffn_dim = 24",
                    "max_positions = 24",
                    "[train]",
                    "epochs = 1",
                    "batch_size = 8",
                    "lr = 1e-3",
                    "mlm_weight = 0.0",
                    "min_freq = 1",
                    "[data]",
                    "synthetic_clusters = true",
                    "n_clusters = 3",
                    "per_cluster = 10",
                ]
            )
            + "\n"
        )
        assert main(["train-embedder", str(cfg)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "cluster separation" in out
        assert (out_dir / "embedder-best.ckpt").exists()
        assert (out_dir / "train_pairs.jsonl").exists()

    def test_batch_size_one_is_startup_error(self, tmp_path, capsys):
        cfg = tmp_path / "emb.toml"
        cfg.write_text('[train]\nbatch_size = 1\n[data]\nsynthetic_clusters = true\n')
        assert main(["train-embedder", str(cfg)]) == EXIT_CONFIG
        assert "batch_size" in capsys.readouterr().err

    def test_embedder_checkpoint_usable_as_reward_embedder(self, tmp_path, qfs_corpus):
        # one shared vocabulary covering both the pair corpus and the QfS corpus
        train_path, examples = qfs_corpus
        cluster_pairs = tmp_path / "pairs.jsonl"
        from rlqfs import passage_embed as pemb
        from rlqfs import ndgrad as nd

        clusters = pemb.make_synthetic_clusters(2, 6, nd.make_rng(0), pairs_per_cluster=10, heldout_per_cluster=2)
        cp.save_pairs_jsonl(cluster_pairs, clusters.train_pairs)
        texts = [t for e in examples for t in (e.query, e.document, e.summary)]
        texts += [p["p_text"] for p in clusters.train_pairs] + [p["q_text"] for p in clusters.train_pairs]
        vocab = cp.Vocabulary.build(texts, min_freq=1)
        vocab_path = tmp_path / "shared_vocab.txt"
        vocab.save(vocab_path)

        emb_cfg = tmp_path / "emb.toml"
        emb_out = tmp_path / "embrun"
        emb_cfg.write_text(
            "\n".join(
                [
                    "seed = 3",
                    f'out_dir = "{emb_out}"',
                    "[model]",
                    "d_model = 16", "n_heads = 2", "n_enc_layers = 1", "ffn_dim = 24", "max_positions = 96",
                    "[train]",
                    "epochs = 1", "batch_size = 4", "lr = 1e-3", "mlm_weight = 0.0", "min_freq = 1",
                    "[data]",
                    f'pairs_path = "{cluster_pairs}"',
                    f'vocab_path = "{vocab_path}"',
                ]
            )
            + "\n"
        )
        assert main(["train-embedder", str(emb_cfg)]) == EXIT_OK

        qfs_cfg = write_config(tmp_path, train_path)
        rc = main(
            [
                "train-qfs", str(qfs_cfg),
                "--set", "train.eta=0.1",
                "--set", "train.total_steps=2",
                "--set", 'train.reward="rouge_l+sfpeg"',
                "--set", f'train.embedder_checkpoint="{emb_out / "embedder-epoch0.ckpt"}"',
                "--set", f'data.vocab_path="{vocab_path}"',
                "--set", "model.max_positions=96",
            ]
        )
        assert rc == EXIT_OK
        rec = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[0])
        assert rec["mean_reward"] is not None


class TestGenerateAndScore:
    @pytest.fixture
    def trained_run(self, tmp_path, qfs_corpus):
        train_path, examples = qfs_corpus
        cfg = write_config(tmp_path, train_path)
        assert main(["train-qfs", str(cfg), "--set", "train.epochs=30"]) == EXIT_OK
        return tmp_path / "run", train_path, examples

    def test_generate_output_aligns_with_input(self, trained_run, tmp_path):
        run, train_path, examples = trained_run
        out = tmp_path / "gen.jsonl"
        rc = main(
            [
                "generate",
                "--checkpoint",
                str(run / "final.ckpt"),
                "--vocab",
                str(run / "vocab.txt"),
                "--input",
                str(train_path),
                "--output",
                str(out),
                "--beam",
                "2",
                "--min-tokens",
                "2",
                "--max-tokens",
                "12",
            ]
        )
        assert rc == EXIT_OK
        lines = out.read_text().splitlines()
        assert len(lines) == len(examples)
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"id", "summary"}
            assert 1 <= len(rec["summary"].split()) <= 12

    def test_generate_beam_one_equals_greedy_path(self, trained_run, tmp_path):
        run, train_path, _ = trained_run
        outs = []
        for beam in ("1", "1"):
            out = tmp_path / f"g{len(outs)}.jsonl"
            rc = main(
                [
                    "generate",
                    "--checkpoint", str(run / "final.ckpt"),
                    "--vocab", str(run / "vocab.txt"),
                    "--input", str(train_path),
                    "--output", str(out),
                    "--beam", beam, "--min-tokens", "2", "--max-tokens", "12",
                ]
            )
            assert rc == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_generate_vocab_hash_mismatch_refused(self, trained_run, tmp_path, capsys):
        run, train_path, _ = trained_run
        other_vocab = cp.Vocabulary(["completely", "different", "tokens"])
        other_path = tmp_path / "other_vocab.txt"
        other_vocab.save(other_path)
        rc = main(
            [
                "generate",
                "--checkpoint", str(run / "final.ckpt"),
                "--vocab", str(other_path),
                "--input", str(train_path),
                "--output", str(tmp_path / "no.jsonl"),
            ]
        )
        assert rc == EXIT_DATA
        assert "hash" in capsys.readouterr().err

    def test_score_reference_copy_is_100(self, tmp_path, qfs_corpus, capsys):
        train_path, examples = qfs_corpus
        refs = tmp_path / "refs.jsonl"
        with open(refs, "w") as f:
            for e in examples:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
        rc = main(["score", "--references", str(refs), "--hypotheses", str(refs)])
        assert rc == EXIT_OK
        out = capsys.readouterr().out
        mean_line = [l for l in out.splitlines() if l.startswith("mean")][0]
        assert "100.00" in mean_line

    def test_score_id_mismatch_lists_ids(self, tmp_path, qfs_corpus, capsys):
        train_path, examples = qfs_corpus
        refs = tmp_path / "refs.jsonl"
        hyps = tmp_path / "hyps.jsonl"
        with open(refs, "w") as f:
            for e in examples:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
        with open(hyps, "w") as f:
            for e in examples[:-1]:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
        rc = main(["score", "--references", str(refs), "--hypotheses", str(hyps)])
        assert rc == EXIT_DATA
        assert examples[-1].id in capsys.readouterr().err

    def test_score_empty_hypotheses_is_error(self, tmp_path, qfs_corpus, capsys):
        train_path, examples = qfs_corpus
        refs = tmp_path / "refs.jsonl"
        with open(refs, "w") as f:
            for e in examples:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["score", "--references", str(refs), "--hypotheses", str(empty)]) == EXIT_DATA

    def test_score_per_example_report(self, tmp_path, qfs_corpus):
        train_path, examples = qfs_corpus
        refs = tmp_path / "refs.jsonl"
        with open(refs, "w") as f:
            for e in examples:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
        report = tmp_path / "report.jsonl"
        rc = main(
            ["score", "--references", str(refs), "--hypotheses", str(refs), "--output", str(report), "--metrics", "rougeL,length"]
        )
        assert rc == EXIT_OK
        recs = [json.loads(l) for l in report.read_text().splitlines()]
        assert len(recs) == len(examples)
        assert all(set(r) == {"id", "rougeL", "length"} for r in recs)

    def test_score_values_match_reward_module(self, tmp_path, qfs_corpus):
        from rlqfs.rewards import bleu_mean, rouge_l

        train_path, examples = qfs_corpus
        refs = tmp_path / "refs.jsonl"
        hyps = tmp_path / "hyps.jsonl"
        with open(refs, "w") as f, open(hyps, "w") as g:
            for e in examples:
                f.write(json.dumps({"id": e.id, "summary": e.summary}) + "\n")
                g.write(json.dumps({"id": e.id, "summary": e.query}) + "\n")  # deliberately weak hypotheses
        report = tmp_path / "scored.jsonl"
        rc = main(["score", "--references", str(refs), "--hypotheses", str(hyps), "--output", str(report)])
        assert rc == EXIT_OK
        by_id = {e.id: e for e in examples}
        for line in report.read_text().splitlines():
            rec = json.loads(line)
            e = by_id[rec["id"]]
            assert rec["rougeL"] == pytest.approx(100.0 * rouge_l(e.summary, e.query, "f"), rel=1e-9)
            assert rec["bleu"] == pytest.approx(100.0 * bleu_mean(e.summary, e.query), rel=1e-9)


class TestIngest:
    def test_fixture_counts_and_idempotence(self, tmp_path, capsys):
        out1 = tmp_path / "i1"
        out2 = tmp_path / "i2"
        for out in (out1, out2):
            rc = main(["ingest", "--dump", str(FIXTURE), "--test-forum", "whyfive", "--out-dir", str(out)])
            assert rc == EXIT_OK
        stats = json.loads((out1 / "stats.json").read_text())
        assert stats["train"]["n_questions"] == 1
        assert stats["test"]["n_questions"] == 2
        assert stats["test"]["n_pairs"] == 4
        assert (out1 / "train_pairs.jsonl").read_bytes() == (out2 / "train_pairs.jsonl").read_bytes()
        assert (out1 / "test_pairs.jsonl").read_bytes() == (out2 / "test_pairs.jsonl").read_bytes()
        out = capsys.readouterr().out
        assert "questions" in out and "words/answer" in out

    def test_malformed_dump_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"post_id": "a", "forum": "f", "score": 2, "title": "t", "comments": []}\nnot json\n')
        rc = main(["ingest", "--dump", str(bad), "--test-forum", "x", "--out-dir", str(tmp_path / "o")])
        assert rc == EXIT_DATA
        assert ":2:" in capsys.readouterr().err


class TestBenchComplexity:
    def test_table_and_slopes(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        rc = main(["bench-complexity", "--lengths", "8,16,32,64", "--output", str(out)])
        assert rc == EXIT_OK
        text = capsys.readouterr().out
        assert "sequential" in text and "two_pass" in text and "slope" in text
        payload = json.loads(out.read_text())
        assert payload["two_pass"] == [2 * n * n for n in (8, 16, 32, 64)]

    def test_needs_two_lengths(self, capsys):
        assert main(["bench-complexity", "--lengths", "16"]) == EXIT_CONFIG
