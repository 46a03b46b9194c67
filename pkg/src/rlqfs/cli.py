"""Operator command line.

Subcommands: train-qfs, train-embedder, generate, score, ingest,
bench-complexity. Runs are configured by a TOML file plus --set overrides;
RLQFS_SEED in the environment beats the configured seed. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from rlqfs import corpus as cp
from rlqfs import decode as dc
from rlqfs import ndgrad as nd
from rlqfs import passage_embed as pemb
from rlqfs import train as tr
from rlqfs.errors import (
    CheckpointFormatError,
    ConfigError,
    DataError,
    NumericAbort,
    RlqfsError,
)
from rlqfs.model import ModelConfig
from rlqfs.rewards import parse_reward_spec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


DESK_DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "out_dir": "runs/out",
    "model": {
        "d_model": 64,
        "n_heads": 4,
        "n_enc_layers": 2,
        "n_dec_layers": 2,
        "ffn_dim": 128,
        "max_positions": 256,
        "dropout_p": 0.0,
    },
    "train": {
        "eta": 0.1,
        "reward": "rouge_l",
        "rouge_variant": "recall",
        "bleu_smoothing": "epsilon",
        "optimizer": "adam",
        "lr": 0.0,  # 0 -> mode default (SL 3e-4 / RL 1e-5 at desk scale)
        "batch_size": 8,
        "epochs": 5,
        "total_steps": 0,  # 0 -> epochs * steps_per_epoch
        "grad_clip": 1.0,
        "checkpoint_every": 100,
        "eval_every": 0,
        "init_checkpoint": "",
        "resume_checkpoint": "",
        "embedder_checkpoint": "",
        "mlm_weight": 1.0,
        "min_freq": 2,
        "ss_ramp_end": 0.0,
    },
    "gen": {
        "beam_size": 4,
        "min_tokens": 4,
        "max_tokens": 64,
        "gumbel_temperature": 1.0,
        "sampling_mix_prob": 1.0,
        "length_norm_exponent": 0.75,
    },
    "data": {
        "train_path": "",
        "eval_path": "",
        "vocab_path": "",
        "pairs_path": "",
        "test_pairs_path": "",
        "synthetic_clusters": False,
        "n_clusters": 8,
        "per_cluster": 50,
    },
}

PAPER_OVERRIDES = {
    "train": {"eta": 0.1, "batch_size": 128, "epochs": 5, "optimizer": "adam"},
    "gen": {"beam_size": 15, "min_tokens": 64, "max_tokens": 256},
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_set(pairs: Sequence[str]) -> dict:
    out: dict = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def load_run_config(path: str, overrides: Sequence[str]) -> dict:
    try:
        with open(path, "rb") as f:
            file_cfg = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path!r} does not exist")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config file {path!r} is not valid TOML: {e}")
    set_cfg = _parse_set(overrides)
    preset = _deep_merge(_deep_merge(DESK_DEFAULTS, file_cfg), set_cfg).get("preset")
    if preset not in ("desk", "paper"):
        raise ConfigError(f"preset: unknown preset {preset!r}")
    cfg = DESK_DEFAULTS
    if preset == "paper":
        cfg = _deep_merge(cfg, PAPER_OVERRIDES)
    cfg = _deep_merge(cfg, file_cfg)  # explicit file values beat preset pins
    cfg = _deep_merge(cfg, set_cfg)
    if "RLQFS_SEED" in os.environ:
        try:
            cfg["seed"] = int(os.environ["RLQFS_SEED"])
        except ValueError:
            raise ConfigError(f"RLQFS_SEED must be an integer, got {os.environ['RLQFS_SEED']!r}")
    return cfg


def _require_path(cfg_value: str, field: str) -> Path:
    if not cfg_value:
        raise ConfigError(f"{field}: path is required")
    p = Path(cfg_value)
    if not p.exists():
        raise ConfigError(f"{field}: path {cfg_value!r} does not exist")
    return p


def _model_config(vocab_size: int, model_cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=vocab_size, **model_cfg)
    except TypeError as e:
        raise ConfigError(f"[model]: {e}")


def _resolved_lr(train_cfg: dict, preset: str) -> float:
    lr = float(train_cfg["lr"])
    if lr > 0:
        return lr
    supervised = float(train_cfg["eta"]) >= 1.0
    if preset == "paper":
        return 2e-5 if supervised else 5e-7
    return 3e-4 if supervised else 1e-5


def _jsonl_writer(path: Path):
    f = open(path, "w", encoding="utf-8")

    def write(record: dict):
        f.write(json.dumps(record, sort_keys=True) + "\n")
        f.flush()

    write.close = f.close  # type: ignore[attr-defined]
    return write


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_qfs(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    train_path = _require_path(cfg["data"]["train_path"], "data.train_path")
    examples = cp.load_qfs_jsonl(train_path)
    if not examples:
        raise DataError(f"{train_path}: corpus is empty")

    if cfg["data"]["vocab_path"]:
        vocab = cp.Vocabulary.load(_require_path(cfg["data"]["vocab_path"], "data.vocab_path"))
    else:
        vocab = cp.Vocabulary.build(
            [t for e in examples for t in (e.query, e.document, e.summary)],
            min_freq=int(cfg["train"]["min_freq"]),
        )
    vocab.save(out_dir / "vocab.txt")

    seed = int(cfg["seed"])
    eta = float(cfg["train"]["eta"])
    reward_spec = None
    embedder = None
    if eta < 1.0:
        reward_spec = parse_reward_spec(
            cfg["train"]["reward"],
            rouge_variant=cfg["train"]["rouge_variant"],
            bleu_smoothing=cfg["train"]["bleu_smoothing"],
        )
        if reward_spec.needs_embedder:
            ckpt = _require_path(cfg["train"]["embedder_checkpoint"], "train.embedder_checkpoint")
            emb_state = pemb.load_embedder_checkpoint(ckpt, expect_vocab_hash=vocab.content_hash)
            embedder = pemb.PassageEmbedderHandle(emb_state.encoder, vocab)

    gen_cfg = dc.GenConfig(
        beam_size=int(cfg["gen"]["beam_size"]),
        min_tokens=int(cfg["gen"]["min_tokens"]),
        max_tokens=int(cfg["gen"]["max_tokens"]),
        gumbel_temperature=float(cfg["gen"]["gumbel_temperature"]),
        sampling_mix_prob=float(cfg["gen"]["sampling_mix_prob"]),
        length_norm_exponent=float(cfg["gen"]["length_norm_exponent"]),
    )
    loss_cfg = tr.LossConfig(
        eta=eta,
        reward_spec=reward_spec,
        grad_clip=float(cfg["train"]["grad_clip"]) or None,
    )

    if cfg["train"]["resume_checkpoint"]:
        state = tr.load_train_state(
            _require_path(cfg["train"]["resume_checkpoint"], "train.resume_checkpoint"),
            expect_vocab_hash=vocab.content_hash,
        )
    else:
        model_cfg = _model_config(len(vocab), cfg["model"])
        model = tr.Seq2SeqModel(model_cfg, nd.derive_rng(seed, "qfs-init"))
        if cfg["train"]["init_checkpoint"]:
            warm = tr.load_train_state(
                _require_path(cfg["train"]["init_checkpoint"], "train.init_checkpoint"),
                expect_vocab_hash=vocab.content_hash,
            )
            if warm.model.cfg != model_cfg:
                raise ConfigError("train.init_checkpoint: model config differs from this run's [model]")
            for name, p in model.params.items():
                p.data = warm.model.params[name].data.copy()
        state = tr.TrainState(
            model=model,
            optimizer=nd.make_optimizer(
                cfg["train"]["optimizer"], model.params, _resolved_lr(cfg["train"], cfg["preset"])
            ),
            rng=nd.derive_rng(seed, "qfs-train"),
            base_seed=seed,
        )

    batch_size = int(cfg["train"]["batch_size"])
    steps_per_epoch = max(1, -(-len(examples) // batch_size))
    total_steps = int(cfg["train"]["total_steps"]) or int(cfg["train"]["epochs"]) * steps_per_epoch

    eval_examples = None
    if cfg["data"]["eval_path"]:
        eval_examples = cp.load_qfs_jsonl(_require_path(cfg["data"]["eval_path"], "data.eval_path"))

    metrics = _jsonl_writer(out_dir / "metrics.jsonl")
    try:
        tr.run_qfs_training(
            state,
            examples,
            loss_cfg,
            gen_cfg,
            vocab,
            total_steps=total_steps,
            batch_size=batch_size,
            embedder=embedder,
            metrics_writer=metrics,
            checkpoint_every=int(cfg["train"]["checkpoint_every"]),
            checkpoint_path=out_dir / "checkpoint.ckpt",
            eval_every=int(cfg["train"]["eval_every"]),
            eval_examples=eval_examples,
            ss_ramp_end=float(cfg["train"]["ss_ramp_end"]),
        )
    finally:
        metrics.close()
    tr.save_train_state(out_dir / "final.ckpt", state, vocab.content_hash)

    report = tr.evaluate(state.model, eval_examples or examples, gen_cfg, vocab)
    (out_dir / "eval.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"steps: {state.step}")
    print(f"R-1 {report['rouge1']:.2f}  R-2 {report['rouge2']:.2f}  R-L {report['rougeL']:.2f}")
    print(f"mean generation length: {report['mean_len']:.1f} words")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_train_embedder(args) -> int:
    cfg = load_run_config(args.config, args.set or [])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    batch_size = int(cfg["train"]["batch_size"])
    if batch_size < 2:
        raise ConfigError("train.batch_size: in-batch negatives need at least 2 pairs per batch")

    heldout = []
    test_pairs: List[dict] = []
    if cfg["data"]["synthetic_clusters"]:
        cluster_corpus = pemb.make_synthetic_clusters(
            int(cfg["data"]["n_clusters"]),
            int(cfg["data"]["per_cluster"]),
            nd.derive_rng(seed, "clusters"),
        )
        pairs = cluster_corpus.train_pairs
        test_pairs = cluster_corpus.test_pairs
        heldout = cluster_corpus.heldout
        cp.save_pairs_jsonl(out_dir / "train_pairs.jsonl", pairs)
    else:
        pairs = cp.load_pairs_jsonl(_require_path(cfg["data"]["pairs_path"], "data.pairs_path"))
        if cfg["data"]["test_pairs_path"]:
            raw = Path(cfg["data"]["test_pairs_path"]).read_text(encoding="utf-8")
            test_pairs = [json.loads(line) for line in raw.splitlines() if line.strip()]
    if not pairs:
        raise DataError("pair corpus is empty")

    texts = [p["p_text"] for p in pairs] + [p["q_text"] for p in pairs]
    if cfg["data"]["vocab_path"]:
        vocab = cp.Vocabulary.load(_require_path(cfg["data"]["vocab_path"], "data.vocab_path"))
    else:
        vocab = cp.Vocabulary.build(texts, min_freq=int(cfg["train"]["min_freq"]))
    vocab.save(out_dir / "vocab.txt")

    model_cfg = _model_config(len(vocab), {**cfg["model"], "n_dec_layers": 0})
    metrics = _jsonl_writer(out_dir / "metrics.jsonl")
    try:
        state, history = pemb.train_embedder(
            pairs,
            vocab,
            model_cfg,
            seed=seed,
            epochs=int(cfg["train"]["epochs"]),
            batch_size=batch_size,
            lr=_resolved_lr(cfg["train"], cfg["preset"]),
            mlm_weight=float(cfg["train"]["mlm_weight"]),
            grad_clip=float(cfg["train"]["grad_clip"]) or None,
            test_pairs=test_pairs,
            heldout=heldout,
            metrics_writer=metrics,
            checkpoint_dir=str(out_dir),
        )
    finally:
        metrics.close()
    last = history[-1] if history else {}
    print(f"steps: {state.step}")
    if "test_pe_loss" in last:
        print(f"test pair loss: {last['test_pe_loss']:.4f}")
    if "gap" in last:
        print(f"cluster separation (intra - inter cosine): {last['gap']:.4f}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    vocab = cp.Vocabulary.load(_require_path(args.vocab, "--vocab"))
    state = tr.load_train_state(_require_path(args.checkpoint, "--checkpoint"), expect_vocab_hash=vocab.content_hash)
    gen_cfg = dc.GenConfig(
        beam_size=args.beam,
        min_tokens=args.min_tokens,
        max_tokens=args.max_tokens,
    )
    in_path = _require_path(args.input, "--input")
    records = []
    with open(in_path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append((str(rec["id"]), rec["query"], rec["document"]))
            except (KeyError, ValueError) as e:
                raise DataError(f"{in_path}:{lineno}: bad input record ({e})")
    with open(args.output, "w", encoding="utf-8") as out:
        for rid, query, document in records:
            enc_ids = cp.make_encoder_input(
                vocab.encode(query), vocab.encode(document), state.model.cfg.max_positions
            )
            ids = dc.beam_search(state.model, enc_ids, gen_cfg)
            out.write(json.dumps({"id": rid, "summary": vocab.decode(ids)}, sort_keys=True) + "\n")
    print(f"wrote {len(records)} summaries to {args.output}")
    return EXIT_OK


def _load_id_text(path, field: str = "summary") -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["id"])] = rec[field]
            except (KeyError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: bad record ({e})")
    return out


def cmd_score(args) -> int:
    refs = _load_id_text(_require_path(args.references, "--references"))
    hyps = _load_id_text(_require_path(args.hypotheses, "--hypotheses"))
    if not hyps:
        raise DataError(f"{args.hypotheses}: no hypotheses found")
    if not refs:
        raise DataError(f"{args.references}: no references found")
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        raise DataError(
            f"id mismatch: missing hypotheses for {missing or 'none'}, unmatched hypotheses {extra or 'none'}"
        )
    ids = sorted(refs)
    rows, means = tr.score_corpus([refs[i] for i in ids], [hyps[i] for i in ids])
    wanted = args.metrics.split(",") if args.metrics else ["rouge1", "rouge2", "rougeL", "bleu", "length"]
    for m in wanted:
        if m not in rows[0]:
            raise ConfigError(f"--metrics: unknown metric {m!r}")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            for rid, row in zip(ids, rows):
                rec = {"id": rid}
                rec.update({k: row[k] for k in wanted})
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    header = "id".ljust(16) + "".join(m.rjust(10) for m in wanted)
    print(header)
    for rid, row in zip(ids, rows):
        print(rid[:15].ljust(16) + "".join(f"{row[m]:10.2f}" for m in wanted))
    print("-" * len(header))
    print("mean".ljust(16) + "".join(f"{means[m]:10.2f}" for m in wanted))
    return EXIT_OK


def cmd_ingest(args) -> int:
    dump = cp.load_forum_dump(_require_path(args.dump, "--dump"))
    groups = cp.filter_forum_dump(dump)
    train, test = cp.split_by_forum(groups, args.test_forum)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cp.save_pairs_jsonl(out_dir / "train_pairs.jsonl", cp.make_pair_corpus(train))
    cp.save_pairs_jsonl(out_dir / "test_pairs.jsonl", cp.make_pair_corpus(test))
    stats = {"train": cp.ingest_stats(train), "test": cp.ingest_stats(test)}
    (out_dir / "stats.json").write_text(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    for split in ("train", "test"):
        s = stats[split]
        print(
            f"{split}: questions {s['n_questions']}, answers/question {s['avg_answers_per_question']:.2f}, "
            f"words/answer {s['avg_words_per_answer']:.1f}, pairs {s['n_pairs']}"
        )
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_bench_complexity(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    if len(lengths) < 2:
        raise ConfigError("--lengths: need at least two lengths to fit slopes")
    model = dc._bench_model(max(lengths) + 1)
    rows = []
    for n in lengths:
        seq = dc.count_decode_cost(dc.SEQUENTIAL, n, model)
        two = dc.count_decode_cost(dc.TWO_PASS, n, model)
        rows.append((n, seq, two))
    seq_slope = float(np.polyfit(np.log([r[0] for r in rows]), np.log([r[1] for r in rows]), 1)[0])
    two_slope = float(np.polyfit(np.log([r[0] for r in rows]), np.log([r[2] for r in rows]), 1)[0])
    print(f"{'length':>8} {'sequential':>14} {'two_pass':>14} {'ratio':>8}")
    for n, seq, two in rows:
        print(f"{n:>8} {seq:>14} {two:>14} {seq / two:>8.2f}")
    print(f"log-log slope: sequential {seq_slope:.3f}, two-pass {two_slope:.3f}")
    if args.output:
        payload = {
            "lengths": lengths,
            "sequential": [r[1] for r in rows],
            "two_pass": [r[2] for r in rows],
            "sequential_slope": seq_slope,
            "two_pass_slope": two_slope,
        }
        Path(args.output).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlqfs",
        description="Query-focused summarization trained with policy gradients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-qfs", help="train the summarizer (SL via eta=1, RL otherwise)")
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted key)")
    p.set_defaults(fn=cmd_train_qfs)

    p = sub.add_parser("train-embedder", help="train the passage embedder on positive pairs")
    p.add_argument("config", help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted key)")
    p.set_defaults(fn=cmd_train_embedder)

    p = sub.add_parser("generate", help="beam-search summaries for a QfS input file")
    p.add_argument("--checkpoint", required=True, help="summarizer checkpoint")
    p.add_argument("--vocab", required=True, help="vocabulary file matching the checkpoint")
    p.add_argument("--input", required=True, help="JSONL with id/query/document")
    p.add_argument("--output", required=True, help="JSONL of id/summary to write")
    p.add_argument("--beam", type=int, default=4, help="beam size")
    p.add_argument("--min-tokens", type=int, default=4, help="minimum generated tokens")
    p.add_argument("--max-tokens", type=int, default=64, help="maximum generated tokens")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("score", help="score hypothesis summaries against references")
    p.add_argument("--references", required=True, help="JSONL with id/summary reference records")
    p.add_argument("--hypotheses", required=True, help="JSONL with id/summary hypothesis records")
    p.add_argument("--metrics", default="", help="comma list: rouge1,rouge2,rougeL,bleu,length")
    p.add_argument("--output", default="", help="optional per-example JSONL report path")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("ingest", help="filter a forum dump into a passage-pair corpus")
    p.add_argument("--dump", required=True, help="forum dump JSONL")
    p.add_argument("--test-forum", required=True, help="forum whose posts become the test split")
    p.add_argument("--out-dir", required=True, help="directory for pair corpora and stats")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("bench-complexity", help="count attention scores for both decode modes")
    p.add_argument("--lengths", default="16,32,64,128,256,512", help="comma list of lengths")
    p.add_argument("--output", default="", help="optional JSON report path")
    p.set_defaults(fn=cmd_bench_complexity)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RlqfsError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
