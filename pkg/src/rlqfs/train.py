"""Mixed MLE + policy-gradient training for the query-focused summarizer.

Per example and step: teacher-forced pass-1 logits give the MLE term; the
two-pass decode yields a sampled trajectory whose pass-2 log-probs carry the
policy-gradient term, weighted by the self-critical advantage (sampled
reward minus greedy-decode reward). The two terms combine as
eta * MLE + (1 - eta) * PG.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rlqfs import ndgrad as nd
from rlqfs.checkpoint import check_vocab_hash, read_checkpoint, write_checkpoint
from rlqfs.corpus import BOS, EOS, PAD, QfsExample, Vocabulary, make_encoder_input, normalize
from rlqfs.decode import GenConfig, Trajectory, beam_search, greedy_decode, two_pass_decode
from rlqfs.errors import CheckpointFormatError, ContractError, NumericAbort, NumericInputError
from rlqfs.model import ModelConfig, Seq2SeqModel
from rlqfs.ndgrad import Tensor
from rlqfs.rewards import RewardFn, RewardSpec, bleu_mean, make_reward_fn, rouge_l


@dataclass(frozen=True)
class LossConfig:
    eta: float = 0.1
    reward_spec: Optional[RewardSpec] = None
    grad_clip: Optional[float] = 1.0
    horizon_policy: str = "gold"  # training episodes run to the gold length

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"eta must lie in [0, 1], got {self.eta}")
        if self.eta < 1.0 and self.reward_spec is None:
            raise ContractError("a reward spec is required when eta < 1")
        if self.horizon_policy != "gold":
            raise ContractError(f"unsupported horizon policy {self.horizon_policy!r}")


@dataclass
class TrainState:
    model: Seq2SeqModel
    optimizer: object
    rng: np.random.Generator
    base_seed: int
    step: int = 0
    epoch: int = 0
    best_eval: Optional[dict] = None


# ---------------------------------------------------------------------------
# losses


def mle_loss(pass1_logits: Tensor, gold_ids: Sequence[int]) -> Tensor:
    """Negative log-likelihood of the gold tokens, summed over non-pad steps."""
    gold = np.asarray(gold_ids, dtype=np.int64)
    if pass1_logits.ndim != 2 or gold.ndim != 1 or pass1_logits.shape[0] != gold.shape[0]:
        raise ContractError(
            f"logits {pass1_logits.shape} do not align with {gold.shape[0]} gold tokens"
        )
    keep = gold != PAD
    if not keep.any():
        raise ContractError("gold sequence is all padding")
    rows = np.nonzero(keep)[0]
    logp = nd.log_softmax(pass1_logits, axis=-1)
    picked = nd.gather_pairs(logp, rows, gold[rows])
    return nd.mul(nd.tsum(picked), -1.0)


def self_critical_advantage(
    reward_fn: RewardFn,
    reference: str,
    sampled: Trajectory,
    greedy: Trajectory,
    vocab: Vocabulary,
) -> float:
    """R(sampled) - R(greedy); the greedy decode is the baseline."""
    r_sampled = reward_fn(reference, vocab.decode(sampled.token_ids))
    r_greedy = reward_fn(reference, vocab.decode(greedy.token_ids))
    return r_sampled - r_greedy


def pg_loss(traj: Trajectory, advantage: float) -> Tensor:
    """-(advantage) * sum of step log-probs; the advantage is a constant."""
    if not traj.token_ids:
        raise ContractError("policy-gradient loss over an empty trajectory")
    return nd.mul(traj.logprob_sum(), -float(advantage))


def mixed_loss(mle: Tensor, pg: Tensor, eta: float) -> Tensor:
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    return nd.add(nd.mul(mle, eta), nd.mul(pg, 1.0 - eta))


# ---------------------------------------------------------------------------
# step


def prepare_example(ex: QfsExample, vocab: Vocabulary, max_positions: int) -> Tuple[List[int], List[int], str]:
    """(encoder input ids, gold decoder targets ending in EOS, reference text)."""
    enc_ids = make_encoder_input(vocab.encode(ex.query), vocab.encode(ex.document), max_positions)
    gold = vocab.encode(ex.summary)[: max_positions - 1] + [EOS]
    return enc_ids, gold, normalize(ex.summary)


def train_step(
    state: TrainState,
    batch: Sequence[QfsExample],
    loss_cfg: LossConfig,
    gen_cfg: GenConfig,
    vocab: Vocabulary,
    embedder=None,
    ss_mix: float = 0.0,
) -> dict:
    """One optimizer update over a batch; deterministic given (rng, batch).

    With eta == 1 the reward machinery short-circuits entirely and the step
    is plain supervised training; a nonzero ss_mix turns that supervised
    step into scheduled sampling (cross-entropy against gold on the pass-2
    logits, whose inputs mix sampled embeddings in with probability
    ss_mix).
    """
    if not batch:
        raise ContractError("empty batch")
    model = state.model
    supervised_only = loss_cfg.eta == 1.0
    reward_fn = None
    if not supervised_only:
        reward_fn = make_reward_fn(loss_cfg.reward_spec, embedder)

    state.optimizer.zero_grad()
    scale = 1.0 / len(batch)
    mle_vals, pg_vals, total_vals = [], [], []
    rewards_sampled, advantages, traj_lens = [], [], []

    for ex in batch:
        enc_ids, gold, reference = prepare_example(ex, vocab, model.cfg.max_positions)
        try:
            if supervised_only:
                if ss_mix > 0.0:
                    result = two_pass_decode(
                        model,
                        enc_ids,
                        gold,
                        replace(gen_cfg, sampling_mix_prob=ss_mix),
                        state.rng,
                        train=True,
                    )
                    l_mle = mle_loss(result.pass2_logits, gold)
                else:
                    memory = model.encode(enc_ids, train=True, rng=state.rng)
                    keep = np.asarray(enc_ids, dtype=np.int64) != PAD
                    logits = model.decoder_forward(
                        [BOS] + gold[:-1], memory, memory_pad_mask=keep, train=True, rng=state.rng
                    )
                    l_mle = mle_loss(logits, gold)
                l_total = l_mle
                l_pg = None
            else:
                pass1_logits, traj, _ = two_pass_decode(
                    model, enc_ids, gold, gen_cfg, state.rng, train=True
                )
                greedy = greedy_decode(model, enc_ids, gen_cfg)
                advantage = self_critical_advantage(reward_fn, reference, traj, greedy, vocab)
                l_mle = mle_loss(pass1_logits, gold)
                l_pg = pg_loss(traj, advantage)
                l_total = mixed_loss(l_mle, l_pg, loss_cfg.eta)
                rewards_sampled.append(reward_fn(reference, vocab.decode(traj.token_ids)))
                advantages.append(advantage)
                traj_lens.append(len(traj.token_ids))
        except NumericInputError as e:
            raise NumericAbort(
                f"non-finite activations on example {ex.id!r} at step {state.step}: {e}"
            ) from e

        if not math.isfinite(l_total.item()):
            raise NumericAbort(
                f"non-finite loss on example {ex.id!r} at step {state.step}: "
                f"mle={l_mle.item()!r} pg={None if l_pg is None else l_pg.item()!r}"
            )
        nd.backward(nd.mul(l_total, scale))
        mle_vals.append(l_mle.item())
        pg_vals.append(0.0 if l_pg is None else l_pg.item())
        total_vals.append(l_total.item())

    grad_norm = (
        nd.clip_grad_norm(model.params, loss_cfg.grad_clip) if loss_cfg.grad_clip else 0.0
    )
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "mle_loss": float(np.mean(mle_vals)),
        "pg_loss": float(np.mean(pg_vals)),
        "total": float(np.mean(total_vals)),
        "mean_reward": float(np.mean(rewards_sampled)) if rewards_sampled else None,
        "mean_advantage": float(np.mean(advantages)) if advantages else None,
        "mean_traj_len": float(np.mean(traj_lens)) if traj_lens else None,
        "grad_norm": grad_norm,
    }


# ---------------------------------------------------------------------------
# evaluation


def _ngram_f1(ref: List[str], hyp: List[str], n: int) -> float:
    ref_counts = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
    hyp_counts = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
    match = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    total_ref = sum(ref_counts.values())
    total_hyp = sum(hyp_counts.values())
    if total_ref == 0 and total_hyp == 0:
        return 1.0
    if match == 0 or total_ref == 0 or total_hyp == 0:
        return 0.0
    p = match / total_hyp
    r = match / total_ref
    return 2 * p * r / (p + r)


def rouge_n_f(reference: str, hypothesis: str, n: int) -> float:
    from rlqfs.corpus import split_words

    return _ngram_f1(split_words(reference), split_words(hypothesis), n)


def teacher_forced_accuracy(
    model: Seq2SeqModel, examples: Sequence[QfsExample], vocab: Vocabulary
) -> float:
    """Fraction of gold tokens ranked first under teacher forcing."""
    hits = total = 0
    with nd.no_grad():
        for ex in examples:
            enc_ids, gold, _ = prepare_example(ex, vocab, model.cfg.max_positions)
            memory = model.encode(enc_ids)
            keep = np.asarray(enc_ids, dtype=np.int64) != PAD
            logits = model.decoder_forward([BOS] + gold[:-1], memory, memory_pad_mask=keep)
            pred = logits.data.argmax(axis=1)
            hits += int((pred == np.asarray(gold)).sum())
            total += len(gold)
    return hits / total


def score_pair(reference: str, hypothesis: str) -> dict:
    """ROUGE-1/2 F1 and ROUGE-L F (reported x100), BLEU mean, word length."""
    return {
        "rouge1": 100.0 * rouge_n_f(reference, hypothesis, 1),
        "rouge2": 100.0 * rouge_n_f(reference, hypothesis, 2),
        "rougeL": 100.0 * rouge_l(reference, hypothesis, "f"),
        "bleu": 100.0 * bleu_mean(reference, hypothesis),
        "length": len(hypothesis.split()),
    }


def score_corpus(references: Sequence[str], hypotheses: Sequence[str]) -> Tuple[List[dict], dict]:
    """Per-pair scores plus corpus means."""
    if len(references) != len(hypotheses):
        raise ContractError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    rows = [score_pair(r, h) for r, h in zip(references, hypotheses)]
    means = {k: float(np.mean([row[k] for row in rows])) for k in rows[0]} if rows else {}
    means["n_examples"] = len(rows)
    return rows, means


def evaluate(
    model: Seq2SeqModel,
    examples: Sequence[QfsExample],
    gen_cfg: GenConfig,
    vocab: Vocabulary,
) -> dict:
    """Beam-search generations scored with ROUGE-1/2 F1, ROUGE-L F (x100),
    plus mean generation length in words."""
    if not examples:
        raise ContractError("evaluate on an empty corpus")
    refs, hyps = [], []
    for ex in examples:
        enc_ids, _, reference = prepare_example(ex, vocab, model.cfg.max_positions)
        refs.append(reference)
        hyps.append(vocab.decode(beam_search(model, enc_ids, gen_cfg)))
    _, means = score_corpus(refs, hyps)
    return {
        "rouge1": means["rouge1"],
        "rouge2": means["rouge2"],
        "rougeL": means["rougeL"],
        "mean_len": means["length"],
        "n_examples": len(examples),
    }


def mean_greedy_rouge_l(
    model: Seq2SeqModel,
    examples: Sequence[QfsExample],
    gen_cfg: GenConfig,
    vocab: Vocabulary,
    variant: str = "f",
) -> float:
    scores = []
    for ex in examples:
        enc_ids, _, reference = prepare_example(ex, vocab, model.cfg.max_positions)
        traj = greedy_decode(model, enc_ids, gen_cfg)
        scores.append(rouge_l(reference, vocab.decode(traj.token_ids), variant))
    return 100.0 * float(np.mean(scores))


# ---------------------------------------------------------------------------
# checkpointing


def save_train_state(path, state: TrainState, vocab_hash: str) -> None:
    header = {
        "format_version": 1,
        "kind": "seq2seq",
        "model_config": state.model.cfg.to_dict(),
        "vocab_hash": vocab_hash,
        "base_seed": state.base_seed,
        "rng_state": nd.rng_state(state.rng),
        "step": state.step,
        "epoch": state.epoch,
        "best_eval": state.best_eval,
        "optimizer": state.optimizer.config(),
    }
    tensors = {f"model.{k}": p.data for k, p in state.model.params.items()}
    for k, arr in state.optimizer.state_tensors().items():
        tensors[f"opt.{k}"] = arr
    write_checkpoint(path, header, tensors)


def load_train_state(path, expect_vocab_hash: Optional[str] = None) -> TrainState:
    header, tensors = read_checkpoint(path)
    if header.get("kind") != "seq2seq":
        raise CheckpointFormatError(f"{path}: not a summarizer checkpoint")
    if expect_vocab_hash is not None:
        check_vocab_hash(header, expect_vocab_hash, path)
    cfg = ModelConfig.from_dict(header["model_config"])
    model = Seq2SeqModel(cfg, np.random.default_rng(0))
    for name, p in model.params.items():
        key = f"model.{name}"
        if key not in tensors:
            raise CheckpointFormatError(f"{path}: missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise CheckpointFormatError(f"{path}: shape mismatch for {key!r}")
        p.data = tensors[key]
    opt_cfg = dict(header["optimizer"])
    opt = nd.make_optimizer(opt_cfg.pop("kind"), model.params, **opt_cfg)
    opt.load_state_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
    return TrainState(
        model=model,
        optimizer=opt,
        rng=nd.restore_rng(header["rng_state"]),
        base_seed=header["base_seed"],
        step=header["step"],
        epoch=header["epoch"],
        best_eval=header["best_eval"],
    )


# ---------------------------------------------------------------------------
# loop


def metrics_line(report: dict) -> str:
    return json.dumps(report, sort_keys=True)


def run_qfs_training(
    state: TrainState,
    examples: Sequence[QfsExample],
    loss_cfg: LossConfig,
    gen_cfg: GenConfig,
    vocab: Vocabulary,
    *,
    total_steps: int,
    batch_size: int,
    embedder=None,
    metrics_writer=None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    eval_every: int = 0,
    eval_examples: Optional[Sequence[QfsExample]] = None,
    ss_ramp_end: float = 0.0,
    stop_fn=None,
) -> List[dict]:
    """Drive train_step for total_steps, batching by per-epoch permutations.

    The batch order for epoch e comes from a stream derived from
    (base_seed, e), so a run resumed from any step checkpoint sees exactly
    the batches the uninterrupted run would have seen. A nonzero
    ss_ramp_end applies scheduled sampling to supervised steps, with the
    mix probability ramping linearly from 0 to ss_ramp_end across the run.
    """
    if not examples:
        raise ContractError("training corpus is empty")
    n = len(examples)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    reports = []
    while state.step < total_steps:
        epoch = state.step // steps_per_epoch
        cursor = state.step % steps_per_epoch
        state.epoch = epoch
        perm = nd.derive_rng(state.base_seed, "qfs-order", epoch).permutation(n)
        idx = perm[cursor * batch_size : (cursor + 1) * batch_size]
        if idx.size == 0:
            idx = perm[:batch_size]
        batch = [examples[i] for i in idx]
        ss_mix = ss_ramp_end * state.step / max(total_steps - 1, 1)
        report = train_step(
            state, batch, loss_cfg, gen_cfg, vocab, embedder=embedder, ss_mix=ss_mix
        )
        if eval_every and state.step % eval_every == 0 and eval_examples:
            ev = evaluate(state.model, eval_examples, gen_cfg, vocab)
            report["eval"] = ev
            if state.best_eval is None or ev["rougeL"] > state.best_eval["rougeL"]:
                state.best_eval = {"step": state.step, "rougeL": ev["rougeL"]}
        reports.append(report)
        if metrics_writer is not None:
            metrics_writer(report)
        if checkpoint_every and checkpoint_path and state.step % checkpoint_every == 0:
            save_train_state(checkpoint_path, state, vocab.content_hash)
        if stop_fn is not None and stop_fn(state, report):
            break
    return reports
