"""Generation procedures over a trained (or training) summarizer.

Includes the two-pass decode that makes policy-gradient training tractable:
pass 1 runs teacher-forced, tokens are sampled from its per-step
distributions with the Gumbel trick, and pass 2 re-runs the decoder on
(gumbel-softmax mixture | gold) input embeddings. The tape spans both
passes, so policy-gradient updates reach the first pass as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from rlqfs import ndgrad as nd
from rlqfs.corpus import BOS, EOS, PAD
from rlqfs.errors import ContractError
from rlqfs.model import METER, ModelConfig, Seq2SeqModel
from rlqfs.ndgrad import Tensor

EOS_TERMINATED = "eos"
MAX_TERMINATED = "max_length"


@dataclass(frozen=True)
class GenConfig:
    beam_size: int = 4
    min_tokens: int = 4
    max_tokens: int = 64
    gumbel_temperature: float = 1.0
    sampling_mix_prob: float = 1.0
    length_norm_exponent: float = 0.75

    def __post_init__(self):
        if self.beam_size < 1:
            raise ContractError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ContractError(f"need 1 <= min_tokens <= max_tokens, got {self.min_tokens}/{self.max_tokens}")
        if self.gumbel_temperature <= 0:
            raise ContractError(f"gumbel_temperature must be positive, got {self.gumbel_temperature}")
        if not 0.0 <= self.sampling_mix_prob <= 1.0:
            raise ContractError(f"sampling_mix_prob {self.sampling_mix_prob} outside [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "GenConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "GenConfig":
        base = dict(beam_size=15, min_tokens=64, max_tokens=256)
        base.update(overrides)
        return cls(**base)


@dataclass
class Trajectory:
    """One generation episode: sampled ids plus their gradient-carrying
    per-step log-probabilities."""

    token_ids: List[int]
    step_logprobs: List[Tensor]
    terminated_by: str

    def validate(self) -> "Trajectory":
        if len(self.token_ids) != len(self.step_logprobs):
            raise ContractError(
                f"{len(self.token_ids)} tokens but {len(self.step_logprobs)} step log-probs"
            )
        if not self.token_ids:
            raise ContractError("empty trajectory")
        for lp in self.step_logprobs:
            if lp.item() > 1e-12:
                raise ContractError(f"step log-prob {lp.item()} is positive")
        ends_eos = self.token_ids[-1] == EOS
        if ends_eos != (self.terminated_by == EOS_TERMINATED):
            raise ContractError(f"terminated_by {self.terminated_by!r} inconsistent with token ids")
        return self

    def logprob_sum(self) -> Tensor:
        total = self.step_logprobs[0]
        for lp in self.step_logprobs[1:]:
            total = nd.add(total, lp)
        return total


def _encode(model: Seq2SeqModel, query_doc_ids: Sequence[int]):
    ids = np.asarray(query_doc_ids, dtype=np.int64)
    keep = ids != PAD
    memory = model.encode(ids, pad_mask=keep)
    return memory, keep


def _last_row_logprobs(model, prefix, memory, keep) -> np.ndarray:
    logits = model.decoder_forward(prefix, memory, memory_pad_mask=keep)
    row = logits.data[-1]
    shifted = row - row.max()
    return shifted - math.log(np.exp(shifted).sum())


def greedy_decode(model: Seq2SeqModel, query_doc_ids: Sequence[int], gen: GenConfig) -> Trajectory:
    """Argmax decoding; EOS is unavailable before min_tokens. Tape-free."""
    with nd.no_grad():
        memory, keep = _encode(model, query_doc_ids)
        return _step_decode(model, memory, keep, gen, choose="argmax", rng=None, temperature=1.0)


def sample_decode(
    model: Seq2SeqModel,
    query_doc_ids: Sequence[int],
    gen: GenConfig,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 1.0,
) -> Trajectory:
    """Free-running ancestral sampling; temperature 0 degenerates to greedy."""
    if temperature < 0:
        raise ContractError(f"temperature must be >= 0, got {temperature}")
    if temperature > 0 and rng is None:
        raise ContractError("sampling needs an rng")
    with nd.no_grad():
        memory, keep = _encode(model, query_doc_ids)
        choose = "argmax" if temperature == 0 else "sample"
        return _step_decode(model, memory, keep, gen, choose=choose, rng=rng, temperature=temperature)


def _step_decode(model, memory, keep, gen, choose, rng, temperature) -> Trajectory:
    prefix = [BOS]
    out_ids: List[int] = []
    logps: List[Tensor] = []
    terminated = MAX_TERMINATED
    for pos in range(1, gen.max_tokens + 1):
        logprob_row = _last_row_logprobs(model, prefix, memory, keep)
        choice_row = logprob_row.copy()
        if pos < gen.min_tokens:
            choice_row[EOS] = -np.inf
        if choose == "argmax":
            tok = int(choice_row.argmax())  # ties resolve to the lowest id
        else:
            p = np.exp(choice_row / temperature - (choice_row / temperature).max())
            p[~np.isfinite(p)] = 0.0
            p /= p.sum()
            tok = int(rng.choice(choice_row.shape[0], p=p))
        out_ids.append(tok)
        logps.append(Tensor(logprob_row[tok]))
        if tok == EOS:
            terminated = EOS_TERMINATED
            break
        prefix.append(tok)
    return Trajectory(out_ids, logps, terminated).validate()


def gumbel_softmax(logits: Tensor, temperature: float, rng: np.random.Generator) -> Tensor:
    """Differentiable relaxed sample: softmax((logits + Gumbel noise) / T)."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    if logits.ndim != 1:
        raise ContractError(f"gumbel_softmax expects a [V] tensor, got shape {logits.shape}")
    g = rng.gumbel(size=logits.shape[0])
    return nd.softmax(nd.mul(nd.add(logits, g), 1.0 / temperature))


@dataclass
class TwoPassResult:
    pass1_logits: Tensor
    trajectory: Trajectory
    input_kinds: List[str]  # per pass-2 step: "bos" | "gold" | "mixture"
    pass2_logits: Tensor

    def __iter__(self):
        # unpack as (pass-1 logits, trajectory, input kinds)
        return iter((self.pass1_logits, self.trajectory, self.input_kinds))


def two_pass_decode(
    model: Seq2SeqModel,
    query_doc_ids: Sequence[int],
    gold_ids: Sequence[int],
    gen: GenConfig,
    rng: np.random.Generator,
    train: bool = False,
) -> TwoPassResult:
    """Scheduled-sampling double pass with gradients spanning both passes.

    Pass 1 is teacher-forced on the gold sequence; each step's token is
    sampled from the pass-1 distribution via the Gumbel trick, and its
    embedding-table mixture (weighted by the gumbel-softmax) becomes the
    pass-2 input at the next step with probability sampling_mix_prob.
    Step log-probs of the sampled tokens are read from pass 2, which is
    conditioned on the sampled history. The trajectory ends at the first
    sampled EOS or at the gold-length horizon.

    Returns (pass-1 logits, trajectory, per-step input descriptions).
    """
    gold = list(gold_ids)
    if not gold:
        raise ContractError("two_pass_decode needs a non-empty gold sequence")
    n = len(gold)
    memory = model.encode(
        np.asarray(query_doc_ids, dtype=np.int64),
        train=train,
        rng=rng,
    )
    keep = np.asarray(query_doc_ids, dtype=np.int64) != PAD

    pass1_inputs = [BOS] + gold[:-1]
    pass1_logits = model.decoder_forward(
        pass1_inputs, memory, memory_pad_mask=keep, train=train, rng=rng
    )

    # sample every step from pass-1 rows; mixtures stay differentiable w.r.t. pass 1
    sampled: List[int] = []
    mixtures: List[Tensor] = []
    for t in range(n):
        row = nd.reshape(nd.narrow(pass1_logits, 0, t, 1), (model.cfg.vocab_size,))
        weights = gumbel_softmax(row, gen.gumbel_temperature, rng)
        sampled.append(int(weights.data.argmax()))
        mixtures.append(nd.matmul(nd.reshape(weights, (1, model.cfg.vocab_size)), model.token_embedding))

    # assemble pass-2 inputs: BOS then mixture-or-gold per step
    rows = [nd.embedding(model.token_embedding, [BOS])]
    described = ["bos"]
    for t in range(1, n):
        if rng.random() < gen.sampling_mix_prob:
            rows.append(mixtures[t - 1])
            described.append("mixture")
        else:
            rows.append(nd.embedding(model.token_embedding, [gold[t - 1]]))
            described.append("gold")
    pass2_inputs = rows[0] if n == 1 else nd.concat(rows, axis=0)
    pass2_logits = model.decoder_forward(
        pass2_inputs, memory, memory_pad_mask=keep, train=train, rng=rng
    )
    logp2 = nd.log_softmax(pass2_logits, axis=-1)

    horizon = n
    for t, tok in enumerate(sampled):
        if tok == EOS:
            horizon = t + 1
            break
    token_ids = sampled[:horizon]
    step_logprobs = [
        nd.reshape(nd.gather_pairs(logp2, [t], [token_ids[t]]), ()) for t in range(horizon)
    ]
    terminated = EOS_TERMINATED if token_ids[-1] == EOS else MAX_TERMINATED
    traj = Trajectory(token_ids, step_logprobs, terminated).validate()
    return TwoPassResult(pass1_logits, traj, described, pass2_logits)


@dataclass
class _Beam:
    gen_ids: Tuple[int, ...]
    cum_logp: float
    finished: bool


def _norm_score(cum: float, length: int, alpha: float) -> float:
    return cum / max(length, 1) ** alpha


def beam_search(model: Seq2SeqModel, query_doc_ids: Sequence[int], gen: GenConfig) -> List[int]:
    """Length-normalized beam search under the min/max token constraints.

    Finished beams are frozen and keep competing on normalized score; ties
    break toward lower token id, then lower beam index. The greedy sequence
    is a floor: if it outscores every beam, it is returned.
    """
    alpha = gen.length_norm_exponent
    with nd.no_grad():
        memory, keep = _encode(model, query_doc_ids)
        beams = [_Beam((), 0.0, False)]
        for pos in range(1, gen.max_tokens + 1):
            pool: List[Tuple[float, int, int, _Beam]] = []
            for bi, beam in enumerate(beams):
                if beam.finished:
                    pool.append((_norm_score(beam.cum_logp, len(beam.gen_ids), alpha), -1, bi, beam))
                    continue
                logprob_row = _last_row_logprobs(model, [BOS, *beam.gen_ids], memory, keep)
                allowed = np.arange(logprob_row.shape[0])
                if pos < gen.min_tokens:
                    allowed = allowed[allowed != EOS]
                order = allowed[np.argsort(-logprob_row[allowed], kind="stable")][: gen.beam_size]
                for tok in order:
                    tok = int(tok)
                    cum = beam.cum_logp + float(logprob_row[tok])
                    nxt = _Beam(beam.gen_ids + (tok,), cum, tok == EOS)
                    pool.append((_norm_score(cum, len(nxt.gen_ids), alpha), tok, bi, nxt))
            pool.sort(key=lambda c: (-c[0], c[1], c[2]))
            beams = [c[3] for c in pool[: gen.beam_size]]
            if all(b.finished for b in beams):
                break
        best = max(
            enumerate(beams),
            key=lambda ib: (_norm_score(ib[1].cum_logp, len(ib[1].gen_ids), alpha), -ib[0]),
        )[1]

    greedy = greedy_decode(model, query_doc_ids, gen)
    greedy_cum = sum(lp.item() for lp in greedy.step_logprobs)
    if _norm_score(greedy_cum, len(greedy.token_ids), alpha) > _norm_score(
        best.cum_logp, len(best.gen_ids), alpha
    ):
        return list(greedy.token_ids)
    return list(best.gen_ids)


SEQUENTIAL = "sequential"
TWO_PASS = "two_pass"


def _bench_model(max_positions: int) -> Seq2SeqModel:
    cfg = ModelConfig(
        vocab_size=8,
        d_model=8,
        n_heads=1,
        n_enc_layers=1,
        n_dec_layers=1,
        ffn_dim=8,
        max_positions=max_positions,
    )
    return Seq2SeqModel(cfg, np.random.default_rng(0))


def count_decode_cost(mode: str, n: int, model: Optional[Seq2SeqModel] = None) -> int:
    """Decoder self-attention score evaluations for an n-step generation.

    Instrumented (the decoder actually runs and the attention meter counts),
    not closed-form. Sequential re-runs the decoder per emitted token, the
    way generation without teacher forcing must; two-pass runs the decoder
    twice at full length.
    """
    if n < 1:
        raise ContractError(f"length must be >= 1, got {n}")
    if mode not in (SEQUENTIAL, TWO_PASS):
        raise ContractError(f"unknown decode mode {mode!r}")
    if model is None:
        model = _bench_model(n + 1)
    with nd.no_grad():
        memory = model.encode([BOS, 7, EOS])
        filler = 7
        before = METER.total("dec_self")
        if mode == SEQUENTIAL:
            prefix = [BOS]
            for _ in range(n):
                model.decoder_forward(prefix, memory)
                prefix.append(filler)
        else:
            target = [filler] * n
            model.decoder_forward(target, memory)
            model.decoder_forward(target, memory)
        return METER.total("dec_self") - before
