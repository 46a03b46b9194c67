"""Cluster-hypothesis passage-embedding trainer.

A single shared encoder embeds both sides of every pair (siamese dual
encoder); pair similarity is the logistic sigmoid of the embedding dot
product, trained with binary cross-entropy against in-batch negatives, plus
a masked-token auxiliary objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from rlqfs import ndgrad as nd
from rlqfs.checkpoint import check_vocab_hash, read_checkpoint, write_checkpoint
from rlqfs.corpus import MASK, N_SPECIALS, PAD, REPR, Vocabulary
from rlqfs.errors import CheckpointFormatError, ContractError, NumericAbort
from rlqfs.model import ModelConfig, PassageEncoder
from rlqfs.ndgrad import Tensor
from rlqfs.rewards import cosine

logger = logging.getLogger(__name__)

MLM_SELECT_P = 0.15
MLM_MASK_P = 0.80
MLM_RANDOM_P = 0.10  # remaining 10% keep the original token


@dataclass
class TrainPair:
    """Positive pair: two passages answering the same query."""

    query_id: str
    p_ids: List[int]
    q_ids: List[int]


@dataclass
class PassagePair:
    p_ids: List[int]
    q_ids: List[int]
    label: int

    def validate(self) -> "PassagePair":
        if self.label not in (0, 1):
            raise ContractError(f"pair label must be 0 or 1, got {self.label}")
        for ids in (self.p_ids, self.q_ids):
            if not ids or ids[0] != REPR:
                raise ContractError("passage ids must begin with the representation token")
        return self


def similarity(e_p: Tensor, e_q: Tensor) -> Tensor:
    """sigmoid(e_p . e_q); strictly inside (0, 1) for finite embeddings."""
    if e_p.shape != e_q.shape or e_p.ndim != 1:
        raise ContractError(f"embedding shapes differ: {e_p.shape} vs {e_q.shape}")
    return nd.sigmoid(nd.tsum(nd.mul(e_p, e_q)))


_PE_EPS = 1e-12  # keeps log finite when the sigmoid saturates in float64


def pe_loss(y_hat: Tensor, y: int) -> Tensor:
    """Binary cross-entropy between predicted and true pair similarity."""
    if y not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {y}")
    if y == 1:
        return nd.mul(nd.log(nd.clamp(y_hat, _PE_EPS, 1.0)), -1.0)
    one_minus = nd.add(nd.mul(y_hat, -1.0), 1.0)
    return nd.mul(nd.log(nd.clamp(one_minus, _PE_EPS, 1.0)), -1.0)


def _interleaved_order(pairs: Sequence[TrainPair], rng: np.random.Generator) -> List[int]:
    """Shuffled index order that round-robins across query groups, so
    consecutive batches mix queries and in-batch negatives stay available."""
    groups: Dict[str, List[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.query_id, []).append(i)
    keys = sorted(groups)
    key_order = [keys[i] for i in rng.permutation(len(keys))]
    for k in key_order:
        idx = groups[k]
        groups[k] = [idx[j] for j in rng.permutation(len(idx))]
    order: List[int] = []
    cursors = {k: 0 for k in key_order}
    remaining = sum(len(v) for v in groups.values())
    while remaining:
        for k in key_order:
            if cursors[k] < len(groups[k]):
                order.append(groups[k][cursors[k]])
                cursors[k] += 1
                remaining -= 1
    return order


def in_batch_negatives(batch: Sequence[TrainPair], rng: np.random.Generator) -> List[PassagePair]:
    """Each positive (p_i, q_i) gains one negative (p_i, q_j), j from another query.

    Output order: all positives, then the negatives in matching order.
    """
    if len(batch) < 2:
        raise ContractError("in-batch negatives need a batch of at least 2 pairs")
    out = [PassagePair(pair.p_ids, pair.q_ids, 1).validate() for pair in batch]
    negatives = []
    for i, pair in enumerate(batch):
        eligible = [j for j in range(len(batch)) if j != i and batch[j].query_id != pair.query_id]
        if not eligible:
            raise ContractError(
                f"no negative candidate for pair {i}: every other pair shares query {pair.query_id!r}"
            )
        j = eligible[int(rng.integers(len(eligible)))]
        negatives.append(PassagePair(pair.p_ids, batch[j].q_ids, 0).validate())
    return out + negatives


def mlm_corrupt(
    ids: Sequence[int], rng: np.random.Generator, vocab_size: int
) -> Tuple[List[int], np.ndarray]:
    """BERT-style corruption: 15% of non-special positions selected; of those
    80% become MASK, 10% a random content token, 10% stay unchanged."""
    ids = list(ids)
    target_mask = np.zeros(len(ids), dtype=bool)
    maskable = [pos for pos, tok in enumerate(ids) if tok >= N_SPECIALS]
    if not maskable:
        return ids, target_mask
    selected = np.asarray(maskable)[rng.random(len(maskable)) < MLM_SELECT_P]
    for pos in selected:
        target_mask[pos] = True
        r = rng.random()
        if r < MLM_MASK_P:
            ids[pos] = MASK
        elif r < MLM_MASK_P + MLM_RANDOM_P:
            ids[pos] = int(rng.integers(N_SPECIALS, vocab_size))
        # else: keep the original token
    return ids, target_mask


# ---------------------------------------------------------------------------
# training


@dataclass
class EmbedderTrainState:
    encoder: PassageEncoder
    optimizer: object
    rng: np.random.Generator
    base_seed: int
    step: int = 0
    epoch: int = 0
    best_eval: Optional[dict] = None


def encode_passage_text(vocab: Vocabulary, text: str, max_positions: int) -> List[int]:
    return [REPR] + vocab.encode(text)[: max_positions - 1]


def pairs_to_train_pairs(pairs: Sequence[dict], vocab: Vocabulary, max_positions: int) -> List[TrainPair]:
    return [
        TrainPair(
            query_id=str(p["query_id"]),
            p_ids=encode_passage_text(vocab, p["p_text"], max_positions),
            q_ids=encode_passage_text(vocab, p["q_text"], max_positions),
        )
        for p in pairs
    ]


def embedder_train_step(
    state: EmbedderTrainState,
    batch: Sequence[TrainPair],
    mlm_weight: float = 1.0,
    grad_clip: Optional[float] = 1.0,
) -> dict:
    """One optimizer update on a batch of positive pairs.

    Both sides of every pair go through the same encoder parameters. The
    loss is mean pair BCE over positives + generated negatives, plus the
    masked-token cross-entropy on each positive's first passage.
    """
    if not batch:
        raise ContractError("empty batch")
    enc = state.encoder
    state.optimizer.zero_grad()
    augmented = in_batch_negatives(batch, state.rng)

    pair_losses = []
    correct = 0
    for pair in augmented:
        e_p = enc.embed(pair.p_ids, train=True, rng=state.rng)
        e_q = enc.embed(pair.q_ids, train=True, rng=state.rng)
        y_hat = similarity(e_p, e_q)
        pair_losses.append(pe_loss(y_hat, pair.label))
        correct += int((y_hat.item() > 0.5) == bool(pair.label))
    pe_total = pair_losses[0]
    for pl in pair_losses[1:]:
        pe_total = nd.add(pe_total, pl)
    pe_mean = nd.mul(pe_total, 1.0 / len(pair_losses))

    mlm_mean = Tensor(0.0)
    if mlm_weight > 0.0:
        mlm_losses = []
        for pair in batch:
            corrupted, target_mask = mlm_corrupt(pair.p_ids, state.rng, enc.cfg.vocab_size)
            if not target_mask.any():
                continue
            states = enc.forward(corrupted, train=True, rng=state.rng)
            logits = enc.mlm_logits(states)
            targets = np.where(target_mask, np.asarray(pair.p_ids), PAD)
            mlm_losses.append(nd.cross_entropy(logits, targets, ignore_index=PAD))
        if mlm_losses:
            total = mlm_losses[0]
            for ml in mlm_losses[1:]:
                total = nd.add(total, ml)
            mlm_mean = nd.mul(total, 1.0 / len(mlm_losses))

    loss = nd.add(pe_mean, nd.mul(mlm_mean, mlm_weight)) if mlm_weight > 0.0 else pe_mean
    if not math.isfinite(loss.item()):
        raise NumericAbort(
            f"non-finite embedder loss at step {state.step}: pe={pe_mean.item()!r} mlm={mlm_mean.item()!r}"
        )
    nd.backward(loss)
    grad_norm = nd.clip_grad_norm(enc.params, grad_clip) if grad_clip else 0.0
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "pe_loss": pe_mean.item(),
        "mlm_loss": mlm_mean.item(),
        "total": loss.item(),
        "pair_acc": correct / len(augmented),
        "grad_norm": grad_norm,
    }


def eval_pairs(enc: PassageEncoder, pairs: Sequence[PassagePair]) -> float:
    """Mean BCE of labeled pairs, tape-free."""
    with nd.no_grad():
        losses = []
        for pair in pairs:
            y_hat = similarity(enc.embed(pair.p_ids), enc.embed(pair.q_ids))
            losses.append(pe_loss(y_hat, pair.label).item())
    return float(np.mean(losses))


def cluster_separation(
    enc: PassageEncoder, vocab: Vocabulary, heldout: Sequence[Tuple[int, str]]
) -> dict:
    """Mean intra-cluster vs inter-cluster cosine over held-out passages."""
    with nd.no_grad():
        embs = [
            (c, enc.embed(encode_passage_text(vocab, text, enc.cfg.max_positions)).data)
            for c, text in heldout
        ]
    intra, inter = [], []
    for i in range(len(embs)):
        for j in range(i + 1, len(embs)):
            c = cosine(embs[i][1], embs[j][1])
            (intra if embs[i][0] == embs[j][0] else inter).append(c)
    intra_mean = float(np.mean(intra)) if intra else 0.0
    inter_mean = float(np.mean(inter)) if inter else 0.0
    return {"intra_mean": intra_mean, "inter_mean": inter_mean, "gap": intra_mean - inter_mean}


class PassageEmbedderHandle:
    """Adapter giving a trained encoder the text-level embed() interface
    the reward registry expects."""

    def __init__(self, encoder: PassageEncoder, vocab: Vocabulary):
        self.encoder = encoder
        self.vocab = vocab
        self.dim = encoder.cfg.d_model

    def embed(self, text: str) -> np.ndarray:
        ids = encode_passage_text(self.vocab, text, self.encoder.cfg.max_positions)
        with nd.no_grad():
            return self.encoder.embed(ids).data.copy()


# ---------------------------------------------------------------------------
# synthetic clustered corpus


@dataclass
class ClusterCorpus:
    train_pairs: List[dict]
    test_pairs: List[dict]
    heldout: List[Tuple[int, str]]
    stats: dict


_SYLLABLES = [
    "ba", "cel", "dor", "fen", "gol", "hin", "jas", "kel", "lom", "mer",
    "nov", "pel", "quin", "ros", "sul", "tor", "urn", "vel", "wis", "yor",
]


def _invent_word(rng: np.random.Generator) -> str:
    k = int(rng.integers(2, 4))
    return "".join(_SYLLABLES[int(rng.integers(len(_SYLLABLES)))] for _ in range(k))


def make_synthetic_clusters(
    n_clusters: int,
    per_cluster: int,
    rng: np.random.Generator,
    topic_words: int = 12,
    shared_words: int = 20,
    length_range: Tuple[int, int] = (8, 16),
    topical_frac: float = 0.7,
    heldout_per_cluster: int = 8,
    pairs_per_cluster: int = 120,
    test_pairs_per_cluster: int = 12,
) -> ClusterCorpus:
    """Clustered passage corpus: each cluster owns a private topical
    vocabulary mixed with shared filler words. Same-cluster passages are
    positives; labeled test pairs include cross-cluster negatives."""
    if n_clusters < 2:
        raise ContractError(f"need at least 2 clusters, got {n_clusters}")
    lo, hi = length_range

    vocab_pool = set()
    while len(vocab_pool) < n_clusters * topic_words + shared_words:
        vocab_pool.add(_invent_word(rng))
    pool = sorted(vocab_pool)
    order = rng.permutation(len(pool))
    shared = [pool[i] for i in order[:shared_words]]
    topics = [
        [pool[i] for i in order[shared_words + c * topic_words : shared_words + (c + 1) * topic_words]]
        for c in range(n_clusters)
    ]

    def passage(c: int) -> str:
        length = int(rng.integers(lo, hi + 1))
        words = []
        for _ in range(length):
            if rng.random() < topical_frac:
                words.append(topics[c][int(rng.integers(topic_words))])
            else:
                words.append(shared[int(rng.integers(shared_words))])
        return " ".join(words) + " ."

    train_passages = [[passage(c) for _ in range(per_cluster)] for c in range(n_clusters)]
    heldout = [(c, passage(c)) for c in range(n_clusters) for _ in range(heldout_per_cluster)]

    train_pairs = []
    for c in range(n_clusters):
        for _ in range(pairs_per_cluster):
            i, j = rng.choice(per_cluster, size=2, replace=False)
            train_pairs.append(
                {"query_id": f"cluster{c}", "p_text": train_passages[c][i], "q_text": train_passages[c][j]}
            )

    held_by_cluster: Dict[int, List[str]] = {}
    for c, text in heldout:
        held_by_cluster.setdefault(c, []).append(text)
    test_pairs = []
    for c in range(n_clusters):
        mine = held_by_cluster[c]
        for _ in range(test_pairs_per_cluster // 2):
            i, j = rng.choice(len(mine), size=2, replace=False)
            test_pairs.append({"p_text": mine[i], "q_text": mine[j], "label": 1})
            other = int(rng.integers(n_clusters - 1))
            other = other if other < c else other + 1
            theirs = held_by_cluster[other]
            test_pairs.append(
                {"p_text": mine[int(rng.integers(len(mine)))], "q_text": theirs[int(rng.integers(len(theirs)))], "label": 0}
            )

    def lexical_overlap(a: str, b: str) -> float:
        sa, sb = set(a.split()), set(b.split())
        return len(sa & sb) / len(sa | sb)

    intra = [lexical_overlap(p["p_text"], p["q_text"]) for p in test_pairs if p["label"] == 1]
    inter = [lexical_overlap(p["p_text"], p["q_text"]) for p in test_pairs if p["label"] == 0]
    stats = {
        "n_clusters": n_clusters,
        "per_cluster": per_cluster,
        "intra_lexical_overlap": float(np.mean(intra)),
        "inter_lexical_overlap": float(np.mean(inter)),
    }
    return ClusterCorpus(train_pairs=train_pairs, test_pairs=test_pairs, heldout=heldout, stats=stats)


# ---------------------------------------------------------------------------
# checkpointing


def save_embedder_checkpoint(path, state: EmbedderTrainState, vocab_hash: str) -> None:
    header = {
        "format_version": 1,
        "kind": "passage_encoder",
        "model_config": state.encoder.cfg.to_dict(),
        "vocab_hash": vocab_hash,
        "base_seed": state.base_seed,
        "rng_state": nd.rng_state(state.rng),
        "step": state.step,
        "epoch": state.epoch,
        "best_eval": state.best_eval,
        "optimizer": state.optimizer.config(),
    }
    tensors = {f"model.{k}": p.data for k, p in state.encoder.params.items()}
    for k, arr in state.optimizer.state_tensors().items():
        tensors[f"opt.{k}"] = arr
    write_checkpoint(path, header, tensors)


def load_embedder_checkpoint(path, expect_vocab_hash: Optional[str] = None) -> EmbedderTrainState:
    header, tensors = read_checkpoint(path)
    if header.get("kind") != "passage_encoder":
        raise CheckpointFormatError(f"{path}: not a passage-encoder checkpoint")
    if expect_vocab_hash is not None:
        check_vocab_hash(header, expect_vocab_hash, path)
    cfg = ModelConfig.from_dict(header["model_config"])
    enc = PassageEncoder(cfg, np.random.default_rng(0))
    for name, p in enc.params.items():
        key = f"model.{name}"
        if key not in tensors:
            raise CheckpointFormatError(f"{path}: missing tensor {key!r}")
        if tensors[key].shape != p.data.shape:
            raise CheckpointFormatError(f"{path}: shape mismatch for {key!r}")
        p.data = tensors[key]
    opt_cfg = header["optimizer"]
    opt = nd.make_optimizer(opt_cfg.pop("kind"), enc.params, **opt_cfg)
    opt.load_state_tensors({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
    return EmbedderTrainState(
        encoder=enc,
        optimizer=opt,
        rng=nd.restore_rng(header["rng_state"]),
        base_seed=header["base_seed"],
        step=header["step"],
        epoch=header["epoch"],
        best_eval=header["best_eval"],
    )


def train_embedder(
    pairs: Sequence[dict],
    vocab: Vocabulary,
    cfg: ModelConfig,
    *,
    seed: int,
    epochs: int,
    batch_size: int,
    lr: float = 3e-4,
    mlm_weight: float = 1.0,
    grad_clip: Optional[float] = 1.0,
    test_pairs: Sequence[dict] = (),
    heldout: Sequence[Tuple[int, str]] = (),
    metrics_writer=None,
    checkpoint_dir=None,
) -> Tuple[EmbedderTrainState, List[dict]]:
    """Epoch loop over the positive-pair corpus; the best-test-loss epoch is
    kept when a checkpoint directory is given."""
    if batch_size < 2:
        raise ContractError("embedder training needs batch_size >= 2 for in-batch negatives")
    train = pairs_to_train_pairs(pairs, vocab, cfg.max_positions)
    test = [
        PassagePair(
            encode_passage_text(vocab, p["p_text"], cfg.max_positions),
            encode_passage_text(vocab, p["q_text"], cfg.max_positions),
            int(p["label"]),
        ).validate()
        for p in test_pairs
    ]
    if len({p.query_id for p in train}) < 2:
        raise ContractError("pair corpus has a single query id; in-batch negatives are impossible")
    encoder = PassageEncoder(cfg, nd.derive_rng(seed, "embedder-init"))
    state = EmbedderTrainState(
        encoder=encoder,
        optimizer=nd.make_optimizer("adam", encoder.params, lr),
        rng=nd.derive_rng(seed, "embedder-train"),
        base_seed=seed,
    )
    history: List[dict] = []
    steps_per_epoch = max(1, len(train) // batch_size)
    for epoch in range(epochs):
        state.epoch = epoch
        order = _interleaved_order(train, nd.derive_rng(seed, "embedder-order", epoch))
        for cursor in range(steps_per_epoch):
            idx = order[cursor * batch_size : (cursor + 1) * batch_size]
            if len(idx) < 2:
                continue
            batch = [train[i] for i in idx]
            if len({p.query_id for p in batch}) < 2:
                logger.warning("skipping single-query batch at epoch %d cursor %d", epoch, cursor)
                continue
            report = embedder_train_step(state, batch, mlm_weight, grad_clip)
            if metrics_writer is not None:
                metrics_writer(report)
        summary = {"epoch": epoch, "step": state.step}
        if test:
            summary["test_pe_loss"] = eval_pairs(encoder, test)
        if heldout:
            summary.update(cluster_separation(encoder, vocab, heldout))
        history.append(summary)
        if metrics_writer is not None:
            metrics_writer(summary)
        is_best = "test_pe_loss" in summary and (
            state.best_eval is None or summary["test_pe_loss"] < state.best_eval["test_pe_loss"]
        )
        if is_best:
            state.best_eval = {"epoch": epoch, "test_pe_loss": summary["test_pe_loss"]}
        if checkpoint_dir is not None:
            save_embedder_checkpoint(f"{checkpoint_dir}/embedder-epoch{epoch}.ckpt", state, vocab.content_hash)
            if is_best or (state.best_eval is None and epoch == 0):
                save_embedder_checkpoint(f"{checkpoint_dir}/embedder-best.ckpt", state, vocab.content_hash)
    return state, history
