"""Miniature pre-norm transformer: encoder-decoder summarizer and
encoder-only passage embedder.

Models run one sequence at a time ([T, d] activations, no batch axis);
batching happens in the training loop. Attention layers report how many
query-key score entries they evaluate to a global meter, which the
decode-complexity benchmark reads.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from rlqfs import ndgrad as nd
from rlqfs.corpus import PAD, REPR
from rlqfs.errors import ContractError, ShapeError
from rlqfs.model.config import ModelConfig
from rlqfs.ndgrad import Tensor

MASKED = -1e30  # additive attention mask; large-negative instead of -inf keeps softmax NaN-free


class ScoreMeter:
    """Counts attention score evaluations (query x key x head) by site."""

    def __init__(self):
        self.counts: Dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] = self.counts.get(kind, 0) + n

    def reset(self) -> None:
        self.counts.clear()

    def total(self, kind: Optional[str] = None) -> int:
        if kind is None:
            return sum(self.counts.values())
        return self.counts.get(kind, 0)


METER = ScoreMeter()


def _init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, params: Dict[str, Tensor], prefix: str):
        self.w = _init(rng, (d_in, d_out))
        self.b = Tensor(np.zeros(d_out), requires_grad=True)
        params[f"{prefix}.w"] = self.w
        params[f"{prefix}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return nd.add(nd.matmul(x, self.w), self.b)


class LayerNorm:
    def __init__(self, d: int, params: Dict[str, Tensor], prefix: str):
        self.g = Tensor(np.ones(d), requires_grad=True)
        self.b = Tensor(np.zeros(d), requires_grad=True)
        params[f"{prefix}.g"] = self.g
        params[f"{prefix}.b"] = self.b

    def __call__(self, x: Tensor) -> Tensor:
        return nd.layer_norm(x, self.g, self.b)


class MultiHeadAttention:
    def __init__(self, rng, cfg: ModelConfig, kind: str, params, prefix: str):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.kind = kind
        self.dropout_p = cfg.dropout_p
        self.wq = Linear(rng, d, d, params, f"{prefix}.wq")
        self.wk = Linear(rng, d, d, params, f"{prefix}.wk")
        self.wv = Linear(rng, d, d, params, f"{prefix}.wv")
        self.wo = Linear(rng, d, d, params, f"{prefix}.wo")

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: Optional[np.ndarray], train: bool, rng) -> Tensor:
        tq, tk = x_q.shape[0], x_kv.shape[0]
        q = self.wq(x_q)
        k = self.wk(x_kv)
        v = self.wv(x_kv)
        METER.add(self.kind, tq * tk * self.n_heads)
        scale = 1.0 / math.sqrt(self.d_head)
        heads = []
        for h in range(self.n_heads):
            lo = h * self.d_head
            qh = nd.narrow(q, 1, lo, self.d_head)
            kh = nd.narrow(k, 1, lo, self.d_head)
            vh = nd.narrow(v, 1, lo, self.d_head)
            scores = nd.mul(nd.matmul(qh, nd.transpose(kh)), scale)
            if mask is not None:
                scores = nd.add(scores, mask)
            attn = nd.softmax(scores, axis=-1)
            if train and self.dropout_p > 0.0:
                attn = nd.dropout(attn, self.dropout_p, rng)
            heads.append(nd.matmul(attn, vh))
        return self.wo(nd.concat(heads, axis=1))


class FeedForward:
    def __init__(self, rng, cfg: ModelConfig, params, prefix: str):
        self.fc1 = Linear(rng, cfg.d_model, cfg.ffn_dim, params, f"{prefix}.fc1")
        self.fc2 = Linear(rng, cfg.ffn_dim, cfg.d_model, params, f"{prefix}.fc2")
        self.dropout_p = cfg.dropout_p

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        h = nd.gelu(self.fc1(x))
        if train and self.dropout_p > 0.0:
            h = nd.dropout(h, self.dropout_p, rng)
        return self.fc2(h)


class EncoderLayer:
    def __init__(self, rng, cfg, kind: str, params, prefix: str):
        self.ln1 = LayerNorm(cfg.d_model, params, f"{prefix}.ln1")
        self.attn = MultiHeadAttention(rng, cfg, kind, params, f"{prefix}.attn")
        self.ln2 = LayerNorm(cfg.d_model, params, f"{prefix}.ln2")
        self.ffn = FeedForward(rng, cfg, params, f"{prefix}.ffn")

    def __call__(self, x, mask, train, rng):
        h = self.ln1(x)
        x = nd.add(x, self.attn(h, h, mask, train, rng))
        x = nd.add(x, self.ffn(self.ln2(x), train, rng))
        return x


class DecoderLayer:
    def __init__(self, rng, cfg, params, prefix: str):
        self.ln1 = LayerNorm(cfg.d_model, params, f"{prefix}.ln1")
        self.self_attn = MultiHeadAttention(rng, cfg, "dec_self", params, f"{prefix}.self_attn")
        self.ln2 = LayerNorm(cfg.d_model, params, f"{prefix}.ln2")
        self.cross_attn = MultiHeadAttention(rng, cfg, "cross", params, f"{prefix}.cross_attn")
        self.ln3 = LayerNorm(cfg.d_model, params, f"{prefix}.ln3")
        self.ffn = FeedForward(rng, cfg, params, f"{prefix}.ffn")

    def __call__(self, x, memory, causal_mask, memory_mask, train, rng):
        h = self.ln1(x)
        x = nd.add(x, self.self_attn(h, h, causal_mask, train, rng))
        x = nd.add(x, self.cross_attn(self.ln2(x), memory, memory_mask, train, rng))
        x = nd.add(x, self.ffn(self.ln3(x), train, rng))
        return x


def causal_mask(t: int) -> np.ndarray:
    m = np.zeros((t, t))
    m[np.triu_indices(t, k=1)] = MASKED
    return m


def key_pad_mask(pad_keep: np.ndarray, tq: int) -> Optional[np.ndarray]:
    """Rows attend only kept keys; pad_keep[j] False blocks column j."""
    if pad_keep.all():
        return None
    m = np.zeros((tq, pad_keep.shape[0]))
    m[:, ~pad_keep] = MASKED
    return m


def extend_positional(table: Tensor, new_len: int, rng: np.random.Generator, std: float = 0.02) -> Tensor:
    """Grow a positional table: prefix copied verbatim, tail freshly drawn."""
    old_len, d = table.shape
    if new_len < old_len:
        raise ContractError(f"cannot shrink positional table from {old_len} to {new_len}")
    data = np.empty((new_len, d))
    data[:old_len] = table.data
    if new_len > old_len:
        data[old_len:] = rng.normal(0.0, std, size=(new_len - old_len, d))
    return Tensor(data, requires_grad=True)


class Seq2SeqModel:
    """Encoder-decoder summarizer with tied input/output token embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.n_dec_layers < 1:
            raise ContractError("Seq2SeqModel needs at least one decoder layer")
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        self.token_embedding = _init(rng, (cfg.vocab_size, cfg.d_model))
        self.positional_embedding = _init(rng, (cfg.max_positions, cfg.d_model))
        self.params["token_embedding"] = self.token_embedding
        self.params["positional_embedding"] = self.positional_embedding
        self.enc_layers: List[EncoderLayer] = [
            EncoderLayer(rng, cfg, "enc_self", self.params, f"enc.{i}") for i in range(cfg.n_enc_layers)
        ]
        self.enc_ln = LayerNorm(cfg.d_model, self.params, "enc_ln")
        self.dec_layers: List[DecoderLayer] = [
            DecoderLayer(rng, cfg, self.params, f"dec.{i}") for i in range(cfg.n_dec_layers)
        ]
        self.dec_ln = LayerNorm(cfg.d_model, self.params, "dec_ln")

    # -- embedding helpers

    def embed_tokens(self, ids: Sequence[int]) -> Tensor:
        return nd.embedding(self.token_embedding, ids)

    def _embed_positions(self, x: Tensor, t: int, train: bool, rng) -> Tensor:
        x = nd.add(x, nd.narrow(self.positional_embedding, 0, 0, t))
        if train and self.cfg.dropout_p > 0.0:
            x = nd.dropout(x, self.cfg.dropout_p, rng)
        return x

    def output_logits(self, states: Tensor) -> Tensor:
        # projection is the transposed token embedding: one tensor, tied by construction
        return nd.matmul(states, nd.transpose(self.token_embedding))

    # -- forward passes

    def encode(
        self,
        input_ids: Sequence[int],
        pad_mask: Optional[np.ndarray] = None,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        ids = np.asarray(input_ids, dtype=np.int64)
        t = ids.shape[0]
        if t == 0:
            raise ContractError("encode on empty input")
        if t > self.cfg.max_positions:
            raise ContractError(f"input of {t} tokens exceeds max_positions {self.cfg.max_positions}")
        keep = (ids != PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        if keep.shape != (t,):
            raise ShapeError(f"pad mask shape {keep.shape} vs input length {t}")
        mask = key_pad_mask(keep, t)
        x = self._embed_positions(self.embed_tokens(ids), t, train, rng)
        for layer in self.enc_layers:
            x = layer(x, mask, train, rng)
        return self.enc_ln(x)

    def decoder_forward(
        self,
        target: Union[Sequence[int], Tensor],
        memory: Tensor,
        memory_pad_mask: Optional[np.ndarray] = None,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Causally-masked decoder over token ids or pre-mixed embeddings."""
        if isinstance(target, Tensor):
            if target.ndim != 2 or target.shape[1] != self.cfg.d_model:
                raise ShapeError(f"embedded target must be [T, {self.cfg.d_model}], got {target.shape}")
            x = target
        else:
            x = self.embed_tokens(target)
        t = x.shape[0]
        if t == 0:
            raise ContractError("decoder_forward on empty target")
        if t > self.cfg.max_positions:
            raise ContractError(f"target of {t} tokens exceeds max_positions {self.cfg.max_positions}")
        if memory.ndim != 2 or memory.shape[1] != self.cfg.d_model:
            raise ShapeError(f"memory must be [S, {self.cfg.d_model}], got {memory.shape}")
        x = self._embed_positions(x, t, train, rng)
        cmask = causal_mask(t)
        mmask = None
        if memory_pad_mask is not None:
            mmask = key_pad_mask(np.asarray(memory_pad_mask, dtype=bool), t)
        for layer in self.dec_layers:
            x = layer(x, memory, cmask, mmask, train, rng)
        return self.output_logits(self.dec_ln(x))

    def extend_positions(self, new_len: int, rng: np.random.Generator) -> None:
        self.positional_embedding = extend_positional(self.positional_embedding, new_len, rng)
        self.params["positional_embedding"] = self.positional_embedding
        self.cfg = replace(self.cfg, max_positions=new_len)


class PassageEncoder:
    """Encoder-only tower; the passage vector is the final state at the
    representation-token position, and masked-token prediction shares the
    token embedding as its output head.

    No final layer norm: every sublayer pre-norms its input, and leaving the
    residual stream unnormalized keeps embedding dot products near zero at
    init (pair similarity starts at ~0.5)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: Dict[str, Tensor] = {}
        self.token_embedding = _init(rng, (cfg.vocab_size, cfg.d_model))
        self.positional_embedding = _init(rng, (cfg.max_positions, cfg.d_model))
        self.params["token_embedding"] = self.token_embedding
        self.params["positional_embedding"] = self.positional_embedding
        self.enc_layers = [
            EncoderLayer(rng, cfg, "enc_self", self.params, f"enc.{i}") for i in range(cfg.n_enc_layers)
        ]

    def forward(
        self,
        input_ids: Sequence[int],
        pad_mask: Optional[np.ndarray] = None,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        ids = np.asarray(input_ids, dtype=np.int64)
        t = ids.shape[0]
        if t == 0:
            raise ContractError("forward on empty input")
        if t > self.cfg.max_positions:
            raise ContractError(f"input of {t} tokens exceeds max_positions {self.cfg.max_positions}")
        keep = (ids != PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        mask = key_pad_mask(keep, t)
        x = nd.embedding(self.token_embedding, ids)
        x = nd.add(x, nd.narrow(self.positional_embedding, 0, 0, t))
        if train and self.cfg.dropout_p > 0.0:
            x = nd.dropout(x, self.cfg.dropout_p, rng)
        for layer in self.enc_layers:
            x = layer(x, mask, train, rng)
        return x

    def embed(
        self,
        input_ids: Sequence[int],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        ids = list(input_ids)
        if not ids or ids[0] != REPR:
            raise ContractError("passage ids must begin with the representation token")
        states = self.forward(ids, train=train, rng=rng)
        return nd.reshape(nd.narrow(states, 0, 0, 1), (self.cfg.d_model,))

    def mlm_logits(self, states: Tensor) -> Tensor:
        return nd.matmul(states, nd.transpose(self.token_embedding))
