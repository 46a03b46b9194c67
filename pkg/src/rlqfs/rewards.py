"""Reward functions mapping (reference text, hypothesis text) to [0, 1].

Lexical rewards (ROUGE-L, mean BLEU-1..4) tokenize with the corpus
word-splitter. Semantic rewards take any embedder exposing
``embed(text) -> vector``; cosines are rescaled from [-1, 1] to [0, 1] so
every reward shares the advantage sign convention.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence, Tuple

import numpy as np

from rlqfs import kernels
from rlqfs.corpus import split_words
from rlqfs.errors import ConfigError, ContractError, RewardError

ROUGE_BETA = 1.2
BLEU_EPS = 1e-9

RewardFn = Callable[[str, str], float]


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


COMPONENT_NAMES = ("rouge_l", "bleu_mean", "sent_avg_cos", "sfpeg")
SEMANTIC_COMPONENTS = {"sent_avg_cos", "sfpeg"}


@dataclass(frozen=True)
class RewardSpec:
    components: Tuple[Tuple[str, float], ...]
    rouge_variant: str = "recall"
    bleu_smoothing: str = "epsilon"

    def __post_init__(self):
        if not self.components:
            raise ConfigError("reward spec needs at least one component")
        for name, weight in self.components:
            if name not in COMPONENT_NAMES:
                raise ConfigError(f"unknown reward component {name!r}")
            if weight < 0:
                raise ConfigError(f"negative weight for {name!r}")
        total = sum(w for _, w in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"component weights sum to {total}, expected 1")
        if self.rouge_variant not in ("recall", "precision", "f"):
            raise ConfigError(f"unknown rouge variant {self.rouge_variant!r}")
        if self.bleu_smoothing not in ("epsilon", "add_one"):
            raise ConfigError(f"unknown bleu smoothing {self.bleu_smoothing!r}")

    @property
    def needs_embedder(self) -> bool:
        return any(name in SEMANTIC_COMPONENTS for name, _ in self.components)

    @classmethod
    def single(cls, name: str, **kw) -> "RewardSpec":
        return cls(components=((name, 1.0),), **kw)


def lcs_len(a: Sequence, b: Sequence) -> int:
    """Longest-common-subsequence length (compiled kernel when available)."""
    return kernels.lcs_len(a, b)


def rouge_l(reference: str, hypothesis: str, variant: str = "recall") -> float:
    """LCS-based overlap; F uses the beta=1.2 recall-weighted combination."""
    ref = split_words(reference)
    hyp = split_words(hypothesis)
    if not ref and not hyp:
        return 1.0
    if not ref or not hyp:
        return 0.0
    lcs = lcs_len(ref, hyp)
    recall = lcs / len(ref)
    precision = lcs / len(hyp)
    if variant == "recall":
        return recall
    if variant == "precision":
        return precision
    if variant == "f":
        if recall == 0.0 and precision == 0.0:
            return 0.0
        b2 = ROUGE_BETA**2
        return (1 + b2) * precision * recall / (recall + b2 * precision)
    raise ContractError(f"unknown rouge variant {variant!r}")


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def clipped_ngram_matches(hyp: Sequence[str], ref: Sequence[str], n: int) -> Tuple[int, int]:
    """(clipped match count, hypothesis n-gram count)."""
    hyp_counts = _ngram_counts(hyp, n)
    ref_counts = _ngram_counts(ref, n)
    matched = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    return matched, sum(hyp_counts.values())


def _smoothed_precision(matched: int, total: int, smoothing: str) -> float:
    if smoothing == "add_one":
        return (matched + 1.0) / (total + 1.0)
    if total == 0 or matched == 0:
        return BLEU_EPS
    return matched / total


def bleu_mean(reference: str, hypothesis: str, smoothing: str = "epsilon") -> float:
    """Arithmetic mean of BLEU-1..4 with brevity penalty and clipping."""
    if smoothing not in ("epsilon", "add_one"):
        raise ContractError(f"unknown bleu smoothing {smoothing!r}")
    ref = split_words(reference)
    hyp = split_words(hypothesis)
    if not ref and not hyp:
        return 1.0
    if not hyp or not ref:
        return 0.0
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    precisions = []
    for n in range(1, 5):
        matched, total = clipped_ngram_matches(hyp, ref, n)
        precisions.append(_smoothed_precision(matched, total, smoothing))
    bleus = []
    for i in range(1, 5):
        log_mean = sum(math.log(p) for p in precisions[:i]) / i
        bleus.append(bp * math.exp(log_mean))
    return float(np.mean(bleus))


_SENT_RE = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list:
    return [s for s in _SENT_RE.split(text.strip()) if s]


def rescale_cosine(c: float) -> float:
    return (c + 1.0) / 2.0


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 1.0 if np.array_equal(u, v) else 0.0
    return float(np.dot(u, v) / (nu * nv))


def _embed(embedder: Embedder, text: str) -> np.ndarray:
    try:
        return np.asarray(embedder.embed(text), dtype=np.float64)
    except Exception as e:  # reward failures must surface, not zero out
        raise RewardError(f"embedder failed on {text[:40]!r}: {e}") from e


def sent_avg_cos(reference: str, hypothesis: str, embedder: Embedder) -> float:
    """Cosine of per-side averages of sentence embeddings, rescaled to [0, 1]."""
    ref_sents = split_sentences(reference)
    hyp_sents = split_sentences(hypothesis)
    if not ref_sents and not hyp_sents:
        return 1.0
    if not ref_sents or not hyp_sents:
        return 0.0
    ref_mean = np.mean([_embed(embedder, s) for s in ref_sents], axis=0)
    hyp_mean = np.mean([_embed(embedder, s) for s in hyp_sents], axis=0)
    return rescale_cosine(cosine(ref_mean, hyp_mean))


def sfpeg(reference: str, hypothesis: str, embedder: Embedder) -> float:
    """Whole-passage embedding cosine, rescaled to [0, 1]."""
    if not split_words(reference) and not split_words(hypothesis):
        return 1.0
    if not split_words(reference) or not split_words(hypothesis):
        return 0.0
    return rescale_cosine(cosine(_embed(embedder, reference), _embed(embedder, hypothesis)))


def component_reward(
    name: str, spec: RewardSpec, reference: str, hypothesis: str, embedder: Optional[Embedder]
) -> float:
    if name == "rouge_l":
        return rouge_l(reference, hypothesis, spec.rouge_variant)
    if name == "bleu_mean":
        return bleu_mean(reference, hypothesis, spec.bleu_smoothing)
    if name == "sent_avg_cos":
        return sent_avg_cos(reference, hypothesis, embedder)
    if name == "sfpeg":
        return sfpeg(reference, hypothesis, embedder)
    raise ConfigError(f"unknown reward component {name!r}")


def composite_reward(
    spec: RewardSpec, reference: str, hypothesis: str, embedder: Optional[Embedder] = None
) -> float:
    if spec.needs_embedder and embedder is None:
        raise ConfigError("reward spec has a semantic component but no embedder was provided")
    return sum(
        w * component_reward(name, spec, reference, hypothesis, embedder)
        for name, w in spec.components
    )


def make_reward_fn(spec: RewardSpec, embedder: Optional[Embedder] = None) -> RewardFn:
    if spec.needs_embedder and embedder is None:
        raise ConfigError("reward spec has a semantic component but no embedder was provided")

    def fn(reference: str, hypothesis: str) -> float:
        return composite_reward(spec, reference, hypothesis, embedder)

    return fn


def parse_reward_spec(text: str, rouge_variant: str = "recall", bleu_smoothing: str = "epsilon") -> RewardSpec:
    """Parse 'rouge_l' or 'rouge_l+sfpeg' (equal weights) into a spec."""
    names = [n.strip() for n in text.split("+") if n.strip()]
    if not names:
        raise ConfigError(f"empty reward spec {text!r}")
    w = 1.0 / len(names)
    return RewardSpec(
        components=tuple((n, w) for n in names),
        rouge_variant=rouge_variant,
        bleu_smoothing=bleu_smoothing,
    )
