"""Tokenization, vocabulary, corpus records, and ingestion pipelines.

Text is normalized to lowercase word/punctuation tokens. The vocabulary is
corpus-derived with a frequency floor; seven special tokens occupy fixed ids.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from rlqfs.errors import ContractError, DataError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, SEP, MASK, REPR = range(7)
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<mask>", "<repr>")
N_SPECIALS = len(SPECIAL_TOKENS)

_WORD_RE = re.compile(r"[0-9a-z]+|[^\s0-9a-z]")


def split_words(text: str) -> List[str]:
    """Lowercased word-level split; punctuation marks are their own tokens."""
    return _WORD_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Vocabulary:
    """token <-> id bijection with pinned special ids 0..6."""

    def __init__(self, content_tokens: Sequence[str]):
        tokens = list(SPECIAL_TOKENS) + list(content_tokens)
        index: Dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise DataError(f"duplicate token {tok!r} in vocabulary")
            index[tok] = i
        self.tokens = tokens
        self.index = index

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 2) -> "Vocabulary":
        counts: Dict[str, int] = {}
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        kept = sorted(w for w, c in counts.items() if c >= min_freq and w not in SPECIAL_TOKENS)
        return cls(kept)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()

    def encode(self, text: str) -> List[int]:
        unk = UNK
        idx = self.index
        return [idx.get(w, unk) for w in split_words(text)]

    def decode(self, ids: Sequence[int], stop_at_eos: bool = True) -> str:
        words = []
        for i in ids:
            if i == EOS and stop_at_eos:
                break
            if i < N_SPECIALS:
                continue
            words.append(self.tokens[i])
        return " ".join(words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# rlqfs vocabulary v1 hash={self.content_hash}\n")
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            if not header.startswith("# rlqfs vocabulary v1"):
                raise DataError(f"{path}: not a vocabulary file")
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:N_SPECIALS] != list(SPECIAL_TOKENS):
            raise DataError(f"{path}: special tokens missing or out of order")
        vocab = cls(tokens[N_SPECIALS:])
        m = re.search(r"hash=([0-9a-f]+)", header)
        if m and m.group(1) != vocab.content_hash:
            raise DataError(f"{path}: stored hash does not match token content")
        return vocab


def make_encoder_input(query_ids: Sequence[int], doc_ids: Sequence[int], max_positions: int) -> List[int]:
    """BOS + query + SEP + document + EOS, truncating only the document.

    The query is the task signal and is never cut; a query that cannot fit
    even with an empty document is a contract violation.
    """
    budget = max_positions - 3  # BOS, SEP, EOS
    query_ids = list(query_ids)
    doc_ids = list(doc_ids)
    if len(query_ids) > budget:
        raise ContractError(
            f"query of {len(query_ids)} tokens exceeds the {budget}-token budget of max_positions {max_positions}"
        )
    doc_ids = doc_ids[: budget - len(query_ids)]
    return [BOS] + query_ids + [SEP] + doc_ids + [EOS]


# ---------------------------------------------------------------------------
# corpus records


@dataclass
class QfsExample:
    id: str
    query: str
    document: str
    summary: str

    def validate(self) -> "QfsExample":
        for name in ("query", "document", "summary"):
            if not normalize(getattr(self, name)):
                raise DataError(f"example {self.id!r}: empty {name} after normalization")
        return self


def load_qfs_jsonl(path) -> List[QfsExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    QfsExample(
                        id=str(rec["id"]),
                        query=rec["query"],
                        document=rec["document"],
                        summary=rec["summary"],
                    ).validate()
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad corpus record ({e})") from e
    return out


def save_qfs_jsonl(path, examples: Sequence[QfsExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {"id": ex.id, "query": ex.query, "document": ex.document, "summary": ex.summary},
                    sort_keys=True,
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# forum-dump ingestion


@dataclass
class ForumComment:
    score: int
    body: str


@dataclass
class ForumPost:
    post_id: str
    forum: str
    score: int
    title: str
    comments: List[ForumComment]


@dataclass
class ForumDump:
    posts: List[ForumPost]


@dataclass
class QaGroup:
    """One surviving post: a query plus its accepted answers."""

    post_id: str
    forum: str
    query: str
    answers: List[str]


def load_forum_dump(path) -> ForumDump:
    posts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                comments = [ForumComment(score=int(c["score"]), body=c["body"]) for c in rec["comments"]]
                posts.append(
                    ForumPost(
                        post_id=str(rec["post_id"]),
                        forum=rec["forum"],
                        score=int(rec["score"]),
                        title=rec["title"],
                        comments=comments,
                    )
                )
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad forum-dump record ({e})") from e
    return ForumDump(posts=posts)


MIN_POST_SCORE = 2
MIN_COMMENT_SCORE = 2
MIN_COMMENT_WORDS = 50


def filter_forum_dump(dump: ForumDump) -> List[QaGroup]:
    """Keep posts scoring >= 2 whose comments score >= 2 and run >= 50 words.

    Posts left with no surviving comments are dropped. Word counts use the
    module tokenizer. Idempotent over its own output by construction.
    """
    groups = []
    for post in dump.posts:
        if post.score < MIN_POST_SCORE:
            continue
        answers = [
            c.body
            for c in post.comments
            if c.score >= MIN_COMMENT_SCORE and len(split_words(c.body)) >= MIN_COMMENT_WORDS
        ]
        if not answers:
            continue
        groups.append(QaGroup(post_id=post.post_id, forum=post.forum, query=post.title, answers=answers))
    return groups


def split_by_forum(groups: Sequence[QaGroup], test_forum: str) -> Tuple[List[QaGroup], List[QaGroup]]:
    train = [g for g in groups if g.forum != test_forum]
    test = [g for g in groups if g.forum == test_forum]
    if not test:
        logger.warning("test forum %r matched no posts; test split is empty", test_forum)
    return train, test


def make_pair_corpus(groups: Sequence[QaGroup]) -> List[dict]:
    """Positive passage pairs: all unordered answer pairs within a post."""
    pairs = []
    for g in groups:
        for i in range(len(g.answers)):
            for j in range(i + 1, len(g.answers)):
                pairs.append({"query_id": g.post_id, "p_text": g.answers[i], "q_text": g.answers[j]})
    return pairs


def save_pairs_jsonl(path, pairs: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(json.dumps(p, sort_keys=True) + "\n")


def load_pairs_jsonl(path) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append({"query_id": str(rec["query_id"]), "p_text": rec["p_text"], "q_text": rec["q_text"]})
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: bad pair record ({e})") from e
    return out


def ingest_stats(groups: Sequence[QaGroup]) -> dict:
    """Corpus shape statistics for the ingestion report."""
    n_q = len(groups)
    n_a = sum(len(g.answers) for g in groups)
    words = [len(split_words(a)) for g in groups for a in g.answers]
    q_words = [len(split_words(g.query)) for g in groups]
    return {
        "n_questions": n_q,
        "n_answers": n_a,
        "avg_answers_per_question": round(n_a / n_q, 4) if n_q else 0.0,
        "avg_words_per_question": round(float(np.mean(q_words)), 4) if q_words else 0.0,
        "avg_words_per_answer": round(float(np.mean(words)), 4) if words else 0.0,
        "n_pairs": sum(len(g.answers) * (len(g.answers) - 1) // 2 for g in groups),
    }


# ---------------------------------------------------------------------------
# synthetic QfS corpus

_NAMES = [
    "brimble", "cordal", "dresket", "farlow", "galdic", "harvane", "jorvick", "kelmor",
    "lunardo", "marnic", "norvell", "ostrel", "pindar", "quillon", "rastin", "seldor",
    "tamber", "ulvick", "vestral", "wrenfel", "yarrow", "zephrin", "aldec", "bixton",
]
_PLACES = [
    "velden", "tarsk", "ombria", "quarfel", "liston", "merrow",
    "ashfall", "dunvale", "corthay", "brint", "solmere", "favrin",
]
_ACTIVITIES = [
    "grinding grain", "storing water", "measuring wind", "signaling ships", "drying fruit",
    "weaving rope", "pressing oil", "counting stars", "cooling milk", "sorting mail",
    "raising flags", "testing bells",
]
_MATERIALS = ["copper", "granite", "cedar", "ivory", "bronze", "slate", "amber", "willow"]
_KEEPERS = [
    "the miller", "the warden", "the abbot", "the smith", "the pilot", "the archivist",
    "the mason", "the ferryman", "the gardener", "the clockmaker", "the brewer", "the scribe",
]
_NUMBERS = ["seven", "twelve", "forty", "ninety", "sixty", "thirty", "twenty", "eleven", "fifteen", "eighty"]

_FILLERS = [
    "travelers often stop to sketch it in the morning light .",
    "records about it are kept in the town archive .",
    "children in the region learn its story at school .",
    "a small fair is held beside it every spring .",
    "its gates are closed during the winter months .",
]


def _fact_slots():
    # slot name, document sentence, query, summary (two sentences each)
    return [
        (
            "origin",
            "the {name} was first made in {place} .",
            "where was the {name} first made ?",
            "the {name} was first made in {place} . {place} made it first .",
        ),
        (
            "use",
            "the {name} is used for {activity} .",
            "what is the {name} used for ?",
            "the {name} is used for {activity} . people use it for {activity} .",
        ),
        (
            "material",
            "the {name} is built from {material} .",
            "what is the {name} built from ?",
            "the {name} is built from {material} . {material} suits it well .",
        ),
        (
            "keeper",
            "the {name} is kept by {keeper} .",
            "who keeps the {name} ?",
            "the {name} is kept by {keeper} . {keeper} guards it daily .",
        ),
        (
            "age",
            "the {name} is {number} decades old .",
            "how old is the {name} ?",
            "the {name} is {number} decades old . it has stood {number} decades .",
        ),
    ]


def _draw_values(name: str, rng: np.random.Generator) -> dict:
    return {
        "name": name,
        "place": _PLACES[rng.integers(len(_PLACES))],
        "activity": _ACTIVITIES[rng.integers(len(_ACTIVITIES))],
        "material": _MATERIALS[rng.integers(len(_MATERIALS))],
        "keeper": _KEEPERS[rng.integers(len(_KEEPERS))],
        "number": _NUMBERS[rng.integers(len(_NUMBERS))],
    }


def make_synthetic_qfs(
    n_docs: int,
    queries_per_doc: int,
    rng: np.random.Generator,
    distractor: bool = False,
) -> List[QfsExample]:
    """Templated corpus where each document answers several distinct queries.

    Every document realizes one value per fact slot; each query targets one
    slot and its summary restates that fact, so a sentence-copy baseline is
    already strong and the task is learnable at desk scale.

    With ``distractor`` each document interleaves the facts of a second,
    structurally identical entity; queries alternate between the two. The
    summarizer then has to keep the entities apart, which makes the corpus
    markedly harder to memorize at the same size.
    """
    slots = _fact_slots()
    if not 1 <= queries_per_doc <= len(slots):
        raise ContractError(f"queries_per_doc must be in 1..{len(slots)}")
    examples = []
    for d in range(n_docs):
        if distractor:
            entities = [
                _draw_values(_NAMES[(2 * d) % len(_NAMES)], rng),
                _draw_values(_NAMES[(2 * d + 1) % len(_NAMES)], rng),
            ]
        else:
            entities = [_draw_values(_NAMES[d % len(_NAMES)], rng)]
        sentences = [tpl.format(**vals) for vals in entities for _, tpl, _, _ in slots]
        filler = _FILLERS[rng.integers(len(_FILLERS))]
        order = rng.permutation(len(sentences))
        document = " ".join([sentences[i] for i in order] + [filler])
        chosen = rng.choice(len(slots), size=queries_per_doc, replace=False)
        for qi, k in enumerate(sorted(chosen)):
            values = entities[qi % len(entities)]
            _, _, q_tpl, s_tpl = slots[k]
            examples.append(
                QfsExample(
                    id=f"doc{d:04d}-q{k}",
                    query=q_tpl.format(**values),
                    document=document,
                    summary=s_tpl.format(**values),
                )
            )
    return examples
