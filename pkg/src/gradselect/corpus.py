"""Corpus ingestion, vocabulary construction, tokenization and splits.

Documents come in as JSONL (one ``{"text": ..., "label": ...}`` record per
line). Everything downstream works on fixed-length token id sequences, so the
tokenizer here is deliberately simple: lowercase, split on word/punctuation
boundaries, map through a frequency-ranked vocabulary with reserved padding
and unknown ids.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
NUM_RESERVED = 2

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: int
    text: str
    label: int | None = None


class DocumentSet:
    """Ordered collection of documents with unique non-negative ids."""

    def __init__(self, docs: Iterable[Document]):
        self._docs = tuple(docs)
        seen: set[int] = set()
        for d in self._docs:
            if d.id < 0:
                raise ValueError(f"document id {d.id} is negative")
            if d.id in seen:
                raise ValueError(f"duplicate document id {d.id}")
            if not d.text.strip():
                raise ValueError(f"document {d.id} has empty text")
            seen.add(d.id)

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __getitem__(self, position: int) -> Document:
        return self._docs[position]

    @property
    def ids(self) -> np.ndarray:
        return np.array([d.id for d in self._docs], dtype=np.int64)

    @property
    def texts(self) -> list[str]:
        return [d.text for d in self._docs]

    def labels(self) -> np.ndarray:
        """Label array; raises if any document is unlabeled."""
        out = np.empty(len(self._docs), dtype=np.int64)
        for i, d in enumerate(self._docs):
            if d.label is None:
                raise ValueError(f"document {d.id} has no label")
            out[i] = d.label
        return out

    def has_labels(self) -> bool:
        return all(d.label is not None for d in self._docs)

    def subset(self, positions: Sequence[int]) -> "DocumentSet":
        return DocumentSet(self._docs[int(p)] for p in positions)

    def with_labels(self, labels: Sequence[int]) -> "DocumentSet":
        """Same documents with labels replaced (e.g. pseudolabels)."""
        if len(labels) != len(self._docs):
            raise ValueError("label count does not match document count")
        return DocumentSet(
            Document(d.id, d.text, int(y)) for d, y in zip(self._docs, labels)
        )

    def without_labels(self) -> "DocumentSet":
        return DocumentSet(Document(d.id, d.text, None) for d in self._docs)

    def reindexed(self) -> "DocumentSet":
        """Reassign ids densely as 0..n-1 in current order."""
        return DocumentSet(
            Document(i, d.text, d.label) for i, d in enumerate(self._docs)
        )


@dataclass(frozen=True)
class SeedPool:
    """Candidate pool plus a per-document flag marking leaked true-set members."""

    documents: DocumentSet
    leak_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.leak_mask, dtype=bool)
        if mask.shape != (len(self.documents),):
            raise ValueError("leak_mask length must equal document count")
        object.__setattr__(self, "leak_mask", mask)

    @property
    def leak_count(self) -> int:
        return int(self.leak_mask.sum())


class Vocab:
    """Frequency-ranked token vocabulary with reserved padding/unknown ids."""

    def __init__(self, tokens: Sequence[str]):
        self._tokens = list(tokens)
        self._index = {t: i + NUM_RESERVED for i, t in enumerate(self._tokens)}

    @property
    def size(self) -> int:
        return len(self._tokens) + NUM_RESERVED

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"tokens": self._tokens}, ensure_ascii=False)
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "Vocab":
        data = json.loads(Path(path).read_text())
        return cls(data["tokens"])


@dataclass(frozen=True)
class TokenSeq:
    """Fixed-length token id sequence, right-padded with PAD_ID."""

    ids: np.ndarray
    valid_len: int


@dataclass(frozen=True)
class TokenBatch:
    """Stacked token sequences: ids (n, s) and per-row valid lengths."""

    ids: np.ndarray
    valid_len: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    def row(self, i: int) -> TokenSeq:
        return TokenSeq(self.ids[i], int(self.valid_len[i]))


def load_jsonl(path: str | Path) -> DocumentSet:
    """Load documents from JSONL; ids are assigned 0..n-1 in file order.

    Records whose text is empty after trimming are skipped (with a logged
    count); a record lacking "text" or failing to parse is an error naming
    the offending line.
    """
    docs: list[Document] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict) or "text" not in record:
                raise ValueError(f"line {lineno}: missing text")
            text = record["text"]
            if not isinstance(text, str):
                raise ValueError(f"line {lineno}: text is not a string")
            if not text.strip():
                skipped += 1
                continue
            label = record.get("label")
            if label is not None:
                label = int(label)
            docs.append(Document(len(docs), text, label))
    if skipped:
        logger.warning("skipped %d empty-text records in %s", skipped, path)
    return DocumentSet(docs)


def save_jsonl(
    docs: DocumentSet, path: str | Path, leak_mask: np.ndarray | None = None
) -> None:
    """Persist documents as JSONL with an explicit "id" field."""
    if leak_mask is not None and len(leak_mask) != len(docs):
        raise ValueError("leak_mask length must equal document count")
    with open(path, "w", encoding="utf-8") as fh:
        for i, d in enumerate(docs):
            record: dict = {"id": d.id, "text": d.text}
            if d.label is not None:
                record["label"] = d.label
            if leak_mask is not None:
                record["leaked"] = bool(leak_mask[i])
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def build_vocab(docs: DocumentSet, max_size: int, seed: int = 0) -> Vocab:
    """Keep the top (max_size - 2) tokens by frequency, ties broken lexically.

    The seed parameter is accepted for interface stability; construction is
    fully deterministic and order-independent without it.
    """
    if max_size < NUM_RESERVED + 1:
        raise ValueError(f"max_size must be at least {NUM_RESERVED + 1}")
    counts: Counter[str] = Counter()
    for d in docs:
        counts.update(split_tokens(d.text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max_size - NUM_RESERVED]]
    return Vocab(kept)


def tokenize(doc: Document | str, vocab: Vocab, s: int) -> TokenSeq:
    """Map a document to exactly s token ids (truncate, right-pad)."""
    if s < 1:
        raise ValueError("sequence length must be at least 1")
    text = doc.text if isinstance(doc, Document) else doc
    pieces = split_tokens(text)[:s]
    ids = np.full(s, PAD_ID, dtype=np.int32)
    for i, tok in enumerate(pieces):
        ids[i] = vocab.index(tok)
    return TokenSeq(ids, len(pieces))


def encode_documents(docs: DocumentSet, vocab: Vocab, s: int) -> TokenBatch:
    """Tokenize a whole document set into one (n, s) id matrix."""
    ids = np.full((len(docs), s), PAD_ID, dtype=np.int32)
    lens = np.zeros(len(docs), dtype=np.int32)
    for i, d in enumerate(docs):
        seq = tokenize(d, vocab, s)
        ids[i] = seq.ids
        lens[i] = seq.valid_len
    return TokenBatch(ids, lens)


def split(
    docs: DocumentSet, fractions: tuple[float, float, float], seed: int
) -> tuple[DocumentSet, DocumentSet, DocumentSet]:
    """Deterministic three-way partition (train, seed, test).

    Sizes are floor allocations of the fractions with the remainder going to
    train; the shuffle depends only on the seed.
    """
    if len(fractions) != 3:
        raise ValueError("expected exactly three fractions")
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(docs)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_seed = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train += n - (n_train + n_seed + n_test)
    train = docs.subset(perm[:n_train])
    seed_part = docs.subset(perm[n_train : n_train + n_seed])
    test = docs.subset(perm[n_train + n_seed :])
    return train, seed_part, test


def mix_leakage(
    true_set: DocumentSet,
    distractors: DocumentSet,
    leak_fraction: float,
    pool_size: int,
    seed: int,
) -> SeedPool:
    """Build a candidate pool containing a controlled fraction of true-set docs.

    Pool documents are stripped of labels (candidates are unlabeled by
    construction) and reindexed 0..pool_size-1 in shuffled order.
    """
    if not 0.0 <= leak_fraction <= 1.0:
        raise ValueError(f"leak_fraction must be in [0, 1], got {leak_fraction}")
    if pool_size < 1:
        raise ValueError("pool_size must be positive")
    n_leak = int(round(leak_fraction * pool_size))
    n_dist = pool_size - n_leak
    if n_leak > len(true_set):
        raise ValueError(
            f"true_set has {len(true_set)} documents, need {n_leak} leaked"
        )
    if n_dist > len(distractors):
        raise ValueError(
            f"distractors has {len(distractors)} documents, need {n_dist}"
        )
    rng = np.random.default_rng(seed)
    leak_pos = rng.choice(len(true_set), size=n_leak, replace=False)
    dist_pos = rng.choice(len(distractors), size=n_dist, replace=False)
    docs = [true_set[int(p)] for p in leak_pos]
    docs += [distractors[int(p)] for p in dist_pos]
    mask = np.zeros(pool_size, dtype=bool)
    mask[:n_leak] = True
    order = rng.permutation(pool_size)
    shuffled = [Document(i, docs[int(p)].text, None) for i, p in enumerate(order)]
    return SeedPool(DocumentSet(shuffled), mask[order])
