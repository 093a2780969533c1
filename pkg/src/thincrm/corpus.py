"""Sparse timestamped document-term counts, file formats and ingestion."""
from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"[a-z]+(?:'[a-z]+)?")


class ConfigurationError(ValueError):
    pass


def format_number(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


@dataclass
class Corpus:
    """Counts w_pnt stored as nonzero cells (document, word, count).

    ``doc_time[n]`` indexes into the sorted array of distinct ``times``.
    """

    cell_doc: np.ndarray
    cell_word: np.ndarray
    cell_count: np.ndarray
    doc_time: np.ndarray
    times: np.ndarray
    P: int
    doc_ids: list = field(default=None)
    vocab: list = field(default=None)

    def __post_init__(self):
        self.cell_doc = np.asarray(self.cell_doc, dtype=np.int64)
        self.cell_word = np.asarray(self.cell_word, dtype=np.int64)
        self.cell_count = np.asarray(self.cell_count, dtype=np.int64)
        self.doc_time = np.asarray(self.doc_time, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        if not (len(self.cell_doc) == len(self.cell_word) == len(self.cell_count)):
            raise ValueError("cell arrays differ in length")
        if np.any(self.cell_count < 0):
            raise ValueError("counts must be nonnegative")
        if len(self.cell_word) and (self.cell_word.min() < 0 or self.cell_word.max() >= self.P):
            raise ValueError("word id outside the vocabulary")
        if len(self.cell_doc) and (self.cell_doc.min() < 0 or self.cell_doc.max() >= self.D):
            raise ValueError("cell refers to an unknown document")
        if self.doc_ids is None:
            self.doc_ids = [str(n) for n in range(self.D)]

    @property
    def D(self) -> int:
        return len(self.doc_time)

    @property
    def T(self) -> int:
        return len(self.times)

    @property
    def C(self) -> int:
        return len(self.cell_count)

    @property
    def docs_per_time(self) -> np.ndarray:
        return np.bincount(self.doc_time, minlength=self.T)

    def doc_lengths(self) -> np.ndarray:
        return np.bincount(self.cell_doc, self.cell_count, minlength=self.D).astype(np.int64)

    def doc_timestamps(self) -> np.ndarray:
        return self.times[self.doc_time]

    def dense(self) -> np.ndarray:
        W = np.zeros((self.D, self.P), dtype=np.int64)
        np.add.at(W, (self.cell_doc, self.cell_word), self.cell_count)
        return W

    @classmethod
    def from_dense(cls, W, doc_timestamps, times=None, doc_ids=None, vocab=None) -> "Corpus":
        W = np.asarray(W, dtype=np.int64)
        stamps = np.asarray(doc_timestamps, dtype=float)
        if times is None:
            times, doc_time = np.unique(stamps, return_inverse=True)
        else:
            times = np.asarray(times, dtype=float)
            doc_time = np.searchsorted(times, stamps)
        d, p = np.nonzero(W)
        return cls(d, p, W[d, p], doc_time.reshape(-1), times, W.shape[1], doc_ids, vocab)

    @classmethod
    def from_records(cls, records: Iterable[tuple], P: int | None = None, vocab=None) -> "Corpus":
        """Build from (doc_id, timestamp, token_id, count) rows; duplicates are summed."""
        doc_index: dict[str, int] = {}
        doc_stamp: list[float] = []
        acc: Counter = Counter()
        for doc_id, stamp, token, count in records:
            doc_id = str(doc_id)
            if doc_id not in doc_index:
                doc_index[doc_id] = len(doc_index)
                doc_stamp.append(float(stamp))
            elif doc_stamp[doc_index[doc_id]] != float(stamp):
                raise ValueError(f"document {doc_id} has two timestamps")
            if int(count) < 0:
                raise ValueError("counts must be nonnegative")
            if int(count):
                acc[(doc_index[doc_id], int(token))] += int(count)
        keys = sorted(acc)
        cell_doc = np.array([k[0] for k in keys], dtype=np.int64)
        cell_word = np.array([k[1] for k in keys], dtype=np.int64)
        cell_count = np.array([acc[k] for k in keys], dtype=np.int64)
        if P is None:
            P = len(vocab) if vocab is not None else int(cell_word.max()) + 1 if len(keys) else 0
        times, doc_time = np.unique(np.array(doc_stamp), return_inverse=True)
        return cls(cell_doc, cell_word, cell_count, doc_time.reshape(-1), times, P, list(doc_index), vocab)

    def records(self):
        stamps = self.doc_timestamps()
        for d, p, c in zip(self.cell_doc, self.cell_word, self.cell_count):
            yield self.doc_ids[d], stamps[d], int(p), int(c)

    def to_tsv(self) -> str:
        return "".join(
            f"{doc}\t{format_number(t)}\t{p}\t{c}\n" for doc, t, p, c in self.records()
        )

    def save(self, path, vocab_path=None) -> None:
        Path(path).write_text(self.to_tsv())
        if vocab_path is not None and self.vocab is not None:
            Path(vocab_path).write_text("".join(f"{w}\n" for w in self.vocab))

    @classmethod
    def load(cls, path, vocab_path=None) -> "Corpus":
        vocab = None
        if vocab_path is not None:
            vocab = Path(vocab_path).read_text().splitlines()
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            rows.append((parts[0], float(parts[1]), int(parts[2]), int(parts[3])))
        return cls.from_records(rows, vocab=vocab)

    def subset_docs(self, docs: Sequence[int]) -> "Corpus":
        """Documents ``docs`` (in the given order), keeping the full timestamp set."""
        docs = np.asarray(docs, dtype=np.int64)
        remap = np.full(self.D, -1, dtype=np.int64)
        remap[docs] = np.arange(len(docs))
        keep = remap[self.cell_doc] >= 0
        new_doc = remap[self.cell_doc[keep]]
        order = np.lexsort((self.cell_word[keep], new_doc))
        return Corpus(
            new_doc[order], self.cell_word[keep][order], self.cell_count[keep][order],
            self.doc_time[docs], self.times, self.P,
            [self.doc_ids[d] for d in docs], self.vocab,
        )

    def with_counts(self, counts) -> "Corpus":
        """Same documents and cells with new counts; zero cells are dropped."""
        counts = np.asarray(counts, dtype=np.int64)
        keep = counts > 0
        return Corpus(self.cell_doc[keep], self.cell_word[keep], counts[keep],
                      self.doc_time, self.times, self.P, self.doc_ids, self.vocab)


# --------------------------------------------------------------------------
# ingestion of raw text
# --------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower())


def split_paragraphs(text: str) -> list[str]:
    return [p.strip() for p in re.split(r"\n\s*\n", text) if p.strip()]


def chunk_documents(text: str, paragraphs_per_doc: int = 3) -> list[str]:
    """Group blank-line separated paragraphs into documents of ``paragraphs_per_doc``."""
    paras = split_paragraphs(text)
    return ["\n\n".join(paras[i:i + paragraphs_per_doc]) for i in range(0, len(paras), paragraphs_per_doc)]


def tfidf_scores(docs: Sequence[Counter]) -> dict[str, float]:
    """Per-term maximum over documents of tf * log(N_docs / df)."""
    n_docs = len(docs)
    df: Counter = Counter()
    for doc in docs:
        df.update(doc.keys())
    best: dict[str, float] = {}
    for doc in docs:
        for term, tf in doc.items():
            score = tf * math.log(n_docs / df[term])
            if score > best.get(term, -math.inf):
                best[term] = score
    return best


def build_vocabulary(docs: Sequence[Counter], min_count: int = 10, tfidf_quantile: float = 0.85) -> list[str]:
    """Terms with corpus count >= min_count and TFIDF score >= the given quantile.

    The quantile threshold is taken over the scores of all observed terms,
    so both filters are monotone: raising either never adds a term.
    ``tfidf_quantile=0`` disables the score filter; 0.85 keeps the upper
    15% of scores.
    """
    if not 0.0 <= tfidf_quantile <= 1.0:
        raise ConfigurationError("tfidf_quantile must lie in [0, 1]")
    totals: Counter = Counter()
    for doc in docs:
        totals.update(doc)
    scores = tfidf_scores(docs)
    if not scores:
        return []
    threshold = float(np.quantile(np.array(list(scores.values())), tfidf_quantile)) if tfidf_quantile > 0 else -math.inf
    return sorted(t for t, c in totals.items() if c >= min_count and scores[t] >= threshold)


def ingest(
    sources: Sequence[tuple[float, str]],
    min_count: int = 10,
    tfidf_quantile: float = 0.85,
    paragraphs_per_doc: int = 3,
) -> tuple[Corpus, list[str], dict]:
    """Turn (timestamp, raw text) pairs into a filtered Corpus.

    Every text is chunked into documents of ``paragraphs_per_doc``
    paragraphs.  Documents left empty by vocabulary filtering are dropped.
    """
    if not sources:
        raise ConfigurationError("no input documents")
    stamps, bags, ids = [], [], []
    for s, (stamp, text) in enumerate(sources):
        for c, chunk in enumerate(chunk_documents(text, paragraphs_per_doc)):
            bag = Counter(tokenize(chunk))
            if bag:
                stamps.append(float(stamp))
                bags.append(bag)
                ids.append(f"{s}-{c}")
    vocab = build_vocabulary(bags, min_count, tfidf_quantile)
    if not vocab:
        raise ConfigurationError("vocabulary is empty after filtering")
    index = {w: i for i, w in enumerate(vocab)}
    records = []
    dropped = 0
    for doc_id, stamp, bag in zip(ids, stamps, bags):
        kept = sorted((index[w], c) for w, c in bag.items() if w in index)
        if not kept:
            dropped += 1
            continue
        records.extend((doc_id, stamp, p, c) for p, c in kept)
    if dropped:
        log.info("dropped %d documents emptied by vocabulary filtering", dropped)
    corpus = Corpus.from_records(records, P=len(vocab), vocab=vocab)
    summary = {"documents": corpus.D, "dropped_documents": dropped, "vocabulary": len(vocab),
               "raw_documents": len(bags)}
    return corpus, vocab, summary
