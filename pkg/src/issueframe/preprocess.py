"""Tokenization, annotation projection, tweet cleaning, quality labels, embeddings.

Tokenizer rules, applied in order:

1. lowercase the text (``str.lower``);
2. a token is either a run of word characters with optional internal
   ``-`` or ``'`` joins (``well-known``, ``don't``), or any single character
   that is neither a word character nor whitespace;
3. whitespace separates tokens and is discarded.
"""

from __future__ import annotations

import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import FRAMES, QUALITY, Instance, TaskDataset
from .errors import AnnotationError, BalanceError, LabelError, ParseError

_TOKEN_RE = re.compile(r"\w+(?:[-']\w+)*|[^\w\s]")
_TWEET_NOISE_RE = re.compile(r"(?:https?://\S+|www\.\S+|(?<!\S)@\w+)[ \t]*")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def clean_tweet(text: str) -> str:
    """Drop URLs and @-mentions; a mention must start a whitespace-delimited token."""
    cleaned = _TWEET_NOISE_RE.sub("", text)
    return cleaned.strip() if cleaned != text else text


@dataclass(frozen=True)
class SpanAnnotation:
    doc_id: str
    start: int
    end: int
    label: int
    annotator: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise AnnotationError(f"{self.doc_id}: invalid span [{self.start}, {self.end})")


@dataclass(frozen=True)
class SentenceLabels:
    doc_id: str
    index: int
    start: int
    end: int
    labels: tuple[int, ...]


def span_supports(sentence: tuple[int, int], span: SpanAnnotation) -> bool:
    """Span lies inside the sentence and covers at least half of its tokens."""
    s_start, s_end = sentence
    if span.start < s_start or span.end > s_end:
        return False
    return 2 * (span.end - span.start) >= (s_end - s_start)


def project_spans(doc_sentences: Sequence[tuple[int, int]], annotations: Iterable[SpanAnnotation],
                  doc_length: int | None = None, min_annotators: int = 2,
                  label_set=FRAMES) -> list[SentenceLabels]:
    """Turn span annotations into sentence labels.

    A sentence gets label ``l`` when at least ``min_annotators`` distinct
    annotators each have an ``l`` span inside it covering >= 50% of its tokens.
    Labels outside ``label_set`` are discarded.  Only labeled sentences are
    returned.
    """
    annotations = list(annotations)
    if doc_length is None:
        doc_length = max((e for _, e in doc_sentences), default=0)
    for s, e in doc_sentences:
        if not 0 <= s < e <= doc_length:
            raise AnnotationError(f"sentence [{s}, {e}) outside document of length {doc_length}")
    doc_id = annotations[0].doc_id if annotations else ""
    for a in annotations:
        if a.end > doc_length:
            raise AnnotationError(f"{a.doc_id}: span [{a.start}, {a.end}) crosses document length {doc_length}")
    support: dict[tuple[int, int], set] = defaultdict(set)
    for k, sent in enumerate(doc_sentences):
        for a in annotations:
            if a.label in label_set and span_supports(sent, a):
                support[(k, a.label)].add(a.annotator)
    out = []
    for k, (s, e) in enumerate(doc_sentences):
        labels = tuple(lab for lab in label_set.labels if len(support.get((k, lab), ())) >= min_annotators)
        if labels:
            out.append(SentenceLabels(doc_id, k, s, e, labels))
    return out


def binarize_quality(scores: Sequence[float], n_expected: int = 7) -> int:
    """1 if the mean of the crowd scores is >= 0.5, else 0."""
    if len(scores) != n_expected:
        raise AnnotationError(f"expected {n_expected} quality scores, got {len(scores)}")
    return int(math.fsum(scores) / len(scores) >= 0.5)


def balance_binary(ds: TaskDataset, rng: np.random.Generator, tolerance: float = 0.05) -> TaskDataset:
    """Downsample the majority class of a single-label binary dataset.

    Left unchanged when the class gap is already within
    ``ceil(tolerance * total)``; otherwise the majority keeps
    ``floor((1 + tolerance) * minority)`` instances chosen uniformly at
    random, in their original order.
    """
    labels = ds.label_set.labels
    if len(labels) != 2:
        raise BalanceError(f"balance_binary needs a binary label set, got {list(labels)}")
    by_class = {lab: [i for i, inst in enumerate(ds.instances) if inst.labels == (lab,)] for lab in labels}
    if sum(map(len, by_class.values())) != len(ds):
        raise BalanceError("balance_binary needs exactly one label per instance")
    sizes = {lab: len(v) for lab, v in by_class.items()}
    if min(sizes.values()) == 0:
        raise BalanceError(f"cannot balance: a class has no instances {sizes}")
    if abs(sizes[labels[0]] - sizes[labels[1]]) <= math.ceil(tolerance * len(ds)):
        return ds
    minority, majority = sorted(labels, key=lambda lab: (sizes[lab], labels.index(lab)))
    keep_n = int(math.floor(sizes[minority] * (1 + tolerance) + 1e-9))
    kept = rng.choice(by_class[majority], size=keep_n, replace=False)
    keep = set(by_class[minority]) | set(int(i) for i in kept)
    return ds.with_instances(inst for i, inst in enumerate(ds.instances) if i in keep)


def quality_dataset(records: Iterable[dict], rng: np.random.Generator, name: str = "quality",
                    domain: str = "online_disc") -> TaskDataset:
    """Binarize ``{id, text, scores}`` records and balance the result."""
    insts = []
    for rec in records:
        tokens = tokenize(rec["text"])
        if not tokens:
            continue
        label = binarize_quality(rec["scores"])
        insts.append(Instance(str(rec["id"]), rec["text"], tuple(tokens), (label,), domain,
                              rec.get("split", "train")))
    return balance_binary(TaskDataset(name, QUALITY, tuple(insts)), rng)


@dataclass
class EmbeddingTable:
    """Frozen word vectors; row 0 holds the UNK vector."""

    words: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=np.float64)
        self.matrix.flags.writeable = False
        self.index = {w: k + 1 for k, w in enumerate(self.words)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def unk(self) -> np.ndarray:
        return self.matrix[0]

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, 0)

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]

    def vector(self, word: str) -> np.ndarray:
        return self.matrix[self.id(word)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, w in enumerate(self.words, 1):
                fh.write(w + " " + " ".join(repr(float(x)) for x in self.matrix[k]) + "\n")


def load_embeddings(path, vocab: Iterable[str] | None = None, dim: int | None = None) -> EmbeddingTable:
    """Read ``word v1 ... vD`` lines.

    Only words in ``vocab`` are kept (all words if ``vocab`` is None); the UNK
    vector is the mean over every vector in the file.
    """
    path = os.fspath(path)
    wanted = set(vocab) if vocab is not None else None
    words, rows, seen = [], [], set()
    total, count = None, 0
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot open embeddings: {e.strerror}", path) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if len(parts) < 2:
                if not line.strip():
                    continue
                raise ParseError("expected a word followed by floats", path, lineno)
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim:
                raise ParseError(f"expected {dim} floats, found {len(parts) - 1}", path, lineno)
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric vector component", path, lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite vector component", path, lineno)
            total = vec.copy() if total is None else total + vec
            count += 1
            word = parts[0]
            if (wanted is None or word in wanted) and word not in seen:
                seen.add(word)
                words.append(word)
                rows.append(vec)
    if count == 0:
        raise ParseError("embedding file is empty", path)
    unk = total / count
    return EmbeddingTable(tuple(words), np.vstack([unk, *rows]) if rows else unk[None, :])


def random_embeddings(words: Iterable[str], dim: int, rng: np.random.Generator,
                      scale: float = 1.0) -> EmbeddingTable:
    """Gaussian stand-in vectors for corpora without pretrained embeddings."""
    words = tuple(dict.fromkeys(words))
    mat = rng.normal(0.0, scale / math.sqrt(dim), size=(len(words), dim))
    unk = mat.mean(axis=0) if len(words) else np.zeros(dim)
    return EmbeddingTable(words, np.vstack([unk, mat]))


def corpus_vocab(datasets: Iterable[TaskDataset]) -> list[str]:
    vocab = {}
    for ds in datasets:
        for inst in ds.instances:
            for t in inst.tokens:
                vocab.setdefault(t, None)
    return sorted(vocab)


def filter_frames(ds: TaskDataset) -> TaskDataset:
    """Drop labels outside the five frames, then instances left without labels."""
    out = []
    for inst in ds.instances:
        labels = tuple(lab for lab in inst.labels if lab in FRAMES)
        if labels:
            out.append(Instance(inst.id, inst.text, inst.tokens, labels, inst.domain, inst.split))
    return TaskDataset(ds.name, FRAMES, tuple(out))


def raw_frame_labels(raw: Sequence, path=None, lineno=None) -> tuple[int, ...]:
    """Integer frame codes from raw JSON labels, keeping codes outside the five frames."""
    out = []
    for x in raw:
        try:
            out.append(int(x))
        except (TypeError, ValueError):
            try:
                out.append(FRAMES.coerce(x))
            except LabelError:
                raise ParseError(f"unparseable frame label {x!r}", path, lineno) from None
    return tuple(dict.fromkeys(out))
