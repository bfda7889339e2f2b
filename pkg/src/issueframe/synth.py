"""Synthetic source/target corpora with a controllable domain shift.

Each token of a sentence of class ``c`` in domain ``d`` is drawn as

* a marker word of domain ``d`` with probability ``shift``;
* otherwise a keyword of class ``c`` with probability ``keyword_rate``;
* otherwise a background word shared by all classes and domains.

Class keyword and background distributions are identical across domains, so
``shift = 0`` gives identically distributed domains and larger values move the
bag-of-words distributions apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .data import FRAMES, Instance, LabelSet, TaskDataset
from .errors import ConfigError
from .preprocess import EmbeddingTable, random_embeddings


@dataclass
class SynthSpec:
    classes: int = 5
    per_class_count: int = 200
    vocab_size: int = 20
    shift: float = 0.6
    seed: int = 1
    target_per_class: int = 40
    unlabeled_count: int = 500
    background_size: int = 60
    markers: int = 10
    keyword_rate: float = 0.35
    min_len: int = 5
    max_len: int = 20
    embedding_dim: int = 50
    embedding_std: float = 0.4

    def validate(self) -> None:
        if self.classes < 1:
            raise ConfigError("synthetic spec needs at least one class")
        if self.per_class_count < 0 or self.target_per_class < 0 or self.unlabeled_count < 0:
            raise ConfigError("instance counts must be non-negative")
        if self.vocab_size < 1 or self.markers < 1 or self.background_size < 1:
            raise ConfigError("vocab_size, markers and background_size must be >= 1")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError(f"shift must lie in [0, 1], got {self.shift}")
        if not 0.0 <= self.keyword_rate <= 1.0:
            raise ConfigError(f"keyword_rate must lie in [0, 1], got {self.keyword_rate}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")

    @classmethod
    def from_mapping(cls, values: dict) -> SynthSpec:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown synthetic-spec key {key!r}")
            conv = float if types[key] in (float, "float") else int
            try:
                kwargs[key] = conv(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        spec = cls(**kwargs)
        spec.validate()
        return spec


def synth_labels(n_classes: int) -> LabelSet:
    if n_classes <= len(FRAMES):
        return FRAMES if n_classes == len(FRAMES) else LabelSet("frames", FRAMES.labels[:n_classes])
    return LabelSet(f"synth{n_classes}", tuple(range(n_classes)))


@dataclass
class SynthCorpora:
    source: TaskDataset
    target: TaskDataset
    unlabeled: TaskDataset
    words: tuple[str, ...]


class _Sampler:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.keywords = [[f"k{c}_{j}" for j in range(spec.vocab_size)] for c in range(spec.classes)]
        self.background = [f"w{j}" for j in range(spec.background_size)]
        self.marker = {d: [f"{d}_m{j}" for j in range(spec.markers)] for d in ("src", "tgt")}

    def sentence(self, c: int, domain: str) -> list[str]:
        s, rng = self.spec, self.rng
        n = int(rng.integers(s.min_len, s.max_len + 1))
        out = []
        for u, v, k in zip(rng.random(n), rng.random(n), rng.random(n)):
            if u < s.shift:
                pool = self.marker[domain]
            elif v < s.keyword_rate:
                pool = self.keywords[c]
            else:
                pool = self.background
            out.append(pool[int(k * len(pool))])
        return out

    def words(self) -> tuple[str, ...]:
        return tuple(w for kw in self.keywords for w in kw) + tuple(self.background) + \
            tuple(self.marker["src"]) + tuple(self.marker["tgt"])


def synth_generate(spec: SynthSpec, rng: np.random.Generator | None = None) -> SynthCorpora:
    """Labeled source corpus, labeled target corpus (alternating dev/test) and unlabeled target text."""
    spec.validate()
    if rng is None:
        from .numcore import make_rng
        rng = make_rng(spec.seed)
    labels = synth_labels(spec.classes)
    sampler = _Sampler(spec, rng)

    def inst(prefix, k, c, domain, split, labeled=True):
        toks = sampler.sentence(c, "src" if domain == "news" else "tgt")
        return Instance(f"{prefix}{k}", " ".join(toks), tuple(toks),
                        (labels.labels[c],) if labeled else (), domain, split)

    source, target = [], []
    for c in range(spec.classes):
        for _ in range(spec.per_class_count):
            source.append(inst("src", len(source), c, "news", "train"))
        for j in range(spec.target_per_class):
            target.append(inst("tgt", len(target), c, "online_disc", "dev" if j % 2 == 0 else "test"))
    unlabeled = [inst("unl", k, int(rng.integers(spec.classes)), "online_disc", "train", labeled=False)
                 for k in range(spec.unlabeled_count)]
    order = rng.permutation(len(source))
    source = [source[k] for k in order]
    return SynthCorpora(TaskDataset("source", labels, tuple(source)),
                        TaskDataset("target", labels, tuple(target)),
                        TaskDataset("unlabeled", LabelSet("none", ()), tuple(unlabeled)),
                        sampler.words())


def synth_embeddings(corpora: SynthCorpora, dim: int, rng: np.random.Generator,
                     std: float = 0.4) -> EmbeddingTable:
    """Gaussian stand-in 'pretrained' vectors for every synthetic word, ``std`` per component."""
    return random_embeddings(corpora.words, dim, rng, scale=std * math.sqrt(dim))
