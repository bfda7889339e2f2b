"""Corpus data model, JSONL corpus format, label sets and batching."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyDatasetError, LabelError, ParseError

FRAME_NAMES = {
    1: "Economic",
    5: "Legality/Jurisprudence/Constitutionality",
    6: "Policy-prescription-and-evaluation",
    7: "Crime-and-Punishment",
    13: "Political",
}
# column order of the class-distribution tables
FRAME_REPORT_ORDER = (1, 13, 5, 6, 7)
DOMAINS = ("news", "twitter", "online_disc")
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class FrameLabel:
    code: int
    name: str

    @classmethod
    def from_code(cls, code: int) -> FrameLabel:
        if code not in FRAME_NAMES:
            raise LabelError(f"unknown frame code {code!r}; expected one of {sorted(FRAME_NAMES)}")
        return cls(code, FRAME_NAMES[code])

    @classmethod
    def from_name(cls, name: str) -> FrameLabel:
        for code, n in FRAME_NAMES.items():
            if n == name:
                return cls(code, n)
        raise LabelError(f"unknown frame name {name!r}")


@dataclass(frozen=True)
class LabelSet:
    """Named, ordered label set; head output ``k`` predicts ``labels[k]``."""

    name: str
    labels: tuple

    def __contains__(self, label) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise LabelError(f"label {label!r} not in {self.name} label set {list(self.labels)}") from None

    def coerce(self, raw):
        """Map a raw JSON label (int or string) onto a member of the set."""
        if raw in self.labels and not isinstance(raw, bool):
            return raw
        if isinstance(raw, str):
            for lab in self.labels:
                if str(lab) == raw:
                    return lab
            if self.name == "frames":
                try:
                    return FrameLabel.from_name(raw).code
                except LabelError:
                    pass
        raise LabelError(f"label {raw!r} not in {self.name} label set {list(self.labels)}")


FRAMES = LabelSet("frames", (1, 5, 6, 7, 13))
QUALITY = LabelSet("quality", (0, 1))
DOMAIN = LabelSet("domain", ("source", "target"))
LABEL_SETS = {ls.name: ls for ls in (FRAMES, QUALITY, DOMAIN)}


def label_set_named(name: str) -> LabelSet:
    try:
        return LABEL_SETS[name]
    except KeyError:
        raise LabelError(f"unknown label set {name!r}; expected one of {sorted(LABEL_SETS)}") from None


@dataclass(frozen=True)
class Instance:
    id: str
    text: str
    tokens: tuple[str, ...]
    labels: tuple = ()
    domain: str = "news"
    split: str = "train"

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "tokens": list(self.tokens),
                "labels": list(self.labels), "domain": self.domain, "split": self.split}


@dataclass(frozen=True)
class TaskDataset:
    name: str
    label_set: LabelSet
    instances: tuple[Instance, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def class_counts(self) -> dict:
        counts = Counter(lab for inst in self.instances for lab in inst.labels)
        return {lab: counts.get(lab, 0) for lab in self.label_set.labels}

    def multi_label_count(self) -> int:
        return sum(1 for inst in self.instances if len(inst.labels) > 1)

    def with_instances(self, instances: Iterable[Instance]) -> TaskDataset:
        return replace(self, instances=tuple(instances))

    def where(self, split: str) -> TaskDataset:
        return self.with_instances(i for i in self.instances if i.split == split)


def distribution_report(ds: TaskDataset) -> str:
    """Per-class counts and multi-label count, one row in the appendix-table style."""
    order = FRAME_REPORT_ORDER if ds.label_set is FRAMES else ds.label_set.labels
    counts = ds.class_counts()
    head = ["dataset", "# instances", *map(str, order), "# multi"]
    row = [ds.name, str(len(ds)), *(str(counts[c]) for c in order), str(ds.multi_label_count())]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    return fmt.format(*head) + "\n" + fmt.format(*row)


def _parse_instance(obj, label_set: LabelSet | None, path, lineno, require_labels: bool) -> Instance:
    from .preprocess import tokenize

    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", path, lineno)
    for key in ("id", "text"):
        if not isinstance(obj.get(key), str):
            raise ParseError(f"field {key!r} must be a string", path, lineno)
    raw_labels = obj.get("labels", [])
    if not isinstance(raw_labels, list):
        raise ParseError("field 'labels' must be an array", path, lineno)
    try:
        labels = tuple(label_set.coerce(x) for x in raw_labels) if label_set else tuple(raw_labels)
    except LabelError as e:
        raise LabelError(f"{path}:{lineno}: {e}") from None
    labels = tuple(dict.fromkeys(labels))
    if require_labels and not labels:
        raise LabelError(f"{path}:{lineno}: instance {obj['id']!r} has no labels")
    tokens = obj.get("tokens")
    if tokens is None:
        tokens = tokenize(obj["text"])
    elif not (isinstance(tokens, list) and all(isinstance(t, str) for t in tokens)):
        raise ParseError("field 'tokens' must be an array of strings", path, lineno)
    if not tokens:
        raise ParseError(f"instance {obj['id']!r} has no tokens", path, lineno)
    domain = obj.get("domain", "news")
    split = obj.get("split", "train")
    if domain not in DOMAINS:
        raise ParseError(f"unknown domain {domain!r}; expected one of {list(DOMAINS)}", path, lineno)
    if split not in SPLITS:
        raise ParseError(f"unknown split {split!r}; expected one of {list(SPLITS)}", path, lineno)
    return Instance(obj["id"], obj["text"], tuple(tokens), labels, domain, split)


def load_corpus(path, label_set: LabelSet | None = FRAMES, name: str | None = None,
                require_labels: bool | None = None) -> TaskDataset:
    """Read a JSONL corpus and validate every line against ``label_set``.

    With ``label_set=None`` the corpus is treated as unlabeled.
    """
    path = os.fspath(path)
    if require_labels is None:
        require_labels = label_set is not None
    instances = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot open corpus: {e.strerror}", path) from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", path, lineno) from None
            instances.append(_parse_instance(obj, label_set, path, lineno, require_labels))
    if not instances:
        raise EmptyDatasetError(f"{path}: corpus is empty")
    if name is None:
        name = os.path.splitext(os.path.basename(path))[0]
    return TaskDataset(name, label_set if label_set is not None else LabelSet("none", ()), tuple(instances))


def save_corpus(ds: TaskDataset | Iterable[Instance], path) -> None:
    instances = ds.instances if isinstance(ds, TaskDataset) else ds
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), ensure_ascii=False) + "\n")


def expand_multilabel(ds: TaskDataset) -> TaskDataset:
    """One single-label copy per label; copies keep the original id."""
    out = []
    for inst in ds.instances:
        if len(inst.labels) <= 1:
            out.append(inst)
        else:
            out.extend(replace(inst, labels=(lab,)) for lab in inst.labels)
    return ds.with_instances(out)


@dataclass(frozen=True)
class Batch:
    instances: tuple[Instance, ...]
    lengths: tuple[int, ...]

    @property
    def max_len(self) -> int:
        return max(self.lengths)

    def __len__(self) -> int:
        return len(self.instances)


def make_batch(instances: Sequence[Instance]) -> Batch:
    return Batch(tuple(instances), tuple(len(i.tokens) for i in instances))


def batches(ds: TaskDataset | Sequence[Instance], batch_size: int,
            rng: np.random.Generator | None = None) -> list[Batch]:
    """Split into batches, shuffled first when ``rng`` is given; the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    items = ds.instances if isinstance(ds, TaskDataset) else tuple(ds)
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    return [make_batch([items[j] for j in order[k:k + batch_size]])
            for k in range(0, len(items), batch_size)]


def sample_path(name: str = "online_disc_test_counts.jsonl") -> str:
    """Path of a bundled sample corpus.

    ``online_disc_test_counts.jsonl`` has placeholder text but the label
    statistics of the online-discussion test set.
    """
    from importlib.resources import files

    return str(files("issueframe") / "samples" / name)
