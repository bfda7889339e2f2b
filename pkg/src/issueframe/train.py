"""Coin-flip task scheduling, early stopping, weight grid search and seed averaging.

Random streams for a run with seed ``s`` (all Philox, see ``numcore``):
``(s, 0)`` parameter init, ``(s, 1)`` task coin flips, ``(s, 2, k)`` batch
order of the k-th task.  Keeping them apart is what makes a multitask run
with ``main_weight = 1`` reproduce a baseline run exactly.
"""

from __future__ import annotations

import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .data import DOMAIN, LabelSet, TaskDataset, batches, expand_multilabel, label_set_named, load_corpus
from .errors import ConfigError, NumericError
from .evaluation import EvalReport, evaluate
from .model import Model, init_model, predict_labels, task_loss_backward
from .numcore import make_rng, sgd_step
from .preprocess import EmbeddingTable, corpus_vocab, load_embeddings

MODES = ("baseline", "multitask", "adversarial")
DEFAULT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class TrainConfig:
    mode: str = "baseline"
    main_weight: float = 0.5
    batch_size: int = 128
    lr: float = 0.1
    weight_decay: float = 1e-7
    hidden_size: int = 100
    num_layers: int = 2
    min_epochs: int = 80
    patience: int = 5
    iter_factor: int = 2
    max_epochs: int = 300
    seeds: tuple[int, ...] = (1, 2, 3)
    seed: int = 1
    lambda_rev: float = 1.0
    # corpus paths; aux entries are "labelset:path"
    main: str | None = None
    aux: tuple[str, ...] = ()
    unlabeled: str | None = None
    dev: str | None = None
    test: str | None = None
    embeddings: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.aux = tuple(self.aux)

    def validate(self) -> TrainConfig:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.main_weight <= 1.0:
            raise ConfigError(f"main_weight must lie in (0, 1], got {self.main_weight}")
        if self.patience < 1 or self.iter_factor < 1 or self.batch_size < 1:
            raise ConfigError("patience, iter_factor and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.hidden_size < 1 or self.num_layers < 1:
            raise ConfigError("hidden_size and num_layers must be >= 1")
        if self.min_epochs < 0 or self.max_epochs < 1:
            raise ConfigError("min_epochs must be >= 0 and max_epochs >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        return self

    @property
    def effective_main_weight(self) -> float:
        return 1.0 if self.mode == "baseline" else self.main_weight

    @classmethod
    def from_mapping(cls, values: dict, base: TrainConfig | None = None) -> TrainConfig:
        kinds = {f.name: f for f in fields(cls)}
        current = asdict(base) if base is not None else {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            if raw is None:
                continue
            current[key] = _convert(key, raw, cls.__dataclass_fields__[key].default)
        return cls(**current).validate()

    def echo(self) -> dict:
        return asdict(self)


def _convert(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if key in ("seeds", "aux"):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if key == "seeds" else tuple(items)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw or None


@dataclass
class Task:
    name: str
    dataset: TaskDataset
    kind: str = "main"


@dataclass
class Corpora:
    main: TaskDataset
    dev: TaskDataset
    embeddings: EmbeddingTable
    test: TaskDataset | None = None
    aux: list[TaskDataset] = field(default_factory=list)
    unlabeled: TaskDataset | None = None


def load_corpora(config: TrainConfig) -> Corpora:
    if not config.main or not config.dev or not config.embeddings:
        raise ConfigError("config needs main, dev and embeddings paths")
    main = load_corpus(config.main, name="main")
    dev = load_corpus(config.dev, name="dev")
    test = load_corpus(config.test, name="test") if config.test else None
    aux = []
    for k, entry in enumerate(config.aux):
        if ":" not in entry:
            raise ConfigError(f"aux entry {entry!r} must be 'labelset:path'")
        ls_name, path = entry.split(":", 1)
        aux.append(load_corpus(path, label_set_named(ls_name), name=f"aux{k}_{ls_name}"))
    unlabeled = load_corpus(config.unlabeled, None, name="unlabeled") if config.unlabeled else None
    datasets = [main, dev, *aux] + ([test] if test else []) + ([unlabeled] if unlabeled else [])
    emb = load_embeddings(config.embeddings, corpus_vocab(datasets))
    return Corpora(main, dev, emb, test, aux, unlabeled)


def adversarial_dataset(source: TaskDataset, unlabeled: TaskDataset) -> TaskDataset:
    """Domain-discrimination data: source text labeled 'source', target text 'target'."""
    from dataclasses import replace
    insts = [replace(i, labels=("source",)) for i in source.instances]
    insts += [replace(i, labels=("target",)) for i in unlabeled.instances]
    return TaskDataset("adversarial", DOMAIN, tuple(insts))


def build_tasks(config: TrainConfig, corpora: Corpora) -> list[Task]:
    tasks = [Task("main", expand_multilabel(corpora.main), "main")]
    if config.mode == "multitask":
        if not corpora.aux and config.main_weight < 1.0:
            raise ConfigError("multitask mode needs at least one aux corpus")
        tasks += [Task(ds.name, expand_multilabel(ds), "aux") for ds in corpora.aux]
    elif config.mode == "adversarial":
        if corpora.unlabeled is None:
            raise ConfigError("adversarial mode needs an unlabeled target corpus")
        tasks.append(Task("adversarial", adversarial_dataset(corpora.main, corpora.unlabeled), "adversarial"))
    return tasks


def build_model(config: TrainConfig, embeddings: EmbeddingTable, tasks: Sequence[Task], seed: int) -> Model:
    rng = make_rng(seed, 0)
    model = init_model(embeddings, config.hidden_size, rng, config.num_layers)
    for t in tasks:
        model.add_head(t.name, t.dataset.label_set, rng, adversarial=t.kind == "adversarial",
                       lambda_rev=config.lambda_rev)
    return model


def sample_task(rng: np.random.Generator, w_main: float, aux_tasks: Sequence[str], main: str = "main") -> str:
    """Main task with probability ``w_main``, else a uniformly chosen aux task."""
    if not 0.0 < w_main <= 1.0:
        raise ConfigError(f"main weight must lie in (0, 1], got {w_main}")
    if w_main < 1.0 and not aux_tasks:
        raise ConfigError("main weight < 1 needs at least one auxiliary task")
    if rng.random() < w_main:
        return main
    return aux_tasks[int(rng.integers(len(aux_tasks)))]


class TaskStream:
    """Endless batches of one task, reshuffled every pass."""

    def __init__(self, dataset: TaskDataset, batch_size: int, rng: np.random.Generator):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng
        self._pending = []

    def next(self):
        if not self._pending:
            self._pending = batches(self.dataset, self.batch_size, self.rng)[::-1]
        return self._pending.pop()


@dataclass
class EpochStats:
    epoch: int
    iterations: int
    task_losses: dict
    task_counts: dict


@dataclass
class RunState:
    """Everything that advances across epochs of one run."""

    model: Model
    tasks: list[Task]
    streams: dict
    sched_rng: np.random.Generator
    updates: int = 0


def start_run(model: Model, tasks: Sequence[Task], config: TrainConfig, seed: int) -> RunState:
    streams = {t.name: TaskStream(t.dataset, config.batch_size, make_rng(seed, 2, k)) for k, t in enumerate(tasks)}
    return RunState(model, list(tasks), streams, make_rng(seed, 1))


def iterations_per_epoch(n_main: int, batch_size: int, factor: int) -> int:
    return factor * math.ceil(n_main / batch_size)


def run_epoch(state: RunState, config: TrainConfig, epoch: int = 0) -> EpochStats:
    main = state.tasks[0]
    aux = [t.name for t in state.tasks[1:]]
    n_iter = iterations_per_epoch(len(main.dataset), config.batch_size, config.iter_factor)
    params = state.model.params()
    losses = {t.name: [] for t in state.tasks}
    for it in range(n_iter):
        name = sample_task(state.sched_rng, config.effective_main_weight, aux, main.name)
        batch = state.streams[name].next()
        loss, grads = task_loss_backward(state.model, name, batch)
        try:
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss on task {name!r}")
            sgd_step(params, grads, config.lr, config.weight_decay)
        except NumericError as e:
            raise NumericError(f"epoch {epoch}, iteration {it + 1}: {e}") from None
        losses[name].append(loss)
        state.updates += 1
    return EpochStats(epoch, n_iter,
                      {k: (math.fsum(v) / len(v) if v else None) for k, v in losses.items()},
                      {k: len(v) for k, v in losses.items()})


def dev_macro_f(model: Model, dev: TaskDataset, head: str = "main") -> float:
    preds = predict_labels(model, head, [i.tokens for i in dev.instances])
    return evaluate(preds, [i.labels for i in dev.instances], model.heads[head].labels.labels).macro_f


def should_stop(epoch: int, best_epoch: int, min_epochs: int, patience: int) -> bool:
    """Stop once ``patience`` epochs past both the best epoch and the epoch floor show no gain."""
    return epoch - max(best_epoch, min_epochs) >= patience


@dataclass
class RunRecord:
    seed: int
    dev_history: list[float]
    best_epoch: int
    epochs_run: int
    best_dev_f: float
    task_loss_history: list[dict] = field(default_factory=list)
    test_metrics: dict | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def train(model: Model, tasks: Sequence[Task], dev: TaskDataset | None, config: TrainConfig, seed: int,
          dev_eval: Callable[[Model, int], float] | None = None,
          on_epoch: Callable[[dict], None] | None = None,
          epoch_fn: Callable[[RunState, TrainConfig, int], EpochStats] = run_epoch) -> RunRecord:
    """Train with early stopping on dev macro-F, then restore the best parameters."""
    t0 = time.perf_counter()
    state = start_run(model, tasks, config, seed)
    if dev_eval is None:
        dev_eval = lambda m, epoch: dev_macro_f(m, dev)  # noqa: E731
    best_f, best_epoch, best_state = -math.inf, 0, model.state()
    history, loss_history = [], []
    epoch = 0
    while epoch < config.max_epochs:
        epoch += 1
        stats = epoch_fn(state, config, epoch)
        f = float(dev_eval(model, epoch))
        history.append(f)
        loss_history.append(stats.task_losses)
        if f > best_f:
            best_f, best_epoch, best_state = f, epoch, model.state()
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "task_losses": stats.task_losses, "dev_macro_f": f,
                      "timestamp": state.updates})
        if should_stop(epoch, best_epoch, config.min_epochs, config.patience):
            break
    model.load_state(best_state)
    return RunRecord(seed, history, best_epoch, epoch, best_f, loss_history,
                     wall_time=time.perf_counter() - t0)


def report_on(model: Model, test: TaskDataset, head: str = "main") -> EvalReport:
    preds = predict_labels(model, head, [i.tokens for i in test.instances])
    return evaluate(preds, [i.labels for i in test.instances], model.heads[head].labels.labels)


def train_run(config: TrainConfig, corpora: Corpora, seed: int,
              on_epoch: Callable[[dict], None] | None = None) -> tuple[Model, RunRecord]:
    tasks = build_tasks(config, corpora)
    model = build_model(config, corpora.embeddings, tasks, seed)
    record = train(model, tasks, corpora.dev, config, seed, on_epoch=on_epoch)
    if corpora.test is not None:
        record.test_metrics = report_on(model, corpora.test).to_json()
    return model, record


def multi_seed_report(records: Sequence[RunRecord]) -> dict:
    """Mean and sample std across seeds of dev macro-F and every scalar test metric."""
    if not records:
        raise ValueError("multi_seed_report needs at least one run")

    def agg(values):
        values = [float(v) for v in values]
        return {"mean": math.fsum(values) / len(values),
                "std": statistics.stdev(values) if len(values) > 1 else 0.0}

    out = {"dev_macro_f": agg(r.best_dev_f for r in records)}
    tests = [r.test_metrics for r in records if r.test_metrics]
    if len(tests) == len(records):
        for key, value in tests[0].items():
            if isinstance(value, float):
                out[f"test_{key}"] = agg(t[key] for t in tests)
    out["selection_key"] = (out["dev_macro_f"]["mean"], -out["dev_macro_f"]["std"])
    out["n_runs"] = len(records)
    return out


def select_weight(table: Sequence[dict]) -> float:
    """Best mean dev macro-F; ties go to the lower std, then the lower weight."""
    return min(table, key=lambda row: (-round(row["mean"], 12), round(row["std"], 12), row["w"]))["w"]


def _grid_cell(args):
    config, corpora, w, seed = args
    cfg = TrainConfig.from_mapping({"main_weight": w, "seed": seed}, base=config)
    _, record = train_run(cfg, corpora, seed)
    return w, seed, record


def grid_search_weight(config: TrainConfig, corpora: Corpora, grid: Sequence[float] = DEFAULT_GRID,
                       jobs: int = 1) -> tuple[float, list[dict]]:
    """Train every (weight, seed) cell and pick the weight by mean dev macro-F."""
    cells = [(config, corpora, float(w), s) for w in grid for s in config.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_grid_cell, cells))
    else:
        results = [_grid_cell(c) for c in cells]
    table = []
    for w in grid:
        recs = [r for (ww, _, r) in results if ww == float(w)]
        rep = multi_seed_report(recs)
        table.append({"w": float(w), "mean": rep["dev_macro_f"]["mean"], "std": rep["dev_macro_f"]["std"],
                      "scores": [r.best_dev_f for r in recs], "seeds": [r.seed for r in recs],
                      "report": rep})
    return select_weight(table), table


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))
