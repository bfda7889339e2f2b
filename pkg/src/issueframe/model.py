"""Shared-encoder LSTM classifier with per-task softmax heads.

Gate weights of a layer are stacked in one ``(4H, in)`` input matrix ``W``, one
``(4H, H)`` recurrent matrix ``U`` and one ``(4H,)`` bias ``b``, in the order
input, forget, output, candidate (``i, f, o, g``)::

    i = sigmoid(W_i x + U_i h + b_i)      f = sigmoid(W_f x + U_f h + b_f)
    o = sigmoid(W_o x + U_o h + b_o)      g = tanh(W_g x + U_g h + b_g)
    c' = f * c + i * g                    h' = o * tanh(c')

Padded positions (``t >= length``) carry ``h`` and ``c`` through unchanged, so
the state after the last time step is the state at each sequence's last true
token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import Batch, LabelSet, label_set_named
from .errors import LabelError, ParseError, ShapeError
from .numcore import Param, Tape, Var
from .preprocess import EmbeddingTable

CHECKPOINT_FORMAT = "issueframe-checkpoint/1"
INIT_SCALE = 0.1
FORGET_BIAS = 1.0


@dataclass
class LstmLayer:
    W: Param
    U: Param
    b: Param

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[Param]:
        return [self.W, self.U, self.b]


@dataclass
class TaskHead:
    name: str
    labels: LabelSet
    W: Param
    b: Param
    adversarial: bool = False
    lambda_rev: float = 1.0

    def params(self) -> list[Param]:
        return [self.W, self.b]


@dataclass
class SharedEncoder:
    embeddings: EmbeddingTable
    layers: list[LstmLayer]

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


class Model:
    """One shared encoder read by every task head."""

    def __init__(self, encoder: SharedEncoder, heads: Sequence[TaskHead] = ()):
        self.encoder = encoder
        self.heads: dict[str, TaskHead] = {}
        for h in heads:
            self.heads[h.name] = h

    def params(self) -> dict[str, Param]:
        out = {p.name: p for p in self.encoder.params()}
        for head in self.heads.values():
            out.update((p.name, p) for p in head.params())
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params().items():
            p.value[...] = state[name]

    def add_head(self, name: str, labels: LabelSet, rng: np.random.Generator,
                 adversarial: bool = False, lambda_rev: float = 1.0) -> TaskHead:
        if adversarial and len(labels) != 2:
            raise LabelError(f"adversarial head {name!r} needs a binary label set, got {list(labels.labels)}")
        if name in self.heads:
            raise ValueError(f"duplicate head {name!r}")
        hidden = self.encoder.hidden
        head = TaskHead(name, labels,
                        Param(f"head.{name}.W", rng.uniform(-INIT_SCALE, INIT_SCALE, (len(labels), hidden))),
                        Param(f"head.{name}.b", np.zeros(len(labels))),
                        adversarial, float(lambda_rev))
        self.heads[name] = head
        return head


def init_lstm_layer(name: str, input_dim: int, hidden: int, rng: np.random.Generator) -> LstmLayer:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = FORGET_BIAS
    return LstmLayer(Param(f"{name}.W", rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, input_dim))),
                     Param(f"{name}.U", rng.uniform(-INIT_SCALE, INIT_SCALE, (4 * hidden, hidden))),
                     Param(f"{name}.b", b))


def init_model(embeddings: EmbeddingTable, hidden: int, rng: np.random.Generator,
               num_layers: int = 2) -> Model:
    layers, in_dim = [], embeddings.dim
    for k in range(num_layers):
        layers.append(init_lstm_layer(f"encoder.l{k}", in_dim, hidden, rng))
        in_dim = hidden
    return Model(SharedEncoder(embeddings, layers))


def _outer_sum(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.outer(g, x) if g.ndim == 1 else g.T @ x


def lstm_step(W, U, b, x, h_prev, c_prev, mask=None) -> tuple[Var, Var]:
    """One LSTM cell update for a vector or a batch of rows.

    ``mask`` (batch only) marks rows that advance; other rows return
    ``h_prev``/``c_prev`` unchanged.
    """
    W, U, b, x, h_prev, c_prev = map(nc.as_var, (W, U, b, x, h_prev, c_prev))
    hidden = U.value.shape[1]
    if (W.value.shape != (4 * hidden, x.value.shape[-1]) or U.value.shape != (4 * hidden, hidden)
            or b.value.shape != (4 * hidden,)):
        raise ShapeError(f"lstm_step: input {x.value.shape}, W {W.value.shape}, U {U.value.shape}, "
                         f"b {b.value.shape} are inconsistent")
    if h_prev.value.shape[-1] != hidden or c_prev.value.shape != h_prev.value.shape:
        raise ShapeError(f"lstm_step: state shapes {h_prev.value.shape}/{c_prev.value.shape} "
                         f"do not match hidden size {hidden}")
    z = x.value @ W.value.T + h_prev.value @ U.value.T + b.value
    H = hidden
    i = nc.sigmoid_array(z[..., :H])
    f = nc.sigmoid_array(z[..., H:2 * H])
    o = nc.sigmoid_array(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev.value + i * g
    th = np.tanh(c)
    h = o * th
    m = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[:, None]
        h = np.where(m, h, h_prev.value)
        c = np.where(m, c, c_prev.value)
    tape = nc._tape_for(W, U, b, x, h_prev, c_prev)
    h_out = Var(h, tape, requires_grad=tape is not None)
    c_out = Var(c, tape, requires_grad=tape is not None)
    if tape is not None:
        def step():
            gh = h_out.grad if h_out.grad is not None else np.zeros_like(h)
            gc = c_out.grad if c_out.grad is not None else np.zeros_like(c)
            pass_h = pass_c = 0.0
            if m is not None:
                pass_h, pass_c = np.where(m, 0.0, gh), np.where(m, 0.0, gc)
                gh, gc = np.where(m, gh, 0.0), np.where(m, gc, 0.0)
            dc = gc + gh * o * (1.0 - th * th)
            dz = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev.value * f * (1.0 - f),
                                 gh * th * o * (1.0 - o), dc * i * (1.0 - g * g)], axis=-1)
            if W.requires_grad:
                W.accumulate(_outer_sum(dz, x.value))
            if U.requires_grad:
                U.accumulate(_outer_sum(dz, h_prev.value))
            if b.requires_grad:
                b.accumulate(dz if dz.ndim == 1 else dz.sum(axis=0))
            if x.requires_grad:
                x.accumulate(dz @ W.value)
            if h_prev.requires_grad:
                h_prev.accumulate(dz @ U.value + pass_h)
            if c_prev.requires_grad:
                c_prev.accumulate(dc * f + pass_c)
        tape.record(step)
    return h_out, c_out


def lstm_layer(W, U, b, X, lengths) -> Var:
    """Run one layer over a padded ``(T, B, in)`` batch; returns all ``(T, B, H)`` states.

    Equivalent to chaining :func:`lstm_step` with per-step masks, recorded as
    a single tape step.
    """
    W, U, b, X = map(nc.as_var, (W, U, b, X))
    T, B, _ = X.value.shape
    H = U.value.shape[1]
    if W.value.shape != (4 * H, X.value.shape[2]) or U.value.shape != (4 * H, H) or b.value.shape != (4 * H,):
        raise ShapeError(f"lstm_layer: input {X.value.shape}, W {W.value.shape}, U {U.value.shape}, "
                         f"b {b.value.shape} are inconsistent")
    lengths = np.asarray(lengths)
    mask = np.arange(T)[:, None] < lengths[None, :]
    h, c = np.zeros((B, H)), np.zeros((B, H))
    Hs = np.empty((T, B, H))
    cache = []
    Wt, Ut = W.value.T, U.value.T
    for t in range(T):
        z = X.value[t] @ Wt + h @ Ut + b.value
        i = nc.sigmoid_array(z[:, :H])
        f = nc.sigmoid_array(z[:, H:2 * H])
        o = nc.sigmoid_array(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_new = f * c + i * g
        th = np.tanh(c_new)
        m = mask[t][:, None]
        cache.append((h, c, i, f, o, g, th, m))
        h = np.where(m, o * th, h)
        c = np.where(m, c_new, c)
        Hs[t] = h
    tape = nc._tape_for(W, U, b, X)
    out = Var(Hs, tape, requires_grad=tape is not None)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            gHs = out.grad
            dW = np.zeros_like(W.value)
            dU = np.zeros_like(U.value)
            db = np.zeros_like(b.value)
            dX = np.zeros_like(X.value) if X.requires_grad else None
            dh_next, dc_next = np.zeros((B, H)), np.zeros((B, H))
            for t in range(T - 1, -1, -1):
                h_prev, c_prev, i, f, o, g, th, m = cache[t]
                gh = gHs[t] + dh_next
                gc = dc_next
                gh_cell, gc_cell = np.where(m, gh, 0.0), np.where(m, gc, 0.0)
                dc = gc_cell + gh_cell * o * (1.0 - th * th)
                dz = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                                     gh_cell * th * o * (1.0 - o), dc * i * (1.0 - g * g)], axis=1)
                dW += dz.T @ X.value[t]
                dU += dz.T @ h_prev
                db += dz.sum(axis=0)
                if dX is not None:
                    dX[t] = dz @ W.value
                dh_next = dz @ U.value + np.where(m, 0.0, gh)
                dc_next = dc * f + np.where(m, 0.0, gc)
            if W.requires_grad:
                W.accumulate(dW)
            if U.requires_grad:
                U.accumulate(dU)
            if b.requires_grad:
                b.accumulate(db)
            if dX is not None:
                X.accumulate(dX)
        tape.record(step)
    return out


def last_step(Hs: Var) -> Var:
    tape = Hs.tape if Hs.requires_grad else None
    out = Var(Hs.value[-1], tape, requires_grad=tape is not None)
    if tape is not None:
        def step():
            if out.grad is not None:
                g = np.zeros_like(Hs.value)
                g[-1] = out.grad
                Hs.accumulate(g)
        tape.record(step)
    return out


def _watch(p: Param, tape: Tape | None) -> Var:
    return tape.param(p) if tape is not None else Var(p.value)


def embed_batch(embeddings: EmbeddingTable, token_lists: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
    """``(T, B, D)`` embedded batch padded with the UNK row, and the true lengths."""
    lengths = np.array([len(t) for t in token_lists], dtype=np.int64)
    if len(lengths) == 0 or lengths.min() < 1:
        raise ShapeError("cannot encode an empty token sequence")
    T = int(lengths.max())
    ids = np.zeros((len(token_lists), T), dtype=np.int64)
    for k, toks in enumerate(token_lists):
        ids[k, :len(toks)] = embeddings.ids(toks)
    return embeddings.matrix[ids.T], lengths


def encode_batch(encoder: SharedEncoder, token_lists: Sequence[Sequence[str]], tape: Tape | None = None) -> Var:
    """Top-layer state at each sequence's last true token, shape ``(B, H)``."""
    X, lengths = embed_batch(encoder.embeddings, token_lists)
    layer_in = Var(X)
    for layer in encoder.layers:
        layer_in = lstm_layer(_watch(layer.W, tape), _watch(layer.U, tape), _watch(layer.b, tape),
                              layer_in, lengths)
    return last_step(layer_in)


def encode(encoder: SharedEncoder, tokens: Sequence[str]) -> np.ndarray:
    if len(tokens) == 0:
        raise ShapeError("cannot encode an empty token sequence")
    return encode_batch(encoder, [tokens]).value[0]


def head_logits(head: TaskHead, h: Var, tape: Tape | None = None) -> Var:
    return nc.affine(h, _watch(head.W, tape), _watch(head.b, tape))


def predict_proba(model: Model, head: TaskHead | str, token_lists: Sequence[Sequence[str]],
                  batch_size: int = 256) -> np.ndarray:
    head = model.heads[head] if isinstance(head, str) else head
    out = []
    for k in range(0, len(token_lists), batch_size):
        h = encode_batch(model.encoder, token_lists[k:k + batch_size])
        out.append(nc.softmax_array(head_logits(head, h).value))
    return np.vstack(out) if out else np.zeros((0, len(head.labels)))


def predict(encoder: SharedEncoder, head: TaskHead, tokens: Sequence[str]) -> np.ndarray:
    h = Var(encode(encoder, tokens))
    return nc.softmax_array(head_logits(head, h).value)


def predict_labels(model: Model, head: TaskHead | str, token_lists: Sequence[Sequence[str]],
                   batch_size: int = 256) -> list:
    """Most probable label per sequence; ties go to the lowest label index."""
    head = model.heads[head] if isinstance(head, str) else head
    probs = predict_proba(model, head, token_lists, batch_size)
    return [head.labels.labels[k] for k in np.argmax(probs, axis=1)]


def batch_targets(head: TaskHead, batch: Batch, label_of=None) -> np.ndarray:
    ys = []
    for inst in batch.instances:
        labels = label_of(inst) if label_of is not None else inst.labels
        if len(labels) != 1:
            raise LabelError(f"instance {inst.id!r} has {len(labels)} labels; expand multi-label data first")
        ys.append(head.labels.index(labels[0]))
    return np.array(ys, dtype=np.int64)


def task_loss_backward(model: Model, head: TaskHead | str, batch: Batch, label_of=None,
                       ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` and gradients for the encoder and ``head``.

    For an adversarial head the encoder gradients are multiplied by
    ``-lambda_rev``; the head's own gradients and the forward pass are
    unchanged.  The reversal is applied to the accumulated encoder gradients
    rather than to the gradient at the encoder output.  The encoder backward
    pass is linear in that gradient, so the two are equal, and this order
    keeps the identity exact in floating point.
    """
    head = model.heads[head] if isinstance(head, str) else head
    y = batch_targets(head, batch, label_of)
    tape = Tape()
    h = encode_batch(model.encoder, [inst.tokens for inst in batch.instances], tape)
    loss, _ = nc.softmax_cross_entropy(head_logits(head, h, tape), y)
    grads = tape.backward(loss)
    if head.adversarial:
        for p in model.encoder.params():
            grads[p.name] = -head.lambda_rev * grads[p.name]
    return float(loss.value), grads


# -- checkpoints ---------------------------------------------------------------

def checkpoint_dict(model: Model, config: dict | None = None) -> dict:
    emb = model.encoder.embeddings
    return {
        "format": CHECKPOINT_FORMAT,
        "config": config or {},
        "vocab": list(emb.words),
        "embeddings": emb.matrix.tolist(),
        "layers": [{"W": l.W.value.tolist(), "U": l.U.value.tolist(), "b": l.b.value.tolist()}
                   for l in model.encoder.layers],
        "heads": [{"name": h.name, "label_set": h.labels.name, "labels": list(h.labels.labels),
                   "adversarial": h.adversarial, "lambda_rev": h.lambda_rev,
                   "W": h.W.value.tolist(), "b": h.b.value.tolist()} for h in model.heads.values()],
    }


def save_checkpoint(model: Model, path, config: dict | None = None) -> None:
    """Write a JSON checkpoint; float repr makes the round trip bit-exact."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model, config), fh, separators=(",", ":"))
        fh.write("\n")


def _label_set(name: str, labels: list) -> LabelSet:
    try:
        known = label_set_named(name)
        if list(known.labels) == labels:
            return known
    except LabelError:
        pass
    return LabelSet(name, tuple(labels))


def model_from_dict(obj: dict) -> tuple[Model, dict]:
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"not a checkpoint (format {obj.get('format')!r})")
    emb = EmbeddingTable(tuple(obj["vocab"]), np.array(obj["embeddings"], dtype=np.float64))
    layers = [LstmLayer(Param(f"encoder.l{k}.W", l["W"]), Param(f"encoder.l{k}.U", l["U"]),
                        Param(f"encoder.l{k}.b", l["b"])) for k, l in enumerate(obj["layers"])]
    model = Model(SharedEncoder(emb, layers))
    for h in obj["heads"]:
        model.heads[h["name"]] = TaskHead(h["name"], _label_set(h["label_set"], h["labels"]),
                                          Param(f"head.{h['name']}.W", h["W"]),
                                          Param(f"head.{h['name']}.b", h["b"]),
                                          bool(h["adversarial"]), float(h["lambda_rev"]))
    return model, obj.get("config", {})


def load_checkpoint(path) -> tuple[Model, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as e:
        raise ParseError(f"cannot open checkpoint: {e.strerror}", str(path)) from None
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid checkpoint JSON: {e.msg}", str(path)) from None
    return model_from_dict(obj)
