"""Dense float64 numerics with a recording tape for reverse-mode gradients.

Every operation takes and returns :class:`Var` objects.  When any operand is
attached to a :class:`Tape` and needs a gradient, the operation appends one
backward step to that tape; :meth:`Tape.backward` replays the steps in exact
reverse order and returns gradients keyed by parameter name.

Randomness comes from :func:`make_rng`, a Philox-4x64 counter-based generator
seeded through ``numpy.random.SeedSequence``; both are specified bit-for-bit
by numpy, so a seed yields the same draws on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import LabelError, NumericError, ShapeError, TapeStateError

CE_EPS = 1e-12


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator for ``seed``; ``stream`` selects an independent substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Param:
    """A named float64 array, updated in place by :func:`sgd_step`."""

    __slots__ = ("name", "value", "frozen")

    def __init__(self, name: str, value, frozen: bool = False):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.frozen = frozen
        if frozen:
            self.value.flags.writeable = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape}, frozen={self.frozen})"


class Var:
    __slots__ = ("value", "grad", "tape", "param", "requires_grad")

    def __init__(self, value, tape: Tape | None = None, param: Param | None = None,
                 requires_grad: bool = False):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self.param = param
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g


class Tape:
    """Ordered record of forward steps for one batch."""

    def __init__(self):
        self.steps: list[Callable[[], None]] = []
        self._watched: dict[str, Var] = {}
        self.consumed = False

    def __len__(self):
        return len(self.steps)

    def param(self, p: Param) -> Var:
        v = self._watched.get(p.name)
        if v is None or v.param is not p:
            v = Var(p.value, self, param=p, requires_grad=not p.frozen)
            self._watched[p.name] = v
        return v

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self)

    def record(self, step: Callable[[], None]) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a tape whose backward pass already ran")
        self.steps.append(step)

    def backward(self, out: Var, grad=1.0) -> dict[str, np.ndarray]:
        """Backpropagate ``grad`` from ``out``; returns trainable-parameter gradients."""
        if self.consumed:
            raise TapeStateError("backward already ran on this tape")
        if not self.steps:
            raise TapeStateError("backward without a recorded forward pass")
        if out.tape is not self:
            raise TapeStateError("output variable was not produced on this tape")
        out.grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), out.value.shape).copy()
        for step in reversed(self.steps):
            step()
        self.consumed = True
        grads = {}
        for name, v in self._watched.items():
            if v.requires_grad:
                grads[name] = v.grad if v.grad is not None else np.zeros_like(v.value)
        return grads


def backward(tape: Tape, out: Var, grad=1.0) -> dict[str, np.ndarray]:
    return tape.backward(out, grad)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _tape_for(*vs: Var) -> Tape | None:
    if not any(v.requires_grad for v in vs):
        return None
    for v in vs:
        if v.tape is not None:
            return v.tape
    return None


def _out(value, tape: Tape | None) -> Var:
    return Var(value, tape, requires_grad=tape is not None)


def affine(x, W, b) -> Var:
    """``W x + b`` for a vector ``x`` or row-wise for a batch matrix ``x``."""
    x, W, b = as_var(x), as_var(W), as_var(b)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or x.value.shape[-1] != W.value.shape[1]:
        raise ShapeError(f"affine: input shape {x.value.shape} does not match weight shape {W.value.shape}")
    if b.value.shape != (W.value.shape[0],):
        raise ShapeError(f"affine: bias shape {b.value.shape} does not match weight shape {W.value.shape}")
    tape = _tape_for(x, W, b)
    out = _out(x.value @ W.value.T + b.value, tape)
    if tape is not None:
        def step():
            g = out.grad
            if g is None:
                return
            if x.requires_grad:
                x.accumulate(g @ W.value)
            if W.requires_grad:
                W.accumulate(np.outer(g, x.value) if g.ndim == 1 else g.T @ x.value)
            if b.requires_grad:
                b.accumulate(g if g.ndim == 1 else g.sum(axis=0))
        tape.record(step)
    return out


def sigmoid_array(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows and saturates to exactly 0/1
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x) -> Var:
    x = as_var(x)
    tape = _tape_for(x)
    s = sigmoid_array(x.value)
    out = _out(s, tape)
    if tape is not None:
        def step():
            if out.grad is not None:
                x.accumulate(out.grad * s * (1.0 - s))
        tape.record(step)
    return out


def tanh(x) -> Var:
    x = as_var(x)
    tape = _tape_for(x)
    t = np.tanh(x.value)
    out = _out(t, tape)
    if tape is not None:
        def step():
            if out.grad is not None:
                x.accumulate(out.grad * (1.0 - t * t))
        tape.record(step)
    return out


def softmax_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z) -> Var:
    z = as_var(z)
    if z.value.size == 0 or z.value.shape[-1] == 0:
        raise ShapeError(f"softmax: empty input of shape {z.value.shape}")
    tape = _tape_for(z)
    p = softmax_array(z.value)
    out = _out(p, tape)
    if tape is not None:
        def step():
            g = out.grad
            if g is not None:
                z.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
        tape.record(step)
    return out


def _check_labels(y, n_classes: int, batch: int | None) -> np.ndarray:
    y = np.asarray(y)
    if batch is None:
        if y.ndim != 0:
            raise ShapeError(f"expected a single class index, got shape {y.shape}")
    elif y.shape != (batch,):
        raise ShapeError(f"expected {batch} class indices, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError(f"class indices must be integers, got {y.dtype}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise LabelError(f"class index out of range [0, {n_classes}): {y.tolist()}")
    return y


def _pick(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    return a[y] if a.ndim == 1 else a[np.arange(a.shape[0]), y]


def cross_entropy(p, y) -> Var:
    """Mean of ``-ln(max(p[y], 1e-12))`` over the batch (or the single row)."""
    p = as_var(p)
    batch = p.value.shape[0] if p.value.ndim == 2 else None
    y = _check_labels(y, p.value.shape[-1], batch)
    n = 1 if batch is None else batch
    py = _pick(p.value, y)
    clamped = np.maximum(py, CE_EPS)
    tape = _tape_for(p)
    out = _out(np.asarray(-np.log(clamped).sum() / n), tape)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            g = np.zeros_like(p.value)
            d = np.where(py >= CE_EPS, -1.0 / clamped, 0.0) * (out.grad / n)
            if g.ndim == 1:
                g[y] = d
            else:
                g[np.arange(n), y] = d
            p.accumulate(g)
        tape.record(step)
    return out


def softmax_cross_entropy(z, y) -> tuple[Var, np.ndarray]:
    """Fused softmax + mean cross-entropy; returns (loss, probabilities).

    Backward is the closed form ``(p - onehot(y)) / batch``.
    """
    z = as_var(z)
    if z.value.size == 0:
        raise ShapeError(f"softmax: empty input of shape {z.value.shape}")
    batch = z.value.shape[0] if z.value.ndim == 2 else None
    y = _check_labels(y, z.value.shape[-1], batch)
    n = 1 if batch is None else batch
    p = softmax_array(z.value)
    loss = -np.log(np.maximum(_pick(p, y), CE_EPS)).sum() / n
    tape = _tape_for(z)
    out = _out(np.asarray(loss), tape)
    if tape is not None:
        def step():
            if out.grad is None:
                return
            g = p.copy()
            if g.ndim == 1:
                g[y] -= 1.0
            else:
                g[np.arange(n), y] -= 1.0
            z.accumulate(g * (out.grad / n))
        tape.record(step)
    return out, p


def grad_reverse(x, strength: float = 1.0) -> Var:
    """Identity forward; multiplies the backward gradient by ``-strength``."""
    x = as_var(x)
    tape = _tape_for(x)
    out = _out(x.value, tape)
    if tape is not None:
        def step():
            if out.grad is not None:
                x.accumulate(-strength * out.grad)
        tape.record(step)
    return out


def gather_rows(E, ids) -> Var:
    """Rows ``E[ids]`` of a matrix; gradients scatter-add back when ``E`` is trainable."""
    E = as_var(E)
    ids = np.asarray(ids, dtype=np.int64)
    tape = _tape_for(E)
    out = _out(E.value[ids], tape)
    if tape is not None:
        def step():
            if out.grad is not None:
                g = np.zeros_like(E.value)
                np.add.at(g, ids, out.grad)
                E.accumulate(g)
        tape.record(step)
    return out


def sgd_step(params: Iterable[Param] | Mapping[str, Param], grads: Mapping[str, np.ndarray],
             lr: float, weight_decay: float = 0.0) -> None:
    """In place ``p <- p - lr * (grad + weight_decay * p)`` for every trainable param with a gradient."""
    if lr < 0:
        raise NumericError(f"learning rate must be non-negative, got {lr}")
    if weight_decay < 0:
        raise NumericError(f"weight decay must be non-negative, got {weight_decay}")
    if isinstance(params, Mapping):
        params = params.values()
    by_name = {p.name: p for p in params}
    unknown = set(grads) - set(by_name)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = by_name[name]
        if p.frozen:
            continue
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} shape {p.value.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            new = p.value - lr * (g + weight_decay * p.value)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"update made parameter {name!r} non-finite (lr {lr})")
        p.value[...] = new


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple[str, tuple] | None = None
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(closure: Callable[[Tape], Var], params: Iterable[Param], tolerance: float = 1e-4,
               h: float = 1e-5, max_per_param: int | None = None, rng: np.random.Generator | None = None,
               scale: float = 1.0, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``closure`` builds the scalar loss on the tape it receives, watching each
    parameter through ``tape.param``.  The analytic gradient is compared with
    ``scale`` times the central difference, so ``scale=-1`` checks a reversed
    gradient.  Per-entry relative error uses ``max(|a|, |n|, floor)`` as the
    denominator.
    """
    params = list(params)
    tape = Tape()
    loss = closure(tape)
    analytic = tape.backward(loss)
    worst_err, worst, checked, errors = 0.0, None, 0, {}
    for p in params:
        if p.frozen:
            continue
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = (rng if rng is not None else make_rng(0)).choice(flat.size, max_per_param, replace=False)
        ga = analytic.get(p.name, np.zeros_like(p.value)).reshape(-1)
        p_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(closure(Tape()).value)
            flat[i] = orig - h
            fm = float(closure(Tape()).value)
            flat[i] = orig
            numeric = scale * (fp - fm) / (2.0 * h)
            err = float(relative_error(ga[i], numeric, floor))
            checked += 1
            p_err = max(p_err, err)
            if err > worst_err or worst is None:
                worst_err = max(worst_err, err)
                worst = (p.name, np.unravel_index(int(i), p.value.shape))
        errors[p.name] = p_err
    return GradCheckReport(worst_err, tolerance, checked, worst, errors)
