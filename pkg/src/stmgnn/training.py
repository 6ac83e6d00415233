"""Sliding windows, the NLL objective and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, NumericalError, TrainingDiverged
from .graph import GraphSpec, transition_matrix
from .model import backward_raw, forward_with_cache, init_weights
from .seeding import substream

log = logging.getLogger(__name__)


class Window(NamedTuple):
    target_day: int  # absolute index of the first forecast day
    inputs: np.ndarray  # (N, T, C) view
    targets: np.ndarray  # (N, Q, C) view


def make_windows(x, window, horizon, first_target=None, last_target=None, min_input=0):
    """All windows whose whole target block lies in ``[first_target, last_target)``.

    ``x`` is ``(N, T_total, C)``.  ``min_input`` is the earliest day an input
    may read.  Without bounds this yields ``T_total - window - horizon + 1``
    samples.
    """
    x = np.asarray(x)
    total = x.shape[1]
    if total < window + horizon:
        raise DataError(f"{total} days cannot hold a {window}+{horizon} day window")
    lo = max(window + min_input, first_target if first_target is not None else 0)
    hi = (last_target if last_target is not None else total) - horizon
    return [Window(t, x[:, t - window : t, :], x[:, t : t + horizon, :]) for t in range(lo, hi + 1)]


def split_windows(x, split, window, horizon):
    """Train, validation and test windows for a :class:`SplitSpec`.

    Training targets end before validation starts; validation targets fall
    in the last training days; test windows read only test days.
    """
    val_start, train_end = split.val
    test_start, test_end = split.test
    return {
        "train": make_windows(x, window, horizon, last_target=val_start),
        "val": make_windows(x, window, horizon, first_target=val_start, last_target=train_end),
        "test": make_windows(x, window, horizon, first_target=test_start, last_target=test_end, min_input=test_start),
    }


def stack(windows):
    inputs = np.stack([w.inputs for w in windows]).astype(float)
    targets = np.stack([w.targets for w in windows])
    return inputs, targets


def loss(targets, output, head, reduction="mean"):
    """Elementwise NLL of ``targets`` under ``output`` reduced to a scalar."""
    values = head.nll(targets, output.params, reduction="none")
    return float(values.mean() if reduction == "mean" else values.sum())


def loss_and_raw_grad(targets, output, head, reduction="mean"):
    value = loss(targets, output, head, reduction)
    d_raw = head.nll_grad_raw(targets, output.raw)
    if reduction == "mean":
        d_raw = d_raw / np.asarray(targets).size
    return value, d_raw


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    patience: int = 10
    clip_norm: float = 5.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    reduction: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("training sizes must be positive (lr non-negative)")
        if self.patience > self.epochs:
            raise ConfigError("patience exceeds epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")


class Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, weights, grads):
        for name, g in grads.items():
            weights.arrays[name] -= self.lr * g


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m[name] = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = self.v[name] = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            weights.arrays[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config):
    if config.optimizer == "sgd":
        return Sgd(config.lr)
    return Adam(config.lr, config.beta1, config.beta2)


def clip_gradients(grads, max_norm):
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def _transition(graph):
    return transition_matrix(graph) if isinstance(graph, GraphSpec) else graph


def gradient_step(batch_inputs, batch_targets, transition, weights, model_config, train_config, optimizer):
    head = model_config.head_impl()
    output, cache = forward_with_cache(batch_inputs, transition, weights, model_config)
    value, d_raw = loss_and_raw_grad(batch_targets, output, head, train_config.reduction)
    grads = backward_raw(cache, d_raw, model_config)
    grads, norm = clip_gradients(grads, train_config.clip_norm)
    optimizer.step(weights, grads)
    return value, norm


def mean_nll(windows, transition, weights, model_config, batch_size=64):
    """Mean per-cell NLL over ``windows`` in their given order."""
    head = model_config.head_impl()
    total, cells = 0.0, 0
    for i in range(0, len(windows), batch_size):
        inputs, targets = stack(windows[i : i + batch_size])
        output, _ = forward_with_cache(inputs, transition, weights, model_config)
        total += loss(targets, output, head, "sum")
        cells += targets.size
    return total / cells


@dataclass
class TrainHistory:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    initial_train_nll: float = float("nan")
    initial_val_nll: float = float("nan")
    best_epoch: int | None = None
    stopped_epoch: int | None = None  # set when early stopping fired

    @property
    def best_val_nll(self):
        return min(self.val_nll) if self.val_nll else float("nan")

    def best_so_far(self):
        return list(np.minimum.accumulate(self.val_nll)) if self.val_nll else []

    def to_text(self):
        """Deterministic table; wall-clock seconds live in :meth:`timing_text`."""
        lines = [
            f"# initial train_nll={self.initial_train_nll!r} val_nll={self.initial_val_nll!r}",
            f"# best_epoch={self.best_epoch} stopped_epoch={self.stopped_epoch}",
            "epoch\ttrain_nll\tval_nll\tbest_val_nll",
        ]
        for e, (tr, va, best) in enumerate(zip(self.train_nll, self.val_nll, self.best_so_far()), 1):
            lines.append(f"{e}\t{tr!r}\t{va!r}\t{float(best)!r}")
        return "\n".join(lines) + "\n"

    def timing_text(self):
        lines = ["epoch\tseconds"]
        lines += [f"{e}\t{s:.3f}" for e, s in enumerate(self.seconds, 1)]
        return "\n".join(lines) + "\n"


def train(windows, graph, model_config, train_config, weights=None):
    """Fit the model by minibatch NLL descent with validation early stopping.

    Args:
        windows: dict with ``"train"`` and ``"val"`` window lists.
        graph: a GraphSpec or a precomputed transition matrix.
        model_config: architecture.
        train_config: optimizer settings.
        weights: optional starting point; defaults to ``init_weights``.

    Returns:
        ``(best_weights, TrainHistory)``.

    Raises:
        TrainingDiverged: on a non-finite loss; carries the best checkpoint.
    """
    train_windows, val_windows = windows["train"], windows["val"]
    if not train_windows or not val_windows:
        raise DataError("training and validation splits need at least one window each")
    transition = _transition(graph)
    weights = init_weights(model_config) if weights is None else weights.copy()
    optimizer = make_optimizer(train_config)
    shuffle = substream(train_config.seed, "shuffle")
    history = TrainHistory()

    best = weights.copy()
    try:
        history.initial_train_nll = mean_nll(train_windows, transition, weights, model_config)
        history.initial_val_nll = mean_nll(val_windows, transition, weights, model_config)
    except NumericalError as exc:
        raise TrainingDiverged(str(exc), best, history) from exc
    best_val, stale = float("inf"), 0
    for epoch in range(1, train_config.epochs + 1):
        started = time.perf_counter()
        order = shuffle.permutation(len(train_windows))
        try:
            for i in range(0, len(order), train_config.batch_size):
                batch = [train_windows[j] for j in order[i : i + train_config.batch_size]]
                inputs, targets = stack(batch)
                value, _ = gradient_step(inputs, targets, transition, weights, model_config, train_config, optimizer)
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss in epoch {epoch}")
            train_nll = mean_nll(train_windows, transition, weights, model_config)
            val_nll = mean_nll(val_windows, transition, weights, model_config)
        except NumericalError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", best, history) from exc
        history.train_nll.append(train_nll)
        history.val_nll.append(val_nll)
        history.seconds.append(time.perf_counter() - started)
        log.info("epoch %d train_nll %.5f val_nll %.5f", epoch, train_nll, val_nll)
        if val_nll < best_val:
            best_val, best, stale = val_nll, weights.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= train_config.patience:
                history.stopped_epoch = epoch
                break
    return best, history
