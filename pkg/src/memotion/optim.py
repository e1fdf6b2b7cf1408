"""Per-head weighted cross-entropy, class weights, the warm-up schedule and the
two optimisers (Adam with decoupled weight decay, and LAMB)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataio.labels import NUM_CLASSES, TASKS, LabelSet
from .errors import ConfigError, ContractError, InputError
from .nn import exempt_from_decay
from .tensor import Tensor

PROB_FLOOR = 1e-12
WEIGHT_CLIP = (0.1, 10.0)
OPTIMIZERS = ("lamb", "adamw")


# --- losses ----------------------------------------------------------------------------


def weighted_cross_entropy(probs: Tensor, label, weights=None) -> Tensor:
    """``-w[y] * log(max(p[y], 1e-12))``, averaged over the batch when ``probs`` is 2-d.

    The log and the reduction run in float64 whatever the dtype of ``probs``:
    a float32 scalar cannot hold a loss of ~30 to better than 2e-6.
    """
    n = probs.shape[-1]
    labels = np.asarray(label, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InputError(f"label {labels.tolist()} out of range for {n} classes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if probs.ndim == 1:
        if labels.ndim != 0:
            raise InputError("a single probability vector takes a scalar label")
        picked = T.cast(T.getitem(probs, int(labels)), np.float64)
        return T.clamped_log(picked, PROB_FLOOR) * float(-w[labels])
    if labels.ndim == 0 and probs.shape[0] == 1:
        labels = labels[None]
    if labels.shape != probs.shape[:1]:
        raise InputError(f"expected {probs.shape[0]} labels, got {labels.shape}")
    picked = T.cast(T.getitem(probs, (np.arange(len(labels)), labels)), np.float64)
    return T.mean(T.clamped_log(picked, PROB_FLOOR) * Tensor(-w[labels]))


@dataclass
class LossReport:
    heads: dict[str, Tensor]
    total: Tensor

    def values(self) -> dict[str, float]:
        return {task: t.item() for task, t in self.heads.items()}

    @property
    def total_value(self) -> float:
        return self.total.item()


def total_loss(outputs: dict[str, Tensor], labels, weights: dict[str, np.ndarray] | None = None) -> LossReport:
    """Equal-weight sum of the five per-head losses."""
    if isinstance(labels, LabelSet):
        label_of = {task: getattr(labels, task) for task in TASKS}
    else:
        arr = np.asarray(labels)
        label_of = {task: arr[..., i] for i, task in enumerate(TASKS)}
    heads = {
        task: weighted_cross_entropy(outputs[task], label_of[task], None if weights is None else weights[task])
        for task in TASKS
    }
    total = heads[TASKS[0]]
    for task in TASKS[1:]:
        total = total + heads[task]
    return LossReport(heads, total)


# --- class weights -----------------------------------------------------------------------


def class_weights_for(histogram) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * max(n_c, 1))`` clipped to [0.1, 10]."""
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise InputError("class histogram is empty")
    k = counts.size
    w = counts.sum() / (k * np.maximum(counts, 1.0))
    return np.clip(w, *WEIGHT_CLIP)


def compute_class_weights(label_counts: dict[str, list[int]]) -> dict[str, np.ndarray]:
    return {task: class_weights_for(label_counts[task]) for task in TASKS}


def label_histograms(labels) -> dict[str, np.ndarray]:
    """Per-task class counts from an ``(N, 5)`` label array or LabelSets."""
    arr = np.array([l.as_tuple() if isinstance(l, LabelSet) else l for l in labels], dtype=np.int64)
    arr = arr.reshape(-1, len(TASKS))
    return {task: np.bincount(arr[:, i], minlength=NUM_CLASSES[task]) for i, task in enumerate(TASKS)}


# --- schedule ----------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    kind: str = "lamb"
    peak_lr: float = 5e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    epsilon: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    decay_after_warmup: bool = False

    def validate(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer kind must be one of {OPTIMIZERS}, got {self.kind!r}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in (0, 1)")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer moments/epsilon/decay")
        return self


def warmup_steps(total_steps: int, fraction: float) -> int:
    # round() guards against 0.1 * 30 == 3.0000000000000004
    return math.ceil(round(fraction * total_steps, 9))


def lr_at_step(step: int, total_steps: int, config: OptimizerConfig) -> float:
    """Linear warm-up to ``peak_lr`` over the first 10% of steps, then constant
    (or linear decay to zero when ``decay_after_warmup`` is set)."""
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    peak = config.peak_lr
    warm = warmup_steps(total_steps, config.warmup_fraction)
    if step < warm:
        return peak * (step / warm)
    if config.decay_after_warmup and total_steps > warm:
        return peak * ((total_steps - step) / (total_steps - warm))
    return peak


# --- optimisers --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _adam_direction(p, g, m, v, t, config: OptimizerConfig, decay: bool):
    m = config.beta1 * m + (1.0 - config.beta1) * g
    v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    u = m_hat / (np.sqrt(v_hat) + config.epsilon)
    if decay and config.weight_decay:
        u = u + config.weight_decay * p
    return u, m, v


def trust_ratio(p: np.ndarray, u: np.ndarray) -> float:
    p_norm = float(np.linalg.norm(p))
    u_norm = float(np.linalg.norm(u))
    return 1.0 if p_norm == 0.0 or u_norm == 0.0 else p_norm / u_norm


def _optimizer_step(params, grads, state: OptimizerState, lr: float, config: OptimizerConfig, layerwise: bool):
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"optimizer moment for {name} has shape {m.shape}, parameter has {p.shape}")
        exempt = exempt_from_decay(name)
        u, state.m[name], state.v[name] = _adam_direction(p, g, m, v, t, config, not exempt)
        # biases and norm parameters skip layer adaptation, as in reference LAMB
        scale = lr * trust_ratio(p, u) if layerwise and not exempt else lr
        params[name] = (p - scale * u).astype(p.dtype)
    return params, state


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               config: OptimizerConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay: ``p -= lr * (m̂/(√v̂+ε) + wd·p)``."""
    return _optimizer_step(dict(params), grads, state, lr, config, layerwise=False)


def lamb_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
              config: OptimizerConfig) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """AdamW direction ``u`` rescaled per tensor by ``‖p‖ / ‖u‖`` (1 if either norm is 0).

    Bias and normalisation tensors (the weight-decay exemptions) use ratio 1.
    """
    return _optimizer_step(dict(params), grads, state, lr, config, layerwise=True)


class Optimizer:
    """Stateful wrapper applying adamw_step / lamb_step to live tensors."""

    def __init__(self, named_params, config: OptimizerConfig):
        self.config = config.validate()
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = OptimizerState()

    def step(self, lr: float):
        live = {n: t for n, t in self.params.items() if t.trainable and t.grad is not None}
        values = {n: t.values for n, t in live.items()}
        grads = {n: t.grad for n, t in live.items()}
        step_fn = lamb_step if self.config.kind == "lamb" else adamw_step
        updated, self.state = step_fn(values, grads, self.state, lr, self.config)
        for n, t in live.items():
            t.values = updated[n]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"m/{n}": a for n, a in self.state.m.items()}
        arrays.update({f"v/{n}": a for n, a in self.state.v.items()})
        return arrays

    def load_state_arrays(self, step: int, arrays: dict[str, np.ndarray]):
        state = OptimizerState(step=step)
        for key, a in arrays.items():
            kind, name = key.split("/", 1)
            if name not in self.params:
                raise ContractError(f"optimizer state for unknown parameter {name}")
            (state.m if kind == "m" else state.v)[name] = np.array(a, copy=True)
        self.state = state
