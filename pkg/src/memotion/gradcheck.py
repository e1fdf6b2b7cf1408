"""Finite-difference suite: every differentiable op, then the whole fused model.

Each op case draws a small random input and a random projection ``w`` and
checks the gradient of ``sum(op(x) * w)`` with respect to every input. Inputs
to ReLU, max-pool and the log floor are kept at least 0.05 away from their
kinks so central differences with ``epsilon = 1e-3`` never straddle one.

Ops are looked up on :mod:`memotion.tensor` at call time, so a test can swap
in a broken implementation and watch the suite fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataio.labels import NUM_CLASSES, TASKS
from .dataio.sample import Batch
from .fusion import MemeModel, ModelConfig
from .optim import total_loss
from .tensor import Tensor, make_rng

THRESHOLD = 1e-2
OP_EPSILON = 1e-3
MODEL_EPSILON = 1e-5
GRADCHECK_STREAM = 9


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float32))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, gap=0.05):
    """Values with pairwise gaps >= ``gap`` (no max-pool ties within reach of epsilon)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _project(out, w):
    if isinstance(out, (list, tuple)):
        total = None
        for o, wi in zip(out, w):
            term = T.tsum(o * Tensor(wi))
            total = term if total is None else total + term
        return total
    return T.tsum(out * Tensor(w))


def _weights_for(rng, out):
    if isinstance(out, (list, tuple)):
        return [rng.standard_normal(o.shape).astype(np.float32) for o in out]
    return rng.standard_normal(out.shape).astype(np.float32)


# each builder returns (op taking the checked inputs, list of input tensors)
def _case(name: str, rng):
    n = lambda *s: _t(rng.standard_normal(s))
    if name == "add":
        return lambda a, b: T.add(a, b), [n(3, 4), n(4)]
    if name == "sub":
        return lambda a, b: T.sub(a, b), [n(3, 4), n(3, 1)]
    if name == "mul":
        return lambda a, b: T.mul(a, b), [n(3, 4), n(3, 4)]
    if name == "div":
        return lambda a, b: T.div(a, b), [n(3, 4), _t(_away_from_zero(rng, (3, 4), 0.5))]
    if name == "neg":
        return lambda a: T.neg(a), [n(5)]
    if name == "exp":
        return lambda a: T.exp(a), [n(2, 3)]
    if name == "clamped_log":
        return lambda a: T.clamped_log(a), [_t(rng.uniform(0.1, 2.0, size=(6,)))]
    if name == "cast":
        return lambda a: T.cast(a, np.float64), [n(3, 4)]
    if name == "reshape":
        return lambda a: T.reshape(a, (6, 2)), [n(3, 4)]
    if name == "transpose":
        return lambda a: T.transpose(a, (1, 0, 2)), [n(2, 3, 4)]
    if name == "getitem":
        idx = rng.integers(0, 5, size=7)
        return lambda a: T.getitem(a, idx), [n(5, 3)]
    if name == "concat":
        return lambda a, b: T.concat([a, b], axis=-1), [n(2, 3), n(2, 5)]
    if name == "split":
        return lambda a: T.split(a, [2, 3, 1], axis=-1), [n(3, 6)]
    if name == "sum":
        return lambda a: T.tsum(a, axis=0), [n(4, 3)]
    if name == "mean":
        return lambda a: T.mean(a, axis=-1, keepdims=True), [n(4, 3)]
    if name == "matmul":
        return lambda a, b: T.matmul(a, b), [n(2, 3, 4), n(4, 5)]
    if name == "dense":
        return lambda x, w, b: T.dense(x, w, b), [n(3, 4), n(4, 5), n(5)]
    if name == "relu":
        return lambda a: T.relu(a), [_t(_away_from_zero(rng, (4, 5)))]
    if name == "tanh":
        return lambda a: T.tanh(a), [n(4, 5)]
    if name == "gelu":
        return lambda a: T.gelu(a), [n(4, 5)]
    if name == "softmax":
        return lambda a: T.softmax(a), [n(3, 5)]
    if name == "layer_norm":
        return lambda a, g, b: T.layer_norm(a, g, b), [n(3, 6), _t(1 + 0.1 * rng.standard_normal(6)), n(6)]
    if name == "dropout":
        seed = int(rng.integers(2**31))
        return lambda a: T.dropout(a, 0.3, True, np.random.default_rng(seed)), [n(4, 6)]
    if name == "embedding_lookup":
        ids = rng.integers(0, 6, size=(2, 5))
        return lambda table: T.embedding_lookup(table, ids), [n(6, 3)]
    if name == "conv2d":
        return lambda x, k, b: T.conv2d(x, k, b), [n(2, 4, 4), n(3, 2, 3, 3), n(3)]
    if name == "maxpool2d":
        return lambda a: T.maxpool2d(a), [_t(_distinct(rng, (2, 4, 4)))]
    if name == "global_avg_pool":
        return lambda a: T.global_avg_pool(a), [n(3, 4, 4)]
    raise KeyError(name)


OPS = (
    "add", "sub", "mul", "div", "neg", "exp", "clamped_log", "cast", "reshape", "transpose", "getitem",
    "concat", "split", "sum", "mean", "matmul", "dense", "relu", "tanh", "gelu", "softmax",
    "layer_norm", "dropout", "embedding_lookup", "conv2d", "maxpool2d", "global_avg_pool",
)


def check_op(name: str, cases: int = 100, seed: int = 0, epsilon: float = OP_EPSILON) -> float:
    """Worst relative error of ``name`` over ``cases`` seeded random cases."""
    worst = 0.0
    for case in range(cases):
        rng = make_rng(seed, GRADCHECK_STREAM, OPS.index(name), case)
        op, inputs = _case(name, rng)
        w = _weights_for(rng, op(*inputs))
        for i, x in enumerate(inputs):
            def f(xi, i=i):
                args = list(inputs)
                args[i] = xi
                return _project(op(*args), w)

            worst = max(worst, T.finite_diff_check(f, x, epsilon))
    return worst


def desk_batch(config: ModelConfig, seed: int = 0, batch_size: int = 2) -> Batch:
    """A random but smooth batch for the whole-model check."""
    rng = make_rng(seed, GRADCHECK_STREAM, 100)
    r, s = config.image.input_resolution, config.text.max_seq_len
    yy, xx = np.mgrid[0:r, 0:r] / r
    images = np.stack(
        [np.stack([np.sin(6 * yy + 2 * xx + k), np.cos(5 * xx - k), yy - xx + 0.1 * k]) for k in range(batch_size)]
    ).astype(np.float32)
    ids = rng.integers(4, config.text.vocab_size, size=(batch_size, s))
    mask = np.zeros((batch_size, s), dtype=np.int64)
    for b in range(batch_size):
        mask[b, : rng.integers(3, s + 1)] = 1
    labels = np.stack([rng.integers(0, NUM_CLASSES[t], size=batch_size) for t in TASKS], axis=1)
    return Batch([f"g{b}" for b in range(batch_size)], images, ids * mask, mask, np.zeros_like(ids), labels)


def check_model(
    config: ModelConfig | None = None, coords_per_tensor: int = 3, seed: int = 0, epsilon: float = MODEL_EPSILON
) -> tuple[float, str]:
    """Worst relative error over sampled coordinates of every parameter tensor.

    Dropout is off (eval mode) so the loss is a deterministic function of the
    parameters. Returns the error and the parameter where it occurred.
    """
    config = config or ModelConfig(seed=seed)
    model = MemeModel(config)
    batch = desk_batch(config, seed)

    def loss_fn(_):
        return total_loss(model.forward(batch, train=False), batch.labels).total

    worst, where = 0.0, ""
    for k, (name, p) in enumerate(model.named_parameters()):
        rng = make_rng(seed, GRADCHECK_STREAM, 200, k)
        idx = rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
        err = T.finite_diff_check(loss_fn, p, epsilon, idx)
        if err > worst:
            worst, where = err, name
    return worst, where


@dataclass
class GradcheckReport:
    op_errors: dict[str, float] = field(default_factory=dict)
    model_error: float | None = None
    model_worst_param: str = ""
    cases: int = 0
    seconds: float = 0.0
    threshold: float = THRESHOLD

    @property
    def worst(self) -> tuple[str, float]:
        items = dict(self.op_errors)
        if self.model_error is not None:
            items["model"] = self.model_error
        name = max(items, key=items.get)
        return name, items[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] < self.threshold

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}\t{'ok' if err < self.threshold else 'FAIL'}" for name, err in self.op_errors.items()]
        if self.model_error is not None:
            out.append(f"model\t{self.model_error:.3e}\t{'ok' if self.model_error < self.threshold else 'FAIL'}"
                       f"\t(worst parameter {self.model_worst_param})")
        name, err = self.worst
        out.append(f"worst\t{name}\t{err:.3e}")
        out.append(f"result\t{'PASS' if self.passed else 'FAIL'}\t{self.cases} cases per op, {self.seconds:.1f}s")
        return out


def run_suite(cases: int = 100, seed: int = 0, model_config: ModelConfig | None = None, ops=OPS,
              include_model: bool = True) -> GradcheckReport:
    start = time.perf_counter()
    report = GradcheckReport(cases=cases)
    for name in ops:
        report.op_errors[name] = check_op(name, cases, seed)
    if include_model:
        report.model_error, report.model_worst_param = check_model(model_config, seed=seed)
    report.seconds = time.perf_counter() - start
    return report
