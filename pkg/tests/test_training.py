import math

import numpy as np
import pytest
from conftest import tiny_model_config

from memotion.checkpoint import load_checkpoint
from memotion.errors import CheckpointError, ConfigError, InputError, NumericalError
from memotion.fusion import MemeModel
from memotion.optim import Optimizer, OptimizerConfig, compute_class_weights, label_histograms
from memotion.training import (
    EarlyStopping,
    EpochLog,
    TrainConfig,
    set_phase,
    split_train_validation,
    train_two_phase,
    training_accuracy,
)


def quick(**kw):
    base = dict(max_epochs_per_phase=2, patience=5, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


# --- split --------------------------------------------------------------------------


def test_split_sizes():
    train, val = split_train_validation(list(range(6992)), 0.1, seed=0)
    assert len(val) == 699 and len(train) == 6293
    train, val = split_train_validation(list(range(10)), 0.1, seed=0)
    assert len(val) == 1


def test_split_disjoint_exhaustive_deterministic():
    items = list(range(123))
    a = split_train_validation(items, 0.1, seed=7)
    b = split_train_validation(items, 0.1, seed=7)
    assert a == b
    assert sorted(a[0] + a[1]) == items and not set(a[0]) & set(a[1])
    assert split_train_validation(items, 0.1, seed=8) != a


def test_split_too_small():
    with pytest.raises(InputError):
        split_train_validation(list(range(9)))


# --- freeze -------------------------------------------------------------------------


def test_phase_partition_is_exhaustive_and_disjoint(tiny_config):
    model = MemeModel(tiny_config)
    names = {n for n, _ in model.named_parameters()}
    enc, heads = set(model.encoder_parameter_names()), set(model.head_parameter_names())
    assert enc | heads == names and not enc & heads
    set_phase(model, "frozen")
    assert {n for n, p in model.named_parameters() if p.trainable} == heads
    set_phase(model, "unfrozen")
    assert all(p.trainable for _, p in model.named_parameters())
    with pytest.raises(ConfigError):
        set_phase(model, "thawed")


def _steps(model, data, n, lr=1e-3):
    from memotion.dataio.sample import collate
    from memotion.optim import total_loss
    from memotion.tensor import Tape

    opt = Optimizer(model.named_parameters(), OptimizerConfig())
    for k in range(n):
        batch = collate(data[4 * k : 4 * k + 4])
        opt.zero_grad()
        with Tape() as tape:
            loss = total_loss(model.forward(batch, train=True), batch.labels).total
        tape.backward(loss)
        opt.step(lr)


def test_frozen_steps_leave_encoders_bitwise(tiny_config, tiny_data):
    model = set_phase(MemeModel(tiny_config), "frozen")
    before = model.state_dict()
    _steps(model, tiny_data, 5)
    after = model.state_dict()
    for name in model.encoder_parameter_names():
        assert np.array_equal(before[name], after[name]), name
    assert any(not np.array_equal(before[n], after[n]) for n in model.head_parameter_names())


def test_unfrozen_step_changes_encoders(tiny_config, tiny_data):
    model = set_phase(MemeModel(tiny_config), "unfrozen")
    before = model.state_dict()
    _steps(model, tiny_data, 1)
    changed = [n for n in model.encoder_parameter_names() if not np.array_equal(before[n], model.state_dict()[n])]
    assert any(n.startswith("text.") for n in changed) and any(n.startswith("image.") for n in changed)


# --- early stopping ----------------------------------------------------------------------


def drive(patience, metrics):
    stopper = EarlyStopping(patience)
    for epoch, m in enumerate(metrics, start=1):
        stopper.update(m)
        assert stopper.epochs_since <= patience
        if stopper.should_stop:
            return epoch
    return None


@pytest.mark.parametrize(
    "patience, metrics, stop",
    [
        (2, [0.5, 0.5, 0.5], 3),
        (2, [0.5, 0.6, 0.6, 0.6, 0.9], 4),
        (2, [0.1, 0.2, 0.3, 0.4], None),
        (3, [0.5, 0.4, 0.5, 0.45], 4),
        (3, [0.5, 0.4, 0.6, 0.5, 0.5, 0.6, 0.7], 6),
        (1, [0.3, 0.3], 2),
    ],
)
def test_early_stopping_fixtures(patience, metrics, stop):
    assert drive(patience, metrics) == stop


def test_patience_must_be_positive():
    with pytest.raises(ConfigError):
        EarlyStopping(0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0).validate()


# --- the loop -----------------------------------------------------------------------------


def test_two_phase_run_logs_and_outputs(tmp_path, tiny_data):
    model = MemeModel(tiny_model_config())
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    result = train_two_phase(model, train, val, quick(), out_dir=tmp_path)
    assert [e.phase for e in result.log] == ["frozen", "frozen", "unfrozen", "unfrozen"]
    assert [e.epoch for e in result.log] == [1, 2, 3, 4]
    assert result.best_metric == max(e.monitored for e in result.log)
    # the returned weights are the best ones
    for name, arr in model.state_dict().items():
        assert np.array_equal(arr, result.best_state[name])
    lines = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert lines[0] == EpochLog.header() and len(lines) == 5
    assert len(lines[1].split("\t")) == 3 + 5 + 5 + 1
    arrays, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["best_metric"] == result.best_metric


def test_phase_learning_rates(tiny_data):
    model = MemeModel(tiny_model_config())
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    cfg = quick(max_epochs_per_phase=10, phase1_lr=1e-3, phase2_lr=1e-4)
    result = train_two_phase(model, train, val, cfg)
    by_phase = {p: [e.lr for e in result.log if e.phase == p] for p in ("frozen", "unfrozen")}
    # 4 steps per epoch, 40 per phase, warm-up 4 steps: peak from the end of epoch 1
    assert by_phase["frozen"] and all(lr == 1e-3 for lr in by_phase["frozen"])
    assert by_phase["unfrozen"] and all(lr == 1e-4 for lr in by_phase["unfrozen"])


def test_class_weights_from_training_split_only(tiny_data):
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    result = train_two_phase(MemeModel(tiny_model_config()), train, val, quick(max_epochs_per_phase=1,
                                                                                  phases=("frozen",)))
    expected = compute_class_weights(label_histograms([s.labels for s in train]))
    for task, w in expected.items():
        assert np.array_equal(result.class_weights[task], w)


def test_resume_reproduces_uninterrupted_log(tmp_path, tiny_data):
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    cfg = quick(max_epochs_per_phase=3)
    full = train_two_phase(MemeModel(tiny_model_config()), train, val, cfg)

    for stop_at in (2, 3, 4):
        out = tmp_path / f"halt{stop_at}"
        first = train_two_phase(MemeModel(tiny_model_config()), train, val, cfg, out_dir=out,
                                halt=lambda s, k=stop_at: s.global_epoch == k)
        assert first.halted and len(first.log) == stop_at
        resumed = train_two_phase(MemeModel(tiny_model_config()), train, val, cfg, resume_from=out / "last.ckpt")
        assert resumed.log_text() == full.log_text()
        for name, arr in full.best_state.items():
            assert np.array_equal(arr, resumed.best_state[name])


def test_resume_needs_training_checkpoint(tmp_path, tiny_data):
    from memotion.checkpoint import save_model
    model = MemeModel(tiny_model_config())
    save_model(tmp_path / "m.ckpt", model)
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    with pytest.raises(CheckpointError):
        train_two_phase(model, train, val, quick(), resume_from=tmp_path / "m.ckpt")


def test_non_finite_loss_names_head_and_batch(tiny_data):
    model = MemeModel(tiny_model_config())
    model.parameters()["heads.sarcasm.output.bias"].values[:] = np.nan
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    with pytest.raises(NumericalError, match="sarcasm") as info:
        train_two_phase(model, train, val, quick())
    assert "batch" in str(info.value) and "epoch" in str(info.value)


def test_training_accuracy_reports_every_head(tiny_data):
    acc = training_accuracy(MemeModel(tiny_model_config()), tiny_data[:10])
    assert set(acc) == {"sentiment", "humor", "sarcasm", "offense", "motivation"}
    assert all(0 <= v <= 1 for v in acc.values())


def test_single_phase_run(tiny_data):
    train, val = split_train_validation(tiny_data, 0.2, seed=0)
    model = MemeModel(tiny_model_config(variant="text"))
    before = model.state_dict()
    result = train_two_phase(model, train, val, quick(phases=("frozen",)))
    assert {e.phase for e in result.log} == {"frozen"}
    for name in model.encoder_parameter_names():
        assert np.array_equal(before[name], model.state_dict()[name])
