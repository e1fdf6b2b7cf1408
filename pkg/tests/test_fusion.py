import numpy as np
import pytest

from memotion import nn
from memotion import tensor as T
from memotion.checkpoint import load_model, save_model
from memotion.dataio.labels import NUM_CLASSES, TASKS
from memotion.dataio.synthetic import generate_synthetic_dataset
from memotion.errors import CheckpointError, ConfigError, InputError, ShapeError
from memotion.fusion import (
    HeadBankConfig,
    MemeModel,
    ModelConfig,
    build_head_bank,
    fuse,
    head_parameter_specs,
    model_forward,
    split_fused,
)
from memotion.image_encoder import FULL_IMAGE_CONFIG
from memotion.optim import total_loss
from memotion.tensor import Tape, Tensor
from memotion.text_encoder import FULL_TEXT_CONFIG


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic_dataset(12, seed=1).samples


def test_full_scale_fused_dim():
    cfg = ModelConfig(text=FULL_TEXT_CONFIG, image=FULL_IMAGE_CONFIG)
    assert cfg.head_input_dim == 2560 == 512 + 2048


def test_desk_fused_dim():
    assert ModelConfig().head_input_dim == 128
    assert ModelConfig(variant="text").head_input_dim == 64
    assert ModelConfig(variant="image-only").head_input_dim == 64


def test_fuse_is_image_first_and_invertible():
    rng = np.random.default_rng(0)
    img, txt = Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(7))
    fused = fuse(img, txt)
    assert fused.shape == (12,)
    a, b = split_fused(fused, 5)
    assert np.array_equal(a.values, img.values) and np.array_equal(b.values, txt.values)


def test_head_stack_shapes():
    specs = head_parameter_specs(2560, HeadBankConfig())
    for task in TASKS:
        assert specs[f"{task}.dense1.weight"].shape == (2560, 512)
        assert specs[f"{task}.dense2.weight"].shape == (512, 256)
        assert specs[f"{task}.output.weight"].shape == (256, NUM_CLASSES[task])
    c = HeadBankConfig()
    assert (c.head_dropout, c.feature_dropout) == (0.3, 0.1)


def test_class_counts_are_fixed():
    with pytest.raises(ConfigError):
        HeadBankConfig(class_counts={**NUM_CLASSES, "humor": 5}).validate()


def test_zero_features_give_uniform_outputs():
    bank = build_head_bank(128, HeadBankConfig(hidden1=16, hidden2=8), seed=0)
    out = bank(Tensor(np.zeros(128, dtype=np.float32)))
    for task in TASKS:
        np.testing.assert_allclose(out[task].values, np.full(NUM_CLASSES[task], 1 / NUM_CLASSES[task]), rtol=1e-6)


def test_outputs_sum_to_one():
    bank = build_head_bank(32, HeadBankConfig(hidden1=16, hidden2=8), seed=0)
    rng = np.random.default_rng(0)
    feats = Tensor((rng.standard_normal((100, 32)) * 3).astype(np.float32))
    out = bank(feats)
    for task in TASKS:
        v = out[task].values
        assert ((v >= 0) & (v <= 1)).all()
        np.testing.assert_allclose(v.sum(axis=-1), 1.0, atol=1e-6)


def test_head_dim_mismatch():
    bank = build_head_bank(32, HeadBankConfig(hidden1=8, hidden2=4), seed=0)
    with pytest.raises(ShapeError):
        bank(Tensor(np.zeros(31, dtype=np.float32)))


def test_perturbing_one_head_leaves_others():
    bank = build_head_bank(16, HeadBankConfig(hidden1=8, hidden2=4), seed=0)
    x = Tensor(np.random.default_rng(1).standard_normal(16).astype(np.float32))
    before = {t: v.values.copy() for t, v in bank(x).items()}
    for name, p in bank.params.items():
        if name.startswith("sentiment."):
            p.values = p.values + 0.3
    after = bank(x)
    assert not np.array_equal(after["sentiment"].values, before["sentiment"])
    for task in TASKS[1:]:
        assert np.array_equal(after[task].values, before[task])


def test_head_loss_gradient_is_zero_on_other_heads(samples):
    cfg = ModelConfig(heads=HeadBankConfig(hidden1=16, hidden2=8))
    model = MemeModel(cfg)
    with Tape() as tape:
        loss = total_loss(model.forward(samples[:2]), [s.labels.as_tuple() for s in samples[:2]]).heads["humor"]
    tape.backward(loss)
    for name, p in model.named_parameters():
        if name.startswith("heads.") and not name.startswith("heads.humor."):
            assert p.grad is None or not p.grad.any(), name
    enc_grads = [p.grad for n, p in model.named_parameters() if n.startswith("text.layer.")]
    assert any(g is not None and np.abs(g).sum() > 0 for g in enc_grads)


def test_eval_forward_is_deterministic(samples):
    model = MemeModel(ModelConfig(heads=HeadBankConfig(hidden1=16, hidden2=8)))
    a = model_forward("multimodal", model, samples[0])
    b = model_forward("multimodal", model, samples[0])
    for task in TASKS:
        assert np.array_equal(a[task].values, b[task].values)


def test_variant_mismatch_is_a_config_error(samples):
    model = MemeModel(ModelConfig(variant="multimodal", heads=HeadBankConfig(hidden1=8, hidden2=4)))
    with pytest.raises(ConfigError):
        model_forward("text-only", model, samples[0])
    with pytest.raises(ConfigError):
        ModelConfig(variant="audio").validate()


def test_missing_modality(samples):
    model = MemeModel(ModelConfig(variant="image", heads=HeadBankConfig(hidden1=8, hidden2=4)))
    s = samples[0]
    from dataclasses import replace
    with pytest.raises(InputError):
        model.forward(replace(s, image=None))
    # text-only samples still run through a text model
    text_model = MemeModel(ModelConfig(variant="text", heads=HeadBankConfig(hidden1=8, hidden2=4)))
    assert text_model.forward(replace(s, image=None))["motivation"].shape == (1, 2)


def test_parameter_table_matches_model():
    cfg = ModelConfig(heads=HeadBankConfig(hidden1=16, hidden2=8))
    from memotion.fusion import model_parameter_specs
    specs = model_parameter_specs(cfg)
    model = MemeModel(cfg)
    assert {n: p.shape for n, p in model.named_parameters()} == {n: s.shape for n, s in specs.items()}
    assert model.parameter_count() == nn.count(specs)


def test_checkpoint_round_trip_and_mismatch(tmp_path, samples):
    cfg = ModelConfig(heads=HeadBankConfig(hidden1=16, hidden2=8), seed=4)
    model = MemeModel(cfg)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    back = load_model(path)
    for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(a.values, b.values)
    wider = ModelConfig(heads=HeadBankConfig(hidden1=32, hidden2=8))
    with pytest.raises(CheckpointError, match="shape mismatch"):
        MemeModel(wider).load_state_dict(back.state_dict())
    with pytest.raises(CheckpointError):
        MemeModel(ModelConfig(variant="text", heads=HeadBankConfig(hidden1=16, hidden2=8))).load_state_dict(
            back.state_dict())


def test_end_to_end_gradcheck(samples):
    cfg = ModelConfig(heads=HeadBankConfig(hidden1=8, hidden2=4))
    cfg.text.num_layers = 2
    model = MemeModel(cfg)
    # smooth the image so no ReLU/max-pool kink sits within epsilon
    s = samples[0]
    yy, xx = np.mgrid[0:64, 0:64] / 64
    from dataclasses import replace
    s = replace(s, image=np.stack([np.sin(4 * yy), np.cos(3 * xx), yy - xx]).astype(np.float32))

    def loss(_):
        return total_loss(model.forward(s), s.labels).total

    for name in ("text.layer.value.weight", "image.stack1.conv0.kernel", "heads.offense.dense1.weight"):
        p = model.parameters()[name]
        idx = np.random.default_rng(0).choice(p.size, 3, replace=False)
        assert T.finite_diff_check(loss, p, 1e-5, idx) < 1e-2, name
