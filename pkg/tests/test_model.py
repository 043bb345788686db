import copy

import numpy as np
import pytest

from geoscore import numerics as nm
from geoscore.model import (
    ConstantLabelsError,
    ForwardContext,
    ModelConfig,
    PairExample,
    TrainConfig,
    cross_attention,
    encoder_layer,
    fitting_head,
    forward_scores,
    fuse,
    init_model,
    load_model,
    multi_head_attention,
    patch_embed,
    predict,
    r_squared,
    save_model,
    train,
    vit_encode,
)
from geoscore.numerics import ParameterError, ShapeError, Tensor
from tests.gradcheck import REL_TOL, max_gradient_error

FULL = ModelConfig()  # 224/32, dim 256, 2 layers, 8 heads
TINY = ModelConfig(
    image_side=16,
    patch_side=8,
    hidden_dim=8,
    num_encoder_layers=1,
    num_heads=2,
    head_hidden=8,
    dropout_rate=0.0,
)


def randomized_model(cfg, seed=0, scale=0.08):
    """Model with every parameter perturbed so gradients flow everywhere."""
    rng = np.random.default_rng(seed)
    model = init_model(cfg, rng)
    for p in model.parameters():
        p.data = p.data + rng.normal(scale=scale, size=p.data.shape)
    return model


def zero_out(linear):
    linear.w.data = np.zeros_like(linear.w.data)
    linear.b.data = np.zeros_like(linear.b.data)


# ------------------------------------------------------------------ config

def test_config_defaults_give_49_patches():
    assert FULL.num_patches == 49
    assert FULL.num_tokens == 50
    assert FULL.patch_dim == 3072
    assert FULL.head_dim == 32


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(image_side=224, patch_side=33)
    with pytest.raises(ParameterError):
        ModelConfig(hidden_dim=250, num_heads=8)


# ------------------------------------------------------------- patch embed

def test_patch_embed_output_shape_full_config():
    model = randomized_model(FULL, seed=1)
    img = np.random.default_rng(2).uniform(-1, 1, size=(1, 3, 224, 224))
    seq = patch_embed(img, model.satellite, FULL)
    assert seq.shape == (1, 50, 256)


def test_patch_embed_zero_inputs_zero_weights():
    rng = np.random.default_rng(0)
    model = init_model(TINY, rng)
    zero_out(model.satellite.patch_proj)
    seq = patch_embed(np.zeros((1, 3, 16, 16)), model.satellite, TINY)
    assert np.array_equal(seq.data, np.zeros((1, 5, 8)))


def test_patch_embed_rejects_wrong_size():
    model = init_model(TINY, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        patch_embed(np.zeros((1, 3, 32, 32)), model.satellite, TINY)


# ------------------------------------------------------------ encoder layer

def test_encoder_layer_preserves_shape_and_rows_stochastic():
    model = randomized_model(FULL, seed=3)
    seq = Tensor(np.random.default_rng(4).normal(size=(2, 50, 256)))
    sink: list = []
    ctx = ForwardContext(attn_sink=sink)
    out = encoder_layer(seq, model.satellite.layers[0], FULL, ctx)
    assert out.shape == (2, 50, 256)
    assert len(sink) == 1
    rows = sink[0].sum(axis=-1)
    assert np.max(np.abs(rows - 1.0)) <= 1e-9


def test_encoder_layer_residual_identity_with_zeroed_projections():
    model = randomized_model(TINY, seed=5)
    layer = model.satellite.layers[0]
    zero_out(layer.attn.out)
    zero_out(layer.mlp_out)
    seq = Tensor(np.random.default_rng(6).normal(size=(1, 5, 8)))
    out = encoder_layer(seq, layer, TINY, ForwardContext())
    assert np.array_equal(out.data, seq.data)


def test_vit_encode_reduces_to_patch_embed_with_zeroed_projections():
    model = randomized_model(TINY, seed=7)
    for layer in model.satellite.layers:
        zero_out(layer.attn.out)
        zero_out(layer.mlp_out)
    img = np.random.default_rng(8).uniform(-1, 1, size=(1, 3, 16, 16))
    encoded = vit_encode(img, model.satellite, TINY, ForwardContext())
    embedded = patch_embed(img, model.satellite, TINY)
    assert np.array_equal(encoded.data, embedded.data)


def test_vit_encode_deterministic_in_inference():
    model = randomized_model(TINY, seed=9)
    img = np.random.default_rng(10).uniform(-1, 1, size=(1, 3, 16, 16))
    a = vit_encode(img, model.satellite, TINY, ForwardContext())
    b = vit_encode(img, model.satellite, TINY, ForwardContext())
    assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------- cross attention

def test_cross_attention_shape_and_rows():
    model = randomized_model(FULL, seed=11)
    rng = np.random.default_rng(12)
    q = Tensor(rng.normal(size=(1, 50, 256)))
    kv = Tensor(rng.normal(size=(1, 50, 256)))
    sink: list = []
    out = cross_attention(q, kv, model.fusion[0].first, FULL, ForwardContext(attn_sink=sink))
    assert out.shape == (1, 50, 256)
    assert np.max(np.abs(sink[0].sum(axis=-1) - 1.0)) <= 1e-9


def test_cross_attention_on_same_sequence_is_self_attention():
    model = randomized_model(TINY, seed=13)
    s = Tensor(np.random.default_rng(14).normal(size=(1, 5, 8)))
    p = model.fusion[0].first
    crossed = cross_attention(s, s, p, TINY, ForwardContext())
    selfed = nm.add(s, multi_head_attention(s, s, p, TINY, ForwardContext()))
    assert np.array_equal(crossed.data, selfed.data)


def test_cross_attention_shape_mismatch():
    model = randomized_model(TINY, seed=15)
    q = Tensor(np.zeros((1, 5, 8)))
    kv = Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(ShapeError):
        cross_attention(q, kv, model.fusion[0].first, TINY, ForwardContext())


# -------------------------------------------------------------------- fuse

def test_fuse_shape():
    model = randomized_model(FULL, seed=16)
    rng = np.random.default_rng(17)
    rep1 = Tensor(rng.normal(size=(1, 50, 256)))
    rep2 = Tensor(rng.normal(size=(1, 50, 256)))
    fused = fuse(rep1, rep2, model, ForwardContext())
    assert fused.shape == (1, 50, 256)


def test_fuse_residual_identity_when_second_stage_zeroed():
    model = randomized_model(TINY, seed=18)
    zero_out(model.fusion[0].second.out)
    rng = np.random.default_rng(19)
    rep1 = Tensor(rng.normal(size=(1, 5, 8)))
    rep2 = Tensor(rng.normal(size=(1, 5, 8)))
    fused = fuse(rep1, rep2, model, ForwardContext())
    assert np.array_equal(fused.data, rep2.data)


def test_fuse_gradients_match_finite_differences():
    model = randomized_model(TINY, seed=20)
    rng = np.random.default_rng(21)
    rep1 = Tensor(rng.normal(size=(1, 5, 8)), requires_grad=True)
    rep2 = Tensor(rng.normal(size=(1, 5, 8)), requires_grad=True)

    def forward():
        fused = fuse(rep1, rep2, model, ForwardContext())
        return nm.sum_(nm.mul(fused, fused))

    err = max_gradient_error(forward, {"rep1": rep1, "rep2": rep2}, rng)
    assert err <= REL_TOL


# ------------------------------------------------------------ fitting head

def test_fitting_head_zero_weights():
    model = init_model(TINY, np.random.default_rng(22))
    zero_out(model.head_in)
    zero_out(model.head_out)
    fused = Tensor(np.random.default_rng(23).normal(size=(3, 5, 8)))
    out = fitting_head(fused, model)
    assert out.shape == (3,)
    assert np.array_equal(out.data, np.zeros(3))


def test_fitting_head_relu_clips_to_bias():
    model = randomized_model(TINY, seed=24)
    # force every first-layer pre-activation negative
    model.head_in.w.data = np.zeros_like(model.head_in.w.data)
    model.head_in.b.data = np.full_like(model.head_in.b.data, -1.0)
    model.head_out.b.data = np.array([0.37])
    fused = Tensor(np.random.default_rng(25).normal(size=(2, 5, 8)))
    out = fitting_head(fused, model)
    assert np.allclose(out.data, 0.37)


# ----------------------------------------------------------------- predict

def test_predict_deterministic():
    model = randomized_model(TINY, seed=26)
    rng = np.random.default_rng(27)
    sat = rng.uniform(-1, 1, size=(3, 16, 16))
    sv = rng.uniform(-1, 1, size=(3, 16, 16))
    assert predict(model, sat, sv) == predict(model, sat, sv)


def test_predict_zero_head_gives_zero():
    model = randomized_model(TINY, seed=28)
    zero_out(model.head_in)
    zero_out(model.head_out)
    rng = np.random.default_rng(29)
    assert predict(model, rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))) == 0.0


# -------------------------------------------------- full-model grad check

def test_full_model_gradients_match_finite_differences():
    model = randomized_model(TINY, seed=30)
    rng = np.random.default_rng(31)
    sat = rng.uniform(-1, 1, size=(2, 3, 16, 16))
    sv = rng.uniform(-1, 1, size=(2, 3, 16, 16))
    target = Tensor(rng.normal(size=2))

    def forward():
        scores = forward_scores(model, sat, sv, ForwardContext())
        return nm.mse(scores, target)

    err = max_gradient_error(forward, model.named_parameters(), rng, max_coords_per_param=6)
    assert err <= REL_TOL


# --------------------------------------------------------------- r squared

def test_r_squared_perfect():
    assert r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0


def test_r_squared_mean_predictor():
    assert r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]) == 0.0


def test_r_squared_worked_example():
    assert r_squared([1.5, 2.0, 2.5], [1.0, 2.0, 3.0]) == 0.75


def test_r_squared_constant_labels():
    with pytest.raises(ConstantLabelsError):
        r_squared([1.0, 2.0], [3.0, 3.0])


# ---------------------------------------------------------------- training

def _signal_examples(n, rng):
    """Images whose overall brightness carries the label."""
    out = []
    for i in range(n):
        level = rng.uniform(-1.0, 1.0)
        sat = rng.normal(scale=0.1, size=(3, 16, 16)) + level
        sv = rng.normal(scale=0.1, size=(3, 16, 16)) + level
        out.append(PairExample(pair_id=f"p{i}", sat=sat, sv=sv, label=level))
    return out


def test_train_deterministic_for_seed():
    rng = np.random.default_rng(40)
    examples = _signal_examples(12, rng)
    cfg = TrainConfig(batch_size=4, epochs=2, lr=1e-3, seed=5)
    r1 = train(init_model(TINY, np.random.default_rng(1)), examples, cfg)
    r2 = train(init_model(TINY, np.random.default_rng(1)), examples, cfg)
    for a, b in zip(r1.model.parameters(), r2.model.parameters()):
        assert np.array_equal(a.data, b.data)
    assert r1.history == r2.history


def test_train_loss_decreases_on_learnable_signal():
    rng = np.random.default_rng(41)
    examples = _signal_examples(32, rng)
    cfg = TrainConfig(batch_size=8, epochs=10, lr=3e-3, seed=6)
    result = train(init_model(TINY, np.random.default_rng(2)), examples, cfg)
    assert result.history[-1]["train_mse"] <= result.history[0]["train_mse"]


def test_train_memorizes_identical_pairs():
    rng = np.random.default_rng(42)
    sat = rng.uniform(size=(3, 16, 16))
    sv = rng.uniform(size=(3, 16, 16))
    examples = [PairExample(pair_id=f"p{i}", sat=sat, sv=sv, label=0.7) for i in range(10)]
    cfg = TrainConfig(batch_size=5, epochs=3, lr=1e-3, seed=7)
    result = train(init_model(TINY, np.random.default_rng(3)), examples, cfg)
    assert result.history[-1]["val_mse"] == pytest.approx(0.0, abs=1e-6)
    assert result.history[-1]["val_r2"] is None  # constant labels


def test_train_empty_dataset_rejected():
    from geoscore.numerics import ContractError

    with pytest.raises(ContractError):
        train(init_model(TINY, np.random.default_rng(0)), [], TrainConfig())


# -------------------------------------------------------------- checkpoint

def test_model_checkpoint_round_trip(tmp_path):
    from geoscore.model import LabelScaler

    model = randomized_model(TINY, seed=50)
    scaler = LabelScaler(mean=1.5, std=2.0)
    save_model(tmp_path / "ckpt", model, scaler, preprocess={"mean": [0.4, 0.4, 0.4]})
    loaded, loaded_scaler, preprocess = load_model(tmp_path / "ckpt")
    assert loaded_scaler == scaler
    assert preprocess == {"mean": [0.4, 0.4, 0.4]}
    named = model.named_parameters()
    for name, tensor in loaded.named_parameters().items():
        assert np.array_equal(tensor.data, named[name].data)

    rng = np.random.default_rng(51)
    sat = rng.uniform(size=(3, 16, 16))
    sv = rng.uniform(size=(3, 16, 16))
    assert predict(loaded, sat, sv) == predict(model, sat, sv)
