import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clic.dataset import Sex, Superclass
from clic.errors import (
    DimensionMismatch,
    InvalidConfig,
    ModeMismatch,
    NonFiniteInput,
    NonFiniteLogits,
    SignalTooShort,
)
from clic.model import (
    AttrSchema,
    Mode,
    ModelConfig,
    ecg_forward,
    expected_parameter_count,
    fused_forward,
    init_model,
    parameter_count,
    predict,
    standardize,
    vectorize_attributes,
)

# Hand tally of the default encoder + head (weights + biases / BN affine pairs):
#   stem    12*64*7 + 2*64                                         =     5_504
#   stage1  2 * (2*64*64*3 + 4*64)                                 =    49_664
#   stage2  (64*128*3 + 128*128*3 + 4*128 + 64*128 + 2*128)
#           + (2*128*128*3 + 4*128)                                =   181_504
#   stage3  same pattern at 128 -> 256                             =   723_456
#   stage4  same pattern at 256 -> 512                             = 2_888_704
#   head    512*256+256 + 256*64+64 + 64*5+5                       =   148_101
ECG_ONLY_PARAMS = 3_996_933
FUSION_1280 = (512 + 768) * 512 + 512


@pytest.fixture(scope="module")
def ecg_model():
    return init_model(ModelConfig(Mode.ECG_ONLY), seed=0).eval()


@pytest.fixture(scope="module")
def dtt_model():
    return init_model(ModelConfig(Mode.CLIC_DTT), seed=0).eval()


def _signal(b, length, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, 12, length, generator=g)


# --- construction ------------------------------------------------------------

def test_parameter_count_pinned():
    cfg = ModelConfig(Mode.ECG_ONLY)
    assert parameter_count(init_model(cfg)) == ECG_ONLY_PARAMS
    assert expected_parameter_count(cfg) == ECG_ONLY_PARAMS


@pytest.mark.parametrize("mode", list(Mode))
def test_parameter_count_matches_closed_form(mode):
    cfg = ModelConfig(mode, attr_dim=17)
    assert parameter_count(init_model(cfg)) == expected_parameter_count(cfg)


def test_dtt_differs_from_ecg_only_by_fusion_layer(ecg_model, dtt_model):
    ecg = {k: v.shape for k, v in ecg_model.named_parameters()}
    dtt = {k: v.shape for k, v in dtt_model.named_parameters()}
    assert set(dtt) - set(ecg) == {"fusion.0.weight", "fusion.0.bias"}
    assert dtt["fusion.0.weight"] == (512, 1280)
    # head input width is the fusion width, numerically equal to the ECG width
    assert {k: s for k, s in dtt.items() if not k.startswith("fusion")} == ecg
    assert parameter_count(dtt_model) - parameter_count(ecg_model) == FUSION_1280


def test_same_seed_gives_bitwise_equal_parameters():
    a = init_model(ModelConfig(Mode.CLIC_DTT), seed=3).state_dict()
    b = init_model(ModelConfig(Mode.CLIC_DTT), seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = init_model(ModelConfig(Mode.CLIC_DTT), seed=4).state_dict()
    assert not torch.equal(a["encoder.stem.0.weight"], c["encoder.stem.0.weight"])


def test_initialisation_statistics():
    model = init_model(ModelConfig(Mode.ECG_ONLY), seed=0)
    w = model.encoder.stages[3][1].conv1.weight  # fan_in = 512*3
    assert w.std().item() == pytest.approx(np.sqrt(2 / 1536), rel=0.02)
    lin = model.head[0]
    assert lin.weight.abs().max().item() <= 1 / np.sqrt(512)
    bn = model.encoder.stem[1]
    assert torch.all(bn.weight == 1) and torch.all(bn.bias == 0)


@pytest.mark.parametrize(
    "kwargs", [{"head_dims": (256, 64, 4)}, {"stage_channels": ()}, {"mode": Mode.ECG_ATTR, "attr_dim": 0}]
)
def test_invalid_config(kwargs):
    with pytest.raises(InvalidConfig):
        init_model(ModelConfig(**kwargs))


def test_config_dict_round_trip():
    cfg = ModelConfig(Mode.ECG_ATTR, attr_dim=9, seed=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- forward -----------------------------------------------------------------

@pytest.mark.parametrize("b", [1, 2, 16])
@pytest.mark.parametrize("length", [256, 1000, 5000])
def test_shape_law(dtt_model, b, length):
    with torch.no_grad():
        emb = ecg_forward(dtt_model, _signal(b, length))
        logits = fused_forward(dtt_model, emb, torch.zeros(b, 768))
    assert emb.shape == (b, 512)
    assert logits.shape == (b, 5)
    assert torch.isfinite(logits).all()


def test_concat_width_and_logit_shape(dtt_model):
    with torch.no_grad():
        emb = ecg_forward(dtt_model, _signal(4, 256))
        out = fused_forward(dtt_model, emb, torch.randn(4, 768))
    assert dtt_model.fusion[0].in_features == 1280
    assert out.shape == (4, 5)


def test_attr_mode_fusion_width():
    model = init_model(ModelConfig(Mode.ECG_ATTR, attr_dim=11))
    assert model.fusion[0].in_features == 512 + 11


def test_nan_input_rejected(ecg_model):
    x = _signal(1, 256)
    x[0, 3, 10] = float("nan")
    with pytest.raises(NonFiniteInput):
        ecg_forward(ecg_model, x)


def test_short_signal_rejected(ecg_model):
    with pytest.raises(SignalTooShort):
        ecg_forward(ecg_model, _signal(1, 31))


def test_mode_mismatch(ecg_model, dtt_model):
    emb = torch.zeros(2, 512)
    with pytest.raises(ModeMismatch):
        fused_forward(ecg_model, emb, torch.zeros(2, 768))
    with pytest.raises(ModeMismatch):
        fused_forward(dtt_model, emb, None)
    with pytest.raises(DimensionMismatch):
        fused_forward(dtt_model, emb, torch.zeros(2, 512))


def test_eval_forward_is_bitwise_deterministic(dtt_model):
    x, ctx = _signal(3, 256), torch.randn(3, 768)
    with torch.no_grad():
        assert torch.equal(dtt_model(x, ctx), dtt_model(x, ctx))


def test_batch_independence_in_eval_mode():
    model = init_model(ModelConfig(Mode.CLIC_DTT), seed=1)
    # populate running statistics so eval differs from a fresh model
    with torch.no_grad():
        model.train()
        model(_signal(8, 256, seed=5), torch.randn(8, 768))
    model.eval()
    x, ctx = _signal(6, 256, seed=2), torch.randn(6, 768)
    with torch.no_grad():
        together = model(x, ctx)
        alone = torch.cat([model(x[i:i + 1], ctx[i:i + 1]) for i in range(6)])
    assert torch.allclose(together, alone, atol=1e-5, rtol=0)


def test_frozen_context_gets_no_gradient():
    model = init_model(ModelConfig(Mode.CLIC_DTT), seed=0).train()
    ctx = torch.randn(2, 768)
    loss = model(_signal(2, 128), ctx).sum()
    loss.backward()
    assert ctx.grad is None and not ctx.requires_grad
    assert all(p.grad is not None for p in model.parameters())


def test_standardize_zero_mean_unit_variance():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 5, size=(12, 500))
    z = standardize(x)
    assert np.allclose(z.mean(axis=-1), 0, atol=1e-12)
    assert np.allclose(z.std(axis=-1), 1, atol=1e-12)
    flat = standardize(np.full((12, 100), 7.0))
    assert np.all(flat == 0)


# --- predict -----------------------------------------------------------------

def test_predict_examples():
    assert predict([3, 1, 0, 0, 0]) is Superclass.NORM
    assert predict([1, 1, 0, 0, 0]) is Superclass.NORM
    assert predict([0, 0, 2, 2, 1]) is Superclass.STTC
    with pytest.raises(NonFiniteLogits):
        predict([0, float("nan"), 0, 0, 0])


@settings(max_examples=200)
@given(z=st.lists(st.integers(-50, 50), min_size=5, max_size=5), c=st.integers(-1000, 1000))
def test_predict_shift_invariance_exact(z, c):
    # integer-valued logits shift exactly in float64
    assert predict(np.asarray(z, float) + c) == predict(np.asarray(z, float))


# --- attributes ----------------------------------------------------------------

def test_attribute_vector_example(full_meta):
    meta = dataclasses.replace(full_meta, sex=Sex.MALE)
    schema = AttrSchema.fit([meta])
    v = vectorize_attributes(meta, schema)
    assert v[:6] == pytest.approx([0.56, 0, 1, 0, 0.4571428571428571, 0], abs=1e-12)
    assert round(v[4], 4) == 0.4571
    assert len(v) == schema.dim == 6 + 1 + 1 + 1


def test_attribute_unseen_device_and_missing_values(full_meta):
    schema = AttrSchema(devices=("AT-6",), rhythm_codes=("SR",), form_codes=("NST_",))
    meta = dataclasses.replace(full_meta, age=None, height=None)
    v = vectorize_attributes(meta, schema)
    assert tuple(v[:2]) == (0, 1)
    assert tuple(v[4:6]) == (0, 1)
    assert v[6] == 0  # CS-12 unseen
    assert tuple(v[7:]) == (1, 1)


def test_attribute_schema_fit_on_given_records_only(full_meta):
    train = [full_meta, dataclasses.replace(full_meta, device="AT-6", rhythm_codes=["AFIB"])]
    schema = AttrSchema.fit(train)
    assert schema.devices == ("AT-6", "CS-12")
    assert schema.rhythm_codes == ("AFIB", "SR")
    assert AttrSchema.from_dict(schema.to_dict()) == schema


@settings(max_examples=100)
@given(
    age=st.one_of(st.none(), st.integers(18, 95)),
    sex=st.sampled_from(list(Sex)),
    device=st.one_of(st.none(), st.sampled_from(["CS-12", "AT-6", "X"])),
)
def test_attribute_flags_binary(age, sex, device):
    from clic.dataset import PatientMeta

    meta = PatientMeta(id="1", strat_fold=1, age=age, sex=sex, height=None, weight=80.0, device=device)
    v = vectorize_attributes(meta, AttrSchema(devices=("AT-6", "CS-12")))
    assert set(np.unique(v[[1, 2, 3, 5, 6, 7]])) <= {0.0, 1.0}
    assert v[2] + v[3] <= 1
