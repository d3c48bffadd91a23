import numpy as np
import pytest

from garment_compose import tensor_core as tc
from garment_compose import training as tr
from garment_compose.dataset import DatasetConfig, generate_dataset
from garment_compose.errors import ModeError, ParameterError
from garment_compose.networks import NetConfig, init_params
from garment_compose.training import (
    AdamW, ComposerModel, OptimConfig, prepare, run_chain, sample, train, training_loss,
)


def tiny(binding="bind123", mode="generation", seed=0):
    cfg = NetConfig(mode=mode, latent_hw=(8, 8), dims=(4, 6, 8), text_dim=4, time_dim=4,
                    pos_dim=4, binding=binding)
    return ComposerModel.create(cfg, seed, T=10)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(DatasetConfig(n=4, height=16, width=16), 0)


def test_conv_in_channels():
    assert tiny().params["den.conv_in.w"].shape[0] == 9 * 6
    assert tiny(mode="tryon").params["den.conv_in.w"].shape[0] == 9 * 9
    assert tiny(binding="convin").params["ref.conv_in.w"].shape[0] == 9 * 8
    with pytest.raises(ModeError):
        NetConfig(mode="video")


def test_bind_levels():
    assert NetConfig(binding="bind1").bound_levels() == (3,)
    assert NetConfig(binding="bind123").bound_levels() == (1, 2, 3)
    assert NetConfig(binding="none").bound_levels() == ()


def test_shared_parameters_identical_across_variants():
    a, b = init_params(tiny("none").cfg, 3), init_params(tiny("bind123").cfg, 3)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_first_step_loss_bind_equals_none(data):
    losses = {}
    for binding in ("none", "bind1", "bind123"):
        m = tiny(binding)
        ts = prepare(m, data)
        rng = np.random.default_rng(5)
        t = rng.integers(1, 11, size=4)
        eps = rng.standard_normal(ts.z0.shape).astype(np.float32)
        losses[binding] = training_loss(m, ts.z0, t, eps, ts.conds)[0]
    assert losses["none"] == losses["bind1"] == losses["bind123"]


def test_loss_of_offset_predictor(monkeypatch, rng):
    eps = rng.standard_normal((2, 64, 4)).astype(np.float32)

    class Offset:
        def __init__(self, cfg, params, grad=True):
            self.vars = {}

        def predict(self, batch):
            return tc.const(eps + np.float32(0.25))

    m = tiny("none")
    monkeypatch.setattr(tr, "Forward", Offset)
    ts = prepare(m, generate_dataset(DatasetConfig(n=2, height=16, width=16), 1))
    loss, _ = training_loss(m, ts.z0, np.array([1, 2]), eps, ts.conds, grad=False)
    assert loss == pytest.approx(0.0625, abs=1e-7)


def test_train_zero_steps_keeps_init(data):
    m = tiny()
    before = {k: v.copy() for k, v in m.params.items()}
    assert train(m, prepare(m, data), OptimConfig(), 0) == []
    assert all(np.array_equal(before[k], m.params[k]) for k in before)


def test_train_deterministic(data):
    curves = []
    for _ in range(2):
        m = tiny()
        curves.append(train(m, prepare(m, data), OptimConfig(lr=1e-3, batch_size=2), 5, seed=9))
    assert curves[0] == curves[1]


def test_train_empty_dataset():
    m = tiny()
    with pytest.raises(ParameterError):
        train(m, tr.TrainingSet(np.zeros((0, 64, 4), np.float32), []), OptimConfig(), 1)


def test_single_batch_overfit(data):
    m = tiny()
    ts = prepare(m, data)
    rng = np.random.default_rng(2)
    t = rng.integers(1, 11, size=4)
    eps = rng.standard_normal(ts.z0.shape).astype(np.float32)
    adam = AdamW(m.params, OptimConfig(lr=1e-2))
    first = None
    for _ in range(500):
        loss, grads = training_loss(m, ts.z0, t, eps, ts.conds)
        first = loss if first is None else first
        adam.step(m.params, grads)
    assert loss < 0.1 * first


def test_sampling_deterministic_and_zero_steps(data):
    m = tiny()
    s = data[0]
    a = sample(m, s.composition, s.prompt, s.uv, seed=4, steps=3)
    b = sample(m, s.composition, s.prompt, s.uv, seed=4, steps=3)
    assert np.array_equal(a, b) and a.shape == (16, 16, 1)
    cond = tr.build_conditioning(m, s.uv, s.composition, s.prompt)
    z = run_chain(m, [cond], [4], steps=0)
    noise = np.random.default_rng([4, 0x5A3]).standard_normal((64, 4)).astype(np.float32)
    assert np.array_equal(z[0], noise)
    with pytest.raises(ParameterError):
        run_chain(m, [cond], [4], steps=11)


def test_checkpoint_round_trip(tmp_path):
    m = tiny("convin")
    back = ComposerModel.load(m.save(tmp_path / "ck"))
    assert back.cfg == m.cfg and all(np.array_equal(back.params[k], m.params[k]) for k in m.params)


def test_gradcheck_small_model():
    report = tr.loss_gradcheck("small", seed=0)
    assert report.passed, report.table()
