import numpy as np
import pytest

from gexmap.errors import ArgumentError, DataError, NumericError
from gexmap.model import DenseExpressionModel, ModelConfig
from gexmap.spots import circular_mask
from gexmap.synth import synth_generate
from gexmap.train import AdamState, AdamW, Trainer, TrainConfig, adamw_step, evaluate, predict_spots

MINI = dict(genes=3, filter_sizes=(4, 8, 8), embed_dim=8, heads=2, patch_size=2, mlp_ratio=2, max_grid=16)


@pytest.fixture(scope="module")
def tiny_data():
    slide, table, truth = synth_generate(32, 32, 3, 12, 3.0, seed=4)
    return slide, table, truth


def mini_model(seed=0, **kw):
    return DenseExpressionModel(ModelConfig(**{**MINI, **kw}), seed=seed)


def test_adamw_zero_gradient_fixed_point():
    w = {"w": np.array([1.5, -2.0])}
    out = adamw_step(w, {"w": np.zeros(2)}, AdamState(), TrainConfig(weight_decay=0.0))
    assert np.array_equal(out["w"], w["w"])


def test_adamw_decoupled_decay():
    w = {"w": np.array([1.0, -3.0, 10.0])}
    out = adamw_step(w, {"w": np.zeros(3)}, AdamState(), TrainConfig(lr=1.0, weight_decay=0.1))
    assert np.allclose(out["w"], 0.9 * w["w"], rtol=1e-15, atol=0)


def test_adamw_first_step_size():
    state = AdamState()
    out = adamw_step({"w": np.array([0.25])}, {"w": np.array([1.0])}, state, TrainConfig(lr=5e-4, weight_decay=0.0))
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert out["w"][0] == pytest.approx(0.25 - 5e-4, abs=1e-11)
    assert state.step == 1
    assert state.m["w"][0] == pytest.approx(0.1) and state.v["w"][0] == pytest.approx(0.001)


def test_adamw_missing_gradient_counts_as_zero():
    out = adamw_step({"w": np.array([2.0])}, {"w": None}, AdamState(), TrainConfig(weight_decay=0.0))
    assert out["w"][0] == 2.0


def test_adamw_rejects_non_finite():
    with pytest.raises(NumericError, match="head"):
        adamw_step({"head": np.zeros(2)}, {"head": np.array([0.0, np.nan])}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(lr=-1e-3)
    with pytest.raises(ArgumentError):
        TrainConfig(epochs=0)
    with pytest.raises(ArgumentError):
        TrainConfig(lam=-0.5)
    with pytest.raises(ArgumentError):
        TrainConfig(batch_spots=1)
    cfg = TrainConfig(lr=1e-3, betas=(0.8, 0.99))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_lr_epoch_is_fixed_point(tiny_data):
    slide, table, _ = tiny_data
    model = mini_model()
    before = model.state_dict()
    Trainer(model, [(slide, table)], TrainConfig(lr=0.0, weight_decay=0.0, epochs=2)).fit()
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_deterministic(tiny_data):
    slide, table, _ = tiny_data

    def run():
        model = mini_model(seed=7)
        trainer = Trainer(model, [(slide, table)], TrainConfig(epochs=3, seed=7, batch_spots=8))
        trainer.fit()
        return trainer.step_losses, model.state_dict()

    (la, sa), (lb, sb) = run(), run()
    assert la == lb
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_training_reduces_loss(tiny_data):
    slide, table, _ = tiny_data
    trainer = Trainer(mini_model(seed=1), [(slide, table)], TrainConfig(epochs=30, lr=3e-3))
    hist = trainer.fit()
    assert hist[-1].loss < 0.5 * hist[0].loss
    assert hist[0].mse is not None and hist[0].pcc_loss is not None


def test_zero_head_constant_predictor(tiny_data):
    slide, table, _ = tiny_data
    model = mini_model(head_init="zeros")
    model.decoder.head.bias.data[...] = np.array([0.5, 1.25, 2.0], dtype=np.float32)
    pred = predict_spots(model, slide, table.spots)
    sizes = np.array([len(circular_mask(s, 32, 32)[0]) for s in table.spots], dtype=np.float64)
    b = np.array([0.5, 1.25, 2.0])
    assert np.array_equal(pred, sizes[:, None] * b)
    y = table.expression()
    expect = np.mean((sizes[:, None] * b - y) ** 2)
    assert evaluate(model, [(slide, table)]).mse == pytest.approx(expect, rel=1e-13)


def test_radius_override_noop(tiny_data):
    slide, table, _ = tiny_data
    model = mini_model(seed=3)
    a = evaluate(model, [(slide, table)])
    b = evaluate(model, [(slide, table)], radius_override=3.0)
    assert a.rows() == b.rows()
    assert np.array_equal(a.pcc_per_gene, b.pcc_per_gene)


def test_radius_override_changes_sums(tiny_data):
    slide, table, _ = tiny_data
    model = mini_model(seed=3)
    small = predict_spots(model, slide, table.with_radius(1.5).spots)
    big = predict_spots(model, slide, table.spots)
    assert not np.array_equal(small, big)


def test_objective_switches(tiny_data):
    slide, table, _ = tiny_data
    for kw in (dict(use_pcc=False), dict(use_mse=False, lam=1.0)):
        log = Trainer(mini_model(), [(slide, table)], TrainConfig(epochs=1, **kw)).fit()[0]
        assert np.isfinite(log.loss)
        assert (log.mse is None) == (not kw.get("use_mse", True))
        assert (log.pcc_loss is None) == (not kw.get("use_pcc", True))


def test_empty_dataset():
    with pytest.raises(DataError):
        Trainer(mini_model(), [], TrainConfig())


def test_every_parameter_receives_a_gradient(tiny_data):
    slide, table, _ = tiny_data
    model = mini_model(seed=2)
    trainer = Trainer(model, [(slide, table)], TrainConfig(epochs=1))
    trainer.fit()
    assert isinstance(trainer.optimizer, AdamW)
    missing = [k for k, p in model.named_parameters() if p.grad is None or p.grad.shape != p.shape]
    assert missing == []
