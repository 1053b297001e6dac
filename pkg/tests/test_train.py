"""Training loop, optimiser and schedule wiring."""

import math

import numpy as np
import pytest

from otmil.data_io import Bag, SynthConfig, generate_bags
from otmil.model import ModelError, ModelParams
from otmil.train import (
    AdamW,
    TrainConfig,
    TrainingError,
    cosine_lr,
    evaluate_cindex,
    predict_risks,
    train,
)

SYNTH = SynthConfig(n_bags=48, min_instances=10, max_instances=20, dim=8, seed=3)
FAST = dict(epochs=5, ramp_epochs=2, lr=3e-3, latent_dim=6, n_tokens=4, batch_size=12)


@pytest.fixture(scope="module")
def bags():
    return generate_bags(SYNTH)[0]


def test_zero_epochs_returns_initial(bags):
    cfg = TrainConfig(epochs=0, ramp_epochs=0, latent_dim=6, n_tokens=4)
    params, history = train(bags, cfg)
    init = ModelParams.initialize(8, 6, 4, np.random.default_rng(0), agg_init="zero")
    assert history == []
    assert np.array_equal(params.flatten(), init.flatten())
    assert np.all(params.agg_weight == 0.0)


def test_uniform_agg_init_option(bags):
    cfg = TrainConfig(epochs=0, ramp_epochs=0, latent_dim=6, n_tokens=4, agg_init="uniform")
    params, _ = train(bags, cfg)
    init = ModelParams.initialize(8, 6, 4, np.random.default_rng(0))
    assert np.array_equal(params.flatten(), init.flatten())
    with pytest.raises(ValueError):
        TrainConfig(agg_init="normal")


def test_zero_agg_init_still_learns_token_weights(bags):
    params, _ = train(bags, TrainConfig(**FAST))
    assert np.abs(params.agg_weight).max() > 0.0


def test_loss_decreases(bags):
    _, history = train(bags, TrainConfig(**FAST))
    assert len(history) == 5
    assert history[-1].train_loss < history[0].train_loss


def test_rerun_is_bit_identical(bags):
    p1, h1 = train(bags, TrainConfig(**FAST, seed=9), val_bags=bags[:10])
    p2, h2 = train(bags, TrainConfig(**FAST, seed=9), val_bags=bags[:10])
    assert h1 == h2
    assert np.array_equal(p1.flatten(), p2.flatten())


def test_rho_reaches_one_after_ramp(bags):
    _, history = train(bags, TrainConfig(**FAST))
    rhos = [h.rho for h in history]
    assert rhos[0] < 1.0 and rhos[2:] == [1.0, 1.0, 1.0]
    assert all(b >= a for a, b in zip(rhos, rhos[1:]))


def test_fixed_ramp_and_equality_run(bags):
    cfg = TrainConfig(**{**FAST, "epochs": 2}, ramp_shape="fixed", fixed_rho=0.7)
    _, history = train(bags, cfg)
    assert [h.rho for h in history] == [0.7, 0.7]
    cfg = TrainConfig(**{**FAST, "epochs": 1, "ramp_epochs": 0}, global_constraint="equality")
    _, history = train(bags, cfg)
    assert math.isfinite(history[0].train_loss)


def test_max_patches_subsamples(bags):
    cfg = TrainConfig(**{**FAST, "epochs": 1, "ramp_epochs": 1}, max_patches=5)
    _, history = train(bags, cfg)
    assert math.isfinite(history[0].train_loss)


def test_no_events_is_an_error():
    rng = np.random.default_rng(0)
    bags = [Bag(rng.normal(size=(3, 4)), 1.0 + i, False) for i in range(4)]
    with pytest.raises(TrainingError, match="lacks events"):
        train(bags, TrainConfig(epochs=1, ramp_epochs=1, latent_dim=2, n_tokens=2))


def test_latent_wider_than_features(bags):
    with pytest.raises(ModelError):
        train(bags, TrainConfig(latent_dim=9, n_tokens=2, epochs=1, ramp_epochs=1))


@pytest.mark.parametrize("kw", [{"rho0": 0.0}, {"ramp_epochs": 60}, {"ramp_shape": "step"},
                                {"global_constraint": "hard"}, {"max_patches": 0},
                                {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_predict_and_evaluate(bags):
    params, _ = train(bags, TrainConfig(**{**FAST, "epochs": 1, "ramp_epochs": 1}))
    cfg = TrainConfig(**FAST)
    risks, plans = predict_risks(bags[:7], params, 1.0, cfg.solver, batch_size=3)
    assert risks.shape == (7,) and len(plans) == 7
    assert all(p.mass.shape == (b.n_instances, 4) for p, b in zip(plans, bags[:7]))
    c = evaluate_cindex(bags, params, 1.0, cfg.solver)
    assert 0.0 <= c <= 1.0


def test_adamw_first_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    opt = AdamW(p, lr=0.1, weight_decay=0.01)
    opt.step(p, {"w": np.array([0.5, -0.25])})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([1.0, -1.0])
    assert np.allclose(p["w"], expected, atol=1e-7)


def test_cosine_lr():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(2.0, 3, 0) == 2.0
