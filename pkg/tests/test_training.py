import math

import numpy as np
import pytest

from cafcn import oracles
from cafcn.data import SyntheticSpec, generate_dataset
from cafcn.losses import LossConfig, ValidationError, weighted_bce, weighted_bce_logit_grad
from cafcn.network import NetworkConfig, NetworkParams, load_checkpoint
from cafcn.tensor import sigmoid
from cafcn.training import (OptimizerState, TrainingDiverged, checkpoint_name, epoch_order,
                            log_header, lr_at, resume, sgd_step, train)

TINY = NetworkConfig(input_size=16, encoder_channels=(4, 8), feature_channels=8)


def _half_mask():
    g = np.zeros((4, 4))
    g[:2] = 1.0
    return g


def test_loss_closed_form_half_foreground():
    loss, _ = weighted_bce(np.full((4, 4), 0.5), _half_mask(), LossConfig(eta=0.3))
    # 0.5 * 0.7 ln 2 + 0.5 * 0.3 ln 2 = 0.5 ln 2
    assert loss == pytest.approx(0.34657, abs=1e-5)
    assert loss == pytest.approx(0.5 * math.log(2.0), abs=1e-15)


def test_loss_weights_foreground_by_one_minus_eta():
    loss, _ = weighted_bce(np.full((2, 2), 0.5), np.ones((2, 2)), LossConfig(eta=0.3))
    assert loss == pytest.approx(0.7 * math.log(2.0), abs=1e-15)
    loss, _ = weighted_bce(np.full((2, 2), 0.5), np.zeros((2, 2)), LossConfig(eta=0.3))
    assert loss == pytest.approx(0.3 * math.log(2.0), abs=1e-15)


def test_loss_gradient_matches_finite_differences():
    g = _half_mask()
    p = np.random.default_rng(0).uniform(0.05, 0.95, (4, 4))
    cfg = LossConfig(eta=0.3)
    _, grad = weighted_bce(p, g, cfg)
    num = oracles.numerical_gradient(lambda v: weighted_bce(v, g, cfg)[0], p.copy(), h=1e-6)
    assert np.max(np.abs(grad - num)) <= 1e-7


def test_logit_gradient_equals_chain_rule():
    r = np.random.default_rng(1)
    z = r.standard_normal((5, 5))
    g = (r.random((5, 5)) < 0.5).astype(float)
    p = sigmoid(z)
    _, dp = weighted_bce(p, g)
    _, dz = weighted_bce_logit_grad(p, g)
    np.testing.assert_allclose(dz, dp * p * (1 - p), atol=1e-15)


def test_clamp_keeps_loss_finite():
    loss, grad = weighted_bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]), LossConfig(eta=0.3))
    expected = -(0.7 * math.log(1e-7) + 0.3 * math.log(1e-7)) / 2
    assert loss == pytest.approx(expected, rel=1e-6)
    assert np.all(grad == 0.0)


def test_loss_validation():
    with pytest.raises(ValidationError):
        weighted_bce(np.full(4, 0.5), np.array([0.0, 0.5, 1.0, 1.0]))
    with pytest.raises(ValueError):
        LossConfig(eta=1.0)
    with pytest.raises(ValueError):
        weighted_bce(np.full(4, 0.5), np.ones(3))


def test_lr_schedule():
    st = OptimizerState()
    assert lr_at(0, st) == 1e-4 and lr_at(49, st) == 1e-4
    assert lr_at(50, st) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(100, st) == pytest.approx(1e-6, rel=1e-12)


def test_default_optimizer_values():
    st = OptimizerState()
    assert (st.learning_rate, st.momentum, st.weight_decay) == (1e-4, 0.9, 0.005)


def test_sgd_step_hand_values():
    cfg = NetworkConfig(input_size=8, encoder_channels=(4, 8), feature_channels=8)
    params = NetworkParams.init(cfg).zeros_like()
    params["pred.b"] = np.array([1.0])
    grads = params.zeros_like()
    grads["pred.b"] = np.array([0.5])
    st = OptimizerState(learning_rate=0.1)
    p1, st = sgd_step(params, grads, st)
    # v = 0.5 + 0.005 * 1 = 0.505 ; p = 1 - 0.0505
    assert p1["pred.b"][0] == pytest.approx(0.9495, abs=1e-15)
    assert params["pred.b"][0] == 1.0
    p2, st = sgd_step(p1, grads, st)
    # v = 0.9 * 0.505 + 0.5 + 0.005 * 0.9495 = 0.9592475
    assert st.velocity["pred.b"][0] == pytest.approx(0.9592475, abs=1e-15)
    assert p2["pred.b"][0] == pytest.approx(0.85357525, abs=1e-15)


def test_epoch_order_is_a_seeded_permutation():
    a = epoch_order(10, 3, 2)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, epoch_order(10, 3, 2))
    assert not np.array_equal(a, epoch_order(10, 3, 3))


@pytest.fixture(scope="module")
def pairs():
    spec = SyntheticSpec(image_size=16, min_radius=2, max_radius=4, distractor_count=1, seed=5)
    return [s.as_tuple() for s in generate_dataset(spec, 8)]


def _fresh():
    return NetworkParams.init(TINY, seed=0), OptimizerState(learning_rate=0.05)


def test_training_reduces_loss(pairs):
    params, st = _fresh()
    res = train(pairs, params, st, 6, batch_size=2)
    assert res.epoch_losses[-1] < res.epoch_losses[0]
    assert res.state.epoch == 6


def test_training_is_deterministic(pairs):
    a = train(pairs, *_fresh(), 2, batch_size=4)
    b = train(pairs, *_fresh(), 2, batch_size=4)
    assert a.epoch_losses == b.epoch_losses
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.names())


def test_checkpoints_and_resume_reproduce_log(tmp_path, pairs):
    full = tmp_path / "full"
    train(pairs, *_fresh(), 3, batch_size=4, checkpoint_dir=full, log_path=tmp_path / "full.log")
    assert sorted(p.name for p in full.iterdir()) == [checkpoint_name(e) for e in range(4)]

    part = tmp_path / "part"
    train(pairs, *_fresh(), 1, batch_size=4, checkpoint_dir=part, log_path=tmp_path / "part.log")
    params, st = resume(part / checkpoint_name(1), OptimizerState(learning_rate=0.05))
    assert st.epoch == 1
    train(pairs, params, st, 2, batch_size=4, checkpoint_dir=part, log_path=tmp_path / "part.log")
    assert (tmp_path / "part.log").read_text() == (tmp_path / "full.log").read_text()
    assert (part / checkpoint_name(3)).read_bytes() == (full / checkpoint_name(3)).read_bytes()


def test_zero_epochs_writes_initial_checkpoint_only(tmp_path, pairs):
    params, st = _fresh()
    res = train(pairs, params, st, 0, checkpoint_dir=tmp_path)
    assert [p.name for p in tmp_path.iterdir()] == [checkpoint_name(0)]
    assert res.epoch_losses == []
    assert load_checkpoint(tmp_path / checkpoint_name(0)).epoch == 0


def test_nan_parameters_abort(pairs):
    params, st = _fresh()
    params["pred.b"] = np.array([np.nan])
    with pytest.raises(TrainingDiverged):
        train(pairs, params, st, 1)


def test_log_header_echoes_hyperparameters():
    lines = log_header(OptimizerState(), LossConfig(), 4, 0)
    assert "# learning_rate=0.0001" in lines
    assert "# momentum=0.9" in lines
    assert "# weight_decay=0.005" in lines
    assert "# batch_size=4" in lines
    assert "# eta=0.3" in lines
    assert lines[-1] == "# epoch\tlr\tmeanLoss"


def test_train_rejects_bad_arguments(pairs):
    with pytest.raises(ValueError):
        train([], *_fresh(), 1)
    with pytest.raises(ValueError):
        train(pairs, *_fresh(), 1, batch_size=0)
