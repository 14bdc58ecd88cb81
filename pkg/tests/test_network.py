import numpy as np
import pytest

from cafcn.network import (MAGIC, CheckpointError, NetworkConfig, NetworkParams, encode,
                           forward_backward_pair, forward_pair, infer_group, load_checkpoint,
                           pair_loss, param_layout, save_checkpoint)
from cafcn.selftest import gradient_check_network, network_gradient_errors

SMALL = NetworkConfig(input_size=16, encoder_channels=(4, 8), feature_channels=8)


@pytest.fixture
def small_params():
    p = NetworkParams.init(SMALL, seed=3)
    p["cam.gamma"] = np.array([0.5])
    return p


def _images(seed, n=2, size=16):
    r = np.random.default_rng(seed)
    return [r.random((size, size, 3)) for _ in range(n)]


def test_config_defaults_and_validation():
    cfg = NetworkConfig()
    assert cfg.encoded_size == 4 and cfg.skip_stages == (0, 1)
    assert NetworkConfig.from_ints(cfg.to_ints()) == cfg
    with pytest.raises(ValueError):
        NetworkConfig(input_size=30)
    with pytest.raises(ValueError):
        NetworkConfig(feature_channels=12)
    with pytest.raises(ValueError):
        NetworkConfig(skip_stages=(2,))


def test_layout_is_consistent():
    layout = param_layout(NetworkConfig())
    names = [n for n, _, _ in layout]
    assert len(names) == len(set(names))
    assert ("cam.wf", (32, 4), 32) in layout
    assert ("dec0.w", (4, 4, 16, 32), 128) in layout
    assert names[-2:] == ["pred.w", "pred.b"]


def test_init_is_seeded_and_gamma_starts_at_zero():
    a = NetworkParams.init(SMALL, seed=1)
    b = NetworkParams.init(SMALL, seed=1)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    assert a["cam.gamma"][0] == 0.0
    assert a.size() == sum(int(np.prod(s)) for _, s, _ in param_layout(SMALL))


def test_forward_shapes_and_range(small_params):
    i1, i2 = _images(0)
    p1, p2, trace = forward_pair(i1, i2, small_params)
    assert p1.shape == p2.shape == (16, 16, 1)
    assert np.all((p1 > 0) & (p1 < 1)) and np.all((p2 > 0) & (p2 < 1))
    assert trace.features[0].shape == (4, 4, 8)
    feature, skips = encode(i1, small_params)
    assert np.array_equal(feature, trace.features[0])
    assert [s.shape for s in skips] == [(8, 8, 4), (4, 4, 8)]


def test_swapping_inputs_swaps_outputs_bitwise(small_params):
    i1, i2 = _images(1)
    p1, p2, _ = forward_pair(i1, i2, small_params)
    q2, q1, _ = forward_pair(i2, i1, small_params)
    assert np.array_equal(p1, q1) and np.array_equal(p2, q2)


def test_identical_inputs_give_identical_maps(small_params):
    (i1,) = _images(2, n=1)
    p1, p2, _ = forward_pair(i1, i1, small_params)
    assert np.array_equal(p1, p2)


def test_partner_changes_output(small_params):
    i1, i2, i3 = _images(3, n=3)
    a, _, _ = forward_pair(i1, i2, small_params)
    b, _, _ = forward_pair(i1, i3, small_params)
    assert not np.allclose(a, b)


def test_full_network_gradients_s8():
    errors = network_gradient_errors(seed=0)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_gradient_check_network_is_unsaturated():
    params, (i1, i2, _, _) = gradient_check_network(0)
    p1, p2, _ = forward_pair(i1, i2, params)
    assert min(p1.min(), p2.min()) > 1e-6 and max(p1.max(), p2.max()) < 1 - 1e-6


def test_loss_matches_forward_backward(small_params):
    i1, i2 = _images(4)
    r = np.random.default_rng(0)
    g1 = (r.random((16, 16)) < 0.3).astype(float)
    g2 = (r.random((16, 16)) < 0.3).astype(float)
    loss, grads = forward_backward_pair(i1, i2, g1, g2, small_params)
    assert loss == pytest.approx(pair_loss(i1, i2, g1, g2, small_params), abs=1e-15)
    assert set(grads.names()) == set(small_params.names())
    assert grads.all_finite()


def test_group_of_two_matches_pair(small_params):
    i1, i2 = _images(5)
    stats = {}
    maps = infer_group([i1, i2], small_params, stats)
    p1, p2, _ = forward_pair(i1, i2, small_params)
    assert np.max(np.abs(maps[0] - p1)) <= 1e-9 and np.max(np.abs(maps[1] - p2)) <= 1e-9
    assert stats == {"encoder_calls": 2, "decoder_calls": 2}


@pytest.mark.parametrize("n", [3, 6])
def test_group_encoder_calls_equal_n(small_params, n):
    stats = {}
    maps = infer_group(_images(6, n=n), small_params, stats)
    assert len(maps) == n
    assert stats["encoder_calls"] == n and stats["decoder_calls"] == n


def test_group_needs_two_images(small_params):
    with pytest.raises(ValueError):
        infer_group(_images(7, n=1), small_params)


def test_checkpoint_round_trip(tmp_path, small_params):
    vel = small_params.zeros_like()
    vel["pred.b"] = np.array([0.25])
    path = tmp_path / "c.cafcn"
    save_checkpoint(path, small_params, vel, epoch=7)
    ck = load_checkpoint(path)
    assert ck.config == SMALL and ck.epoch == 7
    assert all(np.array_equal(ck.params[k], small_params[k]) for k in small_params.names())
    assert ck.velocity["pred.b"][0] == 0.25
    save_checkpoint(tmp_path / "d.cafcn", ck.params, ck.velocity, epoch=7)
    assert (tmp_path / "d.cafcn").read_bytes() == path.read_bytes()


def test_checkpoint_without_velocity(tmp_path, small_params):
    save_checkpoint(tmp_path / "c.cafcn", small_params)
    ck = load_checkpoint(tmp_path / "c.cafcn")
    assert ck.velocity is None and ck.epoch == 0


def test_checkpoint_corruption_is_detected(tmp_path, small_params):
    path = tmp_path / "c.cafcn"
    save_checkpoint(path, small_params)
    data = path.read_bytes()
    assert data.startswith(MAGIC)
    bad = tmp_path / "bad.cafcn"
    bad.write_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated checkpoint at byte"):
        load_checkpoint(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
