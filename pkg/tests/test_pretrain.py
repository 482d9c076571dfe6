import numpy as np
import pytest

from aco import nets
from aco import numcore as nc
from aco.config import Config, ConfigError
from aco.pretrain import DualProjectorNet, init_params, momentum_update, pretrain_run, project
from aco import synthworld as sw

SMALL = Config().with_(epochs=1, batch_size=16, sample_size=32, dict_capacity=64)


@pytest.fixture(scope="module")
def data():
    eps = sw.generate_episodes(2, 3, Config(), length=24)
    frames, steer, _, _ = sw.stack(eps)
    return frames, steer


def _ps(values):
    ps = nc.ParamSet()
    for k, v in values.items():
        ps[k] = nc.Tensor(np.asarray(v, dtype=np.float64))
    return ps


# --- momentum update -------------------------------------------------------------

def test_momentum_update_arithmetic():
    m, q = _ps({"w": np.zeros(3)}), _ps({"w": np.ones(3)})
    momentum_update(m, q, 0.999)
    np.testing.assert_allclose(m["w"].data, 0.001, rtol=1e-12)


def test_momentum_zero_alpha_copies():
    rng = np.random.default_rng(0)
    m, q = _ps({"a": rng.normal(size=4)}), _ps({"a": rng.normal(size=4)})
    momentum_update(m, q, 0.0)
    np.testing.assert_array_equal(m["a"].data, q["a"].data)


@pytest.mark.parametrize("alpha", [0.0, 0.9, 0.999])
def test_momentum_contracts_geometrically(alpha):
    rng = np.random.default_rng(1)
    q = _ps({"a": rng.normal(size=(5, 3)), "b": rng.normal(size=7)})
    m = _ps({"a": rng.normal(size=(5, 3)), "b": rng.normal(size=7)})

    def gap():
        return np.sqrt(sum(((m[k].data - q[k].data) ** 2).sum() for k in q))

    d0 = gap()
    for k in range(1, 21):
        momentum_update(m, q, alpha)
        want = d0 * alpha ** k
        if want == 0.0:
            assert gap() == 0.0
        else:
            assert abs(gap() - want) / want < 1e-12


def test_momentum_misaligned_rejected():
    with pytest.raises(ValueError):
        momentum_update(_ps({"a": np.zeros(2)}), _ps({"b": np.zeros(2)}), 0.9)
    with pytest.raises(ValueError):
        momentum_update(_ps({"a": np.zeros(2)}), _ps({"a": np.zeros(3)}), 0.9)


# --- projection --------------------------------------------------------------------

@pytest.fixture(scope="module")
def net():
    return DualProjectorNet.init(np.random.default_rng(0), Config())


def test_projection_unit_norm_and_twins_agree(net, data):
    x = data[0][:6]
    for space in ("ins", "act"):
        zq = project(net, x, "query", space).data
        zk = project(net, x, "key", space).data
        np.testing.assert_allclose(np.linalg.norm(zq, axis=1), 1.0, atol=1e-9)
        assert zq.tobytes() == zk.tobytes()
        assert zq.shape == (6, Config().proj_dim)


def test_projectors_share_shape_not_weights(net):
    for k in [k for k in net.query if k.startswith("gins.")]:
        other = "gact." + k[5:]
        assert net.query[k].shape == net.query[other].shape
        if k.endswith(".w"):
            assert not np.array_equal(net.query[k].data, net.query[other].data)


def test_key_path_is_stop_gradient(net, data):
    x = data[0][:4]
    with nc.Tape() as tape:
        z = project(net, x, "key", "ins")
        loss = nc.sum_(z)
    assert len(tape) == 0
    grads = tape.gradient(loss, net.query)
    assert all(not np.any(g) for g in grads.values())
    assert all(not t.requires_grad for t in net.key.values())


def test_bad_path_rejected(net):
    with pytest.raises(ValueError):
        net.params("other")


# --- training runs ----------------------------------------------------------------------

def test_mode_none_is_kaiming_init(data):
    r = pretrain_run(data[0], data[1], SMALL, "none", seed=5)
    ref = init_params(SMALL, 5)
    assert list(r.params) == list(ref)
    for k in ref:
        assert r.params[k].data.tobytes() == ref[k].data.tobytes()
    fan = 3 * 3 * 3
    assert np.std(r.params["enc.conv1.w"].data) == pytest.approx(np.sqrt(2 / fan), rel=0.3)


def test_same_seed_bit_identical(data):
    a = pretrain_run(data[0], data[1], SMALL, "aco", seed=1)
    b = pretrain_run(data[0], data[1], SMALL, "aco", seed=1)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert a.metrics == b.metrics
    c = pretrain_run(data[0], data[1], SMALL, "aco", seed=2)
    assert c.params["enc.fc.w"].data.tobytes() != a.params["enc.fc.w"].data.tobytes()


def test_zero_action_weight_trace_matches_build_without_acp(data):
    cfg = SMALL.with_(lambda_act=0.0, epochs=2)
    plain = pretrain_run(data[0], data[1], cfg, "aco", seed=3)
    forced = pretrain_run(data[0], data[1], cfg, "aco", seed=3, construct_unused=True)
    loss_p = [v for _, k, v in plain.metrics if k == "loss"]
    loss_f = [v for _, k, v in forced.metrics if k == "loss"]
    assert loss_p == loss_f
    assert any(k == "loss_act" for _, k, _ in forced.metrics)
    assert not any(k == "loss_act" for _, k, _ in plain.metrics)
    for k in plain.params:
        if not k.startswith("gact."):
            assert np.array_equal(plain.params[k].data, forced.params[k].data), k


def test_icp_only_equals_zero_action_weight(data):
    a = pretrain_run(data[0], data[1], SMALL, "icp_only", seed=4)
    b = pretrain_run(data[0], data[1], SMALL.with_(lambda_act=0.0), "aco", seed=4)
    assert a.metrics == b.metrics


def test_twins_move_only_by_momentum(data):
    r = pretrain_run(data[0], data[1], SMALL.with_(alpha=0.0), "aco", seed=6)
    for k in r.params:
        np.testing.assert_array_equal(r.key_params[k].data, r.params[k].data)


@pytest.mark.parametrize("mode", ["icp_only", "acp_only", "autoencoder"])
def test_other_modes_run(data, mode):
    r = pretrain_run(data[0], data[1], SMALL, mode, seed=0)
    losses = [v for _, k, v in r.metrics if k == "loss"]
    assert len(losses) == -(-len(data[0]) // SMALL.batch_size)
    assert np.all(np.isfinite(losses))
    assert "enc.fc.w" in r.encoder()


def test_autoencoder_reduces_reconstruction_error(data):
    r = pretrain_run(data[0], None, SMALL.with_(epochs=4), "autoencoder", seed=0)
    losses = [v for _, k, v in r.metrics if k == "loss"]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_metrics_stream_and_emit(data):
    seen = []
    r = pretrain_run(data[0], data[1], SMALL, "aco", seed=0, emit=lambda s, k, v: seen.append((s, k, v)))
    assert seen == r.metrics
    keys = {k for _, k, _ in seen}
    assert {"loss", "loss_ins", "loss_act", "acp_skipped", "lr"} <= keys


def test_config_violations_rejected(data):
    with pytest.raises(ConfigError):
        pretrain_run(data[0], data[1], SMALL.with_(temperature=0.0), "aco")
    with pytest.raises(ConfigError):
        pretrain_run(data[0], data[1], SMALL.with_(sample_size=100), "aco")
    with pytest.raises(ConfigError):
        pretrain_run(data[0], data[1], SMALL, "bogus")
    with pytest.raises(ValueError):
        pretrain_run(data[0], None, SMALL, "aco")


def test_first_epoch_running_mean_decreases():
    # desk defaults, one epoch over 2000 frames; the running mean is the
    # cumulative average of the per-step total loss
    cfg = Config().with_(epochs=1)
    frames, steer, _, _ = sw.stack(sw.generate_episodes(40, 77, cfg))
    assert len(frames) == 2000
    drops = []
    for seed in range(3):
        r = pretrain_run(frames, steer, cfg, "aco", seed=seed)
        losses = np.array([v for _, k, v in r.metrics if k == "loss"])
        running = np.cumsum(losses) / np.arange(1, len(losses) + 1)
        drops.append(running[0] - running[-1])
    assert np.median(drops) > 0, f"running-mean drop per seed: {np.round(drops, 3).tolist()}"
