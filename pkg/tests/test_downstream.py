import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aco import downstream as ds
from aco import nets
from aco import numcore as nc
from aco import synthworld as sw
from aco.config import Config

CFG = Config()


@pytest.fixture(scope="module")
def encoder():
    return nets.encoder_init(np.random.default_rng(0), 16, CFG.height, CFG.width)


@pytest.fixture(scope="module")
def episodes():
    return sw.generate_episodes(6, 3, CFG, length=20)


# --- behaviour cloning ----------------------------------------------------------

def test_frozen_encoder_is_untouched(encoder, episodes):
    before = {k: v.data.copy() for k, v in encoder.items()}
    frames, steer, _, _ = sw.stack(episodes[:2])
    pol = ds.bc_train(encoder, frames, steer, freeze_encoder=True, epochs=3, lr=1e-3)
    for k, v in encoder.items():
        assert v.data.tobytes() == before[k].tobytes()
        assert pol.encoder[k].data.tobytes() == before[k].tobytes()


def test_frozen_encoder_receives_no_gradient(encoder, episodes):
    frames, _, _, _ = sw.stack(episodes[:1])
    pol = ds.bc_train(encoder, frames, np.full(len(frames), 0.3), freeze_encoder=True, epochs=0)
    with nc.Tape() as tape:
        f = nets.encoder_forward(pol.encoder, frames[:8])
        loss = nc.mean(pol.head_forward(f, training=True))
    grads = tape.gradient(loss, pol.encoder)
    assert all(g is None or not np.any(g) for g in grads.values())


def test_finetune_changes_encoder_copy_only(encoder, episodes):
    frames, steer, _, _ = sw.stack(episodes[:1])
    before = {k: v.data.copy() for k, v in encoder.items()}
    pol = ds.bc_train(encoder, frames, steer, freeze_encoder=False, epochs=1, lr=1e-3, batch_size=10)
    assert all(encoder[k].data.tobytes() == before[k].tobytes() for k in encoder)
    assert any(not np.array_equal(pol.encoder[k].data, before[k]) for k in before)


def test_constant_steering_demos(encoder, episodes):
    frames, _, _, _ = sw.stack(episodes[:3])
    y = np.full(len(frames), 0.3)
    pol = ds.bc_train(encoder, frames, y, epochs=100, lr=1e-3)
    assert np.mean(np.abs(pol.predict(frames) - y)) < 0.02


def test_appendix_defaults_accepted(encoder, episodes):
    frames, steer, _, _ = sw.stack(episodes[:1])
    pol = ds.bc_train(encoder, frames, steer, epochs=1, lr=0.0001, weight_decay=0.0001)
    assert len(pol.history) == 2
    assert CFG.bc_lr == 0.0001 and CFG.bc_weight_decay == 0.0001


def test_bc_deterministic_and_rejects_empty(encoder, episodes):
    frames, steer, _, _ = sw.stack(episodes[:1])
    a = ds.bc_train(encoder, frames, steer, epochs=2, lr=1e-3, use_standardizer=True, seed=4)
    b = ds.bc_train(encoder, frames, steer, epochs=2, lr=1e-3, use_standardizer=True, seed=4)
    assert a.history == b.history
    np.testing.assert_array_equal(a.predict(frames), b.predict(frames))
    with pytest.raises(ValueError):
        ds.bc_train(encoder, frames[:0], steer[:0])


def test_policy_output_in_unit_interval(encoder):
    pol = ds.bc_train(encoder, np.random.default_rng(1).random((4, 32, 32, 3)), np.full(4, 0.5),
                      epochs=0)
    for k in pol.head:
        pol.head[k].data = pol.head[k].data * 50.0
    pred = pol.predict(np.random.default_rng(2).random((16, 32, 32, 3)))
    assert pred.min() >= 0.0 and pred.max() <= 1.0


def test_standardizer_eval_uses_frozen_statistics():
    rng = np.random.default_rng(3)
    s = ds.FeatureStandardizer(4)
    for _ in range(20):
        s(rng.normal(2.0, 3.0, size=(64, 4)), training=True)
    mean, var = s.running_mean.copy(), s.running_var.copy()
    x = rng.normal(size=(5, 4))
    out = s(x).data
    np.testing.assert_allclose(out, (x - mean) / np.sqrt(var + s.eps))
    # evaluation neither updates the statistics nor depends on batch composition
    np.testing.assert_array_equal(s.running_mean, mean)
    np.testing.assert_allclose(s(x[:2]).data, out[:2])
    assert np.allclose(mean, 2.0, atol=0.5) and np.allclose(var, 9.0, rtol=0.3)


# --- evaluation ----------------------------------------------------------------------

def test_oracle_policy(episodes):
    truth = {ep.frames.tobytes(): ep.steering for ep in episodes}
    rep = ds.bc_eval(lambda f: truth[f.tobytes()], episodes)
    assert rep.mae == 0.0 and rep.success_rate == 1.0


def test_constant_policy_fails_on_curves():
    # every episode alternates full-left and full-right segments: the constant
    # 0.5 policy is off by 0.5 on every frame, far over the 0.08 budget
    profile = (CFG.kappa_max,) * 5 + (-CFG.kappa_max,) * 5
    eps = [sw.generate_episode(sw.EpisodeSpec(s, 10, profile, sw.NuisanceParams()), CFG, s)
           for s in range(3)]
    analytic = [float(np.mean(np.abs(0.5 - ep.steering))) for ep in eps]
    assert all(a == 0.5 for a in analytic)
    rep = ds.bc_eval(lambda f: np.full(len(f), 0.5), eps)
    assert rep.success_rate == 0.0
    assert rep.episode_mae == analytic


def test_success_threshold_is_strict(episodes):
    ep = episodes[0]
    rep = ds.bc_eval(lambda f: ep.steering + 0.08, [ep])
    assert rep.success_rate == 0.0
    rep = ds.bc_eval(lambda f: ep.steering + 0.079, [ep])
    assert rep.success_rate == 1.0


def test_eval_deterministic(encoder, episodes):
    frames, steer, _, _ = sw.stack(episodes[:2])
    pol = ds.bc_train(encoder, frames, steer, epochs=1, lr=1e-3)
    a, b = ds.bc_eval(pol, episodes[2:]), ds.bc_eval(pol, episodes[2:])
    assert a == b
    assert 0.0 <= a.success_rate <= 1.0


# --- linear probe ------------------------------------------------------------------------

def test_probe_on_label_features():
    rng = np.random.default_rng(5)
    ytr, yte = rng.random(400), rng.random(100)
    res = ds.linear_probe_features(np.tile(ytr[:, None], (1, 4)), ytr,
                                   np.tile(yte[:, None], (1, 4)), yte)
    assert res.mae < 1e-3


def test_probe_on_random_features_matches_constant_baseline():
    rng = np.random.default_rng(6)
    ytr, yte = rng.random(2000), rng.random(1000)
    res = ds.linear_probe_features(rng.normal(size=(2000, 8)), ytr, rng.normal(size=(1000, 8)), yte)
    baseline = float(np.mean(np.abs(yte - 0.5)))  # 0.25 for uniform labels
    assert abs(res.mae - baseline) < 0.02


def test_probe_rejects_degenerate_labels():
    with pytest.raises(ValueError):
        ds.linear_probe_features(np.zeros((5, 2)), np.full(5, 0.4), np.zeros((2, 2)), np.zeros(2))


# --- nearest-neighbour agreement ----------------------------------------------------------

def test_buckets():
    assert ds.action_buckets([0.1, 0.449, 0.45, 0.5, 0.55, 0.551]).tolist() == [0, 0, 1, 1, 1, 2]


def test_one_hot_features_give_full_agreement():
    acts = np.repeat([0.2, 0.5, 0.8], 10)
    feats = np.eye(3)[ds.action_buckets(acts)]
    assert ds.nn_action_agreement(feats, acts, k=5) == 1.0


def test_random_features_near_one_third():
    rng = np.random.default_rng(7)
    acts = np.repeat([0.2, 0.5, 0.8], 100)
    feats = rng.normal(size=(300, 16))
    got = ds.nn_action_agreement(feats, acts)
    # permutation baseline: shuffle labels against fixed features
    base = np.mean([ds.nn_action_agreement(feats, rng.permutation(acts)) for _ in range(100)])
    assert base == pytest.approx(1 / 3, abs=0.02)
    assert got == pytest.approx(base, abs=0.05)


def test_nn_agreement_rejects_too_few():
    with pytest.raises(ValueError):
        ds.nn_action_agreement(np.zeros((5, 2)), np.zeros(5), k=5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_nn_agreement_invariant_to_rotation_and_scale(seed, scale):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(40, 5))
    acts = rng.random(40)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    assert ds.nn_action_agreement(feats, acts) == ds.nn_action_agreement(scale * feats @ q, acts)


def test_balanced_eval_set():
    rng = np.random.default_rng(8)
    acts = rng.random(1000)
    idx = ds.balanced_eval_set(np.zeros((1000, 1)), acts, 100, np.random.default_rng(0))
    assert len(idx) == len(set(idx.tolist())) == 300
    assert np.bincount(ds.action_buckets(acts[idx])).tolist() == [100, 100, 100]
    with pytest.raises(ValueError):
        ds.balanced_eval_set(np.zeros((3, 1)), [0.5, 0.5, 0.5], 1, np.random.default_rng(0))


# --- PCA -------------------------------------------------------------------------------

def test_pca_line_data():
    t = np.linspace(-1, 1, 50)
    x = np.outer(t, [1.0, 2.0, -2.0]) + 0.3
    res = ds.pca(x, 2)
    assert res.coords[:, 1].var() < 1e-20
    assert np.abs(res.components[0]) == pytest.approx(np.array([1, 2, 2]) / 3)


def test_pca_reconstruction_equals_discarded_eigenvalues():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(200, 6)) @ rng.normal(size=(6, 6))
    for dims in (1, 2, 4):
        res = ds.pca(x, dims)
        recon = res.coords @ res.components + res.mean
        err = np.sum((x - recon) ** 2) / len(x)
        assert err == pytest.approx(res.eigenvalues[dims:].sum(), rel=1e-9)


def test_pca_sign_convention_and_reproducible():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(30, 4))
    a, b = ds.pca(x, 3), ds.pca(x.copy(), 3)
    assert a.coords.tobytes() == b.coords.tobytes()
    for c in a.components:
        assert c[np.argmax(np.abs(c))] > 0
    np.testing.assert_array_equal(ds.pca_project(x, 3), a.coords)
    with pytest.raises(ValueError):
        ds.pca(x[:1], 2)
