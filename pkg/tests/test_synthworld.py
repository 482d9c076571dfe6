import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aco.config import Config
from aco import synthworld as sw

CFG = Config()


def _spec(profile, seed=7, nuisance=None):
    return sw.EpisodeSpec(seed, len(profile), tuple(profile), nuisance or sw.NuisanceParams())


# --- steering map -------------------------------------------------------------

@pytest.mark.parametrize("k, want", [(0.0, 0.5), (-CFG.kappa_max, 0.0), (CFG.kappa_max / 2, 0.75),
                                     (CFG.kappa_max, 1.0)])
def test_steering_from_curvature_examples(k, want):
    assert sw.steering_from_curvature(k, CFG.kappa_max) == pytest.approx(want, abs=1e-15)


def test_steering_clamps_outside_range():
    assert sw.steering_from_curvature(3 * CFG.kappa_max, CFG.kappa_max) == 1.0
    assert sw.steering_from_curvature(-3 * CFG.kappa_max, CFG.kappa_max) == 0.0


@given(st.floats(-1.3, 1.3))
def test_steering_in_unit_interval(k):
    s = sw.steering_from_curvature(k, 1.3)
    assert 0.0 <= s <= 1.0


# --- episodes ----------------------------------------------------------------------

def test_straight_profile_gives_half():
    ep = sw.generate_episode(_spec([0.0] * 6), CFG)
    assert np.all(ep.steering == 0.5)


def test_constant_max_curvature_gives_one():
    ep = sw.generate_episode(_spec([CFG.kappa_max] * 6), CFG)
    assert np.all(ep.steering == 1.0)


def test_generate_is_deterministic():
    spec = sw.random_episode_spec(123, CFG, 8)
    a = sw.generate_episode(spec, CFG)
    b = sw.generate_episode(spec, CFG)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.steering.tobytes() == b.steering.tobytes()


def test_length_below_two_rejected():
    with pytest.raises(ValueError):
        sw.generate_episode(_spec([0.0]), CFG)


def test_profile_out_of_range_rejected():
    with pytest.raises(ValueError):
        sw.generate_episode(_spec([2 * CFG.kappa_max] * 3), CFG)


def test_frames_in_unit_range_and_shape():
    ep = sw.generate_episodes(2, 4, CFG, length=5)[0]
    assert ep.frames.shape == (5, CFG.height, CFG.width, 3)
    assert ep.frames.min() >= 0.0 and ep.frames.max() <= 1.0


def test_iteration_yields_frames_and_labels():
    ep = sw.generate_episode(_spec([0.2, 0.2, -0.4]), CFG, episode_id=9)
    items = list(ep)
    assert len(items) == 3
    frame, label = items[2]
    assert frame.episode_id == 9 and frame.time_index == 2
    assert label.source == sw.GROUND_TRUTH
    assert label.steering == pytest.approx(sw.steering_from_curvature(-0.4, CFG.kappa_max))


def test_labels_independent_of_nuisance():
    profile = sw.random_curvature_profile(12, np.random.default_rng(0), CFG)
    rng = np.random.default_rng(1)
    a = sw.generate_episode(_spec(profile, nuisance=sw.NuisanceParams.random(rng)), CFG)
    b = sw.generate_episode(_spec(profile, nuisance=sw.NuisanceParams.random(rng)), CFG)
    assert not np.array_equal(a.frames, b.frames)
    assert a.steering.tobytes() == b.steering.tobytes()


def test_nuisance_shared_within_episode_and_differs_across():
    specs = [sw.random_episode_spec(s, CFG, 4) for s in range(200)]
    nuis = [s.nuisance for s in specs]
    distinct = sum(a != b for a, b in zip(nuis[:-1], nuis[1:]))
    assert distinct / (len(nuis) - 1) >= 0.99
    # one NuisanceParams per spec, so every frame of an episode shares it
    ep = sw.generate_episode(specs[0], CFG)
    assert ep.spec.nuisance is specs[0].nuisance


def test_curvature_profile_segments():
    rng = np.random.default_rng(3)
    prof = np.array(sw.random_curvature_profile(500, rng, CFG))
    assert np.all(np.abs(prof) <= CFG.kappa_max)
    # runs of equal curvature are at least min_segment long except the tail
    change = np.flatnonzero(np.diff(prof) != 0) + 1
    runs = np.diff(np.concatenate([[0], change]))
    assert runs.min() >= CFG.min_segment


def _edge_centroid(frame, row):
    white = np.all(np.abs(frame[row] - np.array([0.92, 0.92, 0.85])) < 0.2, axis=-1)
    cols = np.flatnonzero(white)
    # midpoint between the outermost left-edge and right-edge pixels
    return 0.5 * (cols.min() + cols.max()) if len(cols) else np.nan


def test_road_edge_moves_monotonically_with_curvature():
    # lateral displacement of the road edges at a fixed near-field row, where
    # both edges stay in view over the whole curvature range
    row = CFG.horizon + 12
    ks = np.linspace(-CFG.kappa_max, CFG.kappa_max, 9)
    pos = []
    for k in ks:
        frame = sw.generate_episode(_spec([k, k]), CFG).frames[0]
        pos.append(_edge_centroid(frame, row))
    pos = np.array(pos)
    assert not np.isnan(pos).any()
    assert np.all(np.diff(pos) > 0)


# --- splits -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ten_eps():
    return sw.generate_episodes(10, 0, CFG, length=10)


def test_split_ten(ten_eps):
    tr, te = sw.dataset_split(ten_eps, 0.7, seed=1)
    assert (len(tr), len(te)) == (7, 3)
    assert not {e.episode_id for e in tr} & {e.episode_id for e in te}


def test_split_two(ten_eps):
    tr, te = sw.dataset_split(ten_eps[:2], 0.7, seed=1)
    assert (len(tr), len(te)) == (1, 1)


def test_split_deterministic_and_rejects(ten_eps):
    a = sw.dataset_split(ten_eps, 0.7, seed=5)
    b = sw.dataset_split(ten_eps, 0.7, seed=5)
    assert [e.episode_id for e in a[0]] == [e.episode_id for e in b[0]]
    with pytest.raises(ValueError):
        sw.dataset_split([], 0.7)
    with pytest.raises(ValueError):
        sw.dataset_split(ten_eps[:1], 0.7)


def test_demo_subset_quota_and_nesting(ten_eps):
    train = ten_eps * 10  # 100 episodes x 10 frames = 1000 frames
    sub = sw.demo_subset(train, 0.1, seed=2)
    assert sum(len(e) for e in sub) == 100
    full = sw.demo_subset(train, 1.0, seed=2)
    assert sum(len(e) for e in full) == 1000
    a = sw.demo_subset(ten_eps, 0.1, seed=3)
    b = sw.demo_subset(ten_eps, 0.2, seed=3)
    assert sum(len(e) for e in a) == math.ceil(0.1 * 100)
    for ea, eb in zip(a, b):
        assert ea.episode_id == eb.episode_id
        assert np.array_equal(ea.frames, eb.frames[:len(ea)])


def test_demo_subset_truncates_last_episode(ten_eps):
    sub = sw.demo_subset(ten_eps, 0.25, seed=0)
    assert [len(e) for e in sub] == [10, 10, 5]


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_demo_subset_rejects_bad_fraction(ten_eps, bad):
    with pytest.raises(ValueError):
        sw.demo_subset(ten_eps, bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 100))
def test_split_partitions_episodes(n, frac, seed):
    eps = [sw.Episode(i, np.zeros((2, 1, 1, 3)), np.full(2, 0.5)) for i in range(n)]
    tr, te = sw.dataset_split(eps, frac, seed)
    assert tr and te
    ids = sorted(e.episode_id for e in tr + te)
    assert ids == list(range(n))


def test_stack_layout(ten_eps):
    fr, steer, ids, ts = sw.stack(ten_eps[:2])
    assert fr.shape[0] == steer.shape[0] == ids.shape[0] == ts.shape[0] == 20
    assert list(ts[:10]) == list(range(10))
    assert ids[10] == ten_eps[1].episode_id
