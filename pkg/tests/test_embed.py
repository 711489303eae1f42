from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from intermode import embed, render, sim
from intermode.tensor import load_tensor

GOLDEN = Path(__file__).parent / "golden"
F = embed.Featurizer(seed=0)


def drawer_obs(d, seed=0):
    spec = sim.load_fixture("drawer_1")
    state = replace(sim.init_state(spec), dof=np.array([d]))
    cloud = sim.render_cloud(state, seed=seed)
    return render.project_views(render.normalize_frame(cloud, spec.scene_center, spec.scene_scale))


def test_zero_image_zero_vector():
    assert np.all(F.encode(np.zeros((5, 32, 32, 7))) == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_encode_linear(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 5, 32, 32, 7))
    assert np.allclose(F.encode(a) - F.encode(b), F.encode(a - b), atol=1e-9)


def test_per_view_features_sum_to_encoding():
    obs = drawer_obs(0.3)
    assert np.allclose(F.encode_per_view(obs).sum(0), F.encode(obs), atol=1e-9)


def test_fixture_embedding_matches_golden():
    golden = load_tensor(GOLDEN / "drawer_1_feature.aimt")
    assert np.allclose(F.encode(drawer_obs(0.3)), golden, atol=1e-5)


def test_same_seed_same_projection():
    assert embed.Featurizer(seed=0).checksum() == F.checksum()
    assert embed.Featurizer(seed=1).checksum() != F.checksum()
    assert not F.projection.flags.writeable


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        F.encode(np.zeros((4, 32, 32, 7)))


def test_identical_observations_zero_embedding():
    obs = drawer_obs(0.3)
    assert np.all(embed.task_embedding(F, obs, obs).z == 0)


def test_antisymmetry():
    a, b = drawer_obs(0.3), drawer_obs(0.5)
    assert np.allclose(embed.task_embedding(F, a, b).z, -embed.task_embedding(F, b, a).z)


def test_opposite_motions_opposite_embeddings():
    # the fixture's range is [0, 0.6]; mirror of 0.5->0.9 / 0.5->0.1 on a unit range
    start = drawer_obs(0.3)
    z_open = embed.task_embedding(F, start, drawer_obs(0.54)).z
    z_close = embed.task_embedding(F, start, drawer_obs(0.06)).z
    cos = z_open @ z_close / (np.linalg.norm(z_open) * np.linalg.norm(z_close))
    assert cos < 0


def test_filter_zero_embedding_fails():
    assert not embed.success_filter(np.zeros(32), 1e-6)


def test_filter_zero_threshold_accepts_nonzero():
    assert embed.success_filter(np.full(32, 1e-12), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 1000))
def test_threshold_monotone(t1, t2, seed):
    z = np.random.default_rng(seed).normal(size=32)
    lo, hi = sorted((t1, t2))
    assert embed.success_filter(z, lo) or not embed.success_filter(z, hi)


def test_calibrate_all_zero():
    assert embed.calibrate_threshold([np.zeros(32)] * 60) == 0.0


def test_calibrate_percentile_oracle():
    norms = np.arange(1, 101, dtype=float)
    assert embed.calibrate_threshold(norms) == pytest.approx(np.percentile(norms, 99))
    assert embed.calibrate_threshold(norms) == pytest.approx(99.01)


def test_calibrated_rejects_null_set():
    zs = np.random.default_rng(0).normal(size=(200, 32))
    t = embed.calibrate_threshold(zs)
    assert np.mean([not embed.success_filter(z, t) for z in zs]) >= 0.99


def test_calibrate_too_few():
    with pytest.raises(ValueError):
        embed.calibrate_threshold([np.zeros(3)] * 10)
