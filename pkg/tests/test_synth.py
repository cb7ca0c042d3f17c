import io
import math

import numpy as np
import pytest

from timekit import synth
from timekit.data import ingest_interactions, partition_periods
from timekit.synth import ConfigError, DriftConfig


def small(**kw):
    base = dict(num_users=12, num_items=40, num_periods=4, interactions_per_period=5)
    base.update(kw)
    return DriftConfig(**base)


def test_static_preferences_give_identical_top_sets():
    data = synth.generate(small(drift_angle=0.0, noise_std=0.0))
    first = data.top_items(0, 5)
    for p in range(1, 4):
        assert data.top_items(p, 5) == first


def test_quarter_turn_moves_to_the_other_cluster():
    e1, e2 = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    tastes = synth.user_trajectories(e1, e2, np.array([0.0, math.pi / 2]))
    rng = np.random.default_rng(0)
    cluster_a = np.array([1.0, 0.0]) + 0.05 * rng.normal(size=(6, 2))
    cluster_b = np.array([0.0, 1.0]) + 0.05 * rng.normal(size=(6, 2))
    items = np.vstack([cluster_a, cluster_b])
    top = [set(np.argsort(-(items @ tastes[0, p]))[:6].tolist()) for p in range(2)]
    assert top[0] == set(range(6)) and top[1] == set(range(6, 12))
    assert not top[0] & top[1]


def test_rotation_stays_in_the_user_plane():
    data = synth.generate(small(noise_std=0.0, latent_dim=6))
    t = data.user_latents
    np.testing.assert_allclose(np.linalg.norm(t, axis=-1), 1.0, atol=1e-12)
    cos = np.sum(t[:, 1:] * t[:, :-1], axis=-1)
    np.testing.assert_allclose(cos, math.cos(math.pi / 24), atol=1e-12)


def test_fixed_seed_gives_identical_bytes():
    a = synth.generate(small(seed=5)).to_text()
    b = synth.generate(small(seed=5)).to_text()
    c = synth.generate(small(seed=6)).to_text()
    assert a == b and a != c


def test_round_trip_through_ingestion():
    data = synth.generate(small())
    log = ingest_interactions(io.StringIO(data.to_text()))
    assert len(log) == 12 * 4 * 5
    users = np.array([int(log.user_ids[u][1:]) for u in log.users])
    items = np.array([int(log.item_ids[v][1:]) for v in log.items])
    np.testing.assert_array_equal(users, data.users)
    np.testing.assert_array_equal(items, data.items)
    np.testing.assert_array_equal(log.timestamps, data.timestamps)
    ds = partition_periods(log)
    assert ds.num_periods == 4
    assert all(len(p) == 60 for p in ds.periods)


def test_each_user_draws_distinct_items_per_period():
    data = synth.generate(small())
    ds = partition_periods(ingest_interactions(io.StringIO(data.to_text())))
    for p in ds.periods:
        pairs = set(zip(p.users.tolist(), p.items.tolist()))
        assert len(pairs) == len(p)


def test_write_dataset_sidecar(tmp_path):
    data = synth.generate(small())
    path = synth.write_dataset(data, tmp_path, "toy")
    assert path.read_text() == data.to_text()
    side = np.load(tmp_path / "toy_latents.npz")
    np.testing.assert_array_equal(side["user_latents"], data.user_latents)


@pytest.mark.parametrize("field,value", [
    ("drift_angle", math.pi),
    ("drift_angle", -0.1),
    ("num_users", 0),
    ("latent_dim", 1),
    ("temperature", 0.0),
    ("noise_std", -1.0),
])
def test_validation_names_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        synth.generate(small(**{field: value}))


def test_more_interactions_than_items_is_an_error():
    with pytest.raises(ConfigError, match="interactions_per_period"):
        synth.generate(small(num_items=3, interactions_per_period=4))
