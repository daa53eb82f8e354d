"""Latent extraction, flatten/normalize round trips, and dataset mixing."""

import numpy as np
import pytest

from synthrl import storage
from synthrl.agents import build_agent
from synthrl.config import EnvConfig, TrainConfig
from synthrl.env import ScriptedPolicy, collect_dataset
from synthrl.latents import (concat_heads, extract_latents, flat_dim, flatten_records,
                             mix_fdd, mix_union, normalize_dataset, split_heads,
                             unflatten_records)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def make_pixel(mode="continuous", n=40, seed=3, pool="train", level="none"):
    cfg = EnvConfig(mode=mode, frame_size=24, frame_stack=3, seed=seed, pool=pool,
                    level=level, horizon=20)
    policy = ScriptedPolicy(mode, 0.2, rng(seed + 1))
    return cfg, collect_dataset(cfg, policy, n)


def make_agent(mode="continuous"):
    algo = "drqbc" if mode == "continuous" else "cql"
    tc = TrainConfig.for_algorithm(algo, feature_dim=16, z_pi_dim=6, z_q_dim=6,
                                   hidden_dim=16, seed=5)
    return build_agent(tc, EnvConfig(mode=mode, frame_size=24, frame_stack=3, seed=5))


def test_concat_split_roundtrip():
    z_pi = rng(1).normal(size=(5, 6)).astype(np.float32)
    z_q = rng(2).normal(size=(5, 4)).astype(np.float32)
    z = concat_heads(z_pi, z_q)
    assert z.shape == (5, 10)
    a, b = split_heads(z, 6)
    np.testing.assert_array_equal(a, z_pi)
    np.testing.assert_array_equal(b, z_q)
    np.testing.assert_array_equal(z[:, :6][np.abs(z_pi) < np.inf], z_pi.ravel())


def test_concat_zero_pi_zeroes_first_half():
    z = concat_heads(np.zeros((2, 3), dtype=np.float32), np.ones((2, 2), dtype=np.float32))
    np.testing.assert_array_equal(z[:, :3], 0.0)


def test_extract_counts_and_dims():
    cfg, ds = make_pixel()
    agent = make_agent()
    lat = extract_latents(agent, ds, rng(7))
    assert len(lat) == len(ds)
    assert lat.z.shape == (len(ds), 12)
    assert lat.latent_dim == agent.cfg.z_pi_dim + agent.cfg.z_q_dim
    assert lat.checkpoint_hash == bytes.fromhex(agent.params_digest())


def test_extract_without_augmentation_identical_obs_gives_identical_latents():
    cfg, ds = make_pixel(n=10)
    ds.s_next = ds.s.copy()  # force s == s'
    agent = make_agent()
    lat = extract_latents(agent, ds, rng(8), augment_fresh=False)
    np.testing.assert_array_equal(lat.z, lat.z_next)


def test_extract_deterministic_with_seed():
    cfg, ds = make_pixel(n=12)
    agent = make_agent()
    a = extract_latents(agent, ds, rng(9))
    b = extract_latents(agent, ds, rng(9))
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.z_next, b.z_next)


def test_flat_layout_lengths():
    assert flat_dim(64, 2) == 131   # continuous: 64 + 2 + 1 + 64
    assert flat_dim(100, 5) == 206  # discrete: 100 + 5 + 1 + 100


@pytest.mark.parametrize("mode", ["continuous", "discrete"])
def test_flatten_unflatten_roundtrip(mode):
    cfg, ds = make_pixel(mode=mode, n=15)
    agent = make_agent(mode)
    lat = extract_latents(agent, ds, rng(10), augment_fresh=False)
    x = flatten_records(lat)
    assert x.shape == (15, flat_dim(12, cfg.action_dim))
    back = unflatten_records(x, lat)
    np.testing.assert_allclose(back.z, lat.z, atol=1e-6)
    np.testing.assert_allclose(back.z_next, lat.z_next, atol=1e-6)
    np.testing.assert_allclose(back.reward, lat.reward, atol=1e-6)
    if mode == "discrete":
        np.testing.assert_array_equal(back.action, lat.action)
    else:
        np.testing.assert_allclose(back.action, lat.action, atol=1e-6)


def test_unflatten_projects_onehot_and_marks_synthetic():
    cfg, ds = make_pixel(mode="discrete", n=8)
    agent = make_agent("discrete")
    lat = extract_latents(agent, ds, rng(11), augment_fresh=False)
    x = flatten_records(lat).astype(np.float64)
    x[:, 12:17] += rng(12).normal(scale=0.3, size=(8, 5))  # blur the one-hot block
    back = unflatten_records(x, lat)
    assert back.action.dtype == np.uint32
    assert np.all(back.action < 5)
    assert np.all(back.done == 0)
    assert np.all(back.provenance == storage.PROV_SYNTHETIC)


def test_normalize_roundtrip_and_moments():
    cfg, ds = make_pixel(n=60)
    agent = make_agent()
    lat = extract_latents(agent, ds, rng(13), augment_fresh=False)
    x_norm, stats = normalize_dataset(lat)
    x = flatten_records(lat)
    np.testing.assert_allclose(stats.denormalize(x_norm), x, atol=1e-5)
    live = ~stats.const_mask
    np.testing.assert_allclose(x_norm[:, live].mean(axis=0), 0.0, atol=1e-3)
    np.testing.assert_allclose(x_norm[:, live].std(axis=0), 1.0, atol=1e-3)


def test_mix_union_counts_and_order():
    cfg, ds = make_pixel(n=20)
    agent = make_agent()
    real = extract_latents(agent, ds, rng(14), augment_fresh=False)
    synth = unflatten_records(flatten_records(real)[:7], real)
    union = mix_union(real, synth)
    assert len(union) == 27
    counts = union.provenance_counts()
    assert counts["real"] == 20 and counts["synthetic"] == 7
    np.testing.assert_array_equal(union.z[:20], real.z)
    np.testing.assert_array_equal(union.z[20:], synth.z)


def test_mix_union_empty_synthetic_is_identity():
    cfg, ds = make_pixel(n=6)
    agent = make_agent()
    real = extract_latents(agent, ds, rng(15), augment_fresh=False)
    empty = unflatten_records(np.zeros((0, flat_dim(12, 2)), dtype=np.float32), real)
    union = mix_union(real, empty)
    assert len(union) == len(real)
    np.testing.assert_array_equal(union.z, real.z)


def test_mix_union_rejects_cross_agent_lineage():
    cfg, ds = make_pixel(n=6)
    agent = make_agent()
    real = extract_latents(agent, ds, rng(16), augment_fresh=False)
    synth = unflatten_records(flatten_records(real)[:2], real)
    synth.checkpoint_hash = b"\xee" * 32
    with pytest.raises(storage.LineageError):
        mix_union(real, synth)


def test_mix_fdd_replacement_counts():
    _, base = make_pixel(n=40, seed=20)
    _, fdd = make_pixel(n=30, seed=21, pool="fdd", level="mixed")
    mixed = mix_fdd(base, fdd, 0.05, rng=rng(22))
    assert len(mixed) == 40
    counts = {"fdd": int((mixed.provenance == storage.PROV_FDD).sum())}
    assert counts["fdd"] == 2  # floor(0.05 * 40)
    # explicit replace-count override
    mixed2 = mix_fdd(base, fdd, replace_count=10, rng=rng(23))
    assert int((mixed2.provenance == storage.PROV_FDD).sum()) == 10


def test_mix_fdd_fraction_endpoints():
    _, base = make_pixel(n=12, seed=24)
    _, fdd = make_pixel(n=12, seed=25, pool="fdd", level="mixed")
    same = mix_fdd(base, fdd, 0.0, rng=rng(26))
    np.testing.assert_array_equal(same.s, base.s)
    allfdd = mix_fdd(base, fdd, 1.0, rng=rng(27))
    assert int((allfdd.provenance == storage.PROV_FDD).sum()) == 12


def test_mix_fdd_pool_too_small():
    _, base = make_pixel(n=30, seed=28)
    _, fdd = make_pixel(n=3, seed=29, pool="fdd", level="mixed")
    with pytest.raises(ValueError):
        mix_fdd(base, fdd, 0.5, rng=rng(30))


def test_mix_fdd_breaks_episode_contiguity_for_replacements():
    _, base = make_pixel(n=30, seed=31)
    _, fdd = make_pixel(n=10, seed=32, pool="fdd", level="mixed")
    mixed = mix_fdd(base, fdd, 0.2, rng=rng(33))
    replaced = mixed.provenance == storage.PROV_FDD
    assert not np.isin(mixed.episode_id[replaced], base.episode_id).any()


def test_latent_file_roundtrip(tmp_path):
    cfg, ds = make_pixel(n=10)
    agent = make_agent()
    lat = extract_latents(agent, ds, rng(17), augment_fresh=False)
    _, stats = normalize_dataset(lat)
    lat.norm = stats
    storage.write_latent_dataset(tmp_path / "l.srlt", lat)
    back = storage.read_latent_dataset(tmp_path / "l.srlt")
    np.testing.assert_array_equal(back.z, lat.z)
    np.testing.assert_array_equal(back.norm.mean, lat.norm.mean)
