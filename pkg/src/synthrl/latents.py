"""Latent-transition pipeline: extraction through the trained encoder and
linear heads, flattening/normalization for diffusion, and dataset mixing."""

from __future__ import annotations

import numpy as np

from .augment import BackgroundBank, augment_transition, to_float, to_u8
from .storage import (PROV_FDD, PROV_REAL, PROV_SYNTHETIC, LatentDataset, NormStats,
                      PixelDataset)


def concat_heads(z_pi: np.ndarray, z_q: np.ndarray) -> np.ndarray:
    """z = z_pi (+) z_q along the last axis, pi half first."""
    return np.concatenate([z_pi, z_q], axis=-1)


def split_heads(z: np.ndarray, z_pi_dim: int):
    return z[..., :z_pi_dim], z[..., z_pi_dim:]


def extract_latents(agent, ds: PixelDataset, rng: np.random.Generator, *,
                    augment_fresh: bool = True, bank: BackgroundBank | None = None,
                    batch: int = 256) -> LatentDataset:
    """(z, a, r, z') records via h = encoder(Augment(s)), z = [pi_lin(h), q_lin(h)].

    Augmentation is sampled fresh per transition and side at extraction time;
    pass augment_fresh=False for the non-augmented arms.
    """
    if ds.frame_size != agent.env_cfg.frame_size or ds.frame_stack != agent.env_cfg.frame_stack:
        raise ValueError(f"dataset frames {ds.frame_size}/{ds.frame_stack} do not match "
                         f"agent {agent.env_cfg.frame_size}/{agent.env_cfg.frame_stack}")
    bank = bank or BackgroundBank(seed=0)
    n = len(ds)
    d = agent.cfg.z_pi_dim + agent.cfg.z_q_dim
    z = np.empty((n, d), dtype=np.float32)
    z_next = np.empty((n, d), dtype=np.float32)

    def heads(obs_u8):
        h = agent.encode(obs_u8)
        return concat_heads(agent.pi_lin.forward(h), agent.q_lin.forward(h))

    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        s = ds.s[lo:hi]
        s2 = ds.s_next[lo:hi]
        if augment_fresh:
            s = s.copy()
            s2 = s2.copy()
            for i in range(hi - lo):
                a_s, a_s2 = augment_transition(to_float(s[i]), to_float(s2[i]), rng, bank)
                s[i] = to_u8(a_s)
                s2[i] = to_u8(a_s2)
        z[lo:hi] = heads(s)
        z_next[lo:hi] = heads(s2)

    if ds.mode == "continuous":
        action = ds.action.astype(np.float32).copy()
    else:
        action = ds.action.astype(np.uint32).copy()
    return LatentDataset(mode=ds.mode, z_pi_dim=agent.cfg.z_pi_dim,
                         z_q_dim=agent.cfg.z_q_dim, action_dim=ds.action_dim,
                         config_hash=ds.config_hash,
                         checkpoint_hash=bytes.fromhex(agent.params_digest()),
                         z=z, action=action, reward=ds.reward.astype(np.float32).copy(),
                         z_next=z_next, done=ds.done.astype(np.uint8).copy(),
                         provenance=ds.provenance.copy())


# ----------------------------------------------------------------- flattening

def flat_dim(latent_dim: int, action_dim: int) -> int:
    """[z | a | r | z'] width; discrete actions occupy one-hot blocks of
    action_dim (the action count), continuous ones their native dims."""
    return latent_dim + action_dim + 1 + latent_dim


def flatten_records(ds: LatentDataset) -> np.ndarray:
    """Fixed layout [z | a | r | z'] per record; done flags are excluded."""
    n = len(ds)
    if ds.mode == "continuous":
        a_block = ds.action.astype(np.float32)
    else:
        a_block = np.eye(ds.action_dim, dtype=np.float32)[ds.action.astype(np.int64)]
    return np.concatenate([ds.z, a_block, ds.reward[:, None].astype(np.float32), ds.z_next],
                          axis=1)


def unflatten_records(x: np.ndarray, like: LatentDataset,
                      provenance: int = PROV_SYNTHETIC) -> LatentDataset:
    """Rebuild records from flat vectors.

    Synthetic rows get non-terminal done flags; discrete actions re-project to
    the nearest one-hot (argmax); continuous actions clip to the action box.
    """
    d = like.latent_dim
    aw = like.action_dim
    if x.shape[1] != flat_dim(d, aw):
        raise ValueError(f"flat width {x.shape[1]} != expected {flat_dim(d, aw)}")
    n = x.shape[0]
    z = x[:, :d].astype(np.float32)
    a_block = x[:, d:d + aw]
    reward = x[:, d + aw].astype(np.float32)
    z_next = x[:, d + aw + 1:].astype(np.float32)
    if like.mode == "continuous":
        action = np.clip(a_block, -1.0, 1.0).astype(np.float32)
    else:
        action = a_block.argmax(axis=1).astype(np.uint32)
    return LatentDataset(mode=like.mode, z_pi_dim=like.z_pi_dim, z_q_dim=like.z_q_dim,
                         action_dim=like.action_dim, config_hash=like.config_hash,
                         checkpoint_hash=like.checkpoint_hash, z=z, action=action,
                         reward=reward, z_next=z_next, done=np.zeros(n, dtype=np.uint8),
                         provenance=np.full(n, provenance, dtype=np.uint8), norm=like.norm)


def normalize_dataset(ds: LatentDataset):
    """Standardize flattened vectors; stats come from real records only."""
    x = flatten_records(ds)
    real = ds.provenance == PROV_REAL
    if not np.any(real):
        raise ValueError("no real records to fit normalization stats")
    stats = NormStats.fit(x[real])
    return stats.normalize(x), stats


# --------------------------------------------------------------------- mixing

def mix_union(d_latent: LatentDataset, d_diff: LatentDataset) -> LatentDataset:
    """D_ups = D_latent (then) D_diff; provenance and order preserved."""
    for field in ("mode", "z_pi_dim", "z_q_dim", "action_dim"):
        if getattr(d_latent, field) != getattr(d_diff, field):
            raise ValueError(f"layout mismatch on {field}")
    if d_latent.checkpoint_hash != d_diff.checkpoint_hash:
        from .storage import LineageError
        raise LineageError("checkpoint_hash",
                           f"{d_latent.checkpoint_hash.hex()[:16]} vs "
                           f"{d_diff.checkpoint_hash.hex()[:16]}")
    return LatentDataset(
        mode=d_latent.mode, z_pi_dim=d_latent.z_pi_dim, z_q_dim=d_latent.z_q_dim,
        action_dim=d_latent.action_dim, config_hash=d_latent.config_hash,
        checkpoint_hash=d_latent.checkpoint_hash,
        z=np.concatenate([d_latent.z, d_diff.z]),
        action=np.concatenate([d_latent.action, d_diff.action]),
        reward=np.concatenate([d_latent.reward, d_diff.reward]),
        z_next=np.concatenate([d_latent.z_next, d_diff.z_next]),
        done=np.concatenate([d_latent.done, d_diff.done]),
        provenance=np.concatenate([d_latent.provenance, d_diff.provenance]),
        norm=d_latent.norm)


def mix_fdd(base: PixelDataset, fdd: PixelDataset, fraction: float = 0.05, *,
            replace_count: int | None = None,
            rng: np.random.Generator | None = None) -> PixelDataset:
    """Replace floor(fraction * N) uniformly chosen base records with FDD
    records; total size unchanged. `replace_count` overrides the fraction.

    Replaced records get fresh episode ids so n-step slices never straddle
    them.
    """
    from dataclasses import replace as dc_replace

    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(base)
    count = int(np.floor(fraction * n)) if replace_count is None else int(replace_count)
    if count > len(fdd):
        raise ValueError(f"need {count} fdd records but pool holds {len(fdd)}")
    if count > n:
        raise ValueError(f"cannot replace {count} of {n} records")
    if count == 0:
        return dc_replace(base, s=base.s.copy(), s_next=base.s_next.copy(),
                          provenance=base.provenance.copy())
    rng = rng or np.random.default_rng(0)
    targets = rng.choice(n, size=count, replace=False)
    sources = rng.choice(len(fdd), size=count, replace=False)

    out = dc_replace(base, s=base.s.copy(), action=base.action.copy(),
                     reward=base.reward.copy(), s_next=base.s_next.copy(),
                     done=base.done.copy(), episode_id=base.episode_id.copy(),
                     step_idx=base.step_idx.copy(), provenance=base.provenance.copy())
    out.s[targets] = fdd.s[sources]
    out.action[targets] = fdd.action[sources]
    out.reward[targets] = fdd.reward[sources]
    out.s_next[targets] = fdd.s_next[sources]
    out.done[targets] = fdd.done[sources]
    fresh = int(base.episode_id.max()) + 1 if n else 1
    out.episode_id[targets] = fresh + np.arange(count, dtype=np.uint32)
    out.step_idx[targets] = 0
    out.provenance[targets] = PROV_FDD
    return out
