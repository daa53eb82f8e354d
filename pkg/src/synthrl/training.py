"""Two-phase training: end-to-end on pixels, then frozen-representation
fine-tuning on latent datasets."""

from __future__ import annotations

import csv
import logging
import time

import numpy as np

from . import nn
from .agents import (FREEZE_GROUPS, CqlAgent, DrqBcAgent, bc_logits_loss, build_agent,
                     compute_lambda, cql_loss, critic_td_loss, drqbc_policy_loss,
                     nstep_targets, obs_to_net, q_min_data, soft_update)
from .augment import BackgroundBank, augment_stack, sample_spec, to_float, to_u8
from .config import EnvConfig, TrainConfig, derive_seed
from .storage import LatentDataset, PixelDataset

logger = logging.getLogger(__name__)


class _TrainLog:
    def __init__(self, path, header):
        self.file = open(path, "w", newline="") if path else None
        self.writer = csv.writer(self.file) if self.file else None
        if self.writer:
            self.writer.writerow(header)
        self.t0 = time.perf_counter()

    def row(self, values):
        if self.writer:
            self.writer.writerow(values + [f"{time.perf_counter() - self.t0:.3f}"])

    def close(self):
        if self.file:
            self.file.close()


def _snapshot(params):
    return [p.value.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.value[...] = v


class _PixelBatcher:
    """Serves NHWC float batches; the channel-stacking transpose happens once."""

    def __init__(self, ds: PixelDataset, reaugment: bool, rng: np.random.Generator,
                 bank: BackgroundBank, dtype=np.float32):
        self.ds = ds
        self.reaugment = reaugment
        self.rng = rng
        self.bank = bank
        self.dtype = dtype
        if not reaugment:
            n, k, h, w, c = ds.s.shape
            self._s = np.ascontiguousarray(ds.s.transpose(0, 2, 3, 1, 4)).reshape(n, h, w, k * c)
            self._next = np.ascontiguousarray(
                ds.s_next.transpose(0, 2, 3, 1, 4)).reshape(n, h, w, k * c)

    def _net(self, arr_u8: np.ndarray) -> np.ndarray:
        return arr_u8.astype(self.dtype) / 255.0 - 0.5

    def _fresh(self, frames: np.ndarray) -> np.ndarray:
        out = np.empty_like(frames)
        for i in range(len(frames)):
            spec = sample_spec(self.rng, self.bank.size)
            out[i] = to_u8(augment_stack(to_float(frames[i]), spec, self.bank))
        return obs_to_net(out, self.dtype)

    def obs(self, idx: np.ndarray) -> np.ndarray:
        if self.reaugment:
            return self._fresh(self.ds.s[idx])
        return self._net(self._s[idx])

    def boot(self, idx: np.ndarray) -> np.ndarray:
        if self.reaugment:
            return self._fresh(self.ds.s_next[idx])
        return self._net(self._next[idx])


def train_phase1(ds: PixelDataset, train_cfg: TrainConfig, env_cfg: EnvConfig, *,
                 log_path=None):
    """Train encoder, heads, and MLPs end-to-end on a (possibly augmented)
    pixel dataset. Aborts to the last-good snapshot if gradients blow up."""
    agent = build_agent(train_cfg, env_cfg)
    rng = np.random.Generator(np.random.PCG64(derive_seed(train_cfg.seed, "phase1")))
    bank = BackgroundBank(seed=derive_seed(train_cfg.seed, "phase1-bank") % (2 ** 32))

    groups = agent.groups()
    critic_params = groups["encoder"] + groups["q_lin"] + groups["q_mlp"]
    policy_params = groups["pi_lin"] + groups["pi_mlp"]
    opt_c = nn.Adam(critic_params)
    opt_p = nn.Adam(policy_params)
    lr = train_cfg.lr

    if agent.algorithm == "drqbc":
        log = _TrainLog(log_path, ["step", "critic_loss", "policy_loss", "lambda", "lr", "wall"])
    else:
        log = _TrainLog(log_path, ["step", "q_loss", "cql_penalty", "td", "bc_loss", "lr", "wall"])

    batcher = _PixelBatcher(ds, train_cfg.reaugment_each_batch, rng, bank)
    snap_every = max(1, train_cfg.steps // 10)
    snap = _snapshot(agent.all_params())
    try:
        for step in range(train_cfg.steps):
            idx = rng.integers(0, len(ds), size=train_cfg.batch_size)
            if agent.algorithm == "drqbc":
                vals = _drqbc_pixel_step(agent, ds, batcher, idx, train_cfg, opt_c, opt_p, lr)
            else:
                vals = _cql_pixel_step(agent, ds, batcher, idx, train_cfg, opt_c, opt_p, lr)
            if (step + 1) % train_cfg.target_update_every == 0:
                soft_update(agent.target_pairs(), train_cfg.target_tau)
            log.row([step] + [f"{v:.6f}" for v in vals] + [f"{lr:.6g}"])
            if (step + 1) % snap_every == 0:
                snap = _snapshot(agent.all_params())
    except nn.TrainingDiverged as exc:
        logger.warning("phase-1 training aborted (%s); restoring last-good checkpoint", exc)
        _restore(agent.all_params(), snap)
    finally:
        log.close()
    return agent


def _drqbc_pixel_step(agent: DrqBcAgent, ds, batcher, idx, cfg, opt_c, opt_p, lr):
    actions = ds.action[idx].astype(agent.dtype)
    returns, boot_idx, disc = nstep_targets(ds.reward, ds.done, ds.episode_id, ds.step_idx,
                                            idx, cfg.n_step, cfg.gamma)

    # pure target forwards happen before any gradient-path forward
    h_boot = agent.encoder.forward(batcher.boot(boot_idx))
    a_boot = agent.pi_mlp.forward(agent.pi_lin.forward(h_boot))
    qin_t = np.concatenate([agent.q_lin_t.forward(h_boot), a_boot], axis=1)
    q_t = np.minimum(agent.q1_t.forward(qin_t)[:, 0], agent.q2_t.forward(qin_t)[:, 0])
    y = (returns + disc * q_t).astype(agent.dtype)

    opt_c.zero_grad()
    h = agent.encoder.forward(batcher.obs(idx))
    z_q = agent.q_lin.forward(h)
    critic_loss, g_zq = critic_td_loss(agent, z_q, actions, y, backprop=True)
    agent.encoder.backward(agent.q_lin.backward(g_zq))
    opt_c.step(lr)

    # policy step reuses the critic forward's feature values; gradients are
    # detached at h by construction (only pi_lin/pi_mlp get optimized)
    opt_p.zero_grad()
    z_pi = agent.pi_lin.forward(h)
    lam = compute_lambda(q_min_data(agent, z_q, actions), cfg.bc_alpha)
    policy_loss, g_zpi = drqbc_policy_loss(agent, z_pi, z_q, actions, lam, backprop=True)
    agent.pi_lin.backward(g_zpi)
    opt_p.step(lr)
    return critic_loss, policy_loss, lam


def _cql_pixel_step(agent: CqlAgent, ds, batcher, idx, cfg, opt_c, opt_p, lr):
    action_idx = ds.action[idx].astype(np.int64)
    returns, boot_idx, disc = nstep_targets(ds.reward, ds.done, ds.episode_id, ds.step_idx,
                                            idx, cfg.n_step, cfg.gamma)

    h_boot = agent.encoder.forward(batcher.boot(boot_idx))
    q_boot = agent.q_mlp_t.forward(agent.q_lin_t.forward(h_boot)).max(axis=1)
    y = (returns + disc * q_boot).astype(agent.dtype)

    opt_c.zero_grad()
    h = agent.encoder.forward(batcher.obs(idx))
    z_q = agent.q_lin.forward(h)
    loss, penalty, td, g_zq = cql_loss(agent, z_q, action_idx, y, cfg.cql_alpha, backprop=True)
    agent.encoder.backward(agent.q_lin.backward(g_zq))
    opt_c.step(lr)

    opt_p.zero_grad()
    z_pi = agent.pi_lin.forward(h)
    bc, g_zpi = bc_logits_loss(agent, z_pi, action_idx, backprop=True)
    agent.pi_lin.backward(g_zpi)
    opt_p.step(lr)
    return loss, penalty, td, bc


def freeze_and_finetune(agent, latents: LatentDataset, train_cfg: TrainConfig, *,
                        steps: int | None = None, log_path=None):
    """Phase 2: freeze encoder and both linear heads, fine-tune the MLPs on a
    latent dataset (real, synthetic, or their union)."""
    if latents.latent_dim != train_cfg.z_pi_dim + train_cfg.z_q_dim:
        raise ValueError(f"latent dim {latents.latent_dim} != agent "
                         f"{train_cfg.z_pi_dim + train_cfg.z_q_dim}")
    agent.freeze(FREEZE_GROUPS)
    digest_before = agent.freeze_digest()
    groups = agent.trainable_groups()
    assert set(groups) == {"pi_mlp", "q_mlp"}
    opt_c = nn.Adam(groups["q_mlp"])
    opt_p = nn.Adam(groups["pi_mlp"])
    lr = train_cfg.lr
    total = steps if steps is not None else train_cfg.finetune_steps
    rng = np.random.Generator(np.random.PCG64(derive_seed(train_cfg.seed, "phase2")))

    zpi_d = train_cfg.z_pi_dim
    z_pi, z_q = latents.z[:, :zpi_d], latents.z[:, zpi_d:]
    z_pi2, z_q2 = latents.z_next[:, :zpi_d], latents.z_next[:, zpi_d:]
    nonterminal = 1.0 - latents.done.astype(np.float64)

    if agent.algorithm == "drqbc":
        log = _TrainLog(log_path, ["step", "critic_loss", "policy_loss", "lambda", "lr", "wall"])
    else:
        log = _TrainLog(log_path, ["step", "q_loss", "cql_penalty", "td", "bc_loss", "lr", "wall"])

    snap_every = max(1, total // 10)
    snap = _snapshot(agent.all_params())
    try:
        for step in range(total):
            idx = rng.integers(0, len(latents), size=train_cfg.batch_size)
            if agent.algorithm == "drqbc":
                a = latents.action[idx].astype(agent.dtype)
                a2 = agent.pi_mlp.forward(z_pi2[idx])
                qin_t = np.concatenate([z_q2[idx], a2], axis=1)
                q_t = np.minimum(agent.q1_t.forward(qin_t)[:, 0],
                                 agent.q2_t.forward(qin_t)[:, 0])
                y = (latents.reward[idx] + train_cfg.gamma * nonterminal[idx] * q_t
                     ).astype(agent.dtype)
                opt_c.zero_grad()
                critic_loss, _ = critic_td_loss(agent, z_q[idx], a, y, backprop=True)
                opt_c.step(lr)
                opt_p.zero_grad()
                lam = compute_lambda(q_min_data(agent, z_q[idx], a), train_cfg.bc_alpha)
                policy_loss, _ = drqbc_policy_loss(agent, z_pi[idx], z_q[idx], a, lam,
                                                   backprop=True)
                opt_p.step(lr)
                vals = (critic_loss, policy_loss, lam)
            else:
                a_idx = latents.action[idx].astype(np.int64)
                q_boot = agent.q_mlp_t.forward(z_q2[idx]).max(axis=1)
                y = (latents.reward[idx] + train_cfg.gamma * nonterminal[idx] * q_boot
                     ).astype(agent.dtype)
                opt_c.zero_grad()
                loss, penalty, td, _ = cql_loss(agent, z_q[idx], a_idx, y,
                                                train_cfg.cql_alpha, backprop=True)
                opt_c.step(lr)
                opt_p.zero_grad()
                bc, _ = bc_logits_loss(agent, z_pi[idx], a_idx, backprop=True)
                opt_p.step(lr)
                vals = (loss, penalty, td, bc)
            if (step + 1) % train_cfg.target_update_every == 0:
                soft_update([(agent.q1, agent.q1_t), (agent.q2, agent.q2_t)]
                            if agent.algorithm == "drqbc"
                            else [(agent.q_mlp, agent.q_mlp_t)], train_cfg.target_tau)
            log.row([step] + [f"{v:.6f}" for v in vals] + [f"{lr:.6g}"])
            if (step + 1) % snap_every == 0:
                snap = _snapshot(agent.all_params())
    except nn.TrainingDiverged as exc:
        logger.warning("fine-tuning aborted (%s); restoring last-good checkpoint", exc)
        _restore(agent.all_params(), snap)
    finally:
        log.close()

    digest_after = agent.freeze_digest()
    if digest_before != digest_after:
        raise RuntimeError("freeze contract violated: frozen parameter bytes changed")
    return agent


def agent_act_fn(agent):
    if agent.algorithm == "drqbc":
        return lambda obs: agent.act(obs[None])[0]
    return lambda obs: int(agent.act(obs[None])[0])


def agent_latent_fn(agent):
    return lambda obs: agent.latent(obs[None])[0]
