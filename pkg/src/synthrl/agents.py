"""Offline RL agents: a DrQ+BC-style continuous actor-critic and a CQL-style
discrete Q-learner.

Both share the same topology contract: conv encoder -> feature h, linear
heads z_pi = pi_lin(h) and z_q = q_lin(h), then MLPs. The loss code is
generic over the feature source (fresh pixels in phase 1, stored latents in
phase 2), which is what makes freeze-and-finetune on latent datasets
possible. Call discipline matters: every backward must directly follow the
forward that produced its caches, so target-network forwards always happen
first.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict

import numpy as np

from . import nn
from .config import EnvConfig, TrainConfig

logger = logging.getLogger(__name__)

FREEZE_GROUPS = ("encoder", "pi_lin", "q_lin")


def obs_to_net(obs_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (B, k, H, W, 3) stacks -> float NHWC (B, H, W, k*3) in
    [-0.5, 0.5], frames concatenated along the channel axis."""
    x = obs_u8.astype(dtype) / 255.0 - 0.5
    b, k, h, w, c = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1, 4)).reshape(b, h, w, k * c)


class ConvEncoder:
    """Three 3x3 conv layers (32 channels, strides 3/2/1) and a dense projection."""

    def __init__(self, name: str, in_ch: int, frame_size: int, feature_dim: int, *,
                 rng: np.random.Generator, dtype=np.float32, channels: int = 32,
                 strides: tuple = (3, 2, 1)):
        layers: list[nn.Layer] = []
        ch_in = in_ch
        size = frame_size
        for i, stride in enumerate(strides):
            conv = nn.Conv2d(f"{name}.conv{i}", ch_in, channels, ksize=3, stride=stride,
                             rng=rng, dtype=dtype, skip_input_grad=i == 0)
            size = conv.out_hw(size, size)[0]
            layers += [conv, nn.ReLU()]
            ch_in = channels
        layers.append(nn.Flatten())
        layers.append(nn.Dense(f"{name}.proj", channels * size * size, feature_dim,
                               rng=rng, dtype=dtype))
        self.net = nn.Sequential(layers)
        self.feature_dim = feature_dim

    def params(self):
        return self.net.params()

    def forward(self, x):
        return self.net.forward(x)

    def backward(self, grad):
        return self.net.backward(grad)


def _copy_params(src, dst) -> None:
    for a, b in zip(src.params(), dst.params()):
        b.value[...] = a.value


def soft_update(pairs, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online for every (online, target)."""
    for online, target in pairs:
        for o, t in zip(online.params(), target.params()):
            t.value *= (1.0 - tau)
            t.value += tau * o.value


class _AgentBase:
    cfg: TrainConfig
    env_cfg: EnvConfig
    frozen: set

    def groups(self) -> dict[str, list[nn.Param]]:
        raise NotImplementedError

    def target_pairs(self):
        raise NotImplementedError

    def all_params(self) -> list[nn.Param]:
        out = []
        for params in self.groups().values():
            out.extend(params)
        for _, target in self.target_pairs():
            out.extend(target.params())
        return out

    def trainable_groups(self) -> dict[str, list[nn.Param]]:
        return {g: ps for g, ps in self.groups().items() if g not in self.frozen}

    def freeze(self, group_names) -> None:
        unknown = set(group_names) - set(self.groups())
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        self.frozen |= set(group_names)

    def freeze_digest(self) -> str:
        """SHA-256 over the frozen groups' parameter bytes (encoder + linear heads)."""
        params = []
        for g in sorted(self.frozen or FREEZE_GROUPS):
            params.extend(self.groups()[g])
        return nn.params_sha256(params)

    def params_digest(self) -> str:
        return nn.params_sha256(self.all_params())

    def encode(self, obs_u8: np.ndarray) -> np.ndarray:
        return self.encoder.forward(obs_to_net(obs_u8, self.dtype))

    def latent(self, obs_u8: np.ndarray) -> np.ndarray:
        h = self.encode(obs_u8)
        return np.concatenate([self.pi_lin.forward(h), self.q_lin.forward(h)], axis=1)

    def sync_targets(self) -> None:
        for online, target in self.target_pairs():
            _copy_params(online, target)


class DrqBcAgent(_AgentBase):
    """Continuous control: deterministic tanh policy, twin critics."""

    algorithm = "drqbc"

    def __init__(self, train_cfg: TrainConfig, env_cfg: EnvConfig, *, dtype=np.float32):
        if env_cfg.mode != "continuous":
            raise ValueError("drqbc agent requires a continuous-mode environment")
        self.cfg = train_cfg
        self.env_cfg = env_cfg
        self.dtype = dtype
        self.frozen: set = set()
        rng = np.random.Generator(np.random.PCG64(train_cfg.seed))
        adim = env_cfg.action_dim
        hid = train_cfg.hidden_dim
        self.encoder = ConvEncoder("encoder", env_cfg.frame_stack * 3, env_cfg.frame_size,
                                   train_cfg.feature_dim, rng=rng, dtype=dtype)
        self.pi_lin = nn.Dense("pi_lin", train_cfg.feature_dim, train_cfg.z_pi_dim,
                               rng=rng, dtype=dtype)
        self.pi_mlp = nn.mlp("pi_mlp", [train_cfg.z_pi_dim, hid, hid, adim], rng=rng,
                             dtype=dtype, final="tanh")
        self.q_lin = nn.Dense("q_lin", train_cfg.feature_dim, train_cfg.z_q_dim,
                              rng=rng, dtype=dtype)
        self.q1 = nn.mlp("q_mlp.q1", [train_cfg.z_q_dim + adim, hid, hid, 1], rng=rng,
                         dtype=dtype)
        self.q2 = nn.mlp("q_mlp.q2", [train_cfg.z_q_dim + adim, hid, hid, 1], rng=rng,
                         dtype=dtype)
        t_rng = np.random.Generator(np.random.PCG64(0))
        self.q_lin_t = nn.Dense("target.q_lin", train_cfg.feature_dim, train_cfg.z_q_dim,
                                rng=t_rng, dtype=dtype)
        self.q1_t = nn.mlp("target.q_mlp.q1", [train_cfg.z_q_dim + adim, hid, hid, 1],
                           rng=t_rng, dtype=dtype)
        self.q2_t = nn.mlp("target.q_mlp.q2", [train_cfg.z_q_dim + adim, hid, hid, 1],
                           rng=t_rng, dtype=dtype)
        self.sync_targets()

    def groups(self):
        return {"encoder": self.encoder.params(),
                "pi_lin": self.pi_lin.params(),
                "pi_mlp": self.pi_mlp.params(),
                "q_lin": self.q_lin.params(),
                "q_mlp": self.q1.params() + self.q2.params()}

    def target_pairs(self):
        return [(self.q_lin, self.q_lin_t), (self.q1, self.q1_t), (self.q2, self.q2_t)]

    def act(self, obs_u8: np.ndarray) -> np.ndarray:
        h = self.encode(obs_u8)
        return self.pi_mlp.forward(self.pi_lin.forward(h))


class CqlAgent(_AgentBase):
    """Discrete control: per-action Q head plus a behavior-cloning policy head."""

    algorithm = "cql"

    def __init__(self, train_cfg: TrainConfig, env_cfg: EnvConfig, *, dtype=np.float32):
        if env_cfg.mode != "discrete":
            raise ValueError("cql agent requires a discrete-mode environment")
        self.cfg = train_cfg
        self.env_cfg = env_cfg
        self.dtype = dtype
        self.frozen: set = set()
        rng = np.random.Generator(np.random.PCG64(train_cfg.seed))
        n_actions = env_cfg.action_dim
        hid = train_cfg.hidden_dim
        self.encoder = ConvEncoder("encoder", env_cfg.frame_stack * 3, env_cfg.frame_size,
                                   train_cfg.feature_dim, rng=rng, dtype=dtype)
        self.pi_lin = nn.Dense("pi_lin", train_cfg.feature_dim, train_cfg.z_pi_dim,
                               rng=rng, dtype=dtype)
        self.pi_mlp = nn.mlp("pi_mlp", [train_cfg.z_pi_dim, hid, n_actions], rng=rng,
                             dtype=dtype)
        self.q_lin = nn.Dense("q_lin", train_cfg.feature_dim, train_cfg.z_q_dim,
                              rng=rng, dtype=dtype)
        self.q_mlp = nn.mlp("q_mlp", [train_cfg.z_q_dim, hid, n_actions], rng=rng,
                            dtype=dtype)
        t_rng = np.random.Generator(np.random.PCG64(0))
        self.q_lin_t = nn.Dense("target.q_lin", train_cfg.feature_dim, train_cfg.z_q_dim,
                                rng=t_rng, dtype=dtype)
        self.q_mlp_t = nn.mlp("target.q_mlp", [train_cfg.z_q_dim, hid, n_actions],
                              rng=t_rng, dtype=dtype)
        self.sync_targets()

    def groups(self):
        return {"encoder": self.encoder.params(),
                "pi_lin": self.pi_lin.params(),
                "pi_mlp": self.pi_mlp.params(),
                "q_lin": self.q_lin.params(),
                "q_mlp": self.q_mlp.params()}

    def target_pairs(self):
        return [(self.q_lin, self.q_lin_t), (self.q_mlp, self.q_mlp_t)]

    def act(self, obs_u8: np.ndarray) -> np.ndarray:
        q = self.q_mlp.forward(self.q_lin.forward(self.encode(obs_u8)))
        return q.argmax(axis=1)


def build_agent(train_cfg: TrainConfig, env_cfg: EnvConfig, *, dtype=np.float32):
    if train_cfg.algorithm == "drqbc":
        return DrqBcAgent(train_cfg, env_cfg, dtype=dtype)
    if train_cfg.algorithm == "cql":
        return CqlAgent(train_cfg, env_cfg, dtype=dtype)
    raise ValueError(f"unknown algorithm {train_cfg.algorithm!r}")


# ------------------------------------------------------------------- losses

def compute_lambda(q_values: np.ndarray, alpha: float = 2.5, eps: float = 1e-6) -> float:
    """Adaptive BC trade-off: alpha / mean |Q| over the minibatch."""
    if len(q_values) == 0:
        raise ValueError("empty Q batch")
    denom = float(np.mean(np.abs(q_values)))
    if denom < eps:
        logger.warning("all-zero Q minibatch; clamping lambda denominator to %g", eps)
        denom = eps
    return alpha / denom


def q_min_data(agent: DrqBcAgent, z_q: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Min-twin Q at the dataset actions (pure forward, used for lambda)."""
    qin = np.concatenate([z_q, actions], axis=1)
    return np.minimum(agent.q1.forward(qin)[:, 0], agent.q2.forward(qin)[:, 0])


def drqbc_policy_loss(agent: DrqBcAgent, z_pi: np.ndarray, z_q: np.ndarray,
                      actions: np.ndarray, lam: float, *, backprop: bool = False):
    """-mean[lam * minQ(h, pi(h)) - ||pi(h) - a||^2].

    Returns (loss, grad wrt z_pi or None). Gradients stop at the feature
    level: the caller decides whether z_pi came from pi_lin (phase 1) or from
    a stored latent (phase 2). Critic parameters receive incidental grads
    that the next critic update zeroes.
    """
    b = z_pi.shape[0]
    u = agent.pi_mlp.forward(z_pi)
    qin = np.concatenate([z_q, u], axis=1)
    q1 = agent.q1.forward(qin)[:, 0]
    q2 = agent.q2.forward(qin)[:, 0]
    qmin = np.minimum(q1, q2)
    bc = np.sum((u - actions) ** 2, axis=1)
    loss = float(-np.mean(lam * qmin - bc))
    if not backprop:
        return loss, None
    pick1 = (q1 <= q2).astype(u.dtype)
    g_q = np.full(b, -lam / b, dtype=u.dtype)
    gin1 = agent.q1.backward((g_q * pick1)[:, None])
    gin2 = agent.q2.backward((g_q * (1.0 - pick1))[:, None])
    zq_dim = z_q.shape[1]
    g_u = gin1[:, zq_dim:] + gin2[:, zq_dim:] + (2.0 / b) * (u - actions)
    g_zpi = agent.pi_mlp.backward(g_u)
    return loss, g_zpi


def nstep_targets(reward: np.ndarray, done: np.ndarray, episode_id: np.ndarray,
                  step_idx: np.ndarray, idx: np.ndarray, n: int, gamma: float):
    """n-step returns from flat record arrays.

    Slices truncate when the episode ends, the dataset ends, or contiguity
    breaks (mixed-in records get fresh episode ids). Returns (returns,
    boot_idx, disc) where disc = gamma^m for the bootstrap (0 past a
    terminal) and boot_idx indexes the record whose s' bootstraps.
    """
    total = len(reward)
    returns = np.zeros(len(idx), dtype=np.float64)
    boot_idx = np.array(idx, dtype=np.int64)
    disc = np.ones(len(idx), dtype=np.float64)
    alive = np.ones(len(idx), dtype=bool)
    terminated = np.zeros(len(idx), dtype=bool)
    for j in range(n):
        cur = idx + j
        safe = np.minimum(cur, total - 1)
        cont = alive & (cur < total) & (episode_id[safe] == episode_id[idx]) \
            & (step_idx[safe] == step_idx[idx] + j)
        returns += np.where(cont, (gamma ** j) * reward[safe], 0.0)
        boot_idx = np.where(cont, safe, boot_idx)
        disc = np.where(cont, gamma ** (j + 1), disc)
        terminated |= cont & (done[safe] > 0)
        alive = cont & (done[safe] == 0)
    disc = np.where(terminated, 0.0, disc)
    return returns, boot_idx, disc


def critic_td_loss(agent: DrqBcAgent, z_q: np.ndarray, actions: np.ndarray,
                   targets: np.ndarray, *, backprop: bool = False):
    """Squared TD error against both twin critics; optionally returns the
    gradient wrt z_q for the caller to push into q_lin/encoder."""
    b = z_q.shape[0]
    qin = np.concatenate([z_q, actions], axis=1)
    q1 = agent.q1.forward(qin)[:, 0]
    q2 = agent.q2.forward(qin)[:, 0]
    loss = float(np.mean((q1 - targets) ** 2) + np.mean((q2 - targets) ** 2))
    if not backprop:
        return loss, None
    gin1 = agent.q1.backward((2.0 / b) * (q1 - targets)[:, None].astype(z_q.dtype))
    gin2 = agent.q2.backward((2.0 / b) * (q2 - targets)[:, None].astype(z_q.dtype))
    zq_dim = z_q.shape[1]
    return loss, gin1[:, :zq_dim] + gin2[:, :zq_dim]


def _logsumexp(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=1)
    return m + np.log(np.exp(q - m[:, None]).sum(axis=1))


def _softmax(q: np.ndarray) -> np.ndarray:
    e = np.exp(q - q.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cql_loss(agent: CqlAgent, z_q: np.ndarray, action_idx: np.ndarray,
             targets: np.ndarray, alpha_cql: float = 4.0, *, backprop: bool = False):
    """alpha * mean[logsumexp_a Q - Q(s, a_data)] + 0.5 * mean[(Q(s, a_data) - y)^2].

    Returns (loss, penalty, td, grad wrt z_q or None).
    """
    b = z_q.shape[0]
    q = agent.q_mlp.forward(z_q)
    rows = np.arange(b)
    q_data = q[rows, action_idx]
    penalty = float(np.mean(_logsumexp(q) - q_data))
    td = float(0.5 * np.mean((q_data - targets) ** 2))
    loss = alpha_cql * penalty + td
    if not backprop:
        return loss, penalty, td, None
    g = alpha_cql / b * _softmax(q)
    g[rows, action_idx] -= alpha_cql / b
    g[rows, action_idx] += (q_data - targets) / b
    g_zq = agent.q_mlp.backward(g.astype(z_q.dtype))
    return loss, penalty, td, g_zq


def bc_logits_loss(agent: CqlAgent, z_pi: np.ndarray, action_idx: np.ndarray, *,
                   backprop: bool = False):
    """Cross-entropy of the auxiliary policy head against dataset actions."""
    b = z_pi.shape[0]
    logits = agent.pi_mlp.forward(z_pi)
    rows = np.arange(b)
    loss = float(np.mean(_logsumexp(logits) - logits[rows, action_idx]))
    if not backprop:
        return loss, None
    g = _softmax(logits) / b
    g[rows, action_idx] -= 1.0 / b
    return loss, agent.pi_mlp.backward(g.astype(z_pi.dtype))


# --------------------------------------------------------------- checkpoints

def save_agent(prefix, agent, config_hash_hex: str = "") -> None:
    nn.save_params(str(prefix) + ".srnn", agent.all_params())
    meta = {
        "algorithm": agent.algorithm,
        "train": asdict(agent.cfg),
        "env": asdict(agent.env_cfg),
        "frozen": sorted(agent.frozen),
        "config_hash": config_hash_hex,
        "params_sha256": agent.params_digest(),
    }
    with open(str(prefix) + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def load_agent(prefix):
    with open(str(prefix) + ".json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    train_cfg = TrainConfig(**meta["train"])
    env_cfg = EnvConfig(**meta["env"])
    agent = build_agent(train_cfg, env_cfg)
    nn.load_params(str(prefix) + ".srnn", agent.all_params())
    agent.frozen = set(meta["frozen"])
    if meta["params_sha256"] != agent.params_digest():
        raise nn.CheckpointError("params_sha256", "checkpoint digest mismatch after load")
    return agent, meta
