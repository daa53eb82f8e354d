"""DistractionWorld: a procedurally rendered goal-reaching world with
train/test visual-theme splits and three distraction tiers.

Hidden dynamics depend only on the config seed; themes and distraction levels
touch rendering exclusively, so reward traces are identical across levels for
the same seed and action sequence. `level=none` renders the canonical
appearance (fixed base texture, canonical agent/goal colors); themes shape
what easy/medium/hard look like. The fdd pool renders its distractions
statically (time-frozen).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import color_jitter
from .config import EnvConfig, derive_seed
from .storage import PixelDataset
from .textures import texture

CANONICAL_TEXTURE_SEED = 7_000_001
CANONICAL_AGENT_COLOR = np.array([0.90, 0.15, 0.10], dtype=np.float32)
CANONICAL_GOAL_COLOR = np.array([0.10, 0.85, 0.20], dtype=np.float32)

POOL_OFFSETS = {"train": 0, "test": 10_000, "fdd": 20_000}

SPEED = 0.08
GOAL_RADIUS = 0.12
DIAMETER = 2.0 * np.sqrt(2.0)
DISCRETE_GOAL_REWARD = 10.0


@dataclass(frozen=True)
class ThemeParams:
    """Rendering parameters for one visual theme at one distraction level."""

    theme_seed: int
    level: str
    texture_id: int
    agent_color: tuple
    goal_color: tuple
    hue_shift: float
    patch_colors: tuple
    n_patches: int
    static: bool


def pool_theme_seed(pool: str, index: int) -> int:
    """Disjoint theme seed spaces per pool."""
    return POOL_OFFSETS[pool] + int(index)


def theme_params(theme_seed: int, level: str, static: bool = False) -> ThemeParams:
    rng = np.random.Generator(np.random.PCG64(900_001 + theme_seed))
    texture_id = int(rng.integers(1 << 30))
    agent_color = tuple(rng.uniform(0.15, 0.95, size=3).astype(np.float32))
    goal_color = tuple(rng.uniform(0.15, 0.95, size=3).astype(np.float32))
    hue = float(rng.uniform(0.15, 0.85))
    patch_colors = tuple(tuple(rng.uniform(0.0, 1.0, size=3).astype(np.float32))
                         for _ in range(4))
    n_patches = int(rng.integers(2, 5))
    return ThemeParams(theme_seed=theme_seed, level=level, texture_id=texture_id,
                       agent_color=agent_color, goal_color=goal_color, hue_shift=hue,
                       patch_colors=patch_colors, n_patches=n_patches, static=static)


class _Renderer:
    """Pure function of (hidden state, theme, level, step) with texture caches."""

    def __init__(self, frame_size: int):
        self.size = frame_size
        coords = np.linspace(-1.0, 1.0, frame_size, dtype=np.float32)
        self.wy, self.wx = np.meshgrid(coords, coords, indexing="ij")
        self.canonical = texture(CANONICAL_TEXTURE_SEED, frame_size, frame_size)
        self._theme_tex: dict[int, np.ndarray] = {}
        self._hue_shifted: dict[int, np.ndarray] = {}

    def _background(self, theme: ThemeParams, level: str, t: int) -> np.ndarray:
        if level == "none":
            return self.canonical.copy()
        if level == "easy":
            if theme.theme_seed not in self._hue_shifted:
                self._hue_shifted[theme.theme_seed] = color_jitter(
                    self.canonical, 1.0, 1.0, 1.0, theme.hue_shift)
            return self._hue_shifted[theme.theme_seed].copy()
        if level == "medium":
            frame = self.canonical.copy()
            self._paint_patches(frame, theme, t)
            return frame
        if level == "hard":
            if theme.theme_seed not in self._theme_tex:
                self._theme_tex[theme.theme_seed] = texture(theme.texture_id, self.size, self.size)
            frame = self._theme_tex[theme.theme_seed].copy()
            self._paint_patches(frame, theme, t)
            return frame
        raise ValueError(f"cannot render level {level!r}")

    def _paint_patches(self, frame: np.ndarray, theme: ThemeParams, t: int) -> None:
        step = 0 if theme.static else t
        rng = np.random.Generator(np.random.PCG64(derive_seed(theme.theme_seed, "patch", step)))
        side = max(2, self.size // 6)
        for i in range(theme.n_patches):
            y = int(rng.integers(0, self.size - side))
            x = int(rng.integers(0, self.size - side))
            frame[y:y + side, x:x + side] = theme.patch_colors[i % len(theme.patch_colors)]

    def _disc(self, frame: np.ndarray, center, radius: float, color: np.ndarray) -> None:
        d = np.sqrt((self.wy - center[1]) ** 2 + (self.wx - center[0]) ** 2)
        edge = 2.0 / self.size
        alpha = np.clip((radius - d) / edge, 0.0, 1.0)[..., None]
        frame *= (1.0 - alpha)
        frame += alpha * color

    def render_continuous(self, theme: ThemeParams, level: str, pos, goal, t: int) -> np.ndarray:
        frame = self._background(theme, level, t)
        agent_color = np.asarray(theme.agent_color if level == "hard"
                                 else CANONICAL_AGENT_COLOR, dtype=np.float32)
        self._disc(frame, goal, 0.20, CANONICAL_GOAL_COLOR)
        self._disc(frame, pos, 0.15, agent_color)
        return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)

    def render_discrete(self, theme: ThemeParams, level: str, cell, goal_cell, grid: int,
                        t: int) -> np.ndarray:
        frame = self._background(theme, level, t)
        px = self.size // grid
        agent_color = np.asarray(theme.agent_color if level == "hard"
                                 else CANONICAL_AGENT_COLOR, dtype=np.float32)

        def paint(c, color):
            y0, x0 = c[0] * px, c[1] * px
            frame[y0 + 1:y0 + px - 1, x0 + 1:x0 + px - 1] = color

        paint(goal_cell, CANONICAL_GOAL_COLOR)
        paint(cell, agent_color)
        return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


class DistractionWorld:
    """Continuous point-mass or discrete grid world, observed as frame stacks."""

    def __init__(self, config: EnvConfig):
        self.cfg = config
        self._dyn = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "dynamics")))
        self._themes = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "themes")))
        self._renderer = _Renderer(config.frame_size)
        self._episode = -1
        self._done = True

    # -- episode control ----------------------------------------------------

    def reset(self) -> np.ndarray:
        self._episode += 1
        self._t = 0
        self._done = False
        theme_index = int(self._themes.integers(self.cfg.n_themes))
        seed = pool_theme_seed(self.cfg.pool, theme_index)
        if self.cfg.level == "mixed":
            self._level = ("easy", "medium", "hard")[self._episode % 3]
        else:
            self._level = self.cfg.level
        self._theme = theme_params(seed, self._level, static=self.cfg.pool == "fdd")

        if self.cfg.mode == "continuous":
            while True:
                start = self._dyn.uniform(-0.8, 0.8, size=2)
                goal = self._dyn.uniform(-0.8, 0.8, size=2)
                if np.linalg.norm(start - goal) >= 0.6:
                    break
            self._pos = start
            self._goal = goal
        else:
            g = self.cfg.grid_size
            while True:
                cell = self._dyn.integers(0, g, size=2)
                goal = self._dyn.integers(0, g, size=2)
                if np.abs(cell - goal).sum() >= max(2, g // 2):
                    break
            self._cell = cell
            self._goal_cell = goal

        frame = self._render()
        self._stack = np.stack([frame] * self.cfg.frame_stack)
        return self._stack.copy()

    def step(self, action):
        if self._done:
            raise RuntimeError("step() called after the episode ended; call reset()")
        self._t += 1
        if self.cfg.mode == "continuous":
            a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
            self._pos = np.clip(self._pos + a * SPEED, -1.0, 1.0)
            d = float(np.linalg.norm(self._pos - self._goal))
            reward = -d / DIAMETER
            if d < GOAL_RADIUS:
                reward += 1.0
                self._done = True
        else:
            a = int(action)
            if not 0 <= a < 5:
                raise ValueError(f"discrete action {a} outside 0..4")
            moves = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
            g = self.cfg.grid_size
            self._cell = np.clip(self._cell + np.array(moves[a]), 0, g - 1)
            reward = 0.0
            if np.array_equal(self._cell, self._goal_cell):
                reward = DISCRETE_GOAL_REWARD
                self._done = True
        if self._t >= self.cfg.horizon:
            self._done = True
        frame = self._render()
        self._stack = np.concatenate([self._stack[1:], frame[None]])
        return self._stack.copy(), float(reward), self._done

    def _render(self) -> np.ndarray:
        if self.cfg.mode == "continuous":
            return self._renderer.render_continuous(self._theme, self._level, self._pos,
                                                    self._goal, self._t)
        return self._renderer.render_discrete(self._theme, self._level, self._cell,
                                              self._goal_cell, self.cfg.grid_size, self._t)

    # -- privileged state for scripted controllers and oracles ---------------

    @property
    def agent_pos(self):
        return self._pos.copy() if self.cfg.mode == "continuous" else self._cell.copy()

    @property
    def goal_pos(self):
        return self._goal.copy() if self.cfg.mode == "continuous" else self._goal_cell.copy()

    @property
    def done(self) -> bool:
        return self._done


class ScriptedPolicy:
    """Near-optimal goal-seeking controller with epsilon-uniform exploration."""

    def __init__(self, mode: str, eps: float, rng: np.random.Generator):
        self.mode = mode
        self.eps = eps
        self.rng = rng

    def __call__(self, env: DistractionWorld):
        if self.mode == "continuous":
            if self.eps > 0 and self.rng.random() < self.eps:
                return self.rng.uniform(-1.0, 1.0, size=2)
            delta = env.goal_pos - env.agent_pos
            norm = float(np.linalg.norm(delta))
            return delta / norm if norm > 1e-9 else np.zeros(2)
        if self.eps > 0 and self.rng.random() < self.eps:
            return int(self.rng.integers(5))
        delta = env.goal_pos - env.agent_pos
        if np.all(delta == 0):
            return 4
        axis = 0 if abs(delta[0]) >= abs(delta[1]) else 1
        if axis == 0:
            return 0 if delta[0] < 0 else 1
        return 2 if delta[1] < 0 else 3


class RandomPolicy:
    def __init__(self, mode: str, rng: np.random.Generator):
        self.mode = mode
        self.rng = rng

    def __call__(self, env: DistractionWorld):
        if self.mode == "continuous":
            return self.rng.uniform(-1.0, 1.0, size=2)
        return int(self.rng.integers(5))


def collect_dataset(config: EnvConfig, policy, n_transitions: int,
                    config_hash: bytes = b"\0" * 32) -> PixelDataset:
    """Roll `policy` until exactly `n_transitions` records exist.

    Episodes are truncated at the horizon; the trailing episode is cut at the
    record quota. Records keep (episode_id, step_idx) so n-step samplers can
    respect episode boundaries.
    """
    env = DistractionWorld(config)
    k, size = config.frame_stack, config.frame_size
    s = np.empty((n_transitions, k, size, size, 3), dtype=np.uint8)
    s_next = np.empty_like(s)
    if config.mode == "continuous":
        action = np.empty((n_transitions, 2), dtype=np.float32)
    else:
        action = np.empty(n_transitions, dtype=np.uint32)
    reward = np.empty(n_transitions, dtype=np.float32)
    done = np.empty(n_transitions, dtype=np.uint8)
    episode_id = np.empty(n_transitions, dtype=np.uint32)
    step_idx = np.empty(n_transitions, dtype=np.uint32)

    i = 0
    episode = 0
    while i < n_transitions:
        obs = env.reset()
        t = 0
        while not env.done and i < n_transitions:
            a = policy(env)
            nxt, r, _ = env.step(a)
            s[i] = obs
            action[i] = a
            reward[i] = r
            s_next[i] = nxt
            done[i] = np.uint8(env.done)
            episode_id[i] = episode
            step_idx[i] = t
            obs = nxt
            t += 1
            i += 1
        episode += 1

    return PixelDataset(mode=config.mode, frame_size=size, frame_stack=k,
                        action_dim=config.action_dim, level=config.level, pool=config.pool,
                        augmented=False, config_hash=config_hash, s=s, action=action,
                        reward=reward, s_next=s_next, done=done, episode_id=episode_id,
                        step_idx=step_idx)


@dataclass
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray
    latents: np.ndarray | None = None


def evaluate_policy(act_fn, config: EnvConfig, n_episodes: int = 20,
                    latent_fn=None) -> EvalResult:
    """Mean/std of undiscounted returns; optionally dumps per-step latents."""
    env = DistractionWorld(config)
    returns = []
    latents = [] if latent_fn is not None else None
    for _ in range(n_episodes):
        obs = env.reset()
        total = 0.0
        while not env.done:
            if latents is not None:
                latents.append(latent_fn(obs))
            obs, r, _ = env.step(act_fn(obs))
            total += r
        returns.append(total)
    returns = np.asarray(returns, dtype=np.float64)
    stacked = np.stack(latents).astype(np.float32) if latents else None
    return EvalResult(mean=float(returns.mean()), std=float(returns.std()),
                      returns=returns, latents=stacked)


def theme_preview_grid(config: EnvConfig, levels=("none", "easy", "medium", "hard"),
                       n_themes: int | None = None) -> np.ndarray:
    """(themes*S, levels*S, 3) uint8 contact sheet for manual inspection."""
    n = n_themes or config.n_themes
    renderer = _Renderer(config.frame_size)
    rows = []
    for idx in range(n):
        seed = pool_theme_seed(config.pool, idx)
        cells = []
        for level in levels:
            theme = theme_params(seed, level, static=config.pool == "fdd")
            cells.append(renderer.render_continuous(theme, level, np.array([-0.4, -0.4]),
                                                    np.array([0.5, 0.5]), t=3))
        rows.append(np.concatenate(cells, axis=1))
    return np.concatenate(rows, axis=0)
