"""Run configuration: dataclasses, flat key=value files, hashing, seeding.

Every pipeline stage resolves the same RunConfig and stamps its SHA-256 hash
into the artifacts it writes; identical hash + root seed means identical
bytes downstream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

LEVELS = ("none", "easy", "medium", "hard", "mixed")
POOLS = ("train", "test", "fdd")
ARMS = ("baseline", "upsampled", "augmented", "ours", "ours-fdd")


def derive_seed(root: int, *tags) -> int:
    """Stable 63-bit component seed fanned out from a root seed and tags."""
    text = str(int(root)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class EnvConfig:
    mode: str = "continuous"  # continuous | discrete
    level: str = "none"
    pool: str = "train"
    frame_size: int = 48
    frame_stack: int = 3
    grid_size: int = 8
    horizon: int = 0  # 0 -> mode default (continuous 100, discrete 64)
    n_themes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("continuous", "discrete"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.level not in LEVELS:
            raise ValueError(f"unknown level {self.level!r}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")
        if self.horizon == 0:
            object.__setattr__(self, "horizon", 100 if self.mode == "continuous" else 64)

    @property
    def action_dim(self) -> int:
        """Continuous action dims, or the discrete action count."""
        return 2 if self.mode == "continuous" else 5


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "drqbc"  # drqbc | cql
    batch_size: int = 256
    lr: float = 1e-4
    n_step: int = 3
    gamma: float = 0.99
    bc_alpha: float = 2.5
    cql_alpha: float = 4.0
    target_update_every: int = 1
    target_tau: float = 0.01
    steps: int = 2000
    finetune_steps: int = 2000
    feature_dim: int = 50
    z_pi_dim: int = 32
    z_q_dim: int = 32
    hidden_dim: int = 256
    reaugment_each_batch: bool = False
    seed: int = 0

    @classmethod
    def for_algorithm(cls, algorithm: str, **overrides) -> "TrainConfig":
        """Defaults per algorithm (Supp. Tables 1-2 values, desk-scale steps)."""
        if algorithm == "drqbc":
            base = dict(algorithm="drqbc", lr=1e-4, n_step=3, batch_size=256,
                        target_update_every=1, target_tau=0.01,
                        z_pi_dim=32, z_q_dim=32)
        elif algorithm == "cql":
            base = dict(algorithm="cql", lr=5e-4, n_step=1, batch_size=256,
                        target_update_every=1000, target_tau=0.99,
                        z_pi_dim=50, z_q_dim=50, hidden_dim=256)
        else:
            raise ValueError(f"unknown algorithm {algorithm!r}")
        base.update(overrides)
        return cls(**base)

    @property
    def latent_dim(self) -> int:
        return self.z_pi_dim + self.z_q_dim


@dataclass(frozen=True)
class DenoiserConfig:
    n_layers: int = 6
    width: int = 256  # paper-fidelity: 1024
    rff_dim: int = 16
    lr: float = 3e-4
    schedule: str = "cosine"
    steps: int = 20000  # paper-fidelity: 100000
    sigma_data: float = 0.5
    p_mean: float = -1.2
    p_std: float = 1.2
    batch_small: int = 256
    batch_large: int = 1024
    large_threshold: int = 1_000_000

    def batch_for(self, dataset_size: int) -> int:
        return self.batch_small if dataset_size < self.large_threshold else self.batch_large


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 128
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    s_churn: float = 80.0
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.003
    rho: float = 7.0

    def __post_init__(self):
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment arm needs, minus the arm itself."""

    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_transitions: int = 3000
    n_fdd: int = 1200
    fdd_fraction: float = 0.05
    collect_eps: float = 0.1
    eval_episodes: int = 20
    upsample_count: int = 0  # 0 -> match the real record count (doubling)
    seed: int = 0
    paper_fidelity: bool = False

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed),
                       env=replace(self.env, seed=int(seed)),
                       train=replace(self.train, seed=int(seed)))

    def canonical(self) -> str:
        lines = []
        for section, obj in (("env", self.env), ("train", self.train),
                             ("denoiser", self.denoiser), ("sampler", self.sampler)):
            for f in fields(obj):
                lines.append(f"{section}_{f.name}={getattr(obj, f.name)!r}")
        for name in ("n_transitions", "n_fdd", "fdd_fraction", "collect_eps",
                     "eval_episodes", "upsample_count", "seed", "paper_fidelity"):
            lines.append(f"{name}={getattr(self, name)!r}")
        return "\n".join(sorted(lines)) + "\n"

    def hash_hex(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def hash_bytes(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(raw: str, kind):
    if kind is bool:
        try:
            return _BOOL[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"bad boolean {raw!r}")
    return kind(raw)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat `key = value` lines, '#' comments, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_SECTIONS = {"env": EnvConfig, "train": TrainConfig, "denoiser": DenoiserConfig,
             "sampler": SamplerConfig}


def build_run_config(kv: dict[str, str], *, seed: int | None = None,
                     paper_fidelity: bool = False) -> RunConfig:
    """Assemble a RunConfig from flat keys like env_frame_size or n_transitions."""
    section_kwargs: dict[str, dict] = {name: {} for name in _SECTIONS}
    top_kwargs: dict = {}
    top_fields = {f.name: f.type for f in fields(RunConfig)}
    for key, raw in kv.items():
        prefix, _, rest = key.partition("_")
        if prefix in _SECTIONS and rest:
            cls = _SECTIONS[prefix]
            ftypes = {f.name: f.type for f in fields(cls)}
            if rest not in ftypes:
                raise ValueError(f"unknown config key {key!r}")
            kind = {"int": int, "float": float, "str": str, "bool": bool}[ftypes[rest]]
            section_kwargs[prefix][rest] = _coerce(raw, kind)
        elif key in top_fields and key not in ("env", "train", "denoiser", "sampler"):
            kind = {"int": int, "float": float, "str": str, "bool": bool}[top_fields[key]]
            top_kwargs[key] = _coerce(raw, kind)
        else:
            raise ValueError(f"unknown config key {key!r}")

    algo = section_kwargs["train"].pop("algorithm", None)
    if algo is None:
        algo = "drqbc" if section_kwargs["env"].get("mode", "continuous") == "continuous" else "cql"
    train = TrainConfig.for_algorithm(algo, **section_kwargs["train"])
    cfg = RunConfig(env=EnvConfig(**section_kwargs["env"]), train=train,
                    denoiser=DenoiserConfig(**section_kwargs["denoiser"]),
                    sampler=SamplerConfig(**section_kwargs["sampler"]), **top_kwargs)
    if paper_fidelity:
        cfg = apply_paper_fidelity(cfg)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    else:
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def load_run_config(path, *, seed: int | None = None,
                    paper_fidelity: bool = False) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        kv = parse_config_text(f.read())
    return build_run_config(kv, seed=seed, paper_fidelity=paper_fidelity)


def apply_paper_fidelity(cfg: RunConfig) -> RunConfig:
    """Switch desk-scale defaults to the published hyperparameter tables."""
    agent_steps = 1_000_000 if cfg.train.algorithm == "drqbc" else 1_000_000
    return replace(
        cfg,
        paper_fidelity=True,
        env=replace(cfg.env, frame_size=84),
        train=replace(cfg.train, batch_size=256, steps=agent_steps,
                      finetune_steps=agent_steps),
        denoiser=replace(cfg.denoiser, width=1024, steps=100_000),
        sampler=replace(cfg.sampler, steps=128),
    )


def rng_for(cfg_seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(cfg_seed, *tags)))
