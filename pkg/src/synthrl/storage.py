"""Binary dataset containers.

Pixel transitions live in "SRPX" files, latent transitions in "SRLT" files.
All integers and floats are little-endian, headers fixed-width, payloads raw
float32/uint8 — byte-identical files given identical contents.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import LEVELS, POOLS

PIXEL_MAGIC = b"SRPX"
LATENT_MAGIC = b"SRLT"
VERSION = 1

PROV_REAL = 0
PROV_SYNTHETIC = 1
PROV_FDD = 2

MODE_IDS = {"continuous": 0, "discrete": 1}
MODE_NAMES = {v: k for k, v in MODE_IDS.items()}


class StorageError(ValueError):
    """Header or payload validation failure; `field` names the offender."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class LineageError(StorageError):
    """Input artifact belongs to a different config/agent lineage."""


def _read_exact(f, n, field_name):
    data = f.read(n)
    if len(data) != n:
        raise StorageError(field_name, f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


# ------------------------------------------------------------------ pixel IO

@dataclass
class PixelDataset:
    """In-memory pixel transition dataset.

    Frames are uint8 (N, k, H, W, 3); actions are float32 (N, adim) in
    continuous mode or uint32 (N,) discrete indices. episode_id/step_idx let
    samplers rebuild n-step slices without crossing episode or mix boundaries.
    """

    mode: str
    frame_size: int
    frame_stack: int
    action_dim: int
    level: str
    pool: str
    augmented: bool
    config_hash: bytes
    s: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    episode_id: np.ndarray
    step_idx: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.provenance is None:
            self.provenance = np.full(len(self.reward), PROV_REAL, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.reward.shape[0])

    def validate(self) -> None:
        n = len(self)
        hw = (self.frame_stack, self.frame_size, self.frame_size, 3)
        for name, arr, shape in (("s", self.s, (n, *hw)), ("s_next", self.s_next, (n, *hw))):
            if arr.shape != shape:
                raise StorageError(name, f"shape {arr.shape} != {shape}")
        if not np.all(np.isfinite(self.reward)):
            raise StorageError("reward", "non-finite rewards")
        if self.mode == "discrete" and self.action.size and self.action.max() >= self.action_dim:
            raise StorageError("action", "discrete action out of range")


def write_pixel_dataset(path, ds: PixelDataset) -> None:
    ds.validate()
    n = len(ds)
    with open(path, "wb") as f:
        f.write(PIXEL_MAGIC)
        f.write(struct.pack("<9I", VERSION, MODE_IDS[ds.mode], ds.frame_size, ds.frame_size,
                            3, ds.frame_stack, ds.action_dim, n, int(ds.augmented)))
        f.write(struct.pack("<2I", LEVELS.index(ds.level), POOLS.index(ds.pool)))
        f.write(ds.config_hash.ljust(32, b"\0")[:32])
        f.write(np.ascontiguousarray(ds.provenance, dtype="<u1").tobytes())
        f.write(np.ascontiguousarray(ds.episode_id, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(ds.step_idx, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(ds.s, dtype="<u1").tobytes())
        if ds.mode == "continuous":
            f.write(np.ascontiguousarray(ds.action, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(ds.action, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(ds.reward, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.done, dtype="<u1").tobytes())
        f.write(np.ascontiguousarray(ds.s_next, dtype="<u1").tobytes())


def read_pixel_dataset(path) -> PixelDataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != PIXEL_MAGIC:
            raise StorageError("magic", f"{path} is not an SRPX file")
        (version, mode_id, h, w, c, k, adim, n, augmented) = struct.unpack(
            "<9I", _read_exact(f, 36, "header"))
        if version != VERSION:
            raise StorageError("version", f"unsupported version {version}")
        if mode_id not in MODE_NAMES:
            raise StorageError("mode", f"unknown mode id {mode_id}")
        if c != 3:
            raise StorageError("channels", f"expected 3 channels, got {c}")
        level_id, pool_id = struct.unpack("<2I", _read_exact(f, 8, "header"))
        if level_id >= len(LEVELS):
            raise StorageError("level", f"unknown level id {level_id}")
        if pool_id >= len(POOLS):
            raise StorageError("pool", f"unknown pool id {pool_id}")
        config_hash = _read_exact(f, 32, "config_hash")
        mode = MODE_NAMES[mode_id]
        prov = np.frombuffer(_read_exact(f, n, "provenance"), dtype="<u1").copy()
        episode_id = np.frombuffer(_read_exact(f, 4 * n, "episode_id"), dtype="<u4").copy()
        step_idx = np.frombuffer(_read_exact(f, 4 * n, "step_idx"), dtype="<u4").copy()
        frame_bytes = n * k * h * w * 3
        s = np.frombuffer(_read_exact(f, frame_bytes, "s"), dtype="<u1").reshape(n, k, h, w, 3).copy()
        if mode == "continuous":
            action = np.frombuffer(_read_exact(f, 4 * n * adim, "action"),
                                   dtype="<f4").reshape(n, adim).copy()
        else:
            action = np.frombuffer(_read_exact(f, 4 * n, "action"), dtype="<u4").copy()
        reward = np.frombuffer(_read_exact(f, 4 * n, "reward"), dtype="<f4").copy()
        done = np.frombuffer(_read_exact(f, n, "done"), dtype="<u1").copy()
        s_next = np.frombuffer(_read_exact(f, frame_bytes, "s_next"),
                               dtype="<u1").reshape(n, k, h, w, 3).copy()
        if f.read(1):
            raise StorageError("count", "payload longer than declared count")
    ds = PixelDataset(mode=mode, frame_size=h, frame_stack=k, action_dim=adim,
                      level=LEVELS[level_id], pool=POOLS[pool_id], augmented=bool(augmented),
                      config_hash=config_hash, s=s, action=action, reward=reward,
                      s_next=s_next, done=done, episode_id=episode_id, step_idx=step_idx,
                      provenance=prov)
    ds.validate()
    return ds


# ----------------------------------------------------------------- latent IO

@dataclass
class NormStats:
    """Per-dimension standardization stats over flattened diffusion vectors.

    Dimensions whose raw std falls below 1e-6 are marked constant and pass
    through unscaled (std stored as 1).
    """

    mean: np.ndarray
    std: np.ndarray
    const_mask: np.ndarray

    EPS = 1e-6

    @classmethod
    def fit(cls, x: np.ndarray) -> "NormStats":
        mean = x.mean(axis=0, dtype=np.float64)
        std = x.std(axis=0, dtype=np.float64)
        const = std < cls.EPS
        std = np.where(const, 1.0, std)
        return cls(mean=mean, std=std, const_mask=const)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return (x.astype(np.float64) * self.std + self.mean).astype(np.float32)


@dataclass
class LatentDataset:
    """(z, a, r, z') records plus provenance and the extracting agent's hash."""

    mode: str
    z_pi_dim: int
    z_q_dim: int
    action_dim: int
    config_hash: bytes
    checkpoint_hash: bytes
    z: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    z_next: np.ndarray
    done: np.ndarray
    provenance: np.ndarray
    norm: NormStats | None = None

    @property
    def latent_dim(self) -> int:
        return self.z_pi_dim + self.z_q_dim

    def __len__(self) -> int:
        return int(self.reward.shape[0])

    def provenance_counts(self) -> dict[str, int]:
        return {"real": int(np.sum(self.provenance == PROV_REAL)),
                "synthetic": int(np.sum(self.provenance == PROV_SYNTHETIC)),
                "fdd": int(np.sum(self.provenance == PROV_FDD))}

    def validate(self) -> None:
        n = len(self)
        if self.z.shape != (n, self.latent_dim):
            raise StorageError("z", f"shape {self.z.shape} != {(n, self.latent_dim)}")
        if self.z_next.shape != (n, self.latent_dim):
            raise StorageError("z_next", f"shape {self.z_next.shape}")
        if not (np.all(np.isfinite(self.z)) and np.all(np.isfinite(self.z_next))):
            raise StorageError("z", "non-finite latents")
        counts = self.provenance_counts()
        if sum(counts.values()) != n:
            raise StorageError("provenance", "unknown provenance codes present")


def write_latent_dataset(path, ds: LatentDataset) -> None:
    ds.validate()
    n = len(ds)
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<6I", VERSION, MODE_IDS[ds.mode], ds.z_pi_dim, ds.z_q_dim,
                            ds.action_dim, n))
        f.write(ds.config_hash.ljust(32, b"\0")[:32])
        f.write(ds.checkpoint_hash.ljust(32, b"\0")[:32])
        if ds.norm is None:
            f.write(struct.pack("<2I", 0, 0))
        else:
            flat = ds.norm.mean.shape[0]
            f.write(struct.pack("<2I", 1, flat))
            f.write(np.ascontiguousarray(ds.norm.mean, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(ds.norm.std, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(ds.norm.const_mask, dtype="<u1").tobytes())
        f.write(np.ascontiguousarray(ds.provenance, dtype="<u1").tobytes())
        f.write(np.ascontiguousarray(ds.z, dtype="<f4").tobytes())
        if ds.mode == "continuous":
            f.write(np.ascontiguousarray(ds.action, dtype="<f4").tobytes())
        else:
            f.write(np.ascontiguousarray(ds.action, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(ds.reward, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.z_next, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ds.done, dtype="<u1").tobytes())


def read_latent_dataset(path) -> LatentDataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != LATENT_MAGIC:
            raise StorageError("magic", f"{path} is not an SRLT file")
        version, mode_id, zpi, zq, adim, n = struct.unpack("<6I", _read_exact(f, 24, "header"))
        if version != VERSION:
            raise StorageError("version", f"unsupported version {version}")
        if mode_id not in MODE_NAMES:
            raise StorageError("mode", f"unknown mode id {mode_id}")
        mode = MODE_NAMES[mode_id]
        config_hash = _read_exact(f, 32, "config_hash")
        checkpoint_hash = _read_exact(f, 32, "checkpoint_hash")
        has_norm, flat = struct.unpack("<2I", _read_exact(f, 8, "norm"))
        norm = None
        if has_norm:
            mean = np.frombuffer(_read_exact(f, 8 * flat, "norm.mean"), dtype="<f8").copy()
            std = np.frombuffer(_read_exact(f, 8 * flat, "norm.std"), dtype="<f8").copy()
            const = np.frombuffer(_read_exact(f, flat, "norm.const"), dtype="<u1").astype(bool)
            norm = NormStats(mean=mean, std=std, const_mask=const)
        d = zpi + zq
        prov = np.frombuffer(_read_exact(f, n, "provenance"), dtype="<u1").copy()
        z = np.frombuffer(_read_exact(f, 4 * n * d, "z"), dtype="<f4").reshape(n, d).copy()
        if mode == "continuous":
            action = np.frombuffer(_read_exact(f, 4 * n * adim, "action"),
                                   dtype="<f4").reshape(n, adim).copy()
        else:
            action = np.frombuffer(_read_exact(f, 4 * n, "action"), dtype="<u4").copy()
        reward = np.frombuffer(_read_exact(f, 4 * n, "reward"), dtype="<f4").copy()
        z_next = np.frombuffer(_read_exact(f, 4 * n * d, "z_next"),
                               dtype="<f4").reshape(n, d).copy()
        done = np.frombuffer(_read_exact(f, n, "done"), dtype="<u1").copy()
        if f.read(1):
            raise StorageError("count", "payload longer than declared count")
    ds = LatentDataset(mode=mode, z_pi_dim=zpi, z_q_dim=zq, action_dim=adim,
                       config_hash=config_hash, checkpoint_hash=checkpoint_hash, z=z,
                       action=action, reward=reward, z_next=z_next, done=done,
                       provenance=prov, norm=norm)
    ds.validate()
    return ds


def check_lineage(field_name: str, expected: bytes, actual: bytes) -> None:
    if expected != actual:
        raise LineageError(field_name,
                           f"expected {expected.hex()[:16]}..., got {actual.hex()[:16]}...")
