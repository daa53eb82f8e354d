"""Elucidated diffusion on flattened latent transitions.

Residual-MLP denoiser conditioned through an RFF embedding of the noise
level, preconditioned the EDM way (sigma_data = 0.5), trained with the
weighted L2 denoising objective on standardized vectors, and sampled with the
stochastic churn sampler. Constants the source benchmark defers to its
reference are pinned here so the artifact stands alone.
"""

from __future__ import annotations

import json
import logging
import time

import numpy as np

from . import nn
from .config import DenoiserConfig, SamplerConfig
from .latents import flat_dim, flatten_records, normalize_dataset, unflatten_records
from .storage import LatentDataset, NormStats

logger = logging.getLogger(__name__)


def edm_coeffs(sigma: np.ndarray, sigma_data: float):
    """Preconditioning coefficients (c_skip, c_out, c_in, c_noise)."""
    s2 = sigma ** 2
    d2 = sigma_data ** 2
    c_skip = d2 / (s2 + d2)
    c_out = sigma * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma: np.ndarray, sigma_data: float) -> np.ndarray:
    """EDM weighting (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2 = 1/c_out^2."""
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


class DiffusionModel:
    """Denoiser network + frozen RFF frequencies + normalization reference."""

    def __init__(self, data_dim: int, cfg: DenoiserConfig, sampler_cfg: SamplerConfig,
                 seed: int, *, dtype=np.float32, norm: NormStats | None = None,
                 layout: dict | None = None, checkpoint_hash: bytes = b"\0" * 32):
        self.data_dim = data_dim
        self.cfg = cfg
        self.sampler_cfg = sampler_cfg
        self.dtype = dtype
        self.norm = norm
        self.layout = layout or {}
        self.checkpoint_hash = checkpoint_hash
        rng = np.random.Generator(np.random.PCG64(seed))
        self.freqs = nn.rff_frequencies(rng, cfg.rff_dim, dtype=dtype)
        in_dim = data_dim + 2 * cfg.rff_dim
        self.in_proj = nn.Dense("denoiser.in", in_dim, cfg.width, rng=rng, dtype=dtype)
        self.blocks = [nn.ResidualBlock(f"denoiser.rb{i}", cfg.width, rng=rng, dtype=dtype)
                       for i in range(cfg.n_layers)]
        self.out_proj = nn.Dense("denoiser.out", cfg.width, data_dim, rng=rng, dtype=dtype)

    def params(self) -> list[nn.Param]:
        out = self.in_proj.params()
        for b in self.blocks:
            out += b.params()
        return out + self.out_proj.params()

    def all_named_arrays(self) -> list[nn.Param]:
        freq_param = nn.Param("denoiser.rff_freqs", self.freqs)
        return self.params() + [freq_param]

    def _net_forward(self, xin: np.ndarray) -> np.ndarray:
        h = self.in_proj.forward(xin)
        for b in self.blocks:
            h = b.forward(h)
        return self.out_proj.forward(h)

    def _net_backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.out_proj.backward(grad)
        for b in reversed(self.blocks):
            g = b.backward(g)
        return self.in_proj.backward(g)

    def denoise(self, x: np.ndarray, sigma, *, _cache: bool = False) -> np.ndarray:
        """EDM-preconditioned denoiser output D(x; sigma)."""
        sig = np.broadcast_to(np.asarray(sigma, dtype=self.dtype), (x.shape[0],))
        lo, hi = self.sampler_cfg.sigma_min, self.sampler_cfg.sigma_max
        if np.any(sig < lo) or np.any(sig > hi * (1.0 + 1e-6)):
            raise ValueError(f"sigma outside [{lo}, {hi}]")
        c_skip, c_out, c_in, _ = edm_coeffs(sig.astype(self.dtype), self.cfg.sigma_data)
        emb = nn.rff_embed(sig, self.freqs)
        xin = np.concatenate([c_in[:, None] * x, emb], axis=1)
        f_out = self._net_forward(xin)
        if _cache:
            self._c_out = c_out
        return c_skip[:, None] * x + c_out[:, None] * f_out

    def backward_from_denoised(self, g_denoised: np.ndarray) -> None:
        """Push dLoss/dD through the network (x treated as constant)."""
        self._net_backward(self._c_out[:, None] * g_denoised)


def training_loss(model: DiffusionModel, x_clean: np.ndarray, rng: np.random.Generator,
                  *, backprop: bool = False) -> float:
    """Weighted L2 denoising objective on a clean (normalized) batch.

    Per-item sigma is log-normal exp(N(p_mean, p_std^2)), clipped into the
    sampler's sigma range so the denoiser's domain contract holds.
    """
    cfg = model.cfg
    b, n = x_clean.shape
    sigma = np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(b))
    sigma = np.clip(sigma, model.sampler_cfg.sigma_min, model.sampler_cfg.sigma_max)
    sigma = sigma.astype(model.dtype)
    noise = rng.standard_normal((b, n)).astype(model.dtype) * sigma[:, None]
    weight = loss_weight(sigma, cfg.sigma_data)
    denoised = model.denoise(x_clean + noise, sigma, _cache=backprop)
    resid = denoised - x_clean
    loss = float(np.mean(weight[:, None] * resid ** 2))
    if backprop:
        model.backward_from_denoised((2.0 / (b * n)) * weight[:, None] * resid)
    return loss


def karras_sigma_steps(cfg: SamplerConfig) -> np.ndarray:
    """Descending noise schedule with rho-warped interpolation plus final 0."""
    if cfg.steps < 2:
        raise ValueError("need at least 2 sampler steps")
    i = np.arange(cfg.steps, dtype=np.float64)
    inv_rho = 1.0 / cfg.rho
    sig = (cfg.sigma_max ** inv_rho
           + i / (cfg.steps - 1) * (cfg.sigma_min ** inv_rho - cfg.sigma_max ** inv_rho)
           ) ** cfg.rho
    return np.concatenate([sig, [0.0]])


def churn_gamma(sigma: float, cfg: SamplerConfig) -> float:
    """Per-step noise-injection factor; active only inside [s_tmin, s_tmax]."""
    if cfg.s_churn > 0 and cfg.s_tmin <= sigma <= cfg.s_tmax:
        return min(cfg.s_churn / cfg.steps, np.sqrt(2.0) - 1.0)
    return 0.0


def sde_sample(model: DiffusionModel, n: int, seed: int, *, chunk: int = 8192,
               denormalize: bool = True) -> np.ndarray:
    """Stochastic sampler with Heun correction; deterministic in (model, seed, n).

    Chunks draw from seeds spawned off the root SeedSequence, so sampling is
    parallelizable across chunks without changing the stream.
    """
    cfg = model.sampler_cfg
    sigmas = karras_sigma_steps(cfg)
    n_chunks = max(1, (n + chunk - 1) // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    outs = []
    done = 0
    for child in children:
        m = min(chunk, n - done)
        done += m
        rng = np.random.Generator(np.random.PCG64(child))
        x = rng.standard_normal((m, model.data_dim)).astype(model.dtype) * model.dtype(sigmas[0])
        for i in range(cfg.steps):
            s, s_next = float(sigmas[i]), float(sigmas[i + 1])
            gamma = churn_gamma(s, cfg)
            s_hat = s * (1.0 + gamma)
            if gamma > 0:
                eps = rng.standard_normal(x.shape).astype(model.dtype)
                x = x + np.sqrt(s_hat ** 2 - s ** 2) * cfg.s_noise * eps
            d = (x - model.denoise(x, s_hat)) / s_hat
            x_next = x + (s_next - s_hat) * d
            if s_next > 0:
                d2 = (x_next - model.denoise(x_next, s_next)) / s_next
                x_next = x + (s_next - s_hat) * 0.5 * (d + d2)
            x = x_next
            if not np.all(np.isfinite(x)):
                raise RuntimeError(f"non-finite sample values at sampler step {i}")
        outs.append(x)
    samples = np.concatenate(outs)[:n]
    if denormalize and model.norm is not None:
        samples = model.norm.denormalize(samples)
    return samples


def train_diffusion(latents: LatentDataset, cfg: DenoiserConfig,
                    sampler_cfg: SamplerConfig, seed: int, *,
                    log_path=None) -> DiffusionModel:
    """Adam + cosine annealing on normalized real records; the batch-size rule
    switches on dataset size."""
    import csv

    x_all, stats = normalize_dataset(latents)
    real = x_all[latents.provenance == 0]
    batch = cfg.batch_for(len(real))
    layout = {"mode": latents.mode, "z_pi_dim": latents.z_pi_dim,
              "z_q_dim": latents.z_q_dim, "action_dim": latents.action_dim}
    model = DiffusionModel(real.shape[1], cfg, sampler_cfg, seed, norm=stats,
                           layout=layout, checkpoint_hash=latents.checkpoint_hash)
    opt = nn.Adam(model.params())
    sched = nn.LRSchedule(cfg.lr, cfg.steps, kind=cfg.schedule)
    rng = np.random.Generator(np.random.PCG64(seed))

    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(["step", "loss", "lr", "wall"])
    t0 = time.perf_counter()

    snap_every = max(1, cfg.steps // 10)
    snap = [p.value.copy() for p in model.params()]
    try:
        for step in range(cfg.steps):
            idx = rng.integers(0, len(real), size=batch)
            opt.zero_grad()
            loss = training_loss(model, real[idx], rng, backprop=True)
            lr = nn.cosine_lr(step, sched)
            opt.step(lr)
            if writer and (step % 50 == 0 or step == cfg.steps - 1):
                writer.writerow([step, f"{loss:.6f}", f"{lr:.6g}",
                                 f"{time.perf_counter() - t0:.3f}"])
            if (step + 1) % snap_every == 0:
                snap = [p.value.copy() for p in model.params()]
    except nn.TrainingDiverged as exc:
        logger.warning("diffusion training aborted (%s); restoring last checkpoint", exc)
        for p, v in zip(model.params(), snap):
            p.value[...] = v
    finally:
        if log_file:
            log_file.close()
    return model


def upsample(latents: LatentDataset, model: DiffusionModel, count: int,
             seed: int) -> LatentDataset:
    """Draw `count` synthetic latent transitions; records carry synthetic
    provenance and the source checkpoint hash."""
    like = latents
    if model.norm is None:
        raise ValueError("model has no normalization stats; train before sampling")
    expected = flat_dim(like.latent_dim, like.action_dim)
    if model.data_dim != expected:
        raise ValueError(f"model dim {model.data_dim} != layout dim {expected}")
    if count == 0:
        return unflatten_records(np.zeros((0, model.data_dim), dtype=np.float32), like)
    x = sde_sample(model, count, seed)
    return unflatten_records(x, like)


# ---------------------------------------------------------------- model files

def save_diffusion_model(prefix, model: DiffusionModel, config_hash_hex: str = "") -> None:
    nn.save_params(str(prefix) + ".srnn", model.all_named_arrays())
    meta = {
        "data_dim": model.data_dim,
        "denoiser": model.cfg.__dict__,
        "sampler": model.sampler_cfg.__dict__,
        "layout": model.layout,
        "checkpoint_hash": model.checkpoint_hash.hex(),
        "config_hash": config_hash_hex,
        "norm": None if model.norm is None else {
            "mean": model.norm.mean.tolist(),
            "std": model.norm.std.tolist(),
            "const_mask": model.norm.const_mask.astype(int).tolist(),
        },
    }
    with open(str(prefix) + ".json", "w", encoding="utf-8") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def load_diffusion_model(prefix) -> DiffusionModel:
    with open(str(prefix) + ".json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    norm = None
    if meta["norm"] is not None:
        norm = NormStats(mean=np.array(meta["norm"]["mean"], dtype=np.float64),
                         std=np.array(meta["norm"]["std"], dtype=np.float64),
                         const_mask=np.array(meta["norm"]["const_mask"], dtype=bool))
    model = DiffusionModel(meta["data_dim"], DenoiserConfig(**meta["denoiser"]),
                           SamplerConfig(**meta["sampler"]), seed=0, norm=norm,
                           layout=meta["layout"],
                           checkpoint_hash=bytes.fromhex(meta["checkpoint_hash"]))
    nn.load_params(str(prefix) + ".srnn", model.all_named_arrays())
    return model
