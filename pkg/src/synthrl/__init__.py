"""synthrl: augment offline pixel datasets, upsample latent transitions with a
diffusion model, and fine-tune offline RL agents on the union — plus the
DistractionWorld benchmark and divergence diagnostics used to measure the
generalization gap."""

__version__ = "0.1.0"
