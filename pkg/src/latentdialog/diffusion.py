"""Latent diffusion: sqrt noise schedule, forward corruption, z0-predicting denoiser, sampler."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import DecoderLayer, LayerNorm, Linear, Module, key_padding_allowed, sinusoidal_embedding
from .tensor import Tensor, no_grad


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Index ``t`` runs over ``0..T``; ``alpha_bar[0] == 1`` and ``beta[0]``/``alpha[0]`` are unused."""

    T: int
    s: float
    alpha_bar: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray


def build_sqrt_schedule(T, s=1e-4):
    """``alpha_bar_t = 1 - sqrt(t/T + s)`` clipped to ``[1e-5, 1)``, with ``alpha_bar_0 = 1``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0 < s < 1:
        raise ScheduleError(f"schedule offset s must lie in (0, 1), got {s!r}")
    t = np.arange(T + 1, dtype=np.float64)
    ab = 1.0 - np.sqrt(t / T + s)
    ab = np.clip(ab, 1e-5, 1.0)
    ab[0] = 1.0
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    return NoiseSchedule(int(T), float(s), ab, beta, 1.0 - beta)


def _check_t(t, schedule):
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timesteps must lie in [1, {schedule.T}]")
    return t


def q_sample(z0, t, eps, schedule):
    """``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` row-wise; accepts a Tensor or an array for ``z0``."""
    t = _check_t(t, schedule)
    z0d = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    eps = np.asarray(eps, dtype=z0d.dtype)
    if eps.shape != z0d.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0d.shape}")
    ab = schedule.alpha_bar[t].reshape((-1,) + (1,) * (z0d.ndim - 1)) if t.ndim else schedule.alpha_bar[t]
    a = np.broadcast_to(np.sqrt(ab), z0d.shape).astype(z0d.dtype)
    c = (np.sqrt(1.0 - ab) * eps).astype(z0d.dtype)
    if isinstance(z0, Tensor):
        return z0 * Tensor(a) + Tensor(c)
    return a * z0d + c


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    layers: int = 2
    time_dim: int = 128
    dropout: float = 0.0
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)


class Denoiser(Module):
    """Predicts ``z0`` from ``(z_t, t)`` with cross-attention over the context states.

    The input is a single position: ``in_proj(z_t) + time_proj(sinusoid(t))``.
    """

    def __init__(self, cfg: DenoiserConfig, d_latent, rng, d_context=None):
        self.cfg = cfg
        dt = np.dtype(cfg.dtype)
        d = cfg.d_model
        self.in_proj = Linear(d_latent, d, rng, dt)
        self.time_proj = Linear(cfg.time_dim, d, rng, dt)
        self.layers = [DecoderLayer(d, cfg.n_heads, cfg.d_ff, rng, dt, d_cross=d_context, p_drop=cfg.dropout) for _ in range(cfg.layers)]
        self.ln = LayerNorm(d, dt)
        self.out_proj = Linear(d, d_latent, rng, dt)

    def __call__(self, z_t, t, h_c, ctx_mask):
        zt = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t))
        b = zt.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        temb = Tensor(sinusoidal_embedding(t, self.cfg.time_dim).astype(zt.dtype))
        x = (self.in_proj(zt) + self.time_proj(temb)).reshape(b, 1, self.cfg.d_model)
        h_c = getattr(h_c, "h", h_c)
        if not isinstance(h_c, Tensor):
            h_c = Tensor(np.asarray(h_c, dtype=zt.dtype))
        cross = key_padding_allowed(ctx_mask)
        for layer in self.layers:
            x = layer(x, None, h_c, cross)
        return self.out_proj(self.ln(x).reshape(b, self.cfg.d_model))


def denoise(denoiser, z_t, t, h_c, mask):
    return denoiser(z_t, t, h_c, mask)


def ld_loss(z0_pred, z0):
    """Mean squared error over latent dimensions and batch."""
    diff = z0_pred - z0
    return T.mean(diff * diff)


def sampling_timesteps(T_, n_steps):
    """Decreasing, deduplicated, evenly spaced integers from ``T`` down to 1 (``T`` always included)."""
    if not 1 <= n_steps <= T_:
        raise ScheduleError(f"n_steps must lie in [1, {T_}], got {n_steps}")
    ts = np.round(np.linspace(T_, 1, n_steps)).astype(np.int64)
    return np.unique(ts)[::-1]


def sample_latent(denoiser, h_c, mask, schedule, n_steps, eta=0.0, seed=0, on_step=None):
    """Iterative denoising from Gaussian noise to a clean latent per row of ``h_c``.

    ``seed`` is an int (shared by all rows, drawn as one block) or a sequence
    with one seed per row. At each visited step ``t`` with successor ``t'``::

        z0 = denoiser(z_t, t)
        eps_hat = (z_t - sqrt(ab_t) z0) / sqrt(1 - ab_t)
        z_t' = sqrt(ab_t') z0 + sqrt(1 - ab_t') (sqrt(1 - eta^2) eps_hat + eta eps)

    ``eta=0`` is deterministic DDIM; ``eta=1`` re-noises with fresh ``eps``
    at every step. After the last visited step the prediction itself is
    returned (``ab_0 = 1``).
    """
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    ts = sampling_timesteps(schedule.T, n_steps)
    hd = getattr(h_c, "h", h_c)
    b = hd.shape[0]
    d = denoiser.out_proj.weight.shape[1]
    dtype = denoiser.out_proj.weight.dtype
    if np.ndim(seed) == 0:
        gens = [np.random.default_rng(int(seed))]
        z = gens[0].standard_normal((b, d))
    else:
        seeds = list(seed)
        if len(seeds) != b:
            raise ValueError(f"{len(seeds)} seeds for {b} rows")
        gens = [np.random.default_rng(int(s)) for s in seeds]
        z = np.stack([g.standard_normal(d) for g in gens])
    z = z.astype(dtype)
    ab = schedule.alpha_bar
    z0 = None
    with no_grad():
        for i, t in enumerate(ts):
            z0 = denoiser(Tensor(z), np.full(b, t), hd, mask).data
            if on_step is not None:
                on_step(int(t), z0)
            if i == len(ts) - 1:
                break
            t_next = ts[i + 1]
            eps_hat = (z - np.sqrt(ab[t]) * z0) / np.sqrt(1.0 - ab[t])
            if eta > 0:
                if len(gens) == 1:
                    fresh = gens[0].standard_normal((b, d))
                else:
                    fresh = np.stack([g.standard_normal(d) for g in gens])
                noise = np.sqrt(1.0 - eta * eta) * eps_hat + eta * fresh
            else:
                noise = eps_hat
            z = (np.sqrt(ab[t_next]) * z0 + np.sqrt(1.0 - ab[t_next]) * noise).astype(dtype)
    return z0
