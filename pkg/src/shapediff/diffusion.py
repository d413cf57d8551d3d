"""DDPM machinery in the x0-parameterization.

The denoiser predicts the clean latent directly; training minimizes the
element-mean squared error between prediction and z0. Sampling walks a
strided descending timestep subsequence with the generalized posterior
q(z_s | z_t, z0) for non-adjacent s < t, clamping the predicted z0 each
step. Timesteps are 1-indexed: alpha_bar[t-1] belongs to step t.
"""

from __future__ import annotations

import math

import numpy as np

from . import numcore as nc
from .numcore import Rng, Tensor

__all__ = [
    "NoiseSchedule",
    "forward_noise",
    "training_loss",
    "batch_loss",
    "strided_timesteps",
    "sample",
    "sdedit_sample",
    "cfg_combine",
    "c_clip_for",
]


class NoiseSchedule:
    """Linear beta schedule; defaults T=128, beta 1e-4 -> 0.02."""

    def __init__(self, t_max: int = 128, beta_min: float = 1e-4, beta_max: float = 0.02):
        if not (0.0 < beta_min < beta_max < 1.0):
            raise ValueError("betas must satisfy 0 < beta_min < beta_max < 1")
        self.t_max = t_max
        self.betas = np.linspace(beta_min, beta_max, t_max, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.t_max):
            raise ValueError(f"timestep out of [1, {self.t_max}]")
        return self.alpha_bars[t - 1]


def forward_noise(sched: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t may be per-item."""
    ab = sched.alpha_bar(t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(z0) - np.ndim(ab)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def batch_loss(model, sched: NoiseSchedule, z0: np.ndarray, prompts: list[str],
               z_c: np.ndarray | None, t: np.ndarray, eps: np.ndarray) -> Tensor:
    """Loss at explicit (t, eps): mean over all elements of (M(...) - z0)^2."""
    z_t = forward_noise(sched, z0, t, eps)
    pred = model.forward(z_t, t, prompts, z_c)
    diff = pred - Tensor(np.asarray(z0, dtype=pred.data.dtype))
    return nc.tmean(diff * diff)


def training_loss(model, sched: NoiseSchedule, z0: np.ndarray, prompts: list[str],
                  z_c: np.ndarray | None, rng: Rng) -> Tensor:
    """Draw (t, eps) from rng and evaluate batch_loss."""
    b = len(prompts)
    t = rng.integers(1, sched.t_max + 1, (b,))
    eps = rng.normal(np.shape(z0))
    return batch_loss(model, sched, z0, prompts, z_c, t, eps)


def strided_timesteps(sched: NoiseSchedule, n_steps: int) -> np.ndarray:
    """n_steps timesteps, evenly spaced, strictly decreasing from T to 1."""
    if n_steps < 1 or n_steps > sched.t_max:
        raise ValueError("steps exceed schedule")
    if n_steps == 1:
        return np.array([sched.t_max], dtype=np.int64)
    ts = np.round(np.linspace(sched.t_max, 1, n_steps)).astype(np.int64)
    return ts


def cfg_combine(z0_cond: np.ndarray, z0_uncond: np.ndarray, scale: float) -> np.ndarray:
    return z0_uncond + scale * (z0_cond - z0_uncond)


def c_clip_for(latents: np.ndarray) -> float:
    """Sampler clamp: three standard deviations of the training latents."""
    return 3.0 * float(np.std(np.asarray(latents, dtype=np.float64)))


def _predict_z0(model, sched, z, t, prompts, z_c, cfg_scale, c_clip):
    t_vec = np.full(z.shape[0], t, dtype=np.int64)
    with nc.no_grad():
        pred = model.forward(z, t_vec, prompts, z_c).data
        if cfg_scale != 1.0:
            un = model.forward(z, t_vec, [""] * z.shape[0], z_c).data
            pred = cfg_combine(pred, un, cfg_scale)
    if c_clip is not None:
        pred = np.clip(pred, -c_clip, c_clip)
    return pred.astype(np.float64)


def _noise(rngs: list[Rng], shape_one: tuple) -> np.ndarray:
    # one stream per item so results do not depend on batch composition
    return np.stack([r.normal(shape_one, dtype=np.float64) for r in rngs])


def _denoise_from(model, sched, z, ts, prompts, z_c, cfg_scale, rngs, c_clip):
    for k, t in enumerate(ts):
        z0_hat = _predict_z0(model, sched, z, int(t), prompts, z_c, cfg_scale, c_clip)
        if k + 1 == len(ts):
            return z0_hat
        s = int(ts[k + 1])
        ab_t = float(sched.alpha_bar(int(t)))
        ab_s = float(sched.alpha_bar(s))
        a_ts = ab_t / ab_s
        mean = (math.sqrt(a_ts) * (1.0 - ab_s) * z
                + math.sqrt(ab_s) * (1.0 - a_ts) * z0_hat) / (1.0 - ab_t)
        var = (1.0 - ab_s) * (1.0 - a_ts) / (1.0 - ab_t)
        z = mean + math.sqrt(var) * _noise(rngs, z.shape[1:])
    return z0_hat


def sample(model, sched: NoiseSchedule, prompts: list[str], z_c: np.ndarray | None,
           rngs: list[Rng], n_steps: int = 64, cfg_scale: float = 1.0,
           c_clip: float | None = None) -> np.ndarray:
    """Generate latents from pure noise; returns (B, S, D) float64.

    rngs supplies one stream per batch item (len(rngs) == len(prompts)).
    """
    if len(rngs) != len(prompts):
        raise ValueError("need one rng per prompt")
    ts = strided_timesteps(sched, n_steps)
    cfg = model.config
    z = _noise(rngs, (cfg.s_latent, cfg.d_model))
    return _denoise_from(model, sched, z, ts, prompts, z_c, cfg_scale, rngs, c_clip)


def sdedit_sample(model, sched: NoiseSchedule, z_c: np.ndarray, prompts: list[str],
                  rngs: list[Rng], strength: float = 0.6, n_steps: int = 64,
                  cfg_scale: float = 1.0, c_clip: float | None = None) -> np.ndarray:
    """Partially noise the guidance latent and denoise it with the text-only
    model; the guidance enters only through the initialization."""
    if not (0.0 < strength <= 1.0):
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    if len(rngs) != len(prompts):
        raise ValueError("need one rng per prompt")
    t0 = max(1, int(round(strength * sched.t_max)))
    eps = _noise(rngs, np.shape(z_c)[1:])
    z = forward_noise(sched, np.asarray(z_c, dtype=np.float64), t0, eps)
    n = min(n_steps, t0)
    if n == 1:
        ts = np.array([t0], dtype=np.int64)
    else:
        ts = np.round(np.linspace(t0, 1, n)).astype(np.int64)
    return _denoise_from(model, sched, z, ts, prompts, None, cfg_scale, rngs, c_clip)
