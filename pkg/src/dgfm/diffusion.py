"""Noise schedule, forward process, training objective, and guided sampling.

The denoiser predicts the clean sample directly (x0 parameterization); the
reverse loop resamples from the DDPM posterior at every step.  All diffusion
math happens in z-scored pose space; the kinematic losses denormalize first
so the FK terms act in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .motion import CONTACT_SLICE, POSE_DIM, SkeletonDef, fk

CLIP_BOUND = 5.0  # sampling-time clamp on normalized pose values


class DiffusionError(Exception):
    pass


@dataclass
class DiffusionSchedule:
    T: int
    beta: np.ndarray       # (T,), beta[t-1] is the step-t value
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        if np.any(self.alpha_bar <= 0) or np.any(self.alpha_bar >= 1):
            raise DiffusionError("alpha_bar values must lie in (0, 1)")

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return t

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t) - 1])

    def alpha_bar_prev(self, t: int) -> float:
        self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])


def make_schedule(T: int = 1000, kind: str = "cosine") -> DiffusionSchedule:
    """Cosine schedule; betas are clipped and alpha_bar rebuilt from them."""
    if T < 2:
        raise DiffusionError(f"schedule needs T >= 2, got {T}")
    if kind != "cosine":
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    s = 0.008

    def f(u: float) -> float:
        return math.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2

    bar = np.array([f(t / T) / f(0.0) for t in range(T + 1)])
    beta = 1.0 - bar[1:] / bar[:-1]
    beta = np.clip(beta, 1e-8, 0.999)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(m0: np.ndarray, t: int, noise: np.ndarray,
             schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising to timestep t."""
    ab = schedule.alpha_bar_at(t)
    if noise.shape != np.shape(m0):
        raise DiffusionError(
            f"noise shape {noise.shape} must match data shape {np.shape(m0)}")
    return math.sqrt(ab) * np.asarray(m0) + math.sqrt(1.0 - ab) * noise


@dataclass
class LossWeights:
    joint: float = 1.0
    velocity: float = 1.0
    contact: float = 0.5

    def __post_init__(self):
        for v in (self.joint, self.velocity, self.contact):
            if not (math.isfinite(v) and v >= 0):
                raise DiffusionError(f"loss weights must be finite and >= 0, got {v}")


@dataclass
class GuidanceConfig:
    w: float = 2.7
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.w < 0:
            raise DiffusionError(f"guidance weight must be >= 0, got {self.w}")
        if not 0.0 <= self.p_uncond < 1.0:
            raise DiffusionError(f"p_uncond must be in [0, 1), got {self.p_uncond}")


class Normalizer:
    """Per-dimension z-scoring with the training-set statistics."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != (POSE_DIM,) or self.std.shape != (POSE_DIM,):
            raise DiffusionError("normalization stats must be 319-vectors")
        if np.any(self.std <= 0):
            raise DiffusionError("std entries must be positive")

    @classmethod
    def fit(cls, frames: np.ndarray, floor: float = 1e-6) -> "Normalizer":
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, POSE_DIM)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), floor))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def denormalize_t(self, x: Tensor) -> Tensor:
        return ad.mul(x, Tensor(self.std)) + Tensor(self.mean)


@dataclass
class StepLosses:
    reconstruction: float
    joint: float
    velocity: float
    contact: float
    total: float


def _frame_mean_sq(x: Tensor, n_frames: int) -> Tensor:
    """Sum of squares divided by the number of frames (loss shape used by the
    kinematic terms)."""
    return ad.tsum(ad.square(x)) * (1.0 / n_frames)


def compute_losses(m0_norm: np.ndarray, m0_raw: np.ndarray, m_hat: Tensor,
                   normalizer: Normalizer, skel: SkeletonDef,
                   weights: LossWeights) -> tuple[Tensor, StepLosses]:
    """Total training loss for a batch of predicted windows.

    m0_norm/m0_raw: (B, k, 319) ground truth in normalized / raw space.
    m_hat: (B, k, 319) prediction in normalized space, graph-connected.
    """
    bsz, k, _ = m0_norm.shape
    loss_s = ad.mse(m_hat, Tensor(m0_norm))

    raw_hat = normalizer.denormalize_t(m_hat)
    pos_hat = fk(raw_hat.reshape(bsz * k, POSE_DIM), skel)
    pos_true = fk(m0_raw.reshape(bsz * k, POSE_DIM), skel)
    loss_j = _frame_mean_sq(pos_hat - Tensor(pos_true), bsz * k)

    vel_hat = raw_hat[:, 1:, :] - raw_hat[:, :-1, :]
    vel_true = m0_raw[:, 1:, :] - m0_raw[:, :-1, :]
    loss_v = _frame_mean_sq(vel_hat - Tensor(vel_true), bsz * (k - 1))

    # predicted contact thresholded at 0.5 becomes a constant mask; the
    # gradient flows through the foot displacement only
    contact_hat = raw_hat.data[:, :, CONTACT_SLICE]
    mask = (contact_hat[:, :-1, :] > 0.5).astype(np.float64)
    mask = np.repeat(mask[:, :, :, None], 3, axis=3)         # (B, k-1, 4, 3)
    feet = ad.tslice(pos_hat.reshape(bsz, k, -1, 3),
                     (slice(None), slice(None), skel.foot_joints.tolist()))
    slide = feet[:, 1:] - feet[:, :-1]
    loss_c = _frame_mean_sq(ad.mul(slide, Tensor(mask)), bsz * (k - 1))

    total = loss_s + loss_j * weights.joint + loss_v * weights.velocity \
        + loss_c * weights.contact
    detail = StepLosses(
        reconstruction=float(loss_s.data), joint=float(loss_j.data),
        velocity=float(loss_v.data), contact=float(loss_c.data),
        total=float(total.data))
    return total, detail


@dataclass
class TrainingBatch:
    """Aligned per-item arrays; all frame counts equal."""
    m0_raw: np.ndarray     # (B, k, 319)
    m0_norm: np.ndarray
    stft: np.ndarray       # (B, k, 193)
    w2c: np.ndarray        # (B, k, 512)
    genre_vec: np.ndarray  # (B, 512)


def training_step(model, batch: TrainingBatch, schedule: DiffusionSchedule,
                  weights: LossWeights, guidance: GuidanceConfig,
                  rng: np.random.Generator, skel: SkeletonDef,
                  train_dropout: bool = True):
    """One optimization step's forward/backward.

    Returns (per-term losses, gradient dict keyed by parameter name).
    Timesteps are drawn uniformly per item; with probability p_uncond both
    conditioning channels are replaced by the learned null embeddings.
    """
    bsz, k, _ = batch.m0_norm.shape
    ts = rng.integers(1, schedule.T + 1, size=bsz)
    noise = rng.standard_normal(batch.m0_norm.shape)
    dropped = rng.random(bsz) < guidance.p_uncond

    d_t = np.empty_like(batch.m0_norm)
    for i in range(bsz):
        d_t[i] = q_sample(batch.m0_norm[i], int(ts[i]), noise[i], schedule)

    fused = model.fusion.fuse(Tensor(batch.w2c), Tensor(batch.stft))
    rows_m = []
    rows_e = []
    for i in range(bsz):
        if dropped[i]:
            null_m = model.null_music.reshape(1, 1, -1)
            rows_m.append(ad.tile_axis(null_m, 1, k))
            rows_e.append(model.null_genre.reshape(1, -1))
        else:
            rows_m.append(fused[i:i + 1])
            rows_e.append(Tensor(batch.genre_vec[i:i + 1]))
    c_m = ad.concat(rows_m, axis=0)
    c_e = ad.concat(rows_e, axis=0)

    try:
        m_hat = model.denoiser.forward(Tensor(d_t), ts, c_m, c_e,
                                       train=train_dropout, rng=rng)
        total, detail = compute_losses(batch.m0_norm, batch.m0_raw, m_hat,
                                       model.normalizer, skel, weights)
        grad_map = ad.backward(total)
    except ad.NonFiniteError as exc:
        raise DiffusionError(
            f"non-finite loss (timesteps {ts.tolist()}, batch of {bsz}): {exc}"
        ) from exc
    names = model.param_names()
    grads = {names[id(p)]: g.data for p, g in grad_map.items() if id(p) in names}
    return detail, grads


def guided_predict(model, d_t: np.ndarray, t: int, c_m: np.ndarray,
                   c_e: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guided clean-pose estimate: u + w * (c - u)."""
    cond = model.denoiser.forward_single(d_t, t, c_m, c_e)
    k = d_t.shape[0]
    null_m = np.tile(model.null_music.data, (k, 1))
    uncond = model.denoiser.forward_single(d_t, t, null_m, model.null_genre.data)
    return uncond + w * (cond - uncond)


def sample_loop(predict_fn, schedule: DiffusionSchedule, k: int,
                rng: np.random.Generator,
                clip_bound: float = CLIP_BOUND) -> np.ndarray:
    """DDPM ancestral sampling in normalized pose space.

    predict_fn(d_t, t) must return the (guided) clean-pose estimate.  The
    posterior q(d_{t-1} | d_t, m_hat) is sampled with variance
    beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); no noise at t=1.
    """
    d = rng.standard_normal((k, POSE_DIM))
    for t in range(schedule.T, 0, -1):
        m_hat = np.clip(predict_fn(d, t), -clip_bound, clip_bound)
        if not np.all(np.isfinite(m_hat)):
            raise DiffusionError(f"non-finite denoiser output at step {t}")
        if t == 1:
            d = m_hat
            break
        ab_t = schedule.alpha_bar_at(t)
        ab_prev = schedule.alpha_bar_prev(t)
        beta_t = schedule.beta_at(t)
        alpha_t = schedule.alpha_at(t)
        coef_m = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
        coef_d = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
        mean = coef_m * m_hat + coef_d * d
        d = mean + math.sqrt(var) * rng.standard_normal(d.shape)
        if not np.all(np.isfinite(d)):
            raise DiffusionError(f"non-finite sample at step {t}")
    return d
