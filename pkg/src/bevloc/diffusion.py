"""Conditional diffusion over normalized planar poses.

Poses are diffused in a 4-vector parameterization ``(x~, y~, cos yaw, sin yaw)``
where ``x~, y~`` are world coordinates mapped affinely into ``[-1, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

POSE_DIM = 4


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # beta[k-1] for k = 1..K
    kind: str = "cosine"

    @property
    def K(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative products indexed by step, with ``alpha_bar[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(self.alpha)])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSchedule:
        return cls(np.asarray(d["beta"], dtype=np.float64), d.get("kind", "cosine"))


def build_schedule(K: int = 100, kind: str = "cosine", s: float = 0.008) -> NoiseSchedule:
    if K < 2:
        raise ValueError(f"need at least 2 diffusion steps, got K={K}")
    if kind == "cosine":
        k = np.arange(K + 1, dtype=np.float64)
        f = np.cos((k / K + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    elif kind == "linear":
        scale = 1000.0 / K
        beta = np.linspace(1e-4 * scale, 0.02 * scale, K)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not np.all((beta > 0) & (beta < 1)):
        raise ValueError(f"{kind} schedule with K={K} has betas outside (0, 1); use a larger K")
    return NoiseSchedule(beta, kind)


def _check_step(k, K: int, low: int = 1):
    ks = np.asarray(k)
    if np.any(ks < low) or np.any(ks > K):
        raise ValueError(f"diffusion step {k} outside [{low}, {K}]")


def add_noise(t0, k, eps, schedule: NoiseSchedule):
    """Forward corruption ``sqrt(ab_k) t0 + sqrt(1 - ab_k) eps``.

    ``k`` may be an int or an integer array broadcastable against the
    leading dims of ``t0`` (e.g. one step per tuple).
    """
    _check_step(k.cpu().numpy() if torch.is_tensor(k) else k, schedule.K)
    ab = schedule.alpha_bar
    if np.ndim(k) == 0 and not torch.is_tensor(k):
        a = ab[int(k)]
        return math.sqrt(a) * t0 + math.sqrt(1.0 - a) * eps
    a = ab[np.asarray(k.cpu() if torch.is_tensor(k) else k)]
    a = a.reshape(a.shape + (1,) * (t0.ndim - a.ndim))
    if torch.is_tensor(t0):
        a = torch.as_tensor(a, dtype=t0.dtype, device=t0.device)
        return a.sqrt() * t0 + (1.0 - a).sqrt() * eps
    return np.sqrt(a) * t0 + np.sqrt(1.0 - a) * eps


def step_embedding(k, dim: int) -> torch.Tensor:
    """Sinusoidal embedding, interleaved ``(sin(k w_i), cos(k w_i))``, ``w_i = 10000^(-2i/dim)``."""
    if dim % 2:
        raise ValueError(f"step embedding dim must be even, got {dim}")
    k = torch.as_tensor(k, dtype=torch.float64)
    freqs = 10000.0 ** (-2.0 * torch.arange(dim // 2, dtype=torch.float64) / dim)
    ang = k[..., None] * freqs
    return torch.stack([ang.sin(), ang.cos()], dim=-1).flatten(-2)


@dataclass(frozen=True)
class DenoiserConfig:
    layers: int = 8
    heads: int = 4
    latent_dim: int = 512
    sequence_len: int = 3
    step_embed_dim: int = 128
    feature_dim: int = 512
    ff_mult: int = 4

    def __post_init__(self):
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if self.step_embed_dim % 2:
            raise ValueError("step_embed_dim must be even")


class Denoiser(nn.Module):
    """Bidirectional transformer predicting the injected noise for a pose tuple."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.latent_dim
        self.embed = nn.Linear(POSE_DIM + cfg.step_embed_dim + cfg.feature_dim, d)
        self.frame_embed = nn.Parameter(torch.zeros(1, cfg.sequence_len, d))
        nn.init.normal_(self.frame_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d, cfg.heads, cfg.ff_mult * d, dropout=0.0, activation="gelu",
            batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, POSE_DIM)

    def forward(self, noisy: torch.Tensor, k, feats: torch.Tensor) -> torch.Tensor:
        """``noisy (B, N, 4)``, ``k`` int or ``(B,)``, ``feats (B, N, F)`` -> ``(B, N, 4)``."""
        b, n, p = noisy.shape
        if p != POSE_DIM or n != self.cfg.sequence_len:
            raise ValueError(f"noisy poses must be (B, {self.cfg.sequence_len}, 4), got {tuple(noisy.shape)}")
        if feats.shape != (b, n, self.cfg.feature_dim):
            raise ValueError(f"features must be {(b, n, self.cfg.feature_dim)}, got {tuple(feats.shape)}")
        k = torch.as_tensor(k, device=noisy.device).reshape(-1).expand(b)
        emb = step_embedding(k, self.cfg.step_embed_dim).to(noisy.dtype)
        emb = emb[:, None, :].expand(b, n, -1)
        tokens = self.embed(torch.cat([noisy, emb, feats], dim=-1)) + self.frame_embed
        return self.head(self.norm(self.encoder(tokens)))


def ddim_step(t_k, eps_hat, k: int, k_prev: int, schedule: NoiseSchedule,
              clip: float | None = None):
    """Deterministic DDIM update from step ``k`` to ``k_prev`` (any stride).

    ``clip`` bounds the intermediate clean-pose estimate to ``[-clip, clip]``;
    near ``k = K`` the division by ``sqrt(alpha_bar_k)`` otherwise amplifies
    small noise-prediction errors by orders of magnitude.
    """
    if not 0 <= k_prev < k <= schedule.K:
        raise ValueError(f"need 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}, K={schedule.K}")
    ab = schedule.alpha_bar
    a, a_prev = ab[k], ab[k_prev]
    t0_hat = (t_k - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)
    if clip is not None:
        t0_hat = t0_hat.clamp(-clip, clip) if torch.is_tensor(t0_hat) else np.clip(t0_hat, -clip, clip)
    return math.sqrt(a_prev) * t0_hat + math.sqrt(1.0 - a_prev) * eps_hat


def step_sequence(K: int, steps: int) -> list[int]:
    """Uniformly strided steps ``K -> 0`` (inclusive of both ends), ``steps`` updates."""
    if not 1 <= steps <= K:
        raise ValueError(f"steps must be in [1, {K}], got {steps}")
    return [int(v) for v in np.round(np.linspace(K, 0, steps + 1))]


def ddim_sample(eps_fn, shape, steps: int, schedule: NoiseSchedule, rng_seed=0,
                dtype=torch.float32, init=None, clip: float | None = None):
    """Run the DDIM chain from pure noise.

    ``eps_fn(t_k, k)`` returns the predicted noise for the current iterate.
    Returns the final clean DiffPose tensor of ``shape``.
    """
    seq = step_sequence(schedule.K, steps)
    if init is None:
        gen = torch.Generator().manual_seed(int(rng_seed))
        t = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    else:
        t = init
    for k, k_prev in zip(seq[:-1], seq[1:]):
        t = ddim_step(t, eps_fn(t, k), k, k_prev, schedule, clip)
    return t


def epsilon_loss(eps_hat, eps):
    """Mean absolute error over every frame and coordinate."""
    if tuple(eps_hat.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return abs(eps_hat - eps).mean()


class PoseNormalizer:
    """Maps world ``(x, y, yaw)`` to the 4-vector diffusion target and back."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(2)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(2)
        if np.any(self.hi <= self.lo):
            raise ValueError("normalizer box must have positive extent")

    @classmethod
    def fit(cls, poses, margin: float = 0.05, min_span: float = 1.0) -> PoseNormalizer:
        xy = np.asarray(poses, dtype=np.float64)[:, :2]
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        span = np.maximum(hi - lo, min_span)
        center = (lo + hi) / 2
        half = span * (0.5 + margin)
        return cls(center - half, center + half)

    def encode(self, poses) -> np.ndarray:
        p = np.asarray(poses, dtype=np.float64)
        xy = 2.0 * (p[..., :2] - self.lo) / (self.hi - self.lo) - 1.0
        return np.concatenate([xy, np.cos(p[..., 2:3]), np.sin(p[..., 2:3])], axis=-1)

    def decode(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        xy = (v[..., :2] + 1.0) / 2.0 * (self.hi - self.lo) + self.lo
        yaw = np.arctan2(v[..., 3], v[..., 2])
        return np.concatenate([xy, yaw[..., None]], axis=-1)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> PoseNormalizer:
        return cls(d["lo"], d["hi"])
