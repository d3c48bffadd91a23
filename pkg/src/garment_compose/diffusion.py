"""Noise schedule, forward process, DDPM step, latent codec, text embedder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ModeError, ParameterError
from .tensor_core import DTYPE
from .toy_world import TextPrompt


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ParameterError(f"timestep {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas, inclusive of both ends; alpha_bar by cumulative product.

    The default end value scales the usual 0.02 at T=1000 to shorter chains.
    """
    if T < 1:
        raise ParameterError(f"schedule needs T >= 1, got {T}")
    if beta_end is None:
        beta_end = min(0.999, 0.02 * 1000 / T)
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"bad schedule T={T}, beta in [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if T == 1:
        betas = np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas, alphas, alpha_bars)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    if np.shape(z0) != np.shape(eps):
        raise DimensionError(f"z0 {np.shape(z0)} vs eps {np.shape(eps)}")
    ab = s.alpha_bar(t)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.asarray(z0).dtype)


def ddpm_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, s: NoiseSchedule,
              noise: np.ndarray | None) -> np.ndarray:
    """One ancestral step with sigma_t = sqrt(beta_t); no noise at t = 1."""
    beta, alpha, ab = s.beta(t), s.alpha(t), s.alpha_bar(t)
    mean = (z_t - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
    if t > 1 and noise is not None:
        mean = mean + np.sqrt(beta) * noise
    return mean.astype(z_t.dtype)


# ---------------------------------------------------------------------------
# Latent codec: space-to-depth by 2


def encode_latent(image: np.ndarray) -> np.ndarray:
    """[H, W] or [H, W, 1] -> [4, H/2, W/2]; channel k holds offset (k // 2, k % 2)."""
    x = np.asarray(image)
    if x.ndim == 3:
        if x.shape[2] != 1:
            raise DimensionError(f"codec expects one image channel, got {x.shape}")
        x = x[..., 0]
    H, W = x.shape
    if H % 2 or W % 2:
        raise DimensionError(f"image {H}x{W} not divisible by 2")
    return np.ascontiguousarray(x.reshape(H // 2, 2, W // 2, 2).transpose(1, 3, 0, 2).reshape(4, H // 2, W // 2))


def decode_latent(z: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_latent; returns [H, W, 1]."""
    z = np.asarray(z)
    if z.ndim != 3 or z.shape[0] != 4:
        raise DimensionError(f"latent must be [4, h, w], got {z.shape}")
    _, h, w = z.shape
    x = z.reshape(2, 2, h, w).transpose(2, 0, 3, 1).reshape(2 * h, 2 * w)
    return np.ascontiguousarray(x[..., None])


def to_model_space(latent: np.ndarray) -> np.ndarray:
    return (2 * latent - 1).astype(DTYPE)


def from_model_space(z: np.ndarray) -> np.ndarray:
    return ((z + 1) * DTYPE(0.5)).astype(DTYPE)


def downsample_channels(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest pick of each cell's centre for [C, H, W] maps."""
    o = factor // 2
    return np.ascontiguousarray(x[:, o::factor, o::factor])


# ---------------------------------------------------------------------------
# Text


class TextEmbedder:
    """Fixed lookup table over the 64-word vocabulary; rows have unit norm."""

    VOCAB = 64

    def __init__(self, dim: int = 16, seed: int = 0):
        rng = np.random.default_rng([seed, 0x7E47])
        table = rng.standard_normal((self.VOCAB, dim))
        self.table = (table / np.linalg.norm(table, axis=1, keepdims=True)).astype(DTYPE)
        self.dim = dim

    def embed(self, prompt: TextPrompt) -> np.ndarray:
        ids = np.asarray(prompt.tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.VOCAB):
            raise ParameterError(f"token ids outside the {self.VOCAB}-word vocabulary")
        return self.table[ids].reshape(len(ids), self.dim)

    def phrase(self, prompt: TextPrompt, asset: int) -> np.ndarray:
        s, e = prompt.span_for(asset)
        rows = self.embed(prompt)[s:e]
        return rows.mean(axis=0, dtype=DTYPE)


def embed_text(prompt: TextPrompt, embedder: TextEmbedder) -> np.ndarray:
    return embedder.embed(prompt)


def phrase_embedding(prompt: TextPrompt, asset: int, embedder: TextEmbedder):
    from .attention_lab import PhraseEmbedding

    return PhraseEmbedding(asset, embedder.phrase(prompt, asset))


# ---------------------------------------------------------------------------
# Conditioning


AUX_CHANNELS = {"generation": 2, "tryon": 5}


def assemble_conditioning(mode: str, latent: np.ndarray, aux: np.ndarray) -> np.ndarray:
    """Channel stack [latent | aux]: 4+2 for generation, 4+4+1 for try-on."""
    if mode not in AUX_CHANNELS:
        raise ModeError(f"unknown mode {mode!r}")
    if latent.shape[0] != 4:
        raise ModeError(f"latent must have 4 channels, got {latent.shape[0]}")
    if aux.shape[0] != AUX_CHANNELS[mode]:
        raise ModeError(f"{mode} needs {AUX_CHANNELS[mode]} aux channels, got {aux.shape[0]}")
    if aux.shape[1:] != latent.shape[1:]:
        raise ModeError(f"aux grid {aux.shape[1:]} vs latent grid {latent.shape[1:]}")
    return np.concatenate([latent, aux.astype(latent.dtype)], axis=0)
