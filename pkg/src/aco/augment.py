"""Photometric view augmentation: colour jitter, random grayscale, Gaussian blur.

No geometric warps unless crop/flip is explicitly enabled (ablation only).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config

LUMA = np.array([0.299, 0.587, 0.114])
MAX_BLUR_RADIUS = 3


@dataclass
class AugParams:
    scale: np.ndarray  # (3,)
    shift: np.ndarray  # (3,)
    gray: bool = False
    sigma: float | None = None  # None means no blur
    crop: tuple[int, int, int, int] | None = None  # top, left, h, w
    flip: bool = False

    @classmethod
    def identity(cls) -> "AugParams":
        return cls(np.ones(3), np.zeros(3))


def sample_params(rng: np.random.Generator, cfg: Config, height: int = 32, width: int = 32) -> AugParams:
    scale = rng.uniform(cfg.jitter_scale_min, cfg.jitter_scale_max, 3)
    shift = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift, 3)
    gray = bool(rng.random() < cfg.gray_prob)
    blur = bool(rng.random() < cfg.blur_prob)
    sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
    crop, flip = None, False
    if cfg.enable_crop_flip:
        area = rng.uniform(0.5, 1.0)
        ch = max(4, int(round(height * math.sqrt(area))))
        cw = max(4, int(round(width * math.sqrt(area))))
        crop = (int(rng.integers(0, height - ch + 1)), int(rng.integers(0, width - cw + 1)), ch, cw)
        flip = bool(rng.random() < 0.5)
    return AugParams(scale, shift, gray, sigma if blur else None, crop, flip)


def blur_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian of length 2*MAX_BLUR_RADIUS+1; taps beyond
    ceil(3 sigma) are exactly zero."""
    r = min(MAX_BLUR_RADIUS, int(math.ceil(3 * sigma)))
    x = np.arange(-MAX_BLUR_RADIUS, MAX_BLUR_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k[np.abs(x) > r] = 0.0
    return k / k.sum()


def _sep_blur(imgs: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """imgs (B, H, W, C), kernels (B, 2R+1); edge-replicated borders."""
    R = MAX_BLUR_RADIUS
    B, H, W, C = imgs.shape
    kv = kernels[:, :, None, None, None]
    p = np.pad(imgs, ((0, 0), (R, R), (0, 0), (0, 0)), mode="edge")
    out = sum(kv[:, i] * p[:, i:i + H] for i in range(2 * R + 1))
    p = np.pad(out, ((0, 0), (0, 0), (R, R), (0, 0)), mode="edge")
    return sum(kv[:, i] * p[:, :, i:i + W] for i in range(2 * R + 1))


def _crop_resize(img: np.ndarray, crop, out_h: int, out_w: int) -> np.ndarray:
    top, left, ch, cw = crop
    rows = top + np.minimum((np.arange(out_h) + 0.5) * ch / out_h, ch - 1e-9).astype(int)
    cols = left + np.minimum((np.arange(out_w) + 0.5) * cw / out_w, cw - 1e-9).astype(int)
    return img[rows][:, cols]


def apply_batch(frames: np.ndarray, params: list[AugParams]) -> np.ndarray:
    x = np.array(frames, dtype=np.float64, copy=True)
    B, H, W, _ = x.shape
    for i, p in enumerate(params):
        if p.crop is not None:
            x[i] = _crop_resize(x[i], p.crop, H, W)
        if p.flip:
            x[i] = x[i, :, ::-1]
    scale = np.stack([p.scale for p in params])[:, None, None, :]
    shift = np.stack([p.shift for p in params])[:, None, None, :]
    x = x * scale + shift
    gray = np.array([p.gray for p in params])
    if gray.any():
        lum = x[gray] @ LUMA
        x[gray] = lum[..., None].repeat(3, axis=-1)
    blur = np.array([p.sigma is not None for p in params])
    if blur.any():
        kernels = np.stack([blur_kernel(p.sigma) for p in params if p.sigma is not None])
        x[blur] = _sep_blur(x[blur], kernels)
    return np.clip(x, 0.0, 1.0)


def apply_augment(frame: np.ndarray, params: AugParams) -> np.ndarray:
    return apply_batch(frame[None], [params])[0]


def augment(frame: np.ndarray, rng: np.random.Generator, cfg: Config | None = None) -> np.ndarray:
    cfg = cfg or Config()
    return apply_augment(frame, sample_params(rng, cfg, *frame.shape[:2]))


def augment_batch(frames: np.ndarray, rng: np.random.Generator, cfg: Config) -> np.ndarray:
    H, W = frames.shape[1:3]
    return apply_batch(frames, [sample_params(rng, cfg, H, W) for _ in range(len(frames))])
