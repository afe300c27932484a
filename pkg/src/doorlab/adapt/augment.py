"""Seeded image distortions.

RGB gets crop, brightness, saturation, hue, contrast, cutout and additive
noise. Depth only ever gets crop and cutout: photometric operations would
corrupt metric distances.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# RGB <-> YIQ, used for hue rotation
_YIQ = np.array([[0.299, 0.587, 0.114],
                 [0.596, -0.274, -0.322],
                 [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


@dataclass(frozen=True)
class AugmentConfig:
    crop_fraction: float = 0.9
    brightness: float = 0.25
    saturation: float = 0.25
    hue: float = 0.05
    contrast: float = 0.25
    cutout_count: int = 1
    cutout_max: int = 16
    gaussian_sigma: float = 4.0

    @classmethod
    def cutout_only(cls, count=2, max_size=16):
        return cls(crop_fraction=1.0, brightness=0.0, saturation=0.0, hue=0.0, contrast=0.0,
                   cutout_count=count, cutout_max=max_size, gaussian_sigma=0.0)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0.0)


@dataclass(frozen=True)
class AugmentParams:
    crop: tuple          # (top, left, crop_h, crop_w)
    cutouts: tuple       # ((top, left, h, w), ...)
    brightness: float
    saturation: float
    hue: float
    contrast: float
    noise_seed: int


def draw_params(shape, seed, cfg: AugmentConfig) -> AugmentParams:
    """All random choices for one distortion, drawn from a single stream."""
    rng = np.random.default_rng(seed)
    H, W = shape[:2]
    ch, cw = max(1, int(round(H * cfg.crop_fraction))), max(1, int(round(W * cfg.crop_fraction)))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    cuts = []
    for _ in range(cfg.cutout_count):
        h = int(rng.integers(1, cfg.cutout_max + 1)) if cfg.cutout_max > 0 else 0
        w = int(rng.integers(1, cfg.cutout_max + 1)) if cfg.cutout_max > 0 else 0
        cuts.append((int(rng.integers(0, H)), int(rng.integers(0, W)), h, w))
    return AugmentParams(
        crop=(top, left, ch, cw),
        cutouts=tuple(cuts),
        brightness=float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)),
        saturation=float(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)),
        hue=float(rng.uniform(-cfg.hue, cfg.hue)),
        contrast=float(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def crop_resize(image: np.ndarray, crop) -> np.ndarray:
    """Crop then nearest-neighbour resample back to the input size."""
    H, W = image.shape[:2]
    top, left, ch, cw = crop
    rows = top + (np.arange(H) * ch) // H
    cols = left + (np.arange(W) * cw) // W
    return image[rows[:, None], cols[None, :]]


def cutout_mask(shape, cutouts) -> np.ndarray:
    H, W = shape[:2]
    mask = np.zeros((H, W), dtype=bool)
    for top, left, h, w in cutouts:
        mask[max(top - h // 2, 0):top + (h + 1) // 2, max(left - w // 2, 0):left + (w + 1) // 2] = True
    return mask


def _photometric(x: np.ndarray, p: AugmentParams) -> np.ndarray:
    x = x * p.brightness
    gray = x @ np.array([0.299, 0.587, 0.114])
    x = gray[..., None] + p.saturation * (x - gray[..., None])
    if p.hue:
        a = 2 * math.pi * p.hue
        rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
        x = x @ (_YIQ_INV @ rot @ _YIQ).T
    mean = float(x.mean())
    return mean + p.contrast * (x - mean)


def apply(image: np.ndarray, modality: str, p: AugmentParams, cfg: AugmentConfig) -> np.ndarray:
    out = crop_resize(image, p.crop)
    if modality == "rgb":
        x = _photometric(out.astype(np.float64), p)
        x[cutout_mask(x.shape, p.cutouts)] = 0.0
        if cfg.gaussian_sigma > 0:
            x = x + cfg.gaussian_sigma * np.random.default_rng(p.noise_seed).standard_normal(x.shape)
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)
    if modality == "depth":
        out = out.copy()
        out[cutout_mask(out.shape, p.cutouts)] = 0
        return out
    raise ValueError(f"unknown modality {modality!r}")


def augment(image: np.ndarray, modality: str, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Distort ``image``; the output has the input's shape and dtype."""
    return apply(image, modality, draw_params(image.shape, seed, cfg), cfg)
