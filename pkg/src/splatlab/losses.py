"""Image-space losses, pooling, and the pyramid perceptual proxy.

The perceptual term is a 3-level average-pool pyramid of L1 distances
(factors 1, 2, 4), a deterministic stand-in for a learned perceptual
metric. Gradients are provided analytically for everything so the render
backward pass can consume them.
"""

from __future__ import annotations

import numpy as np

PYRAMID_LEVELS = 3


def _check_match(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def average_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool the trailing two axes by an exactly dividing factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"pool factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    c, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"pool factor {factor} does not divide {h}x{w}")
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def latent_of_image(img: np.ndarray, pool: int = 1) -> np.ndarray:
    """Desk-scale encoder: the latent of an image is the (pooled) image."""
    return average_pool(np.asarray(img, dtype=np.float64), pool)


def l1_loss(a: np.ndarray, b: np.ndarray) -> float:
    _check_match(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d l1_loss / da (subgradient sign(a - b) / size)."""
    _check_match(a, b)
    return np.sign(a - b) / a.size


def _pyramid_factors(h: int, w: int) -> list[int]:
    factors = []
    for level in range(PYRAMID_LEVELS):
        f = 2 ** level
        if h % f or w % f:
            break
        factors.append(f)
    return factors


def perceptual_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of per-level L1 distances over the average-pool pyramid."""
    _check_match(a, b)
    total = 0.0
    for f in _pyramid_factors(a.shape[1], a.shape[2]):
        total += l1_loss(average_pool(a, f), average_pool(b, f))
    return float(total)


def perceptual_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d perceptual_loss / da, unpooled back to full resolution."""
    _check_match(a, b)
    grad = np.zeros_like(a, dtype=np.float64)
    for f in _pyramid_factors(a.shape[1], a.shape[2]):
        pa, pb = average_pool(a, f), average_pool(b, f)
        g = np.sign(pa - pb) / (pa.size * f * f)
        grad += np.repeat(np.repeat(g, f, axis=1), f, axis=2)
    return grad


def mse(a: np.ndarray, b: np.ndarray) -> float:
    _check_match(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    m = mse(a, b)
    if m == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / m))
