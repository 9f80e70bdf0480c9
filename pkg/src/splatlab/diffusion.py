"""Noise schedules and deterministic-family diffusion sampling steps.

Everything is parameterized by the cumulative signal coefficient
alpha_bar[t] on an integer grid t = 0..T, with alpha_bar[0] = 1:

    scale(t) = sqrt(alpha_bar[t])        signal coefficient
    std(t)   = sqrt(1 - alpha_bar[t])    noise coefficient
    gamma(t) = std(t) / scale(t)

Forward noising:   z_t = scale(t) * x0 + std(t) * eps
x0 prediction:     x0_hat = (z_t - std(t) * eps_pred) / scale(t)
DDIM step:         z_{t-1} = scale(t-1) * x0_hat
                           + sqrt(1 - alpha_bar[t-1] - sigma_t^2) * eps_pred
                           + sigma_t * fresh_noise
DDCM step:         the DDIM instance with sigma_t = sqrt(1 - alpha_bar[t-1]),
                   which cancels the direction term:
                   z_{t-1} = scale(t-1) * x0_hat + std(t-1) * fresh_noise

The DDCM dynamics can equivalently be written on the predicted-x0 track:

    x0_hat(t) = x0_hat(t+1) + gamma(t) * (eps_fresh - eps_pred)

where eps_fresh is the noise that formed z_t from x0_hat(t+1). Both
parameterizations are implemented and must agree; the test suite checks the
identity on full trajectories.

All samplers take noise as explicit arguments; nothing here draws random
numbers internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear-alphabar", "cosine")

# Latents are plain float64 arrays; samplers treat them as flat vectors.
Latent = np.ndarray


class ScheduleError(ValueError):
    """Raised for non-monotone or out-of-range schedule parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-coefficient noise schedule on the grid t = 0..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", a)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("alpha_bar must be a 1-d array with T+1 >= 2 entries")
        if abs(a[0] - 1.0) > 1e-12:
            raise ScheduleError(f"alpha_bar[0] must be 1.0, got {a[0]!r}")
        if a[-1] <= 0.0:
            raise ScheduleError(f"alpha_bar[T] must stay positive, got {a[-1]!r}")
        if np.any(a > 1.0) or np.any(a <= 0.0):
            raise ScheduleError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(a) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing in t")

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return t

    def scale(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[self._check_t(t)]))

    def std(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[self._check_t(t)]))

    def gamma(self, t: int) -> float:
        return self.std(t) / self.scale(t)


def build_schedule(kind: str, T: int, floor: float) -> NoiseSchedule:
    """Construct a schedule with alpha_bar[0] = 1 and alpha_bar[T] = floor."""
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    T = int(T)
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < floor < 1.0:
        raise ScheduleError(f"floor must lie in (0, 1), got {floor}")
    if kind == "linear-alphabar":
        a = np.linspace(1.0, floor, T + 1)
    else:
        u = np.arange(T + 1, dtype=np.float64) / T
        a = floor + (1.0 - floor) * np.cos(0.5 * np.pi * u) ** 2
        a[0] = 1.0
        a[-1] = floor
    return NoiseSchedule(a)


def _check_shapes(*arrays: np.ndarray) -> None:
    shapes = {np.asarray(a).shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"latent shape mismatch: {sorted(shapes)}")


def add_noise(s: NoiseSchedule, x0: Latent, eps: Latent, t: int) -> Latent:
    """Forward noising z_t = scale(t) * x0 + std(t) * eps."""
    _check_shapes(x0, eps)
    return s.scale(t) * x0 + s.std(t) * eps


def predict_x0(s: NoiseSchedule, z_t: Latent, eps_pred: Latent, t: int) -> Latent:
    """Invert the forward map: x0_hat = (z_t - std(t) * eps_pred) / scale(t)."""
    _check_shapes(z_t, eps_pred)
    t = int(t)
    if t < 1:
        raise ValueError("predict_x0 requires t >= 1")
    return (z_t - s.std(t) * eps_pred) / s.scale(t)


def ddim_step(
    s: NoiseSchedule,
    z_t: Latent,
    eps_pred: Latent,
    t: int,
    sigma_t: float,
    fresh_noise: Latent,
) -> Latent:
    """One DDIM step t -> t-1 with per-step noise level sigma_t.

    Requires sigma_t^2 <= 1 - alpha_bar[t-1]. A radicand within float
    roundoff of zero is snapped to zero so the sigma_t = std(t-1) limit
    reduces exactly to the DDCM step.
    """
    _check_shapes(z_t, eps_pred, fresh_noise)
    t = int(t)
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} outside 1..{s.T}")
    var_prev = 1.0 - float(s.alpha_bar[t - 1])
    radicand = var_prev - float(sigma_t) ** 2
    snap = 32.0 * np.finfo(np.float64).eps * max(1.0, var_prev, float(sigma_t) ** 2)
    if abs(radicand) <= snap:
        radicand = 0.0
    if radicand < 0.0:
        raise ValueError(
            f"sigma_t^2 = {sigma_t**2!r} exceeds 1 - alpha_bar[t-1] = {var_prev!r}"
        )
    x0_hat = predict_x0(s, z_t, eps_pred, t)
    return s.scale(t - 1) * x0_hat + np.sqrt(radicand) * eps_pred + sigma_t * fresh_noise


def ddcm_step(
    s: NoiseSchedule, z_t: Latent, eps_pred: Latent, t: int, fresh_noise: Latent
) -> Latent:
    """One DDCM step t -> t-1: keep only x0_hat plus fresh noise."""
    _check_shapes(z_t, eps_pred, fresh_noise)
    t = int(t)
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} outside 1..{s.T}")
    x0_hat = predict_x0(s, z_t, eps_pred, t)
    return s.scale(t - 1) * x0_hat + s.std(t - 1) * fresh_noise


def ddcm_x0_step(
    s: NoiseSchedule,
    x0_pred_prev: Latent,
    eps_fresh: Latent,
    eps_pred: Latent,
    t: int,
) -> Latent:
    """DDCM dynamics on the predicted-x0 track.

    x0_pred_prev is the prediction made at timestep t+1; eps_fresh is the
    noise that built z_t = scale(t) * x0_pred_prev + std(t) * eps_fresh, and
    eps_pred is the model output at (z_t, t). Returns the prediction at t.
    """
    _check_shapes(x0_pred_prev, eps_fresh, eps_pred)
    t = int(t)
    if not 1 <= t <= s.T - 1:
        raise ValueError(f"timestep {t} outside 1..{s.T - 1}")
    return x0_pred_prev + s.gamma(t) * (eps_fresh - eps_pred)
