"""Conditions and exact analytic noise predictors.

The lab replaces a pretrained text-to-image model with score models whose
epsilon-prediction is available in closed form. For a Gaussian-mixture data
distribution sum_i w_i N(mu_i, s0^2 I), the time-t marginal under the
schedule is

    q_t(z) = sum_i w_i N(z; scale(t) * mu_i, v_t I),   v_t = abar_t s0^2 + (1 - abar_t)

and the posterior-optimal noise prediction is

    eps(z, t) = -std(t) * grad_z log q_t(z)
              = std(t) / v_t * sum_i r_i(z) (z - scale(t) * mu_i)

with softmax responsibilities r_i. This is exact, so sampler and
distillation identities can be checked against it with tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .diffusion import Latent, NoiseSchedule


@dataclass(frozen=True)
class Condition:
    """Symbolic conditioning signal.

    `tokens` feed the tiny denoiser and the cross-attention alignment;
    `target_mode` optionally redirects an analytic model to a different
    registered component set than the condition id.
    """

    id: str
    tokens: tuple[int, ...] = ()
    target_mode: str | None = None

    def mode(self) -> str:
        return self.target_mode if self.target_mode is not None else self.id


class ScoreModel(Protocol):
    """Deterministic epsilon predictor: eps(z, t, y) with output shape of z."""

    def eps(self, z: Latent, t: int, y: Condition) -> Latent: ...


@dataclass
class AnalyticGMMScore:
    """Exact epsilon prediction for per-condition Gaussian mixtures.

    Component means live in latent space (one full latent per component);
    all components share the isotropic data variance s0_sq.
    """

    schedule: NoiseSchedule
    s0_sq: float = 0.0
    _modes: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.s0_sq < 0.0:
            raise ValueError(f"s0_sq must be >= 0, got {self.s0_sq}")

    def register(self, mode: str, means, weights=None) -> None:
        """Register the component set for a condition mode.

        `means` is a sequence of latents; `weights` must be positive and sum
        to 1 (uniform when omitted).
        """
        means = np.stack([np.asarray(m, dtype=np.float64) for m in means])
        n = means.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ValueError(f"need {n} weights, got shape {weights.shape}")
        if np.any(weights <= 0.0) or np.any(weights > 1.0):
            raise ValueError("component weights must lie in (0, 1]")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise ValueError(f"component weights must sum to 1, got {weights.sum()!r}")
        self._modes[mode] = (means, weights)

    def modes(self) -> tuple[str, ...]:
        return tuple(self._modes)

    def _components(self, y: Condition) -> tuple[np.ndarray, np.ndarray]:
        mode = y.mode()
        if mode not in self._modes:
            raise KeyError(f"condition mode {mode!r} not registered (have {sorted(self._modes)})")
        return self._modes[mode]

    def _variance(self, t: int) -> float:
        abar = float(self.schedule.alpha_bar[int(t)])
        v = abar * self.s0_sq + (1.0 - abar)
        if v <= 0.0:
            raise ValueError("degenerate marginal: t = 0 with s0_sq = 0 has no density")
        return v

    def _responsibilities(self, z: Latent, t: int, y: Condition):
        means, weights = self._components(y)
        if z.shape != means.shape[1:]:
            raise ValueError(f"latent shape {z.shape} != component shape {means.shape[1:]}")
        v = self._variance(t)
        diffs = z[None, ...] - self.schedule.scale(t) * means
        sq = np.sum(diffs.reshape(diffs.shape[0], -1) ** 2, axis=1)
        logits = np.log(weights) - sq / (2.0 * v)
        logits -= logits.max()
        r = np.exp(logits)
        r /= r.sum()
        return r, diffs, v, sq

    def eps(self, z: Latent, t: int, y: Condition) -> Latent:
        z = np.asarray(z, dtype=np.float64)
        r, diffs, v, _ = self._responsibilities(z, t, y)
        out = self.schedule.std(t) / v * np.tensordot(r, diffs, axes=1)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite epsilon prediction")
        return out

    def log_marginal(self, z: Latent, t: int, y: Condition) -> float:
        """Closed-form log q_t(z); the gradient-check oracle differentiates this."""
        z = np.asarray(z, dtype=np.float64)
        means, weights = self._components(y)
        v = self._variance(t)
        diffs = z[None, ...] - self.schedule.scale(t) * means
        sq = np.sum(diffs.reshape(diffs.shape[0], -1) ** 2, axis=1)
        logits = np.log(weights) - sq / (2.0 * v)
        m = logits.max()
        dim = z.size
        return float(m + np.log(np.exp(logits - m).sum()) - 0.5 * dim * np.log(2.0 * np.pi * v))
