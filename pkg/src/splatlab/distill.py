"""Score-distillation residuals and the pseudo-ground-truth zoo.

The classic SDS latent residual omega(t) * (eps_pred - eps) is algebraically
identical to a reconstruction residual against a pseudo-ground-truth

    f = z_pi + gamma_t * Delta,        gamma_t = std(t) / scale(t)

where z_pi is the rendered latent and Delta depends on the method:

    SDS / SJC   eps - eps_phi(z_t, t, y)
    VSD         eps_aux(z_t, t, y) - eps_phi(z_t, t, y)
    DDS         eps_phi(z'_t, t, y') - eps_phi(z_t, t, y)
    ISM         eps_phi(z_s, s, null) - eps_phi(z_t, t, y)
    NFSD        eps_phi(z_t, t, y_neg) - eps_phi(z_t, t, null) - s_g * delta_c

with z_t = scale(t) * z_pi + std(t) * eps formed internally. The recon form
of the SDS gradient factor is omega(t) * (scale/std) * (z_pi - f); both code
paths are kept separate so their agreement is a real check, not a tautology.

Conventions chosen here (the upstream methods leave them open):

* NFSD's classifier direction defaults to
  delta_c = eps_phi(z_t, t, y) - eps_phi(z_t, t, null) and is replaceable
  via ``PseudoGtContext.delta_c_fn``.
* DDS noises a caller-supplied clean reference with the same eps as the
  main branch.
* ISM's inversion latent z_s comes from deterministic DDIM (sigma = 0)
  steps from z_t down to s = max(1, t - delta_s) under the null condition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .diffusion import Latent, NoiseSchedule, add_noise, ddim_step
from .scores import Condition, ScoreModel


@dataclass(frozen=True)
class WeightSchedule:
    """Positive per-timestep weight omega(t)."""

    fn: Callable[[int], float]
    name: str = "custom"

    def __call__(self, t: int) -> float:
        w = float(self.fn(int(t)))
        if w <= 0.0:
            raise ValueError(f"omega({t}) = {w} must be positive")
        return w


def constant_weight(c: float = 1.0) -> WeightSchedule:
    if c <= 0.0:
        raise ValueError(f"constant weight must be positive, got {c}")
    return WeightSchedule(lambda t: c, name=f"constant({c})")


def sigma_sq_weight(s: NoiseSchedule) -> WeightSchedule:
    """omega(t) = 1 - alpha_bar[t], the common SDS weighting."""
    return WeightSchedule(lambda t: 1.0 - float(s.alpha_bar[t]), name="std-squared")


class PseudoGtKind(str, Enum):
    SDS = "sds"
    VSD = "vsd"
    DDS = "dds"
    ISM = "ism"
    NFSD = "nfsd"


@dataclass
class PseudoGtContext:
    """Score models and side inputs required by the individual kinds."""

    primary: ScoreModel
    auxiliary: ScoreModel | None = None          # VSD
    ref_latent: Latent | None = None             # DDS, clean reference
    ref_condition: Condition | None = None       # DDS
    null_condition: Condition | None = None      # ISM, NFSD
    neg_condition: Condition | None = None       # NFSD
    guidance: float = 1.0                        # NFSD s_g
    ism_delta_s: int = 5                         # ISM: s = max(1, t - delta_s)
    delta_c_fn: Callable[..., Latent] | None = None  # NFSD hook

    _REQUIRED = {
        PseudoGtKind.SDS: (),
        PseudoGtKind.VSD: ("auxiliary",),
        PseudoGtKind.DDS: ("ref_latent", "ref_condition"),
        PseudoGtKind.ISM: ("null_condition",),
        PseudoGtKind.NFSD: ("null_condition", "neg_condition"),
    }

    def require(self, kind: PseudoGtKind) -> None:
        for name in self._REQUIRED[kind]:
            if getattr(self, name) is None:
                raise ValueError(f"{kind.value} pseudo-ground-truth needs context field {name!r}")


def _ism_inversion(
    ctx: PseudoGtContext, z_t: Latent, t: int, s: NoiseSchedule
) -> tuple[Latent, int]:
    """Deterministic DDIM from z_t down to s under the null condition."""
    step_lo = max(1, t - int(ctx.ism_delta_s))
    if step_lo >= t:
        raise ValueError(f"ISM needs s < t; got s = {step_lo} at t = {t}")
    z = z_t
    zero = np.zeros_like(z_t)
    for tt in range(t, step_lo, -1):
        eps_u = ctx.primary.eps(z, tt, ctx.null_condition)
        z = ddim_step(s, z, eps_u, tt, 0.0, zero)
    return z, step_lo


def pseudo_gt(
    kind: PseudoGtKind,
    ctx: PseudoGtContext,
    z_pi: Latent,
    eps: Latent,
    t: int,
    y: Condition,
    s: NoiseSchedule,
) -> Latent:
    """Pseudo-ground-truth f = z_pi + gamma_t * Delta(kind)."""
    kind = PseudoGtKind(kind)
    ctx.require(kind)
    t = int(t)
    z_t = add_noise(s, z_pi, eps, t)
    eps_main = ctx.primary.eps(z_t, t, y)

    if kind is PseudoGtKind.SDS:
        delta = eps - eps_main
    elif kind is PseudoGtKind.VSD:
        delta = ctx.auxiliary.eps(z_t, t, y) - eps_main
    elif kind is PseudoGtKind.DDS:
        z_ref_t = add_noise(s, ctx.ref_latent, eps, t)
        delta = ctx.primary.eps(z_ref_t, t, ctx.ref_condition) - eps_main
    elif kind is PseudoGtKind.ISM:
        z_s, step_lo = _ism_inversion(ctx, z_t, t, s)
        delta = ctx.primary.eps(z_s, step_lo, ctx.null_condition) - eps_main
    else:  # NFSD
        eps_null = ctx.primary.eps(z_t, t, ctx.null_condition)
        if ctx.delta_c_fn is not None:
            delta_c = ctx.delta_c_fn(ctx.primary, z_t, t, y, ctx.null_condition)
        else:
            delta_c = eps_main - eps_null
        delta = ctx.primary.eps(z_t, t, ctx.neg_condition) - eps_null - ctx.guidance * delta_c

    return z_pi + s.gamma(t) * delta


def sds_residual_classic(
    eps_pred: Latent, eps: Latent, t: int, w: WeightSchedule
) -> Latent:
    """omega(t) * (eps_pred - eps), the latent factor of the SDS gradient."""
    if np.asarray(eps_pred).shape != np.asarray(eps).shape:
        raise ValueError("eps_pred / eps shape mismatch")
    return w(t) * (eps_pred - eps)


def sds_residual_recon(
    z_pi: Latent, pseudo_gt_latent: Latent, t: int, w: WeightSchedule, s: NoiseSchedule
) -> Latent:
    """omega(t) * (scale/std) * (z_pi - f): the reconstruction form."""
    if np.asarray(z_pi).shape != np.asarray(pseudo_gt_latent).shape:
        raise ValueError("z_pi / pseudo-ground-truth shape mismatch")
    t = int(t)
    if t < 1:
        raise ValueError("reconstruction residual needs t >= 1 (std(0) = 0)")
    return w(t) * (s.scale(t) / s.std(t)) * (z_pi - pseudo_gt_latent)


@dataclass(frozen=True)
class AnnealingSchedule:
    """Strictly decreasing editing timesteps, largest first."""

    timesteps: tuple[int, ...]
    curve: str = "linear"

    def __post_init__(self):
        ts = self.timesteps
        if len(ts) < 1 or any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timesteps must be strictly decreasing, got {ts}")
        if ts[-1] < 1:
            raise ValueError("timesteps must stay >= 1")

    def __len__(self) -> int:
        return len(self.timesteps)

    def __iter__(self):
        return iter(self.timesteps)


ANNEALING_CURVES = ("linear", "sqrt")


def build_annealing(N: int, t_hi: int, t_lo: int, curve: str = "linear") -> AnnealingSchedule:
    """N strictly decreasing integer timesteps from t_hi down to t_lo."""
    N, t_hi, t_lo = int(N), int(t_hi), int(t_lo)
    if curve not in ANNEALING_CURVES:
        raise ValueError(f"unknown annealing curve {curve!r}; choose from {ANNEALING_CURVES}")
    if N < 2:
        raise ValueError(f"need N >= 2 timesteps, got {N}")
    if not t_hi > t_lo >= 1:
        raise ValueError(f"need t_hi > t_lo >= 1, got t_hi={t_hi}, t_lo={t_lo}")
    if N > t_hi - t_lo + 1:
        raise ValueError(f"cannot fit {N} distinct timesteps into [{t_lo}, {t_hi}]")
    u = np.arange(N, dtype=np.float64) / (N - 1)
    if curve == "sqrt":
        u = np.sqrt(u)
    raw = t_hi - (t_hi - t_lo) * u
    ts = [int(round(v)) for v in raw]
    ts[0], ts[-1] = t_hi, t_lo
    # collapse rounding duplicates by decrementing, then repair from the tail
    for i in range(1, N):
        if ts[i] >= ts[i - 1]:
            ts[i] = ts[i - 1] - 1
    for i in range(N - 2, -1, -1):
        if ts[i] <= ts[i + 1]:
            ts[i] = ts[i + 1] + 1
    if ts[0] != t_hi or ts[-1] != t_lo:
        raise ValueError(f"annealing endpoints not representable: got {ts[0]}..{ts[-1]}")
    return AnnealingSchedule(tuple(ts), curve=curve)


@dataclass
class DistillDemoConfig:
    """Annealed 2D reconstruction demo driven by one pseudo-GT kind.

    The demo edits a flat latent from `source` toward `target` with exact
    analytic scores. Auxiliary/unconditional/negative modes track the
    current latent (re-registered before every step), the desk-scale
    stand-in for models that follow the optimized distribution; this gives
    every kind a closed-form expected pseudo-GT the runner checks against.
    """

    kind: PseudoGtKind = PseudoGtKind.SDS
    shape: tuple[int, ...] = (3, 8, 8)
    steps: int = 200
    T: int = 500
    floor: float = 0.01
    t_hi: int = 450
    t_lo: int = 2
    curve: str = "linear"
    seed: int = 0
    source_value: float = 0.2
    target_value: float = 0.8
    source: Latent | None = None
    target: Latent | None = None
    s0_sq: float = 0.0
    guidance: float = 1.0
    ism_delta_s: int = 5
    rho: float = 1.0   # fraction of the pull applied per step

    def resolve_endpoints(self) -> tuple[Latent, Latent]:
        src = self.source if self.source is not None else np.full(self.shape, self.source_value)
        tgt = self.target if self.target is not None else np.full(self.shape, self.target_value)
        return np.asarray(src, dtype=np.float64), np.asarray(tgt, dtype=np.float64)


@dataclass
class DistillDemoResult:
    kind: PseudoGtKind
    latents: list[Latent]          # iterates, z_0 first
    target_dists: list[float]      # euclidean distance to the target mean
    oracle_errs: list[float]       # max |pseudo_gt - closed form| per step
    final: Latent

    @property
    def final_dist(self) -> float:
        return self.target_dists[-1]


def run_pseudo_gt_demo(cfg: DistillDemoConfig) -> DistillDemoResult:
    from .diffusion import build_schedule
    from .scores import AnalyticGMMScore, Condition

    kind = PseudoGtKind(cfg.kind)
    source, target = cfg.resolve_endpoints()
    s = build_schedule("linear-alphabar", cfg.T, cfg.floor)
    model = AnalyticGMMScore(s, s0_sq=cfg.s0_sq)
    model.register("target", [target])
    model.register("source", [source])
    y = Condition("demo", target_mode="target")
    y_src = Condition("demo-src", target_mode="source")
    current = Condition("demo-current", target_mode="current")
    aux = AnalyticGMMScore(s, s0_sq=cfg.s0_sq) if kind is PseudoGtKind.VSD else None

    ann = build_annealing(cfg.steps, cfg.t_hi, cfg.t_lo, cfg.curve)
    rng = np.random.default_rng(cfg.seed)
    z = source.copy()
    latents, dists, oracle_errs = [z.copy()], [float(np.linalg.norm(z - target))], []
    for t in ann:
        eps = rng.standard_normal(cfg.shape)
        model.register("current", [z])
        if kind is PseudoGtKind.SDS:
            ctx = PseudoGtContext(primary=model)
            expected = target
        elif kind is PseudoGtKind.VSD:
            aux.register("target", [z])
            ctx = PseudoGtContext(primary=model, auxiliary=aux)
            expected = target
        elif kind is PseudoGtKind.DDS:
            ctx = PseudoGtContext(primary=model, ref_latent=source, ref_condition=y_src)
            expected = source + (target - source)
        elif kind is PseudoGtKind.ISM:
            ctx = PseudoGtContext(
                primary=model, null_condition=current, ism_delta_s=cfg.ism_delta_s
            )
            expected = target
        else:
            ctx = PseudoGtContext(
                primary=model, null_condition=current, neg_condition=current,
                guidance=cfg.guidance,
            )
            expected = z + cfg.guidance * (target - z)
        f = pseudo_gt(kind, ctx, z, eps, t, y, s)
        oracle_errs.append(float(np.max(np.abs(f - expected))))
        z = z + cfg.rho * (f - z)
        latents.append(z.copy())
        dists.append(float(np.linalg.norm(z - target)))
    return DistillDemoResult(kind, latents, dists, oracle_errs, z)


class _FixedEps:
    """Score stub returning a stored array; keeps the recon path honest."""

    def __init__(self, value: Latent):
        self.value = value

    def eps(self, z, t, y):
        return self.value


@dataclass
class EquivalenceReport:
    trials: int
    tol: float
    max_abs_diff: float
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"sds-equivalence: {status} over {self.trials} trials, "
            f"max |classic - recon| = {self.max_abs_diff:.3e} (tol {self.tol:.1e})"
        )


def assert_sds_equivalence(
    trials: int,
    seed: int,
    shape: tuple[int, ...] = (3, 8, 8),
    schedule: NoiseSchedule | None = None,
    tol: float = 1e-10,
) -> EquivalenceReport:
    """Check classic vs reconstruction SDS residuals on random draws.

    The classic path multiplies the raw eps difference; the recon path goes
    through pseudo_gt() and the scale/std rewrite. Only the schedule is
    shared between them.
    """
    trials = int(trials)
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    from .diffusion import build_schedule  # local import keeps module deps one-way

    s = schedule if schedule is not None else build_schedule("linear-alphabar", 50, 0.01)
    rng = np.random.default_rng(seed)
    w = sigma_sq_weight(s)
    y = Condition("y")
    worst = 0.0
    for _ in range(trials):
        z_pi = rng.standard_normal(shape)
        eps = rng.standard_normal(shape)
        eps_pred = rng.standard_normal(shape)
        t = int(rng.integers(1, s.T + 1))
        classic = sds_residual_classic(eps_pred, eps, t, w)
        f = pseudo_gt(PseudoGtKind.SDS, PseudoGtContext(primary=_FixedEps(eps_pred)), z_pi, eps, t, y, s)
        recon = sds_residual_recon(z_pi, f, t, w, s)
        worst = max(worst, float(np.max(np.abs(classic - recon))))
    return EquivalenceReport(trials=trials, tol=tol, max_abs_diff=worst, passed=worst <= tol)
