"""Trajectory-anchored editing: alternate pseudo-ground-truth formation and
K-step 3D reconstruction over an annealing timestep schedule.

Per outer step n at timestep t, for every camera:

    z_pi    <- latent of the current render
    eps     ~ N(0, I)                       (one draw, shared by both branches)
    z_tgt_t <- scale(t) z_pi   + std(t) eps
    z_src_t <- scale(t) z_src0 + std(t) eps
    f       <- z_pi + gamma(t) (eps_src(z_src_t) - eps_tgt(z_tgt_t))

then K gradient steps pull the rendered views toward the f's under
L1 + lambda_lpips * pyramid + lambda_anchor * anchor.

The f line is the algebraic collapse of forming the noisy target, applying
the consistency-corrected noise prediction, and re-solving for the clean
latent; writing it this way makes the identical-prompt case cancel exactly
(eps_src and eps_tgt are then bitwise equal, so f == z_pi and the cloud
never moves).

The no-feedback ablation iterates the same pseudo-ground-truth recursion
purely in 2D per view (never re-rendering) and only then reconstructs,
which lets per-view noise accumulate into view-inconsistent edit targets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .attention import ContextPartition, CrossAttnAlignment, local_blend
from .denoiser import TinyDenoiser, VcacHooks
from .diffusion import Latent, NoiseSchedule, add_noise
from .losses import (
    average_pool,
    l1_grad,
    l1_loss,
    latent_of_image,
    perceptual_grad,
    perceptual_loss,
    psnr,
)
from .scores import AnalyticGMMScore, Condition
from .splats import (
    Camera,
    CloudGradients,
    GaussianCloud,
    anchor_gradients,
    anchor_loss,
    apply_grad_step,
    render,
    render_backward,
)

METRICS_HEADER = (
    "outer_step", "timestep", "camera", "l1", "perceptual", "anchor",
    "total", "pgt_dist_src", "pgt_dist_tgt",
)


@dataclass
class TasConfig:
    """All editing-loop inputs; every field has a documented default."""

    timesteps: tuple[int, ...]
    inner_steps: int = 15
    eta: float = 0.05
    # declared stability bound: inner-loop totals are monotone (soft, <= 1
    # violation per 100 steps) for eta at or below this value
    eta_stable_bound: float = 0.1
    eta_decay: float = 1.0
    lr_scales: dict | None = None
    lambda_lpips: float = 0.1
    lambda_anchor: float = 0.5
    t_q: int | None = None          # editing-step threshold; default 0.6 * N
    ctx_len: int = 4
    angle_threshold_deg: float = 25.0
    seed: int = 0
    pool: int = 1
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        self.timesteps = ts
        if len(ts) < 1 or any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 1:
            raise ValueError(f"timesteps must be strictly decreasing and >= 1, got {ts}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not 0.0 < self.eta_decay <= 1.0:
            raise ValueError(f"eta_decay must lie in (0, 1], got {self.eta_decay}")
        if self.lambda_lpips < 0.0 or self.lambda_anchor < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.pool < 1:
            raise ValueError(f"pool must be >= 1, got {self.pool}")

    def resolved_t_q(self) -> int:
        if self.t_q is not None:
            return int(self.t_q)
        return max(1, int(round(0.6 * len(self.timesteps))))


class ViewScorer(Protocol):
    """Produces the paired source/target noise predictions for all views."""

    def score_pair(self, z_src_t, z_tgt_t, t: int, step: int): ...


@dataclass
class AnalyticViewScorer:
    """Per-camera analytic modes; identical prompts share one mode registry key."""

    model: AnalyticGMMScore
    src_conditions: list[Condition]
    tgt_conditions: list[Condition]

    def score_pair(self, z_src_t, z_tgt_t, t, step):
        eps_src = [self.model.eps(z, t, y) for z, y in zip(z_src_t, self.src_conditions)]
        eps_tgt = [self.model.eps(z, t, y) for z, y in zip(z_tgt_t, self.tgt_conditions)]
        return eps_src, eps_tgt


def build_analytic_scorer(
    schedule: NoiseSchedule,
    s0_sq: float,
    camera_ids: list[str],
    source_latents: list[Latent],
    y_src: Condition,
    y_tgt: Condition,
    target_means: list[list[Latent]] | None = None,
    target_weights=None,
) -> AnalyticViewScorer:
    """Register one component set per (condition, camera) pair.

    Source modes always hold the cached source view. Target modes hold the
    supplied per-camera means (one per editing target); when the prompts are
    identical the target key collides with the source key and both branches
    read the same components, which is exactly the no-edit semantics.
    """
    model = AnalyticGMMScore(schedule, s0_sq=s0_sq)
    src_conditions, tgt_conditions = [], []
    for m, cam_id in enumerate(camera_ids):
        src_key = f"{y_src.id}@{cam_id}"
        model.register(src_key, [source_latents[m]])
        src_conditions.append(Condition(src_key))
        tgt_key = f"{y_tgt.id}@{cam_id}"
        if tgt_key not in model.modes():
            if target_means is None:
                raise ValueError("target means required when prompts differ")
            model.register(tgt_key, target_means[m], target_weights)
        tgt_conditions.append(Condition(tgt_key))
    return AnalyticViewScorer(model, src_conditions, tgt_conditions)


@dataclass
class DenoiserViewScorer:
    """Tiny-denoiser scorer; the source pass records the activations the
    target pass consumes through the attention-control hooks."""

    model: TinyDenoiser
    y_src: Condition
    y_tgt: Condition
    partition: ContextPartition | None = None
    alignment: CrossAttnAlignment | None = None
    t_q: int = 0
    hooks_enabled: bool = True

    def score_pair(self, z_src_t, z_tgt_t, t, step):
        z_src = np.stack(z_src_t)
        z_tgt = np.stack(z_tgt_t)
        if not self.hooks_enabled:
            eps_src = self.model.eps_frames(z_src, t, self.y_src)
            eps_tgt = self.model.eps_frames(z_tgt, t, self.y_tgt)
            return list(eps_src), list(eps_tgt)
        src_hooks = VcacHooks(partition=self.partition, kv_consistency=True)
        eps_src, cache = self.model.eps_frames(
            z_src, t, self.y_src, hooks=src_hooks, record=True
        )
        tgt_hooks = VcacHooks(
            partition=self.partition,
            kv_consistency=True,
            query_injection=True,
            step=step,
            t_q=self.t_q,
            cross_replace=self.alignment,
        )
        eps_tgt = self.model.eps_frames(
            z_tgt, t, self.y_tgt, hooks=tgt_hooks, source_cache=cache
        )
        return list(eps_src), list(eps_tgt)


@dataclass
class EditSession:
    schedule: NoiseSchedule
    cloud0: GaussianCloud
    cameras: list[Camera]
    scorer: ViewScorer
    y_src: Condition
    y_tgt: Condition
    cfg: TasConfig
    source_latents: list[Latent]
    masks: dict[str, np.ndarray] = field(default_factory=dict)
    target_reference: list[Latent] | None = None

    def __post_init__(self):
        if len(self.source_latents) != len(self.cameras):
            raise ValueError("need one cached source latent per camera")


def render_view_latents(
    cloud: GaussianCloud, cameras: list[Camera], pool: int = 1, background=(0.0, 0.0, 0.0)
) -> list[Latent]:
    return [latent_of_image(render(cloud, cam, background), pool) for cam in cameras]


def _unpool_grad(g: np.ndarray, pool: int) -> np.ndarray:
    if pool == 1:
        return g
    up = np.repeat(np.repeat(g, pool, axis=1), pool, axis=2)
    return up / (pool * pool)


def compute_loss(
    view: Latent,
    pseudo_gt_latent: Latent,
    cloud: GaussianCloud,
    cloud0: GaussianCloud,
    lambda_lpips: float,
    lambda_anchor: float,
):
    """Total editing loss with analytic gradients.

    Returns (scalar, d loss / d view, anchor CloudGradients already scaled
    by lambda_anchor).
    """
    if lambda_lpips < 0.0 or lambda_anchor < 0.0:
        raise ValueError("loss weights must be non-negative")
    l1 = l1_loss(view, pseudo_gt_latent)
    lp = perceptual_loss(view, pseudo_gt_latent)
    la = anchor_loss(cloud, cloud0)
    total = l1 + lambda_lpips * lp + lambda_anchor * la
    grad_view = l1_grad(view, pseudo_gt_latent) + lambda_lpips * perceptual_grad(
        view, pseudo_gt_latent
    )
    anchor_g = CloudGradients.zeros(cloud.n)
    anchor_g.add(anchor_gradients(cloud, cloud0), lambda_anchor)
    return total, grad_view, anchor_g


@dataclass
class MetricsLog:
    """Deterministic per-(outer step, camera) metrics plus in-memory timings.

    Wall-clock entries never enter the canonical CSV so that equal seeds
    give byte-identical metrics files.
    """

    rows: list[dict] = field(default_factory=list)
    inner_totals: list[tuple[int, int, float]] = field(default_factory=list)  # (n, k, total)
    wall_ms: list[tuple[int, float]] = field(default_factory=list)            # (n, elapsed)

    def to_csv(self) -> str:
        lines = [",".join(METRICS_HEADER)]
        for row in self.rows:
            lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                                   for k in METRICS_HEADER))
        return "\n".join(lines) + "\n"

    def timings_csv(self) -> str:
        lines = ["outer_step,wall_ms"]
        for n, ms in self.wall_ms:
            lines.append(f"{n},{ms!r}")
        return "\n".join(lines) + "\n"


def form_pseudo_gts(
    session: EditSession,
    z_pi: list[Latent],
    t: int,
    step: int,
    rng: np.random.Generator,
) -> tuple[list[Latent], list[Latent], int]:
    """Draw one eps per camera, score both branches, assemble pseudo-GTs."""
    s = session.schedule
    eps = [rng.standard_normal(z.shape) for z in z_pi]
    z_tgt_t = [add_noise(s, z_pi[m], eps[m], t) for m in range(len(z_pi))]
    z_src_t = [add_noise(s, session.source_latents[m], eps[m], t) for m in range(len(z_pi))]
    eps_src, eps_tgt = session.scorer.score_pair(z_src_t, z_tgt_t, t, step)
    gamma = s.gamma(t)
    pgts = []
    for m, cam in enumerate(session.cameras):
        f = z_pi[m] + gamma * (eps_src[m] - eps_tgt[m])
        mask = session.masks.get(cam.id)
        if mask is not None:
            f = local_blend(f, session.source_latents[m], mask)
        pgts.append(f)
    return pgts, eps, len(eps)


def _inner_reconstruct(
    session: EditSession,
    cloud: GaussianCloud,
    targets: list[Latent],
    eta: float,
    steps: int,
    n_outer: int,
    metrics: MetricsLog,
) -> GaussianCloud:
    cfg = session.cfg
    n_cams = len(session.cameras)
    for k in range(steps):
        grads = CloudGradients.zeros(cloud.n)
        recon_total = 0.0
        for m, cam in enumerate(session.cameras):
            img = render(cloud, cam, cfg.background)
            view = latent_of_image(img, cfg.pool)
            recon_total += l1_loss(view, targets[m]) + cfg.lambda_lpips * perceptual_loss(
                view, targets[m]
            )
            g_view = l1_grad(view, targets[m]) + cfg.lambda_lpips * perceptual_grad(
                view, targets[m]
            )
            g_img = _unpool_grad(g_view, cfg.pool) / n_cams
            grads.add(render_backward(cloud, cam, g_img, cfg.background))
        grads.add(anchor_gradients(cloud, session.cloud0), cfg.lambda_anchor)
        total = recon_total / n_cams + cfg.lambda_anchor * anchor_loss(cloud, session.cloud0)
        metrics.inner_totals.append((n_outer, k + 1, total))
        cloud = apply_grad_step(cloud, grads, eta, cfg.lr_scales)
    return cloud


def tas_outer_step(
    session: EditSession,
    cloud: GaussianCloud,
    n: int,
    rng: np.random.Generator,
    metrics: MetricsLog,
) -> tuple[GaussianCloud, list[Latent], int]:
    """One outer step: pseudo-GT formation then K reconstruction updates."""
    cfg = session.cfg
    if not 1 <= n <= len(cfg.timesteps):
        raise ValueError(f"outer step {n} outside 1..{len(cfg.timesteps)}")
    t = cfg.timesteps[n - 1]
    started = time.perf_counter()
    z_pi = render_view_latents(cloud, session.cameras, cfg.pool, cfg.background)
    pgts, _, draws = form_pseudo_gts(session, z_pi, t, n, rng)
    eta_n = cfg.eta * cfg.eta_decay ** (n - 1)
    cloud = _inner_reconstruct(session, cloud, pgts, eta_n, cfg.inner_steps, n, metrics)

    views = render_view_latents(cloud, session.cameras, cfg.pool, cfg.background)
    anchor = anchor_loss(cloud, session.cloud0)
    for m, cam in enumerate(session.cameras):
        l1 = l1_loss(views[m], pgts[m])
        lp = perceptual_loss(views[m], pgts[m])
        dist_tgt = (
            l1_loss(pgts[m], session.target_reference[m])
            if session.target_reference is not None
            else float("nan")
        )
        metrics.rows.append({
            "outer_step": n,
            "timestep": t,
            "camera": cam.id,
            "l1": l1,
            "perceptual": lp,
            "anchor": anchor,
            "total": l1 + cfg.lambda_lpips * lp + cfg.lambda_anchor * anchor,
            "pgt_dist_src": l1_loss(pgts[m], session.source_latents[m]),
            "pgt_dist_tgt": dist_tgt,
        })
    metrics.wall_ms.append((n, (time.perf_counter() - started) * 1e3))
    return cloud, pgts, draws


@dataclass
class TasResult:
    cloud: GaussianCloud
    metrics: MetricsLog
    initial_views: list[Latent]
    final_views: list[Latent]
    pgt_history: list[list[Latent]]   # [outer step][camera]
    noise_draws: int
    wall_time_s: float

    def final_psnr(self, references: list[Latent]) -> list[float]:
        return [psnr(v, r) for v, r in zip(self.final_views, references)]


def run_tas(session: EditSession, collect_pgts: bool = True) -> TasResult:
    """Iterate the outer steps over the annealing schedule; deterministic
    given the config seed."""
    cfg = session.cfg
    started = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    metrics = MetricsLog()
    cloud = session.cloud0.copy()
    initial_views = render_view_latents(cloud, session.cameras, cfg.pool, cfg.background)
    pgt_history: list[list[Latent]] = []
    draws = 0
    for n in range(1, len(cfg.timesteps) + 1):
        cloud, pgts, d = tas_outer_step(session, cloud, n, rng, metrics)
        draws += d
        if collect_pgts:
            pgt_history.append(pgts)
    final_views = render_view_latents(cloud, session.cameras, cfg.pool, cfg.background)
    return TasResult(
        cloud=cloud,
        metrics=metrics,
        initial_views=initial_views,
        final_views=final_views,
        pgt_history=pgt_history,
        noise_draws=draws,
        wall_time_s=time.perf_counter() - started,
    )


def trajectory_distances(pgt_history: list[list[Latent]]) -> list[list[float]]:
    """Per-camera L1 distance between consecutive pseudo-GTs, one row per step."""
    out = []
    for prev, cur in zip(pgt_history, pgt_history[1:]):
        out.append([l1_loss(a, b) for a, b in zip(prev, cur)])
    return out


def edit_trajectory_dump(
    session: EditSession, out_dir, result: TasResult | None = None
) -> tuple[TasResult, list[str]]:
    """Write the pseudo-GT sequence as images plus consecutive-step distances.

    Produces one image per (outer step, camera) and pgt_distances.csv with
    the per-camera L1 between consecutive pseudo-GTs. Returns the run result
    and the written paths.
    """
    from pathlib import Path

    from .images import write_ppm

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if result is None:
        result = run_tas(session, collect_pgts=True)
    paths: list[str] = []
    for n, pgts in enumerate(result.pgt_history, start=1):
        for cam, pgt in zip(session.cameras, pgts):
            path = out_dir / f"pgt_step{n:03d}_{cam.id}.ppm"
            write_ppm(path, np.clip(pgt, 0.0, 1.0))
            paths.append(str(path))
    lines = ["step," + ",".join(cam.id for cam in session.cameras)]
    for n, row in enumerate(trajectory_distances(result.pgt_history), start=2):
        lines.append(f"{n}," + ",".join(repr(v) for v in row))
    csv_path = out_dir / "pgt_distances.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    paths.append(str(csv_path))
    return result, paths


# --- ablation variants --------------------------------------------------------

ABLATION_VARIANTS = ("no-tas", "no-vcac")


@dataclass
class AblationResult:
    variant: str
    cloud: GaussianCloud
    edited_views: list[Latent]    # per-camera final 2D edit targets
    final_views: list[Latent]     # renders of the final cloud
    metrics: MetricsLog
    disagreement: float


def cross_view_disagreement(
    views: list[Latent],
    masks: list[np.ndarray] | None,
    references: list[Latent] | None = None,
) -> float:
    """Max pairwise mask-weighted L1 between per-view edited regions.

    With `references` (the cached source views), each view is first reduced
    to its edit delta `view - reference`, so static scene structure seen
    under parallax cancels and only the edit itself is compared. Views must
    be pixel-aligned on the edited region (the scenarios pin the edited
    primitive at the shared camera pivot so its footprint projects
    identically in every view).
    """
    n = len(views)
    if n < 2:
        raise ValueError("need at least two views")
    if references is not None:
        views = [v - r for v, r in zip(views, references)]
    if masks is None:
        masks = [np.ones(views[0].shape[-2:]) for _ in range(n)]
    worst = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            w = np.minimum(masks[i], masks[j])
            denom = views[0].shape[0] * float(np.sum(w))
            if denom == 0.0:
                raise ValueError("empty mask overlap")
            d = float(np.sum(w[None] * np.abs(views[i] - views[j]))) / denom
            worst = max(worst, d)
    return worst


def _edit_views_no_feedback(session: EditSession) -> list[Latent]:
    """Run the pseudo-GT recursion per view in 2D, never re-rendering."""
    cfg = session.cfg
    rng = np.random.default_rng(cfg.seed)
    z2d = [z.copy() for z in session.source_latents]
    for n, t in enumerate(cfg.timesteps, start=1):
        z2d, _, _ = form_pseudo_gts(session, z2d, t, n, rng)
    return z2d


def run_ablation(session: EditSession, variant: str) -> AblationResult:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; choose from {ABLATION_VARIANTS}")
    cfg = session.cfg
    mask_list = [session.masks.get(cam.id) for cam in session.cameras]
    if any(m is None for m in mask_list):
        mask_list = None
    if variant == "no-vcac":
        scorer = session.scorer
        if isinstance(scorer, DenoiserViewScorer):
            from dataclasses import replace

            scorer = replace(scorer, hooks_enabled=False)
        quiet = EditSession(
            schedule=session.schedule, cloud0=session.cloud0, cameras=session.cameras,
            scorer=scorer, y_src=session.y_src, y_tgt=session.y_tgt, cfg=cfg,
            source_latents=session.source_latents, masks=session.masks,
            target_reference=session.target_reference,
        )
        res = run_tas(quiet)
        edited = res.pgt_history[-1]
        return AblationResult(
            variant, res.cloud, edited, res.final_views, res.metrics,
            cross_view_disagreement(edited, mask_list, session.source_latents),
        )
    # no-tas: pseudo-GTs formed without any 3D feedback, then one reconstruction
    edited = _edit_views_no_feedback(session)
    metrics = MetricsLog()
    cloud = session.cloud0.copy()
    for n in range(1, len(cfg.timesteps) + 1):
        eta_n = cfg.eta * cfg.eta_decay ** (n - 1)
        cloud = _inner_reconstruct(session, cloud, edited, eta_n, cfg.inner_steps, n, metrics)
    final_views = render_view_latents(cloud, session.cameras, cfg.pool, cfg.background)
    return AblationResult(
        variant, cloud, edited, final_views, metrics,
        cross_view_disagreement(edited, mask_list, session.source_latents),
    )


def run_full_for_ablation(session: EditSession) -> AblationResult:
    """The full method packaged with the same disagreement metric."""
    res = run_tas(session)
    mask_list = [session.masks.get(cam.id) for cam in session.cameras]
    if any(m is None for m in mask_list):
        mask_list = None
    edited = res.pgt_history[-1]
    return AblationResult(
        "full", res.cloud, edited, res.final_views, res.metrics,
        cross_view_disagreement(edited, mask_list, session.source_latents),
    )
