"""Property suites with independent oracles.

Each suite returns a SuiteReport of named checks with the worst observed
error against its tolerance. Oracles are deliberately separate code paths:
scalar loop recomputations for the vectorized samplers, central finite
differences for every gradient, Monte-Carlo posterior means for the
analytic score, and dual-path evaluation for the distillation identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from .denoiser import TinyDenoiser, VcacHooks
from .diffusion import (
    NoiseSchedule,
    add_noise,
    build_schedule,
    ddcm_step,
    ddcm_x0_step,
    ddim_step,
    predict_x0,
)
from .distill import (
    PseudoGtContext,
    PseudoGtKind,
    assert_sds_equivalence,
    build_annealing,
    constant_weight,
    pseudo_gt,
    sds_residual_classic,
    sds_residual_recon,
    sigma_sq_weight,
)
from .losses import average_pool, l1_loss, latent_of_image, perceptual_loss
from .scores import AnalyticGMMScore, Condition
from .splats import Camera, GaussianCloud, render, render_backward

SUITES = ("schedules", "samplers", "equivalence", "gradients", "vcac", "tas-identities")


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"  [{status}] {self.name}: max err {self.max_err:.3e} (tol {self.tol:.1e})"


@dataclass
class SuiteReport:
    suite: str
    seed: int
    checks: list[CheckResult] = field(default_factory=list)

    def check(self, name: str, max_err: float, tol: float) -> None:
        self.checks.append(CheckResult(name, float(max_err), float(tol), float(max_err) <= tol))

    def expect(self, name: str, ok) -> None:
        ok = bool(ok)
        self.checks.append(CheckResult(name, 0.0 if ok else 1.0, 0.0, ok))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "max_err": c.max_err, "tol": c.tol, "passed": c.passed}
                for c in self.checks
            ],
        }

    def __str__(self) -> str:
        head = f"suite {self.suite} (seed {self.seed}): {'PASS' if self.passed else 'FAIL'}"
        return "\n".join([head] + [c.line() for c in self.checks])


def _raises(fn, exc=ValueError) -> bool:
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1.0
    return q


def random_scene(
    seed: int, n: int = 5, size: int = 32, min_depth_gap: float = 1e-3
) -> tuple[GaussianCloud, Camera, np.ndarray]:
    """A random test scene; resampled until camera depths are well separated
    so position probes cannot flip the compositing order."""
    rng = np.random.default_rng(seed)
    while True:
        cloud = GaussianCloud(
            rng.uniform(-1.2, 1.2, (n, 3)),
            np.log(rng.uniform(0.15, 0.45, n)),
            rng.uniform(0.05, 0.95, (n, 3)),
            rng.uniform(-2.0, 2.0, n),
        )
        cam = Camera(
            random_rotation(rng),
            rng.uniform(-0.2, 0.2, 3) + np.array([0.0, 0.0, 3.0]),
            4.0, size, size,
        )
        depths = np.sort(cloud.positions @ cam.rotation.T[:, 2] + cam.translation[2])
        if np.min(np.diff(depths)) > min_depth_gap:
            return cloud, cam, rng.standard_normal((3, size, size))


# --- schedules -----------------------------------------------------------------

def suite_schedules(seed: int = 0) -> SuiteReport:
    rep = SuiteReport("schedules", seed)
    s = build_schedule("linear-alphabar", 4, 0.2)
    rep.check(
        "linear alpha_bar interpolation",
        float(np.max(np.abs(s.alpha_bar - np.array([1.0, 0.8, 0.6, 0.4, 0.2])))),
        1e-12,
    )
    rep.check("t=0 scale/std/gamma", abs(s.scale(0) - 1) + abs(s.std(0)) + abs(s.gamma(0)), 1e-12)
    quarter = NoiseSchedule(np.array([1.0, 0.25]))
    rep.check(
        "alpha_bar=0.25 accessors",
        abs(quarter.scale(1) - 0.5)
        + abs(quarter.std(1) - np.sqrt(0.75))
        + abs(quarter.gamma(1) - np.sqrt(3.0)),
        1e-12,
    )
    worst = 0.0
    for kind in ("linear-alphabar", "cosine"):
        sch = build_schedule(kind, 50, 0.01)
        for t in range(sch.T + 1):
            worst = max(worst, abs(sch.scale(t) ** 2 + sch.std(t) ** 2 - 1.0))
        rep.expect(f"{kind} strictly decreasing", bool(np.all(np.diff(sch.alpha_bar) < 0)))
        rep.expect(
            f"{kind} endpoints", sch.alpha_bar[0] == 1.0 and abs(sch.alpha_bar[-1] - 0.01) < 1e-12
        )
    rep.check("scale^2 + std^2 = 1", worst, 1e-12)
    rep.expect("floor out of range rejected", _raises(lambda: build_schedule("cosine", 10, 1.5)))
    rep.expect("unknown kind rejected", _raises(lambda: build_schedule("quadratic", 10, 0.1)))
    rep.expect(
        "non-monotone alpha_bar rejected",
        _raises(lambda: NoiseSchedule(np.array([1.0, 0.5, 0.6]))),
    )
    return rep


# --- samplers ------------------------------------------------------------------

def _scalar_ddim(abar_t, abar_prev, z, e, sigma, noise):
    x0 = (z - np.sqrt(1 - abar_t) * e) / np.sqrt(abar_t)
    return np.sqrt(abar_prev) * x0 + np.sqrt(max(1 - abar_prev - sigma**2, 0.0)) * e + sigma * noise


def suite_samplers(seed: int = 0) -> SuiteReport:
    rep = SuiteReport("samplers", seed)
    rng = np.random.default_rng(seed)
    s = build_schedule("linear-alphabar", 50, 0.01)
    shape = (3, 8, 8)

    e = rng.standard_normal(shape)
    rep.check("add_noise zero signal", float(np.max(np.abs(add_noise(s, np.zeros(shape), e, 7) - s.std(7) * e))), 1e-14)
    x0 = rng.standard_normal(shape)
    rep.check("add_noise identity at t=0", float(np.max(np.abs(add_noise(s, x0, e, 0) - x0))), 1e-14)
    quarter = NoiseSchedule(np.array([1.0, 0.25]))
    got = add_noise(quarter, np.array([1.0, 1.0]), np.array([2.0, 0.0]), 1)
    want = np.array([0.5 + np.sqrt(0.75) * 2.0, 0.5])
    rep.check("add_noise arithmetic example", float(np.max(np.abs(got - want))), 1e-12)

    worst_inv, worst_scalar = 0.0, 0.0
    for _ in range(50):
        t = int(rng.integers(1, s.T + 1))
        x0 = rng.standard_normal(shape)
        e = rng.standard_normal(shape)
        z_t = add_noise(s, x0, e, t)
        worst_inv = max(worst_inv, float(np.max(np.abs(predict_x0(s, z_t, e, t) - x0))))
        ep = rng.standard_normal(shape)
        ref = (z_t - np.sqrt(1 - s.alpha_bar[t]) * ep) / np.sqrt(s.alpha_bar[t])
        worst_scalar = max(worst_scalar, float(np.max(np.abs(predict_x0(s, z_t, ep, t) - ref))))
    rep.check("predict_x0 inverts add_noise", worst_inv, 1e-10)
    rep.check("predict_x0 scalar recomputation", worst_scalar, 1e-12)
    z = rng.standard_normal(shape)
    rep.check(
        "predict_x0 with zero eps",
        float(np.max(np.abs(predict_x0(s, z, np.zeros(shape), 9) - z / s.scale(9)))),
        1e-14,
    )

    worst_ddim, worst_reduce = 0.0, 0.0
    for _ in range(1000):
        t = int(rng.integers(1, s.T + 1))
        z = rng.standard_normal(shape)
        ep = rng.standard_normal(shape)
        fresh = rng.standard_normal(shape)
        smax = np.sqrt(1.0 - s.alpha_bar[t - 1])
        sigma = float(rng.uniform(0.0, smax * 0.95))
        got = ddim_step(s, z, ep, t, sigma, fresh)
        ref = _scalar_ddim(s.alpha_bar[t], s.alpha_bar[t - 1], z, ep, sigma, fresh)
        worst_ddim = max(worst_ddim, float(np.max(np.abs(got - ref))))
        worst_reduce = max(
            worst_reduce,
            float(np.max(np.abs(ddim_step(s, z, ep, t, float(smax), fresh) - ddcm_step(s, z, ep, t, fresh)))),
        )
    rep.check("ddim scalar recomputation (1000 random steps)", worst_ddim, 1e-12)
    rep.check("ddim reduces to ddcm at sigma=std(t-1)", worst_reduce, 1e-12)
    rep.expect(
        "ddim rejects sigma beyond bound",
        _raises(lambda: ddim_step(s, z, ep, 10, 2.0, fresh)),
    )

    model = AnalyticGMMScore(s, s0_sq=0.0)
    mu = rng.standard_normal(shape)
    model.register("m", [mu])
    y = Condition("m")
    x0 = rng.standard_normal(shape)
    e = rng.standard_normal(shape)
    t = 20
    z_t = add_noise(s, x0, e, t)
    fresh = rng.standard_normal(shape)
    got = ddcm_step(s, z_t, e, t, fresh)
    want = s.scale(t - 1) * x0 + s.std(t - 1) * fresh
    rep.check("ddcm perfect-predictor case", float(np.max(np.abs(got - want))), 1e-10)
    got1 = ddcm_step(s, z_t, e, 1, fresh)
    rep.check(
        "ddcm terminal step is pure prediction",
        float(np.max(np.abs(got1 - predict_x0(s, z_t, e, 1)))),
        1e-14,
    )

    worst_repar = 0.0
    for trial in range(100):
        trng = np.random.default_rng(seed + 1000 + trial)
        z = trng.standard_normal(shape)
        noises = {t: trng.standard_normal(shape) for t in range(1, s.T + 1)}
        preds = {t: trng.standard_normal(shape) for t in range(1, s.T + 1)}
        # path A: latent-space DDCM, then x0 prediction at every step
        track_a = []
        z_t = z.copy()
        for t in range(s.T, 0, -1):
            track_a.append(predict_x0(s, z_t, preds[t], t))
            z_t = ddcm_step(s, z_t, preds[t], t, noises[t])
        # path B: predicted-x0 recursion consuming the same draws
        track_b = [predict_x0(s, z, preds[s.T], s.T)]
        for t in range(s.T - 1, 0, -1):
            track_b.append(ddcm_x0_step(s, track_b[-1], noises[t + 1], preds[t], t))
        worst_repar = max(
            worst_repar,
            max(float(np.max(np.abs(a - b))) for a, b in zip(track_a, track_b)),
        )
    rep.check("x0-track reparameterization (100 trajectories)", worst_repar, 1e-10)

    single = np.random.default_rng(seed + 5)
    zt = single.standard_normal(shape)
    ef, ep2 = single.standard_normal(shape), single.standard_normal(shape)
    t = 13
    ref = zt + np.sqrt(1 - s.alpha_bar[t]) / np.sqrt(s.alpha_bar[t]) * (ef - ep2)
    rep.check(
        "ddcm_x0_step scalar recomputation",
        float(np.max(np.abs(ddcm_x0_step(s, zt, ef, ep2, t) - ref))),
        1e-12,
    )

    # a full DDCM trajectory with the exact deterministic score must land on mu
    srng = np.random.default_rng(seed + 9)
    z_t = srng.standard_normal(shape) * 2.0
    for t in range(s.T, 0, -1):
        ep = model.eps(z_t, t, y)
        z_t = ddcm_step(s, z_t, ep, t, srng.standard_normal(shape))
    final_x0 = z_t  # last step used std(0) = 0, so z_0 is the prediction itself
    rep.check("ddcm sampling drives x0 to the mode", float(np.max(np.abs(final_x0 - mu))), 1e-3)
    return rep


# --- distillation equivalence and zoo -------------------------------------------

def suite_equivalence(seed: int = 0, trials: int = 1000) -> SuiteReport:
    rep = SuiteReport("equivalence", seed)
    s = build_schedule("linear-alphabar", 50, 0.01)
    eq = assert_sds_equivalence(trials, seed=seed, shape=(3, 8, 8), schedule=s)
    rep.check(f"classic vs recon residual ({trials} trials)", eq.max_abs_diff, eq.tol)

    rng = np.random.default_rng(seed)
    shape = (3, 8, 8)
    w = sigma_sq_weight(s)
    e = rng.standard_normal(shape)
    rep.check(
        "zero residual when eps_pred = eps",
        float(np.max(np.abs(sds_residual_classic(e, e, 5, w)))),
        0.0,
    )
    rep.expect("trials = 0 rejected", _raises(lambda: assert_sds_equivalence(0, seed=0)))
    two = NoiseSchedule(np.array([1.0, 0.8]))  # scale/std = 2 at t = 1
    got = sds_residual_recon(np.array([1.0]), np.array([0.0]), 1, constant_weight(1.0), two)
    rep.check("recon scalar example (ratio 2)", abs(float(got[0]) - 2.0), 1e-12)

    model = AnalyticGMMScore(s, s0_sq=0.0)
    mu = rng.standard_normal(shape)
    src = rng.standard_normal(shape)
    model.register("tgt", [mu])
    model.register("src", [src])
    y, y_src = Condition("tgt"), Condition("src")
    z_pi = rng.standard_normal(shape)
    eps = rng.standard_normal(shape)
    t = 17

    class _Echo:
        def eps(self, z, tt, yy):
            return eps

    f = pseudo_gt(PseudoGtKind.SDS, PseudoGtContext(primary=_Echo()), z_pi, eps, t, y, s)
    rep.check("sds with exact-noise predictor returns z_pi", float(np.max(np.abs(f - z_pi))), 0.0)
    f = pseudo_gt(
        PseudoGtKind.DDS,
        PseudoGtContext(primary=model, ref_latent=z_pi, ref_condition=y),
        z_pi, eps, t, y, s,
    )
    rep.check("dds with reference = current cancels", float(np.max(np.abs(f - z_pi))), 0.0)
    f = pseudo_gt(PseudoGtKind.SDS, PseudoGtContext(primary=model), z_pi, eps, t, y, s)
    rep.check("sds with deterministic score equals the mode", float(np.max(np.abs(f - mu))), 1e-10)

    # every kind must decompose as z_pi + gamma * Delta with Delta recomputed
    # directly from score-model calls
    aux = AnalyticGMMScore(s, s0_sq=0.0)
    aux.register("tgt", [mu + 0.3 * rng.standard_normal(shape)])
    model.register("null", [np.zeros(shape)])
    model.register("neg", [-mu])
    null_c, neg_c = Condition("null"), Condition("neg")
    contexts = {
        PseudoGtKind.SDS: PseudoGtContext(primary=model),
        PseudoGtKind.VSD: PseudoGtContext(primary=model, auxiliary=aux),
        PseudoGtKind.DDS: PseudoGtContext(primary=model, ref_latent=src, ref_condition=y_src),
        PseudoGtKind.ISM: PseudoGtContext(primary=model, null_condition=null_c, ism_delta_s=5),
        PseudoGtKind.NFSD: PseudoGtContext(
            primary=model, null_condition=null_c, neg_condition=neg_c, guidance=0.7
        ),
    }
    worst = 0.0
    for kind, ctx in contexts.items():
        f = pseudo_gt(kind, ctx, z_pi, eps, t, y, s)
        z_t = add_noise(s, z_pi, eps, t)
        main = model.eps(z_t, t, y)
        if kind is PseudoGtKind.SDS:
            delta = eps - main
        elif kind is PseudoGtKind.VSD:
            delta = aux.eps(z_t, t, y) - main
        elif kind is PseudoGtKind.DDS:
            delta = model.eps(add_noise(s, src, eps, t), t, y_src) - main
        elif kind is PseudoGtKind.ISM:
            from .distill import _ism_inversion

            z_s, step_lo = _ism_inversion(ctx, z_t, t, s)
            delta = model.eps(z_s, step_lo, null_c) - main
        else:
            e_null = model.eps(z_t, t, null_c)
            delta = model.eps(z_t, t, neg_c) - e_null - 0.7 * (main - e_null)
        worst = max(worst, float(np.max(np.abs(f - (z_pi + s.gamma(t) * delta)))))
    rep.check("zoo decomposition z_pi + gamma * Delta", worst, 1e-12)

    # ISM at s = t-1 with null = y should resemble VSD with an unconditional aux
    ism_ctx = PseudoGtContext(primary=model, null_condition=null_c, ism_delta_s=1)
    f_ism = pseudo_gt(PseudoGtKind.ISM, ism_ctx, z_pi, eps, t, y, s)
    vsd_like = z_pi + s.gamma(t) * (
        model.eps(add_noise(s, z_pi, eps, t), t, null_c)
        - model.eps(add_noise(s, z_pi, eps, t), t, y)
    )
    num = float(np.linalg.norm(f_ism - vsd_like))
    den = float(np.linalg.norm(f_ism - z_pi) + np.linalg.norm(vsd_like - z_pi)) + 1e-12
    rep.check("ism at s = t-1 near unconditional-aux form (qualitative)", num / den, 0.5)

    rep.expect(
        "vsd without auxiliary rejected",
        _raises(lambda: pseudo_gt(PseudoGtKind.VSD, PseudoGtContext(primary=model), z_pi, eps, t, y, s)),
    )
    rep.expect(
        "ism with s >= t rejected",
        _raises(
            lambda: pseudo_gt(
                PseudoGtKind.ISM,
                PseudoGtContext(primary=model, null_condition=null_c, ism_delta_s=5),
                z_pi, eps, 1, y, s,
            )
        ),
    )

    ann = build_annealing(5, 50, 10, "linear")
    rep.expect("linear annealing example", ann.timesteps == (50, 40, 30, 20, 10))
    rep.expect("two-point annealing", build_annealing(2, 50, 1).timesteps == (50, 1))
    sq = build_annealing(4, 40, 10, "sqrt").timesteps
    rep.expect(
        "sqrt annealing strictly decreasing with exact endpoints",
        sq[0] == 40 and sq[-1] == 10 and all(b < a for a, b in zip(sq, sq[1:])),
    )
    rep.expect("infeasible annealing rejected", _raises(lambda: build_annealing(10, 12, 10)))
    return rep


# --- gradients -------------------------------------------------------------------

def relative_errors(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-2) -> np.ndarray:
    """|a - f| / max(|a|, |f|, floor): relative for visible gradients, an
    absolute bound of tol * floor for vanishing ones."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return np.abs(analytic - fd) / denom


def render_grad_fd_check(seed: int, size: int = 32, h: float = 1e-4) -> float:
    cloud, cam, grad_img = random_scene(seed, n=5, size=size)
    bg = (0.1, 0.2, 0.3)

    def objective(flat: np.ndarray) -> float:
        n = cloud.n
        c = GaussianCloud(
            flat[: 3 * n].reshape(n, 3),
            flat[3 * n : 4 * n],
            flat[4 * n : 7 * n].reshape(n, 3),
            flat[7 * n :],
        )
        return float(np.sum(grad_img * render(c, cam, bg)))

    g = render_backward(cloud, cam, grad_img, bg)
    analytic = np.concatenate(
        [g.d_positions.ravel(), g.d_log_scales, g.d_colors.ravel(), g.d_logit_opacities]
    )
    flat = cloud.params_flat()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        fd[i] = (objective(up) - objective(down)) / (2 * h)
    return float(np.max(relative_errors(analytic, fd)))


def suite_gradients(seed: int = 0, scenes: int = 20, size: int = 32) -> SuiteReport:
    rep = SuiteReport("gradients", seed)
    worst = max(render_grad_fd_check(seed * 1000 + i, size=size) for i in range(scenes))
    rep.check(f"render_backward vs central differences ({scenes} scenes)", worst, 1e-4)

    rng = np.random.default_rng(seed)
    # transparent primitive: no pixel influence, ~zero color gradient
    cloud, cam, grad_img = random_scene(seed + 77, n=4, size=size)
    ghost = GaussianCloud(
        np.vstack([cloud.positions, [[0.1, 0.1, 0.5]]]),
        np.append(cloud.log_scales, np.log(0.3)),
        np.vstack([cloud.colors, [[1.0, 0.0, 0.0]]]),
        np.append(cloud.logit_opacities, -20.0),
    )
    base = GaussianCloud(cloud.positions, cloud.log_scales, cloud.colors, cloud.logit_opacities)
    rep.check(
        "null-opacity pixel influence",
        float(np.max(np.abs(render(ghost, cam) - render(base, cam)))),
        1e-6,
    )
    g = render_backward(ghost, cam, grad_img)
    rep.check("null-opacity color gradient", float(np.max(np.abs(g.d_colors[-1]))), 1e-6)

    # analytic score vs finite differences of the closed-form log density
    s = build_schedule("linear-alphabar", 50, 0.01)
    model = AnalyticGMMScore(s, s0_sq=0.3)
    shape = (3, 4, 4)
    model.register(
        "mix", [rng.standard_normal(shape) for _ in range(3)], np.array([0.5, 0.3, 0.2])
    )
    y = Condition("mix")
    worst = 0.0
    h = 1e-5
    for t in (1, 13, 37, 50):
        z = rng.standard_normal(shape)
        got = model.eps(z, t, y)
        fd = np.zeros(shape)
        it = np.nditer(z, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = -(model.log_marginal(zp, t, y) - model.log_marginal(zm, t, y)) / (2 * h)
            it.iternext()
        worst = max(worst, float(np.max(np.abs(got - s.std(t) * fd))))
    rep.check("analytic eps vs -std * grad log q (finite differences)", worst, 1e-6)
    return rep


def gmm_posterior_mc_check(samples: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo posterior-mean oracle for the unit-Gaussian case.

    With x0 ~ N(0,1) and z_t = scale x0 + std eps, E[eps | z_t] should match
    the analytic prediction std * z_t. Estimated by a narrow kernel average
    around a probe value on a scalar latent.
    """
    s = build_schedule("linear-alphabar", 50, 0.01)
    t = 25
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(samples)
    eps = rng.standard_normal(samples)
    z = s.scale(t) * x0 + s.std(t) * eps
    probe = 0.7
    bandwidth = 0.02
    w = np.exp(-0.5 * ((z - probe) / bandwidth) ** 2)
    mc = float(np.sum(w * eps) / np.sum(w))
    model = AnalyticGMMScore(s, s0_sq=1.0)
    model.register("m", [np.zeros((1,))])
    analytic = float(model.eps(np.array([probe]), t, Condition("m"))[0])
    return abs(mc - analytic)


# --- attention control ------------------------------------------------------------

def suite_vcac(seed: int = 0) -> SuiteReport:
    rep = SuiteReport("vcac", seed)
    rng = np.random.default_rng(seed)

    q = rng.standard_normal((2, 5, 4))
    k1 = rng.standard_normal((1, 4))
    v1 = rng.standard_normal((1, 6))
    rep.check(
        "single key returns its value",
        float(np.max(np.abs(attn.attention(q, k1, v1) - v1[0]))),
        1e-12,
    )
    k2 = np.zeros((2, 4))
    v2 = rng.standard_normal((2, 6))
    rep.check(
        "equal logits average the values",
        float(np.max(np.abs(attn.attention(q, k2, v2) - v2.mean(axis=0)))),
        1e-12,
    )
    Q = rng.standard_normal((1, 3, 4))
    K = rng.standard_normal((1, 3, 4))
    V = rng.standard_normal((1, 3, 4))
    got = attn.attention(Q, K, V)
    ref = np.zeros_like(got)
    for i in range(3):
        logits = np.array([float(Q[0, i] @ K[0, j]) / 2.0 for j in range(3)])
        p = np.exp(logits - logits.max())
        p /= p.sum()
        for j in range(3):
            ref[0, i] += p[j] * V[0, j]
    rep.check("attention double-loop recomputation", float(np.max(np.abs(got - ref))), 1e-12)
    probs = attn.softmax_rows(rng.standard_normal((7, 9)) * 30.0)
    rep.check("softmax rows sum to one", float(np.max(np.abs(probs.sum(axis=1) - 1.0))), 1e-9)
    big_v = rng.standard_normal((9, 5))
    out = attn.attention(rng.standard_normal((4, 5)), rng.standard_normal((9, 5)), big_v)
    hull = float(
        np.max(np.maximum(out.max(axis=0) - big_v.max(axis=0), big_v.min(axis=0) - out.min(axis=0)))
    )
    rep.check("outputs stay in the value hull", max(hull, 0.0), 1e-9)

    qs = rng.standard_normal((2, 5, 4))
    qt = rng.standard_normal((2, 5, 4))
    kt = rng.standard_normal((2, 5, 4))
    vt = rng.standard_normal((2, 5, 4))
    at_tq = attn.query_inject(qs, qt, kt, vt, t=7, t_q=7)
    rep.check(
        "injection active at t = t_q",
        float(np.max(np.abs(at_tq - attn.attention(qs, kt, vt)))),
        0.0,
    )
    after = attn.query_inject(qs, qt, kt, vt, t=8, t_q=7)
    rep.check(
        "injection inactive at t_q + 1",
        float(np.max(np.abs(after - attn.attention(qt, kt, vt)))),
        0.0,
    )

    dirs = [np.array([np.cos(a), 0.0, np.sin(a)]) for a in np.linspace(0, 0.6, 8)]
    part = attn.partition_contexts(8, 4, dirs, 25.0)
    rep.expect(
        "N=8 ctx_len=4 partition",
        part.contexts == ((0, 1, 2, 3), (4, 5, 6, 7)) and part.keyframes == (0, 4),
    )
    same = attn.partition_contexts(8, 4, [np.array([0, 0, 1.0])] * 8, 25.0)
    rep.expect("identical view directions stay below threshold", not same.use_reference)
    spread = attn.partition_contexts(
        4, 2, [np.array([0, 0, 1.0]), np.array([0, 0, 1.0]),
               np.array([np.sin(np.radians(30)), 0, np.cos(np.radians(30))]),
               np.array([np.sin(np.radians(30)), 0, np.cos(np.radians(30))])], 25.0
    )
    rep.expect(
        "30-degree keyframes marked reference",
        spread.use_reference and spread.pair_plan()[(0, 1)] == "reference",
    )

    kk = rng.standard_normal((6, 4))
    vv = rng.standard_normal((6, 4))
    qq = np.tile(rng.standard_normal((1, 6, 4)), (3, 1, 1))
    outs = attn.kv_propagate(qq, kk, vv)
    rep.check(
        "identical queries propagate identically",
        float(np.max(np.abs(outs - outs[0]))),
        0.0,
    )
    qf = rng.standard_normal((3, 6, 4))
    prop = attn.kv_propagate(qf, kk, vv)
    per_frame = np.stack([attn.attention(qf[i], kk, vv) for i in range(3)])
    rep.check("propagation matches per-frame recomputation", float(np.max(np.abs(prop - per_frame))), 1e-12)

    qk = rng.standard_normal((2, 5, 4))
    kk2 = rng.standard_normal((2, 5, 4))
    vv2 = rng.standard_normal((2, 5, 4))
    ref_out = attn.kv_reference(qk, kk2, vv2)
    direct = attn.attention(qk, kk2.reshape(-1, 4), vv2.reshape(-1, 4))
    rep.check("reference matches concatenated attention", float(np.max(np.abs(ref_out - direct))), 1e-12)
    single = attn.kv_reference(qk[:1], kk2[:1], vv2[:1])
    rep.check("single-keyframe reference is plain attention", float(np.max(np.abs(single - attn.attention(qk[0], kk2[0], vv2[0])))), 1e-12)
    perm = attn.kv_reference(qk, kk2[::-1].copy(), vv2[::-1].copy())
    rep.check("kv-pair permutation invariance", float(np.max(np.abs(perm - ref_out))), 1e-12)

    maps_src = attn.softmax_rows(rng.standard_normal((3, 10)))
    maps_tgt = attn.softmax_rows(rng.standard_normal((3, 10)))
    same_maps = attn.cross_attn_control(maps_src, maps_tgt, attn.CrossAttnAlignment({}))
    rep.check("empty mapping keeps target maps", float(np.max(np.abs(same_maps - maps_tgt))), 0.0)
    full = attn.cross_attn_control(
        maps_src, maps_tgt, attn.CrossAttnAlignment({0: 0, 1: 1, 2: 2})
    )
    rep.check("identity mapping copies source maps", float(np.max(np.abs(full - maps_src))), 0.0)
    one = attn.cross_attn_control(maps_src, maps_tgt, attn.CrossAttnAlignment({1: 2}))
    expect = maps_tgt.copy()
    expect[1] = maps_src[2]
    rep.check("single-token replacement", float(np.max(np.abs(one - expect))), 0.0)

    z_t = rng.standard_normal((3, 8, 8))
    z_s = rng.standard_normal((3, 8, 8))
    mask = rng.uniform(0, 1, (8, 8))
    blended = attn.local_blend(z_t, z_s, mask)
    rep.check(
        "blend arithmetic",
        float(np.max(np.abs(blended - (mask * z_t + (1 - mask) * z_s)))),
        0.0,
    )
    hard = (mask > 0.5).astype(float)
    hb = attn.local_blend(z_t, z_s, hard)
    rep.check(
        "blend preserves source where mask = 0",
        float(np.max(np.abs((hb - z_s)[:, hard == 0]))) if np.any(hard == 0) else 0.0,
        0.0,
    )
    rep.check(
        "blend preserves target where mask = 1",
        float(np.max(np.abs((hb - z_t)[:, hard == 1]))) if np.any(hard == 1) else 0.0,
        0.0,
    )
    rep.expect(
        "mask outside [0,1] rejected",
        _raises(lambda: attn.local_blend(z_t, z_s, mask + 1.0)),
    )

    # denoiser hook identities
    model = TinyDenoiser((3, 16, 16), patch=4, dim=24, seed=seed + 3)
    y_a = Condition("a", tokens=(3, 9, 1))
    frames = rng.standard_normal((4, 3, 16, 16))
    plain = model.eps_frames(frames, 11, y_a)
    off = model.eps_frames(frames, 11, y_a, hooks=VcacHooks())
    rep.check("all hooks disabled equals plain forward", float(np.max(np.abs(off - plain))), 0.0)

    part4 = attn.partition_contexts(4, 2, [np.array([0, 0, 1.0])] * 4, 25.0)
    _, cache = model.eps_frames(frames, 11, y_a, hooks=None, record=True)
    dual = model.eps_frames(
        frames, 11, y_a,
        hooks=VcacHooks(
            query_injection=True, step=1, t_q=5,
            cross_replace=attn.CrossAttnAlignment({0: 0, 1: 1, 2: 2}),
        ),
        source_cache=cache,
    )
    rep.check(
        "dual-branch identity (injection + map replacement)",
        float(np.max(np.abs(dual - plain))),
        1e-12,
    )
    same_frames = np.tile(frames[:1], (4, 1, 1, 1))
    plain_same = model.eps_frames(same_frames, 11, y_a)
    _, cache_same = model.eps_frames(
        same_frames, 11, y_a, hooks=VcacHooks(partition=part4, kv_consistency=True), record=True
    )
    all_on = model.eps_frames(
        same_frames, 11, y_a,
        hooks=VcacHooks(
            partition=part4, kv_consistency=True, query_injection=True, step=1, t_q=5,
            cross_replace=attn.CrossAttnAlignment({0: 0, 1: 1, 2: 2}),
        ),
        source_cache=cache_same,
    )
    rep.check(
        "all hooks with identical frames equals plain forward",
        float(np.max(np.abs(all_on - plain_same))),
        1e-12,
    )
    hooked = model.eps_frames(
        same_frames, 11, y_a, hooks=VcacHooks(partition=part4, kv_consistency=True)
    )
    rep.check(
        "kv propagation: identical latents give identical eps within a context",
        float(np.max(np.abs(hooked - hooked[0]))),
        1e-12,
    )
    rep.expect(
        "missing source cache rejected",
        _raises(
            lambda: model.eps_frames(
                frames, 11, y_a, hooks=VcacHooks(query_injection=True, step=1, t_q=5)
            )
        ),
    )
    return rep


# --- TAS identities ---------------------------------------------------------------

def _identity_session(seed: int = 0, score: str = "analytic"):
    """A small identical-prompt session built programmatically."""
    from .tas import EditSession, TasConfig, build_analytic_scorer, render_view_latents
    from .tas import DenoiserViewScorer

    rng = np.random.default_rng(seed)
    cloud = GaussianCloud(
        rng.uniform(-0.8, 0.8, (6, 3)),
        np.log(rng.uniform(0.2, 0.4, 6)),
        rng.uniform(0.1, 0.9, (6, 3)),
        rng.uniform(-1.0, 1.5, 6),
    )
    cams = []
    for i, ang in enumerate(np.linspace(0.0, np.pi / 3, 4)):
        c, s_ = np.cos(ang), np.sin(ang)
        rot = np.array([[c, 0, -s_], [0, 1, 0], [s_, 0, c]])
        cams.append(Camera(rot, np.array([0.0, 0.0, 3.0]), 4.0, 32, 32, id=f"cam{i}"))
    schedule = build_schedule("linear-alphabar", 50, 0.01)
    cfg = TasConfig(timesteps=tuple(build_annealing(6, 45, 5).timesteps), inner_steps=3, seed=seed)
    source_latents = render_view_latents(cloud, cams, cfg.pool, cfg.background)
    prompt = "a desk scene"
    y = Condition(prompt, tokens=(5, 11, 2))
    if score == "analytic":
        scorer = build_analytic_scorer(
            schedule, 0.0, [c.id for c in cams], source_latents, y, y
        )
    else:
        model = TinyDenoiser((3, 32, 32), patch=4, dim=24, seed=seed)
        part = attn.partition_contexts(4, 2, [c.view_dir for c in cams], 25.0)
        scorer = DenoiserViewScorer(
            model=model, y_src=y, y_tgt=y, partition=part,
            alignment=attn.build_alignment(y.tokens, y.tokens), t_q=cfg.resolved_t_q(),
        )
    return EditSession(
        schedule=schedule, cloud0=cloud, cameras=cams, scorer=scorer,
        y_src=y, y_tgt=y, cfg=cfg, source_latents=source_latents,
    )


def suite_tas_identities(seed: int = 0) -> SuiteReport:
    from .tas import run_tas

    rep = SuiteReport("tas-identities", seed)
    for score in ("analytic", "tiny"):
        session = _identity_session(seed, score)
        res = run_tas(session)
        worst_pgt = max(
            float(np.max(np.abs(p - z)))
            for pgts, zs in zip(res.pgt_history, [session.source_latents] * len(res.pgt_history))
            for p, z in zip(pgts, zs)
        )
        rep.check(f"identical-prompt pseudo-GT equals render ({score})", worst_pgt, 1e-10)
        final_l1 = max(
            l1_loss(a, b) for a, b in zip(res.final_views, res.initial_views)
        )
        rep.check(f"identical-prompt final views unchanged ({score})", final_l1, 1e-6)
        n_expected = len(session.cfg.timesteps) * len(session.cameras)
        rep.expect(
            f"one noise draw per (step, camera) ({score})", res.noise_draws == n_expected
        )
    session = _identity_session(seed, "analytic")
    r1 = run_tas(session)
    r2 = run_tas(session)
    rep.expect(
        "equal seeds give identical metrics CSVs",
        r1.metrics.to_csv() == r2.metrics.to_csv(),
    )
    rep.expect(
        "equal seeds give identical final clouds",
        np.array_equal(r1.cloud.params_flat(), r2.cloud.params_flat()),
    )
    return rep


def run_suite(name: str, seed: int = 0) -> SuiteReport:
    if name == "schedules":
        return suite_schedules(seed)
    if name == "samplers":
        return suite_samplers(seed)
    if name == "equivalence":
        return suite_equivalence(seed)
    if name == "gradients":
        return suite_gradients(seed)
    if name == "vcac":
        return suite_vcac(seed)
    if name == "tas-identities":
        return suite_tas_identities(seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
