"""Experiment runner: render, verify, tas, ablate, distill-demo.

Every subcommand writes a RunManifest (manifest.json) into its output
directory before doing work and finalizes it afterwards. All result files
are deterministic given the seed; wall-clock timings live only in the
manifest and in timings.csv, never in the canonical outputs.

Exit codes: 0 success, 1 assertion/check failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .distill import DistillDemoConfig, PseudoGtKind, run_pseudo_gt_demo
from .images import write_image, write_ppm
from .losses import l1_loss, psnr
from .sceneio import ConfigError, load_scene, load_session, parse_sections, save_scene
from .splats import render
from .tas import (
    ABLATION_VARIANTS,
    edit_trajectory_dump,
    run_ablation,
    run_full_for_ablation,
    run_tas,
)
from .verify import SUITES, run_suite

ENV_OUT_ROOT = "SPLATLAB_OUT"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class CliError(Exception):
    """Usage/parse-level failure (exit code 2)."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    threads: int
    out_dir: str
    version: str = __version__
    status: str = "running"
    outputs: list[str] = field(default_factory=list)
    results: dict = field(default_factory=dict)
    wall_time_s: float | None = None

    def path(self) -> Path:
        return Path(self.out_dir) / "manifest.json"

    def write(self) -> None:
        payload = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "threads": self.threads,
            "out_dir": self.out_dir,
            "version": self.version,
            "status": self.status,
            "outputs": self.outputs,
            "results": self.results,
            "wall_time_s": self.wall_time_s,
        }
        self.path().write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def add_output(self, path: Path) -> Path:
        rel = os.path.relpath(path, self.out_dir)
        self.outputs.append(rel)
        return path

    def finalize(self, status: str, started: float, results: dict) -> None:
        self.status = status
        self.results = results
        self.wall_time_s = time.perf_counter() - started
        self.outputs.sort()
        self.write()


def _start_manifest(args, command: str, config: dict) -> RunManifest:
    out_dir = args.out
    if out_dir is None:
        root = os.environ.get(ENV_OUT_ROOT, "runs")
        out_dir = str(Path(root) / command)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command, config=config, seed=args.seed, threads=args.threads, out_dir=out_dir
    )
    manifest.write()
    return manifest


def _float_fmt(x: float) -> str:
    return repr(float(x))


# --- subcommands -----------------------------------------------------------------


def cmd_render(args) -> int:
    started = time.perf_counter()
    cloud, cameras = load_scene(args.scene)
    if args.camera not in cameras:
        raise CliError(
            f"camera {args.camera!r} not in scene (have {sorted(cameras)})"
        )
    manifest = _start_manifest(
        args, "render", {"scene": str(args.scene), "camera": args.camera, "image": args.image}
    )
    cam = cameras[args.camera]
    img = render(cloud, cam, tuple(args.background))
    out_path = Path(manifest.out_dir) / args.image
    write_image(manifest.add_output(out_path), img)
    stats = {
        "min_pixel": float(img.min()),
        "max_pixel": float(img.max()),
        "mean_pixel": float(img.mean()),
    }
    print(
        f"rendered {args.scene}:{args.camera} -> {out_path} "
        f"(min {stats['min_pixel']:.4f}, max {stats['max_pixel']:.4f})"
    )
    manifest.finalize("ok", started, stats)
    return EXIT_OK


def cmd_verify(args) -> int:
    started = time.perf_counter()
    manifest = _start_manifest(args, "verify", {"suite": args.suite})
    report = run_suite(args.suite, seed=args.seed)
    print(report)
    report_path = Path(manifest.out_dir) / f"verify_{args.suite}.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest.add_output(report_path)
    results = {
        "passed": report.passed,
        "checks": len(report.checks),
        "failed": [c.name for c in report.checks if not c.passed],
    }
    manifest.finalize("ok" if report.passed else "failed", started, results)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _dump_views(manifest: RunManifest, tag: str, cameras, views) -> None:
    for cam, view in zip(cameras, views):
        path = Path(manifest.out_dir) / f"{tag}_{cam.id}.ppm"
        write_ppm(manifest.add_output(path), np.clip(view, 0.0, 1.0))


def cmd_tas(args) -> int:
    started = time.perf_counter()
    session = load_session(args.session)
    manifest = _start_manifest(args, "tas", {"session": str(args.session)})
    if args.seed != 0:
        session.cfg.seed = args.seed
    result = run_tas(session)

    _dump_views(manifest, "before", session.cameras, result.initial_views)
    _dump_views(manifest, "after", session.cameras, result.final_views)
    _, dump_paths = edit_trajectory_dump(session, manifest.out_dir, result)
    for p in dump_paths:
        manifest.add_output(Path(p))
    scene_path = Path(manifest.out_dir) / "edited_scene.txt"
    save_scene(scene_path, result.cloud, {c.id: c for c in session.cameras})
    manifest.add_output(scene_path)
    metrics_path = Path(manifest.out_dir) / "metrics.csv"
    metrics_path.write_text(result.metrics.to_csv())
    manifest.add_output(metrics_path)
    (Path(manifest.out_dir) / "timings.csv").write_text(result.metrics.timings_csv())

    results = {
        "outer_steps": len(session.cfg.timesteps),
        "cameras": [c.id for c in session.cameras],
        "noise_draws": result.noise_draws,
        "final_l1_vs_initial": [
            l1_loss(a, b) for a, b in zip(result.final_views, result.initial_views)
        ],
    }
    if session.target_reference is not None:
        results["final_psnr_vs_target"] = result.final_psnr(session.target_reference)
    manifest.finalize("ok", started, results)
    for cam, l1 in zip(session.cameras, results["final_l1_vs_initial"]):
        line = f"{cam.id}: L1 vs initial = {l1:.6f}"
        if "final_psnr_vs_target" in results:
            idx = results["cameras"].index(cam.id)
            line += f", PSNR vs target = {results['final_psnr_vs_target'][idx]:.2f} dB"
        print(line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    if args.variant not in ABLATION_VARIANTS:
        raise CliError(f"unknown variant {args.variant!r}; choose from {ABLATION_VARIANTS}")
    session = load_session(args.session)
    manifest = _start_manifest(
        args, "ablate", {"session": str(args.session), "variant": args.variant}
    )
    if args.seed != 0:
        session.cfg.seed = args.seed
    ablated = run_ablation(session, args.variant)
    full = run_full_for_ablation(session)

    for tag, res in (("full", full), (args.variant, ablated)):
        _dump_views(manifest, f"{tag}_edited", session.cameras, [
            np.clip(v, 0.0, 1.0) for v in res.edited_views
        ])
        _dump_views(manifest, f"{tag}_render", session.cameras, res.final_views)
        path = Path(manifest.out_dir) / f"{tag}_metrics.csv"
        path.write_text(res.metrics.to_csv())
        manifest.add_output(path)

    results = {
        "variant": args.variant,
        "disagreement_full": full.disagreement,
        f"disagreement_{args.variant.replace('-', '_')}": ablated.disagreement,
        "disagreement_ratio": (
            ablated.disagreement / full.disagreement if full.disagreement > 0 else float("inf")
        ),
    }
    manifest.finalize("ok", started, results)
    print(
        f"cross-view disagreement: full = {full.disagreement:.6f}, "
        f"{args.variant} = {ablated.disagreement:.6f} "
        f"(ratio {results['disagreement_ratio']:.3f})"
    )
    return EXIT_OK


_DEMO_KEYS = {
    "steps": int, "T": int, "floor": float, "t_hi": int, "t_lo": int,
    "seed": int, "source_value": float, "target_value": float,
    "s0_sq": float, "guidance": float, "ism_delta_s": int, "rho": float,
}


def _demo_config(kind: str, config_path: str | None, seed: int) -> DistillDemoConfig:
    try:
        kind_val = PseudoGtKind(kind.lower())
    except ValueError as exc:
        raise CliError(
            f"unknown pseudo-ground-truth kind {kind!r}; "
            f"choose from {[k.value for k in PseudoGtKind]}"
        ) from exc
    kwargs: dict = {"kind": kind_val, "seed": seed}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        if path.suffix.lower() == ".json":
            values = {k: str(v) for k, v in json.loads(path.read_text()).items()}
        else:
            sections = parse_sections(path.read_text(), str(path))
            values = {}
            for sec in sections:
                if sec.name != "demo":
                    raise CliError(f"{path}:{sec.lineno}: expected only [demo] sections")
                values.update(sec.values)
        for key, raw in values.items():
            if key == "shape":
                dims = [int(v) for v in raw.split()]
                if len(dims) != 3:
                    raise CliError(f"{path}: shape needs 3 integers, got {raw!r}")
                kwargs["shape"] = tuple(dims)
            elif key == "curve":
                kwargs["curve"] = raw
            elif key in _DEMO_KEYS:
                kwargs[key] = _DEMO_KEYS[key](raw)
            else:
                raise CliError(f"{path}: unknown demo key {key!r}")
    return DistillDemoConfig(**kwargs)


def cmd_distill_demo(args) -> int:
    started = time.perf_counter()
    cfg = _demo_config(args.kind, args.config, args.seed)
    manifest = _start_manifest(
        args, "distill-demo", {"kind": cfg.kind.value, "config": args.config}
    )
    try:
        result = run_pseudo_gt_demo(cfg)
    except ValueError as exc:
        manifest.finalize("failed", started, {"error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    stride = max(1, len(result.latents) // 16)
    for i in range(0, len(result.latents), stride):
        path = Path(manifest.out_dir) / f"latent_step{i:04d}.ppm"
        write_ppm(manifest.add_output(path), np.clip(result.latents[i], 0.0, 1.0))
    curve = ["step,l2_to_target,oracle_err"]
    for i, d in enumerate(result.target_dists):
        err = result.oracle_errs[i - 1] if i > 0 else 0.0
        curve.append(f"{i},{_float_fmt(d)},{_float_fmt(err)}")
    curve_path = Path(manifest.out_dir) / "loss_curve.csv"
    curve_path.write_text("\n".join(curve) + "\n")
    manifest.add_output(curve_path)
    results = {
        "kind": cfg.kind.value,
        "final_l2_to_target": result.final_dist,
        "max_oracle_err": max(result.oracle_errs),
        "converged": result.final_dist <= 1e-2,
    }
    manifest.finalize("ok" if results["converged"] else "failed", started, results)
    print(
        f"{cfg.kind.value}: final L2 to target = {result.final_dist:.3e}, "
        f"max per-step oracle error = {results['max_oracle_err']:.3e}"
    )
    return EXIT_OK if results["converged"] else EXIT_CHECK_FAILED


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatlab",
        description="Desk-scale trajectory-anchored Gaussian-splat editing laboratory",
    )
    parser.add_argument("--version", action="version", version=f"splatlab {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed (default 0)")
    common.add_argument(
        "--threads", type=int, default=1,
        help="worker threads; results are independent of this value",
    )
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--config", type=str, default=None, help="extra config file")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render one camera of a scene")
    p.add_argument("scene")
    p.add_argument("camera")
    p.add_argument("image", help="output file name (.ppm/.png) inside --out")
    p.add_argument("--background", type=float, nargs=3, default=[0.0, 0.0, 0.0])
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("verify", parents=[common], help="run a property suite")
    p.add_argument("suite", choices=SUITES)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("tas", parents=[common], help="run a trajectory-anchored edit")
    p.add_argument("session")
    p.set_defaults(fn=cmd_tas)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation variant")
    p.add_argument("session")
    p.add_argument("variant", choices=ABLATION_VARIANTS)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser(
        "distill-demo", parents=[common], help="annealed 2D pseudo-ground-truth demo"
    )
    p.add_argument("kind", help="sds | vsd | dds | ism | nfsd")
    p.set_defaults(fn=cmd_distill_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.fn(args)
    except (CliError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
