"""Scene and session files: line-oriented `key = value` sections, with JSON
accepted as an alternative encoding of the same schema.

Scene files list primitives and cameras:

    [gaussian]
    position = 0.0 0.5 1.0
    scale = 0.25
    color = 1.0 0.2 0.2
    opacity = 0.8

    [camera front]
    rotation = 1 0 0  0 1 0  0 0 1      # row-major
    translation = 0 0 2
    extent = 4.0
    resolution = 33 33

Session files describe an editing run; see load_session for the sections.
Relative paths inside a file resolve against the file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import build_alignment, partition_contexts
from .denoiser import TinyDenoiser
from .diffusion import NoiseSchedule, build_schedule
from .distill import build_annealing
from .images import read_mask
from .scores import Condition
from .splats import Camera, GaussianCloud
from .tas import (
    DenoiserViewScorer,
    EditSession,
    TasConfig,
    build_analytic_scorer,
    render_view_latents,
)


class ConfigError(ValueError):
    """Parse or schema failure; its message carries file and line context."""


@dataclass
class Section:
    name: str
    label: str
    values: dict[str, str]
    lineno: int


def parse_sections(text: str, origin: str = "<config>") -> list[Section]:
    sections: list[Section] = []
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{origin}:{lineno}: unterminated section header {raw!r}")
            head = line[1:-1].strip().split(None, 1)
            if not head or not head[0]:
                raise ConfigError(f"{origin}:{lineno}: empty section name")
            current = Section(head[0], head[1] if len(head) > 1 else "", {}, lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in current.values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r} in [{current.name}]")
        current.values[key] = value
    return sections


def _floats(text: str, n: int | None, where: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split()]
    except ValueError as exc:
        raise ConfigError(f"{where}: not a number list: {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{where}: expected {n} numbers, got {len(vals)}")
    return vals


def _require(values: dict[str, str], key: str, where: str) -> str:
    if key not in values:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return values[key]


def _logit(opacity: float, where: str) -> float:
    if not 0.0 < opacity < 1.0:
        raise ConfigError(f"{where}: opacity must lie strictly inside (0, 1), got {opacity}")
    return float(np.log(opacity / (1.0 - opacity)))


# --- scenes --------------------------------------------------------------------

def _scene_from_sections(sections: list[Section], origin: str):
    positions, log_scales, colors, logits = [], [], [], []
    cameras: dict[str, Camera] = {}
    for sec in sections:
        where = f"{origin}:{sec.lineno}"
        if sec.name == "gaussian":
            positions.append(_floats(_require(sec.values, "position", where), 3, where))
            scale = _floats(_require(sec.values, "scale", where), 1, where)[0]
            if scale <= 0:
                raise ConfigError(f"{where}: scale must be positive")
            log_scales.append(np.log(scale))
            colors.append(_floats(_require(sec.values, "color", where), 3, where))
            logits.append(_logit(_floats(_require(sec.values, "opacity", where), 1, where)[0], where))
        elif sec.name == "camera":
            if not sec.label:
                raise ConfigError(f"{where}: camera section needs an id, e.g. [camera front]")
            if sec.label in cameras:
                raise ConfigError(f"{where}: duplicate camera id {sec.label!r}")
            rot = np.array(_floats(_require(sec.values, "rotation", where), 9, where)).reshape(3, 3)
            tr = np.array(_floats(_require(sec.values, "translation", where), 3, where))
            extent = _floats(_require(sec.values, "extent", where), 1, where)[0]
            res = _floats(_require(sec.values, "resolution", where), 2, where)
            try:
                cameras[sec.label] = Camera(rot, tr, extent, int(res[0]), int(res[1]), id=sec.label)
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from exc
        else:
            raise ConfigError(f"{where}: unknown scene section [{sec.name}]")
    if not positions:
        cloud = GaussianCloud(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    else:
        try:
            cloud = GaussianCloud(np.array(positions), np.array(log_scales),
                                  np.array(colors), np.array(logits))
        except ValueError as exc:
            raise ConfigError(f"{origin}: {exc}") from exc
    return cloud, cameras


def _scene_from_json(doc: dict, origin: str):
    gaussians = doc.get("gaussians", [])
    positions = [g["position"] for g in gaussians]
    log_scales = [np.log(float(g["scale"])) for g in gaussians]
    colors = [g["color"] for g in gaussians]
    logits = [_logit(float(g["opacity"]), origin) for g in gaussians]
    cloud = GaussianCloud(
        np.array(positions).reshape(-1, 3), np.array(log_scales),
        np.array(colors).reshape(-1, 3), np.array(logits),
    )
    cameras = {}
    for c in doc.get("cameras", []):
        cam = Camera(
            np.array(c["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(c["translation"], dtype=np.float64),
            float(c["extent"]), int(c["resolution"][0]), int(c["resolution"][1]),
            id=str(c["id"]),
        )
        cameras[cam.id] = cam
    return cloud, cameras


def load_scene(path) -> tuple[GaussianCloud, dict[str, Camera]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scene file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json":
        try:
            return _scene_from_json(json.loads(text), str(path))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}: bad scene JSON: {exc}") from exc
    return _scene_from_sections(parse_sections(text, str(path)), str(path))


def format_scene(cloud: GaussianCloud, cameras: dict[str, Camera]) -> str:
    def nums(values) -> str:
        # full round-trip decimals so saving and reloading is lossless
        return " ".join(repr(float(v)) for v in np.atleast_1d(values))

    lines = []
    opac = cloud.opacities
    scales = cloud.scales
    for i in range(cloud.n):
        lines.append("[gaussian]")
        lines.append(f"position = {nums(cloud.positions[i])}")
        lines.append(f"scale = {nums(scales[i])}")
        lines.append(f"color = {nums(cloud.colors[i])}")
        lines.append(f"opacity = {nums(opac[i])}")
        lines.append("")
    for cam in cameras.values():
        lines.append(f"[camera {cam.id}]")
        lines.append(f"rotation = {nums(cam.rotation.ravel())}")
        lines.append(f"translation = {nums(cam.translation)}")
        lines.append(f"extent = {nums(cam.ortho_extent)}")
        lines.append(f"resolution = {cam.width} {cam.height}")
        lines.append("")
    return "\n".join(lines)


def save_scene(path, cloud: GaussianCloud, cameras: dict[str, Camera]) -> None:
    Path(path).write_text(format_scene(cloud, cameras))


# --- prompts -------------------------------------------------------------------

def tokenize(prompt: str, vocab: int = 64) -> tuple[int, ...]:
    """Stable word hashing; identical words map to identical tokens."""
    tokens = []
    for word in prompt.split():
        h = 0
        for b in word.encode("utf-8"):
            h = (h * 131 + b) % 1_000_003
        tokens.append(h % vocab)
    return tuple(tokens)


# --- sessions ------------------------------------------------------------------

_TAS_KEYS = {
    "inner_steps": int, "eta": float, "eta_decay": float,
    "lambda_lpips": float, "lambda_anchor": float, "t_q": int,
    "ctx_len": int, "angle_threshold_deg": float, "seed": int, "pool": int,
}
_LR_KEYS = {
    "lr_position": "position", "lr_log_scale": "log_scale",
    "lr_color": "color", "lr_logit_opacity": "logit_opacity",
}


def _sections_from_json(doc: dict) -> list[Section]:
    sections = []
    for name, body in doc.items():
        if name == "masks":
            for cam_id, file in body.items():
                sections.append(Section("mask", str(cam_id), {"file": str(file)}, 0))
        else:
            sections.append(Section(str(name), "", {k: str(v) for k, v in body.items()}, 0))
    return sections


def load_session(path) -> EditSession:
    """Build an EditSession from a session file.

    Sections: [session] scene/prompts, [schedule] kind/T/floor,
    [annealing] steps/t_hi/t_lo/curve, [tas] loop hyperparameters,
    [score] model=analytic|tiny plus its knobs, [mask <camera>] file=...
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"session file not found: {path}")
    base = path.parent
    if path.suffix.lower() == ".json":
        try:
            sections = _sections_from_json(json.loads(path.read_text()))
        except (AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: bad session JSON: {exc}") from exc
    else:
        sections = parse_sections(path.read_text(), str(path))
    by_name: dict[str, Section] = {}
    masks_cfg: dict[str, str] = {}
    for sec in sections:
        if sec.name == "mask":
            if not sec.label:
                raise ConfigError(f"{path}:{sec.lineno}: mask section needs a camera id")
            masks_cfg[sec.label] = _require(sec.values, "file", f"{path}:{sec.lineno}")
        else:
            if sec.name in by_name:
                raise ConfigError(f"{path}:{sec.lineno}: duplicate section [{sec.name}]")
            by_name[sec.name] = sec

    for required in ("session", "schedule", "annealing"):
        if required not in by_name:
            raise ConfigError(f"{path}: missing [{required}] section")

    sess = by_name["session"].values
    where = str(path)
    scene_path = base / _require(sess, "scene", where)
    cloud0, cameras_map = load_scene(scene_path)
    if not cameras_map:
        raise ConfigError(f"{scene_path}: scene defines no cameras")
    cameras = list(cameras_map.values())
    src_prompt = _require(sess, "source_prompt", where)
    tgt_prompt = _require(sess, "target_prompt", where)

    sched = by_name["schedule"].values
    schedule = build_schedule(
        sched.get("kind", "linear-alphabar"),
        int(_require(sched, "T", where)),
        float(_require(sched, "floor", where)),
    )

    ann = by_name["annealing"].values
    annealing = build_annealing(
        int(_require(ann, "steps", where)),
        int(_require(ann, "t_hi", where)),
        int(_require(ann, "t_lo", where)),
        ann.get("curve", "linear"),
    )
    if annealing.timesteps[0] > schedule.T:
        raise ConfigError(f"{where}: annealing t_hi exceeds schedule T = {schedule.T}")

    tas_vals = by_name.get("tas", Section("tas", "", {}, 0)).values
    kwargs = {"timesteps": annealing.timesteps}
    for key, cast in _TAS_KEYS.items():
        if key in tas_vals:
            kwargs[key] = cast(tas_vals[key])
    if "background" in tas_vals:
        kwargs["background"] = tuple(_floats(tas_vals["background"], 3, where))
    lr_scales = {}
    for key, group in _LR_KEYS.items():
        if key in tas_vals:
            lr_scales[group] = float(tas_vals[key])
    if lr_scales:
        kwargs["lr_scales"] = lr_scales
    try:
        cfg = TasConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc

    score = by_name.get("score", Section("score", "", {"model": "analytic"}, 0)).values
    model_kind = score.get("model", "analytic")
    vocab = int(score.get("vocab", 64))
    y_src = Condition(src_prompt, tokens=tokenize(src_prompt, vocab))
    y_tgt = Condition(tgt_prompt, tokens=tokenize(tgt_prompt, vocab))

    source_latents = render_view_latents(cloud0, cameras, cfg.pool, cfg.background)

    target_reference = None
    if model_kind == "analytic":
        target_means = None
        weights = None
        scene_names = []
        if "target_scenes" in score:
            scene_names = score["target_scenes"].split()
        elif "target_scene" in score:
            scene_names = [score["target_scene"]]
        if scene_names:
            per_scene = []
            for name in scene_names:
                tgt_cloud, _ = load_scene(base / name)
                per_scene.append(
                    render_view_latents(tgt_cloud, cameras, cfg.pool, cfg.background)
                )
            target_means = [[views[m] for views in per_scene] for m in range(len(cameras))]
            target_reference = [per_scene[0][m] for m in range(len(cameras))]
            if "target_weights" in score:
                weights = _floats(score["target_weights"], len(scene_names), where)
        elif y_tgt.id != y_src.id:
            raise ConfigError(f"{where}: analytic score needs target_scene(s) when prompts differ")
        scorer = build_analytic_scorer(
            schedule, float(score.get("s0_sq", 0.0)), [c.id for c in cameras],
            source_latents, y_src, y_tgt, target_means, weights,
        )
    elif model_kind == "tiny":
        latent_shape = source_latents[0].shape
        model = TinyDenoiser(
            latent_shape,
            patch=int(score.get("patch", 4)),
            dim=int(score.get("dim", 32)),
            vocab=vocab,
            seed=int(score.get("tiny_seed", 0)),
        )
        n_cams = len(cameras)
        partition = None
        if n_cams % cfg.ctx_len == 0:
            partition = partition_contexts(
                n_cams, cfg.ctx_len, [c.view_dir for c in cameras], cfg.angle_threshold_deg
            )
        scorer = DenoiserViewScorer(
            model=model, y_src=y_src, y_tgt=y_tgt, partition=partition,
            alignment=build_alignment(y_src.tokens, y_tgt.tokens),
            t_q=cfg.resolved_t_q(),
            hooks_enabled=score.get("hooks", "on") != "off",
        )
    else:
        raise ConfigError(f"{where}: unknown score model {model_kind!r}")

    masks = {}
    for cam_id, file in masks_cfg.items():
        if cam_id not in cameras_map:
            raise ConfigError(f"{where}: mask for unknown camera {cam_id!r}")
        mask = read_mask(base / file)
        cam = cameras_map[cam_id]
        want = (cam.height // cfg.pool, cam.width // cfg.pool)
        if mask.shape != want:
            raise ConfigError(
                f"{where}: mask for {cam_id!r} has shape {mask.shape}, expected {want}"
            )
        masks[cam_id] = mask

    return EditSession(
        schedule=schedule, cloud0=cloud0, cameras=cameras, scorer=scorer,
        y_src=y_src, y_tgt=y_tgt, cfg=cfg, source_latents=source_latents,
        masks=masks, target_reference=target_reference,
    )
