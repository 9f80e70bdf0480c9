#!/usr/bin/env python3
"""Regenerate the committed scenario files.

The toy scene holds one editable gray splat at the camera pivot and nine
splats on a surrounding ring, viewed by four cameras orbiting the pivot.
The edit recolors and displaces the central splat; the ablation session
additionally offers a mirrored recolor as a second target mode so that
per-view editing trajectories can disagree when the 3D feedback is off.

Run from the repository root:  python3 scenarios/make_scenarios.py
"""

from pathlib import Path

import numpy as np

from splatlab.images import write_pgm
from splatlab.sceneio import save_scene
from splatlab.splats import Camera, GaussianCloud

HERE = Path(__file__).parent

SCENE_SEED = 42
COLOR_DELTA = np.array([0.4, -0.35, -0.15])
POSITION_DELTA = np.array([0.18, 0.1, 0.0])
MASK_RADIUS_PX = 12.0


def rot_y(deg: float) -> np.ndarray:
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])


def make_source() -> GaussianCloud:
    rng = np.random.default_rng(SCENE_SEED)
    n = 10
    pos = np.zeros((n, 3))
    for i in range(1, n):
        ang = 2 * np.pi * (i - 1) / (n - 1)
        rad = 2.6 + 0.15 * rng.uniform()
        pos[i] = [rad * np.cos(ang), rng.uniform(-0.8, 0.8), rad * np.sin(ang)]
    log_scales = np.log(np.r_[0.35, rng.uniform(0.18, 0.28, n - 1)])
    colors = np.vstack([[0.5, 0.5, 0.5], rng.uniform(0.15, 0.85, (n - 1, 3))])
    logits = np.r_[2.0, rng.uniform(0.5, 2.0, n - 1)]
    return GaussianCloud(pos, log_scales, colors, logits)


def make_cameras() -> dict[str, Camera]:
    cams = {}
    for i, deg in enumerate((0.0, 30.0, 60.0, 90.0)):
        cam = Camera(rot_y(deg), np.array([0.0, 0.0, 4.0]), 6.0, 64, 64, id=f"cam{i}")
        cams[cam.id] = cam
    return cams


def center_mask(size: int = 64, radius: float = MASK_RADIUS_PX) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (((xx + 0.5 - size / 2) ** 2 + (yy + 0.5 - size / 2) ** 2) <= radius**2).astype(float)


IDENTITY_SESSION = """\
[session]
scene = toy_scene.txt
source_prompt = a gray sphere among colored spheres
target_prompt = a gray sphere among colored spheres

[schedule]
kind = linear-alphabar
T = 50
floor = 0.01

[annealing]
steps = 24
t_hi = 45
t_lo = 1
curve = linear

[tas]
inner_steps = 15
eta = 2.0
eta_decay = 0.92
lr_position = 1.0
lambda_anchor = 0.01
seed = 0

[score]
model = analytic
s0_sq = 0.0
"""

IDENTITY_TINY_SESSION = """\
[session]
scene = toy_scene.txt
source_prompt = a gray sphere among colored spheres
target_prompt = a gray sphere among colored spheres

[schedule]
kind = linear-alphabar
T = 50
floor = 0.01

[annealing]
steps = 8
t_hi = 45
t_lo = 3
curve = linear

[tas]
inner_steps = 3
eta = 0.05
ctx_len = 2
angle_threshold_deg = 25
seed = 0

[score]
model = tiny
patch = 4
dim = 32
tiny_seed = 7
"""

TOY_EDIT_SESSION = """\
[session]
scene = toy_scene.txt
source_prompt = a gray sphere among colored spheres
target_prompt = a warm orange sphere among colored spheres

[schedule]
kind = linear-alphabar
T = 50
floor = 0.01

[annealing]
steps = 24
t_hi = 45
t_lo = 1
curve = linear

[tas]
inner_steps = 15
eta = 2.0
eta_decay = 0.92
lr_position = 1.0
lambda_lpips = 0.1
lambda_anchor = 0.01
seed = 0

[score]
model = analytic
s0_sq = 0.0
target_scene = toy_scene_target.txt
"""

ABLATION_SESSION = """\
[session]
scene = toy_scene.txt
source_prompt = a gray sphere among colored spheres
target_prompt = a repainted sphere among colored spheres

[schedule]
kind = linear-alphabar
T = 50
floor = 0.01

[annealing]
steps = 24
t_hi = 45
t_lo = 1
curve = linear

[tas]
inner_steps = 15
eta = 2.0
eta_decay = 0.92
lr_position = 1.0
lambda_lpips = 0.1
lambda_anchor = 0.01
seed = 0

[score]
model = analytic
s0_sq = 0.02
target_scenes = toy_scene_target.txt toy_scene_target_alt.txt
target_weights = 0.5 0.5

[mask cam0]
file = mask_center.pgm
[mask cam1]
file = mask_center.pgm
[mask cam2]
file = mask_center.pgm
[mask cam3]
file = mask_center.pgm
"""

DEMO_CONFIG = """\
[demo]
shape = 3 8 8
steps = 200
T = 500
floor = 0.01
t_hi = 450
t_lo = 2
source_value = 0.2
target_value = 0.8
guidance = 1.0
"""


def main() -> None:
    cams = make_cameras()
    source = make_source()
    save_scene(HERE / "toy_scene.txt", source, cams)

    target = source.copy()
    target.colors[0] = source.colors[0] + COLOR_DELTA
    target.positions[0] = source.positions[0] + POSITION_DELTA
    save_scene(HERE / "toy_scene_target.txt", target, cams)

    target_alt = source.copy()
    target_alt.colors[0] = source.colors[0] - COLOR_DELTA
    target_alt.positions[0] = source.positions[0] + POSITION_DELTA
    save_scene(HERE / "toy_scene_target_alt.txt", target_alt, cams)

    write_pgm(HERE / "mask_center.pgm", center_mask())
    (HERE / "identity.session").write_text(IDENTITY_SESSION)
    (HERE / "identity_tiny.session").write_text(IDENTITY_TINY_SESSION)
    (HERE / "toy_edit.session").write_text(TOY_EDIT_SESSION)
    (HERE / "toy_ablation.session").write_text(ABLATION_SESSION)
    (HERE / "demo.cfg").write_text(DEMO_CONFIG)
    print(f"wrote scenario files to {HERE}")


if __name__ == "__main__":
    main()
