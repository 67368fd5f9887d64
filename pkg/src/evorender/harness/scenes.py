"""Synthetic scene presets: analytic geometry inside the unit cube, a
camera ring, and ground-truth views rendered by a dense-quadrature oracle.
Everything is deterministic for a given preset and seed."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .. import fields as fl
from .. import volren as vr

CENTER = np.array([0.5, 0.5, 0.5])
RING_RADIUS = 1.5
T_NEAR = 0.6
T_FAR = 2.5
ORACLE_SAMPLES = 4096


@dataclass
class Scene:
    name: str
    field: fl.AnalyticField
    cameras: list
    views: list                      # ground-truth HxWx3 arrays, one per camera
    background: np.ndarray
    t_near: float = T_NEAR
    t_far: float = T_FAR
    test_indices: tuple = dc_field(default_factory=tuple)

    def split(self):
        train = [i for i in range(len(self.cameras)) if i not in self.test_indices]
        return train, list(self.test_indices)


def ring_cameras(n, width, height, focal, elevation=0.35):
    cams = []
    for k in range(n):
        ang = 2.0 * np.pi * k / n
        eye = CENTER + RING_RADIUS * np.array([
            np.cos(ang) * np.cos(elevation),
            np.sin(elevation),
            np.sin(ang) * np.cos(elevation),
        ])
        cams.append(vr.Camera.look_at(eye, CENTER, [0, 1, 0], width, height, focal))
    return cams


def two_spheres_field():
    return fl.AnalyticField([
        fl.Sphere(center=[0.36, 0.48, 0.42], radius=0.16, sigma0=80.0,
                  color=[0.85, 0.25, 0.2]),
        fl.Sphere(center=[0.65, 0.56, 0.62], radius=0.12, sigma0=80.0,
                  color=[0.2, 0.4, 0.85]),
    ])


def tilted_box_field():
    rot = fl.rotation_about_axis([1.0, 0.6, 0.3], 0.6)
    return fl.AnalyticField([
        fl.Box(center=[0.5, 0.5, 0.5], half_extents=[0.22, 0.1, 0.14],
               sigma0=80.0, color=[0.3, 0.75, 0.35], rotation=rot),
        fl.Sphere(center=[0.3, 0.68, 0.35], radius=0.09, sigma0=80.0,
                  color=[0.9, 0.7, 0.2]),
    ])


PRESETS = {
    "two-spheres": two_spheres_field,
    "tilted-box": tilted_box_field,
}


_SCENE_CACHE = {}


def make_scene(name, n_cameras=20, width=64, height=64, focal=None,
               background=None, oracle_samples=ORACLE_SAMPLES):
    """Build a preset scene and render its ground truth with a dense
    uniform-quadrature oracle (no importance sampling). Results are memoized
    per parameter set; the oracle render is deterministic, so repeated runs
    see identical ground truth."""
    if name not in PRESETS:
        raise ValueError(f"unknown scene preset {name!r}; "
                         f"choose from {sorted(PRESETS)}")
    if focal is None:
        focal = 1.4 * width
    if background is None:
        background = np.ones(3)  # white, matching the synthetic convention
    key = (name, n_cameras, width, height, float(focal),
           tuple(np.asarray(background, dtype=np.float64)), oracle_samples)
    if key in _SCENE_CACHE:
        return _SCENE_CACHE[key]
    field = PRESETS[name]()
    cams = ring_cameras(n_cameras, width, height, focal)
    views = [vr.render_image_fixed(field, cam, oracle_samples,
                                   background=background, chunk=1024,
                                   t_near=T_NEAR, t_far=T_FAR)
             for cam in cams]
    test = tuple(range(0, n_cameras, 5))
    scene = Scene(name=name, field=field, cameras=cams, views=views,
                  background=np.asarray(background, dtype=np.float64),
                  test_indices=test)
    _SCENE_CACHE[key] = scene
    return scene


def target_image(seed, size=64):
    """Procedural RGB target for the 2D splat-fitting task: a handful of
    soft blobs over a gradient background, deterministic per seed."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    img = np.zeros((size, size, 3))
    img[..., 0] = 0.15 + 0.2 * xx
    img[..., 1] = 0.15 + 0.2 * yy
    img[..., 2] = 0.25
    for _ in range(6):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        s = rng.uniform(0.05, 0.18)
        col = rng.uniform(0.2, 1.0, size=3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += blob[..., None] * col[None, None, :]
    return np.clip(img, 0.0, 1.0)
