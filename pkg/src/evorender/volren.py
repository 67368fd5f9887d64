"""Volume rendering: emission-absorption compositing over ordered samples
plus a pinhole camera. Training-path math stays on the diffcore tape; camera
ray generation is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import fields as fl
from . import sampling as sp

WHITE = np.array([1.0, 1.0, 1.0])
ALPHA_CAP = 1.0 - 1e-7  # keeps log(1-alpha) derivatives finite


def composite(color, alpha, background=None):
    """Front-to-back blend of ordered (color, alpha) samples:
    C = sum_i c_i a_i prod_{j<i}(1-a_j) + T * bg.

    color: [R, M, 3], alpha: [R, M] in [0, 1]. M may be zero, which yields
    the background and T = 1. Returns (rgb [R, 3], transmittance [R],
    weights [R, M]).
    """
    alpha = dc.as_tensor(alpha)
    color = dc.as_tensor(color)
    n_rays, m = alpha.shape
    if m == 0:
        tail = dc.constant(np.ones(n_rays))
        rgb = dc.constant(np.zeros((n_rays, 3)))
        w = dc.constant(np.zeros((n_rays, 0)))
    else:
        a = dc.clamp(alpha, 0.0, ALPHA_CAP)
        logs = dc.log(1.0 - a)
        trans_inc = dc.exp(dc.cumsum(logs, axis=1))
        ones = dc.constant(np.ones((n_rays, 1)))
        trans_ex = dc.concat([ones, trans_inc[:, :-1]], axis=1)
        w = a * trans_ex
        tail = trans_inc[:, -1]
        rgb = dc.sum(dc.reshape(w, (n_rays, m, 1)) * color, axis=1)
    if background is not None:
        bg = dc.as_tensor(background)
        if bg.ndim == 1:
            bg = dc.reshape(bg, (1, 3))
        rgb = rgb + dc.reshape(tail, (n_rays, 1)) * bg
    return rgb, tail, w


def density_to_alpha(sigma, t, t_far):
    """alpha_i = 1 - exp(-sigma_i * delta_i) with delta from consecutive
    sample gaps; the last gap runs to t_far."""
    sigma = dc.as_tensor(sigma)
    t = dc.as_tensor(t)
    n_rays = t.shape[0]
    last = dc.constant(np.full((n_rays, 1), float(t_far))) - t[:, -1:]
    delta = dc.concat([t[:, 1:] - t[:, :-1], last], axis=1)
    delta = dc.clamp(delta, 0.0, None)
    return 1.0 - dc.exp(-(sigma * delta))


@dataclass
class Camera:
    """Pinhole camera. c2w is a 3x4 [R|t] matrix mapping camera to world;
    the camera looks down its -z axis."""

    width: int
    height: int
    focal: float
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (3, 4):
            raise ValueError("c2w must be 3x4")

    @classmethod
    def look_at(cls, eye, target, up, width, height, focal):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        c2w = np.stack([right, true_up, -fwd], axis=1)
        return cls(width, height, focal, np.concatenate([c2w, eye[:, None]], axis=1))

    def rays(self, pixels=None):
        """Ray origins/directions through pixel centers.

        pixels: optional [K, 2] integer (row, col) array; defaults to the
        full image in row-major order. Directions are unit length.
        """
        if pixels is None:
            rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width),
                                 indexing="ij")
            pixels = np.stack([rr.ravel(), cc.ravel()], axis=1)
        pixels = np.asarray(pixels)
        x = (pixels[:, 1] + 0.5 - self.width / 2.0) / self.focal
        y = -(pixels[:, 0] + 0.5 - self.height / 2.0) / self.focal
        dirs_cam = np.stack([x, y, -np.ones_like(x)], axis=1)
        dirs = dirs_cam @ self.c2w[:, :3].T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.c2w[:, 3], dirs.shape).copy()
        return origins, dirs


def render_rays(field, rays_o, rays_d, t_vals, t_far, gauge=None,
                background=WHITE):
    """Evaluate the field at sample positions and composite.

    t_vals: SampleSet, Tensor, or ndarray of [R, M] sorted positions. When
    positions carry gradients (evolutive sampling) they flow into the
    compositing gaps; world points handed to the field are constants.
    """
    if isinstance(t_vals, sp.SampleSet):
        t_vals = t_vals.positions
    t_tensor = dc.as_tensor(t_vals)
    pts = rays_o[:, None, :] + t_tensor.values[:, :, None] * rays_d[:, None, :]
    flat = pts.reshape(-1, 3)
    sigma, color = fl.field_eval(field, flat, gauge=gauge)
    n_rays, m = t_tensor.shape
    sigma = dc.reshape(sigma, (n_rays, m))
    color = dc.reshape(color, (n_rays, m, 3))
    alpha = density_to_alpha(sigma, t_tensor, t_far)
    return composite(color, alpha, background=background)


def render_image(field, camera, n_coarse, n_fine, mode, gauge=None,
                 background=WHITE, chunk=4096, rng=None, t_near=0.1,
                 t_far=6.0, union_coarse=True):
    """Full-frame render with hierarchical sampling, chunked over pixels.
    Deterministic when rng is None (midpoint variates). Returns an
    [H, W, 3] float array clipped to [0, 1]."""
    origins, dirs = camera.rays()
    out = np.zeros((origins.shape[0], 3))

    def sigma_fn(pts):
        s, _ = fl.field_eval(field, pts, gauge=gauge)
        return s

    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        with dc.Tape():
            samples, _ = sp.hierarchical_sample(
                sigma_fn, origins[lo:hi], dirs[lo:hi], t_near, t_far,
                n_coarse, n_fine, mode, rng=rng, union_coarse=union_coarse)
            rgb, _, _ = render_rays(field, origins[lo:hi], dirs[lo:hi],
                                    samples, t_far, gauge=gauge,
                                    background=background)
        out[lo:hi] = rgb.values
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)


def render_image_fixed(field, camera, m_samples, gauge=None, background=WHITE,
                       chunk=4096, t_near=0.1, t_far=6.0):
    """Reference render with dense uniform midpoint samples, no importance
    pass. Serves as the quadrature oracle in tests and for quick previews."""
    origins, dirs = camera.rays()
    out = np.zeros((origins.shape[0], 3))
    edges = np.linspace(t_near, t_far, m_samples + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    for lo in range(0, origins.shape[0], chunk):
        hi = min(lo + chunk, origins.shape[0])
        t = np.broadcast_to(mids[None, :], (hi - lo, m_samples))
        with dc.Tape():
            rgb, _, _ = render_rays(field, origins[lo:hi], dirs[lo:hi], t,
                                    t_far, gauge=gauge, background=background)
        out[lo:hi] = rgb.values
    return np.clip(out.reshape(camera.height, camera.width, 3), 0.0, 1.0)
