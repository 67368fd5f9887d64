"""Scene representations mapping 3D position to (density, color).

Trainable kinds: a single 3D feature grid (`GridField`), three axis
planes combined by element-wise product (`PlaneField`, TensoRF-style),
and a small MLP with sinusoidal positional encoding (`MlpField`).
`AnalyticField` is the non-trainable ground-truth oracle: constant
density inside spheres/boxes, zero outside.

All trainable queries run on the diffcore tape; out-of-domain points are
clamped to the boundary so gradients stay defined near the edges.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


# -- interpolated containers ----------------------------------------------

class FeaturePlane:
    """R x R x F trainable features over the unit square."""

    def __init__(self, resolution, feature_dim, rng=None, init_scale=0.1):
        if resolution < 2:
            raise ValueError("plane resolution must be >= 2")
        self.resolution = resolution
        self.feature_dim = feature_dim
        if rng is None:
            data = np.zeros((resolution, resolution, feature_dim))
        else:
            data = rng.normal(scale=init_scale, size=(resolution, resolution, feature_dim))
        self.data = dc.param(data)

    def parameters(self):
        return [self.data]


class FeatureGrid3D:
    """R x R x R x F trainable features over the unit cube."""

    def __init__(self, resolution, feature_dim, rng=None, init_scale=0.1):
        if resolution < 2:
            raise ValueError("grid resolution must be >= 2")
        self.resolution = resolution
        self.feature_dim = feature_dim
        if rng is None:
            data = np.zeros((resolution,) * 3 + (feature_dim,))
        else:
            data = rng.normal(scale=init_scale, size=(resolution,) * 3 + (feature_dim,))
        self.data = dc.param(data)

    def parameters(self):
        return [self.data]


def bilinear_sample(plane: FeaturePlane, uv) -> Tensor:
    """Bilinear blend of the 4 surrounding texels; differentiable in both
    the plane data and the query coordinates."""
    uv = dc.as_tensor(uv)
    flat_in = uv.ndim == 1
    if flat_in:
        uv = dc.reshape(uv, (1, 2))
    R = plane.resolution
    x = dc.clamp(uv, 0.0, 1.0) * float(R - 1)
    i0 = np.clip(np.floor(x.values).astype(np.intp), 0, R - 2)
    f = x - dc.constant(i0.astype(np.float64))  # in [0,1] per axis
    fx, fy = f[:, 0:1], f[:, 1:2]
    flat = dc.reshape(plane.data, (R * R, plane.feature_dim))
    ix, iy = i0[:, 0], i0[:, 1]
    c00 = dc.take(flat, ix * R + iy)
    c10 = dc.take(flat, (ix + 1) * R + iy)
    c01 = dc.take(flat, ix * R + iy + 1)
    c11 = dc.take(flat, (ix + 1) * R + iy + 1)
    one = dc.constant(1.0)
    out = ((one - fx) * (one - fy) * c00 + fx * (one - fy) * c10
           + (one - fx) * fy * c01 + fx * fy * c11)
    return dc.reshape(out, (plane.feature_dim,)) if flat_in else out


def trilinear_sample(grid: FeatureGrid3D, p) -> Tensor:
    """3D analogue of bilinear_sample over the 8 surrounding cell corners."""
    p = dc.as_tensor(p)
    flat_in = p.ndim == 1
    if flat_in:
        p = dc.reshape(p, (1, 3))
    R = grid.resolution
    x = dc.clamp(p, 0.0, 1.0) * float(R - 1)
    i0 = np.clip(np.floor(x.values).astype(np.intp), 0, R - 2)
    f = x - dc.constant(i0.astype(np.float64))
    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    flat = dc.reshape(grid.data, (R * R * R, grid.feature_dim))
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    base = (ix * R + iy) * R + iz
    one = dc.constant(1.0)
    out = None
    for dx, wx in ((0, one - fx), (1, fx)):
        for dy, wy in ((0, one - fy), (1, fy)):
            for dz, wz in ((0, one - fz), (1, fz)):
                corner = dc.take(flat, base + (dx * R + dy) * R + dz)
                term = wx * wy * wz * corner
                out = term if out is None else out + term
    return dc.reshape(out, (grid.feature_dim,)) if flat_in else out


def positional_encode(p, degree) -> Tensor:
    """gamma(p): [cos(2^k pi p), sin(2^k pi p)] for k = 0..degree-1,
    concatenated k-major, coordinate next, cos before sin."""
    if degree < 1:
        raise ValueError("encoding degree must be >= 1")
    p = dc.as_tensor(p)
    flat_in = p.ndim == 1
    if flat_in:
        p = dc.reshape(p, (1, p.shape[0]))
    m, d = p.shape
    bands = []
    for k in range(degree):
        ang = p * (float(2 ** k) * np.pi)
        pair = dc.stack([dc.cos(ang), dc.sin(ang)], axis=-1)  # [M, D, 2]
        bands.append(dc.reshape(pair, (m, 2 * d)))
    out = dc.concat(bands, axis=1)
    return dc.reshape(out, (2 * degree * d,)) if flat_in else out


# -- field kinds ----------------------------------------------------------

class MlpField:
    """Positional-encoded MLP; softplus density, sigmoid color.

    The output layer is zero-initialized so a fresh field renders a flat
    gray volume of density softplus(0).
    """

    def __init__(self, rng, hidden=64, depth=4, encode_degree=6, in_dim=3):
        self.encode_degree = encode_degree
        self.in_dim = in_dim
        widths = [2 * encode_degree * in_dim] + [hidden] * depth
        self.layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            w = rng.normal(scale=np.sqrt(2.0 / a), size=(a, b))
            self.layers.append((dc.param(w), dc.param(np.zeros(b))))
        self.out_w = dc.param(np.zeros((widths[-1], 4)))
        self.out_b = dc.param(np.zeros(4))

    def parameters(self):
        ps = []
        for w, b in self.layers:
            ps += [w, b]
        return ps + [self.out_w, self.out_b]

    def raw_outputs(self, p) -> Tensor:
        h = positional_encode(p, self.encode_degree)
        for w, b in self.layers:
            h = dc.relu(h @ w + b)
        return h @ self.out_w + self.out_b


class GridField:
    """Single 3D feature grid with a linear decode head."""

    def __init__(self, rng, resolution=32, feature_dim=8):
        self.grid = FeatureGrid3D(resolution, feature_dim, rng=rng)
        self.head_w = dc.param(rng.normal(scale=0.1, size=(feature_dim, 4)))
        self.head_b = dc.param(np.zeros(4))

    def parameters(self):
        return self.grid.parameters() + [self.head_w, self.head_b]

    def raw_outputs(self, p) -> Tensor:
        return trilinear_sample(self.grid, p) @ self.head_w + self.head_b


class PlaneField:
    """Three axis-aligned feature planes (XY, XZ, YZ) whose sampled
    features are combined by element-wise product, then decoded by a
    linear head. Plane indexing goes through a gauge transform."""

    PLANE_AXES = (("x", "y"), ("x", "z"), ("y", "z"))

    def __init__(self, rng, resolution=32, feature_dim=8):
        self.planes = [FeaturePlane(resolution, feature_dim, rng=rng, init_scale=0.3)
                       for _ in range(3)]
        self.head_w = dc.param(rng.normal(scale=0.1, size=(feature_dim, 4)))
        self.head_b = dc.param(np.zeros(4))

    def parameters(self):
        ps = []
        for pl in self.planes:
            ps += pl.parameters()
        return ps + [self.head_w, self.head_b]

    def raw_from_coords(self, coords) -> Tensor:
        feats = None
        for plane, uv in zip(self.planes, coords):
            s = bilinear_sample(plane, uv)
            feats = s if feats is None else feats * s
        return feats @ self.head_w + self.head_b


class AnalyticField:
    """Piecewise-constant ground truth: sigma0 inside each shape, 0 outside.
    First containing shape wins. Pure numpy; not trainable."""

    def __init__(self, shapes):
        self.shapes = list(shapes)

    def eval(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        sigma = np.zeros(p.shape[0])
        color = np.zeros((p.shape[0], 3))
        unset = np.ones(p.shape[0], dtype=bool)
        for sh in self.shapes:
            inside = sh.contains(p) & unset
            sigma[inside] = sh.sigma0
            color[inside] = sh.color
            unset &= ~inside
        return sigma, color


class Sphere:
    def __init__(self, center, radius, sigma0, color):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.sigma0 = float(sigma0)
        self.color = np.asarray(color, dtype=np.float64)

    def contains(self, p):
        return np.sum((p - self.center) ** 2, axis=1) <= self.radius ** 2


class Box:
    """Axis-aligned box, optionally rotated about its center."""

    def __init__(self, center, half_extents, sigma0, color, rotation=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        self.sigma0 = float(sigma0)
        self.color = np.asarray(color, dtype=np.float64)
        self.rotation = None if rotation is None else np.asarray(rotation, dtype=np.float64)

    def contains(self, p):
        q = p - self.center
        if self.rotation is not None:
            q = q @ self.rotation  # world -> local via R^T rows
        return np.all(np.abs(q) <= self.half_extents, axis=1)


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


# -- unified evaluation ---------------------------------------------------

def field_eval(field, p, gauge=None):
    """Query any field kind at points p (applying the gauge first for
    plane-indexed fields). Returns (sigma, color): Tensors for trainable
    fields, plain arrays wrapped in constants for AnalyticField."""
    if isinstance(field, AnalyticField):
        pv = p.values if isinstance(p, Tensor) else np.asarray(p)
        sig, col = field.eval(pv)
        return dc.constant(sig), dc.constant(col)

    if isinstance(field, PlaneField):
        from .gauge import plane_coords
        coords = plane_coords(gauge, p)
        raw = field.raw_from_coords(coords)
    else:
        # plane-projection gauges reindex plane-backed fields only; grid and
        # MLP fields consume the 3D point directly
        raw = field.raw_outputs(p)
    squeeze = raw.ndim == 1
    if squeeze:
        raw = dc.reshape(raw, (1, 4))
    sigma = dc.softplus(raw[:, 0])
    color = dc.sigmoid(raw[:, 1:4])
    if squeeze:
        return dc.reshape(sigma, ()), dc.reshape(color, (3,))
    return sigma, color


# -- checkpointing --------------------------------------------------------

def field_state(field, prefix=""):
    """Flat name -> array mapping for the ERMF container."""
    if isinstance(field, MlpField):
        out = {}
        for i, (w, b) in enumerate(field.layers):
            out[f"{prefix}layer{i}.w"] = w.values
            out[f"{prefix}layer{i}.b"] = b.values
        out[f"{prefix}out.w"] = field.out_w.values
        out[f"{prefix}out.b"] = field.out_b.values
        return out
    if isinstance(field, GridField):
        return {f"{prefix}grid": field.grid.data.values,
                f"{prefix}head.w": field.head_w.values,
                f"{prefix}head.b": field.head_b.values}
    if isinstance(field, PlaneField):
        out = {f"{prefix}plane{i}": pl.data.values for i, pl in enumerate(field.planes)}
        out[f"{prefix}head.w"] = field.head_w.values
        out[f"{prefix}head.b"] = field.head_b.values
        return out
    raise TypeError(f"cannot checkpoint field of type {type(field).__name__}")


def load_field_state(field, state, prefix=""):
    for name, tensor in _named_params(field, prefix):
        if name not in state:
            raise KeyError(f"checkpoint missing tensor '{name}'")
        tensor.values = np.array(state[name], dtype=np.float64).reshape(tensor.shape)


def _named_params(field, prefix):
    if isinstance(field, MlpField):
        for i, (w, b) in enumerate(field.layers):
            yield f"{prefix}layer{i}.w", w
            yield f"{prefix}layer{i}.b", b
        yield f"{prefix}out.w", field.out_w
        yield f"{prefix}out.b", field.out_b
    elif isinstance(field, GridField):
        yield f"{prefix}grid", field.grid.data
        yield f"{prefix}head.w", field.head_w
        yield f"{prefix}head.b", field.head_b
    elif isinstance(field, PlaneField):
        for i, pl in enumerate(field.planes):
            yield f"{prefix}plane{i}", pl.data
        yield f"{prefix}head.w", field.head_w
        yield f"{prefix}head.b", field.head_b
    else:
        raise TypeError(f"cannot checkpoint field of type {type(field).__name__}")
