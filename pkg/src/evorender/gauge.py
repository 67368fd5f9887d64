"""Gauge transformations: maps from 3D query space into the coordinate
system used to index a scene representation.

Three variants: identity, predefined orthogonal projection onto the
XY/XZ/YZ planes, and the evolutive variant that adds a learnable,
tanh-bounded residual offset on top of the orthogonal baseline. A
zero-initialized evolutive gauge reproduces its base bit-for-bit, which
is what makes the relay switch loss-continuous.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .fields import FeaturePlane, MlpField, bilinear_sample, positional_encode

PLANE_INDEX = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


class IdentityGauge:
    """Maps p to p; plane-indexed fields fall back to orthogonal drops."""

    def parameters(self):
        return []


class OrthogonalGauge:
    """Drops one coordinate per target plane (XY, XZ, YZ by default)."""

    def __init__(self, planes=("xy", "xz", "yz")):
        self.planes = tuple(planes)

    def parameters(self):
        return []


class PlaneOffsetMap:
    """Offset field backed by a 2-channel feature plane queried at the
    base projection. Zero-initialized."""

    def __init__(self, resolution):
        self.plane = FeaturePlane(resolution, 2)  # zeros

    def raw_offset(self, p, base_uv) -> Tensor:
        return bilinear_sample(self.plane, dc.Tensor(base_uv.values))

    def parameters(self):
        return self.plane.parameters()


class MlpOffsetMap:
    """Offset field backed by a small MLP over the encoded 3D point."""

    def __init__(self, rng, hidden=32, depth=2, encode_degree=4):
        self.encode_degree = encode_degree
        widths = [2 * encode_degree * 3] + [hidden] * depth
        self.layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            self.layers.append((dc.param(rng.normal(scale=np.sqrt(2.0 / a), size=(a, b))),
                                dc.param(np.zeros(b))))
        self.out_w = dc.param(np.zeros((widths[-1], 2)))
        self.out_b = dc.param(np.zeros(2))

    def raw_offset(self, p, base_uv) -> Tensor:
        h = positional_encode(p, self.encode_degree)
        for w, b in self.layers:
            h = dc.relu(h @ w + b)
        return h @ self.out_w + self.out_b

    def parameters(self):
        ps = []
        for w, b in self.layers:
            ps += [w, b]
        return ps + [self.out_w, self.out_b]


class EvolutiveGauge:
    """Orthogonal baseline plus a learnable residual offset per plane:
    q = clamp(base(p) + offset_scale * tanh(raw_offset(p)), 0, 1)."""

    def __init__(self, base: OrthogonalGauge, offset_maps, offset_scale=0.1):
        if len(offset_maps) != len(base.planes):
            raise ValueError("one offset map per target plane required")
        self.base = base
        self.offset_maps = list(offset_maps)
        self.offset_scale = float(offset_scale)
        self.enabled = True  # relay flips this on at the switch step

    @classmethod
    def plane_backed(cls, resolution, offset_scale=0.1, base=None):
        base = base or OrthogonalGauge()
        return cls(base, [PlaneOffsetMap(resolution) for _ in base.planes], offset_scale)

    @classmethod
    def mlp_backed(cls, rng, offset_scale=0.1, base=None, **mlp_kw):
        base = base or OrthogonalGauge()
        return cls(base, [MlpOffsetMap(rng, **mlp_kw) for _ in base.planes], offset_scale)

    def parameters(self):
        ps = []
        for m in self.offset_maps:
            ps += m.parameters()
        return ps

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = bool(flag)


def _project(p, plane_name):
    i, j = PLANE_INDEX[plane_name]
    return dc.stack([p[:, i], p[:, j]], axis=1)


def plane_coords(gauge, p):
    """Per-plane 2D index coordinates for a plane-indexed field."""
    p = dc.as_tensor(p)
    if p.ndim == 1:
        p = dc.reshape(p, (1, 3))
    if gauge is None or isinstance(gauge, IdentityGauge):
        return [_project(p, name) for name in ("xy", "xz", "yz")]
    if isinstance(gauge, OrthogonalGauge):
        return [_project(p, name) for name in gauge.planes]
    if isinstance(gauge, EvolutiveGauge):
        coords = []
        for name, omap in zip(gauge.base.planes, gauge.offset_maps):
            base = _project(p, name)
            if not gauge.enabled:
                coords.append(base)
                continue
            off = dc.tanh(omap.raw_offset(p, base)) * gauge.offset_scale
            coords.append(dc.clamp(base + off, 0.0, 1.0))
        return coords
    raise TypeError(f"unknown gauge type {type(gauge).__name__}")


def apply_gauge(gauge, p):
    """Identity -> p; Orthogonal/Evolutive -> list of per-plane coords."""
    p = dc.as_tensor(p)
    if gauge is None or isinstance(gauge, IdentityGauge):
        return p
    return plane_coords(gauge, p)


class GaugeGradLog:
    """Per-step log of offset-parameter gradient norms (relay diagnostic)."""

    def __init__(self, gauge):
        self.gauge = gauge
        self.steps = []
        self.norms = []

    def record(self, step):
        total = 0.0
        for p in self.gauge.parameters():
            if p.requires_grad and p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        self.steps.append(step)
        self.norms.append(np.sqrt(total))

    def stats(self):
        arr = np.asarray(self.norms)
        if arr.size == 0:
            return {"count": 0, "mean": 0.0, "max": 0.0, "var": 0.0}
        return {"count": int(arr.size), "mean": float(arr.mean()),
                "max": float(arr.max()), "var": float(arr.var())}


def gauge_grad_report(gauge, field, points, loss_fn):
    """One-shot version of the diagnostic: evaluate loss_fn over the given
    sample points and report the offset gradient norm statistics."""
    log = GaugeGradLog(gauge)
    for step, p in enumerate(points):
        for prm in gauge.parameters():
            prm.zero_grad()
        out = dc.record_and_eval(lambda: loss_fn(field, gauge, p), [])
        if out.requires_grad:
            dc.backward(out)
        log.record(step)
    return log.stats()
