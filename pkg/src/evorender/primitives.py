"""Gaussian-splat scene representation with a small CPU rasterizer.

Primitive organization comes in two flavors: the classic heuristic
(clone / sample-split / prune driven by view-space gradient statistics)
and the evolutive variant, where growth directions, growth lengths, and
split geometry are trainable. A hard-forward / soft-backward selection op
keeps discrete choices differentiable.

Derived primitives (grown or split children) render as functions of their
parent's parameters so gradients reach the organization variables; at the
next organization step they are baked into independent leaves.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

COV_FLOOR = 0.3       # px^2 diagonal floor on projected covariance
ALPHA_MAX = 0.999
NEAR_CLIP = 0.05
N_DIRECTIONS = 128
CADENCE = 100
PRUNE_OPACITY = 0.005
SPLIT_FACTOR = 1.6    # heuristic split scale divisor
GRAD_THRESHOLD = 2e-4


# -- selection: hard forward, soft backward ---------------------------------

def reparam_select(logits: Tensor, table) -> Tensor:
    """Pick table[argmax(logits)] exactly (ties -> lowest index); the
    backward pass pretends the output was softmax(logits) @ table, so the
    gradient w.r.t. logits is the softmax Jacobian contracted with table."""
    table = np.asarray(table, dtype=np.float64)
    q = logits.values
    if q.ndim != 1 or q.shape[0] != table.shape[0]:
        raise ValueError("logits must be 1D and match the table length")
    if not np.all(np.isfinite(q)):
        raise dc.NonFiniteError("non-finite selection logits")
    k = int(np.argmax(q))
    out = table[k].copy()

    m = q - np.max(q)
    s = np.exp(m) / np.sum(np.exp(m))

    def bwd(g):
        v = table @ g if table.ndim > 1 else table * g
        sv = float(s @ v)
        return [s * (v - sv)]

    return dc.custom_op("reparam_select", out, [logits], bwd)


def soft_select(logits: Tensor, table) -> Tensor:
    """Fully soft ablation variant: softmax(logits) @ table in both the
    forward and backward pass (the forward output is a blend, not a row)."""
    table = np.asarray(table, dtype=np.float64)
    s = dc.softmax(logits)
    if table.ndim == 1:
        return dc.sum(s * dc.constant(table))
    return s @ dc.constant(table)


def fibonacci_directions(n):
    """Deterministic near-uniform unit directions (spherical Fibonacci)."""
    if n < 2:
        raise ValueError("need at least 2 directions")
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
    d = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def distance_bins(t_max, n):
    if n < 2 or t_max <= 0:
        raise ValueError("need n >= 2 strictly positive bins")
    return np.linspace(t_max / n, t_max, n)


# -- primitive parameter block ------------------------------------------------

class GaussianPrimitive:
    """Trainable parameter block for one splat. Raw parameterizations keep
    constraints implicit: scale = exp(raw), opacity/color via sigmoid,
    rotation via normalized quaternion."""

    def __init__(self, mu, scale, rot=None, opacity=0.5, color=(0.5, 0.5, 0.5),
                 n_dirs=N_DIRECTIONS):
        self.mu = dc.param(np.asarray(mu, dtype=np.float64))
        self.scale_raw = dc.param(np.log(np.asarray(scale, dtype=np.float64)))
        if rot is None:
            rot = (1.0, 0.0, 0.0, 0.0)
        self.rot_raw = dc.param(np.asarray(rot, dtype=np.float64))
        op = float(np.clip(opacity, 1e-6, 1.0 - 1e-6))
        self.opacity_raw = dc.param(np.array(np.log(op / (1.0 - op))))
        col = np.clip(np.asarray(color, dtype=np.float64), 1e-6, 1.0 - 1e-6)
        self.color_raw = dc.param(np.log(col / (1.0 - col)))
        self.grow_logits = dc.param(np.zeros(n_dirs))
        self.grow_len_raw = dc.param(np.array(0.0))
        self.split_shift_raw = dc.param(np.array(0.0))
        self.split_scale_raw = dc.param(np.array(0.0))
        self.grad_accum = 0.0
        self.grad_count = 0

    def params(self):
        return [self.mu, self.scale_raw, self.rot_raw, self.opacity_raw,
                self.color_raw, self.grow_logits, self.grow_len_raw,
                self.split_shift_raw, self.split_scale_raw]

    @property
    def grad_stat(self):
        return self.grad_accum / max(self.grad_count, 1)

    def reset_grad_stat(self):
        self.grad_accum = 0.0
        self.grad_count = 0


def quat_to_rotation(q: Tensor) -> Tensor:
    """Normalized quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    n = dc.sqrt(dc.sum(q * q))
    q = q / n
    w, x, y, z = q[0], q[1], q[2], q[3]
    rows = [
        dc.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)]),
        dc.stack([2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)]),
        dc.stack([2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)]),
    ]
    return dc.stack(rows)


def quat_to_rotation_batch(q: Tensor) -> Tensor:
    """Rows of normalized quaternions (w, x, y, z) to [N, 3, 3] rotations."""
    n = dc.sqrt(dc.sum(q * q, axis=1, keepdims=True))
    q = q / n
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    elems = dc.stack([
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ], axis=1)
    return dc.reshape(elems, (-1, 3, 3))


def _attrs_leaf(g: GaussianPrimitive):
    return {
        "mu": g.mu,
        "scale": dc.exp(g.scale_raw),
        "rot": quat_to_rotation(g.rot_raw),
        "opacity": dc.sigmoid(g.opacity_raw),
        "color": dc.sigmoid(g.color_raw),
    }


# -- projection (EWA) ---------------------------------------------------------

class Splat2D:
    __slots__ = ("mean2d", "cov2d", "depth", "opacity", "color")

    def __init__(self, mean2d, cov2d, depth, opacity, color):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.depth = depth
        self.opacity = opacity
        self.color = color


def project_gaussian(camera, attrs, floor=COV_FLOOR):
    """EWA projection of one 3D Gaussian to screen space.

    attrs carries mu [3], scale [3], rot [3,3], opacity, color Tensors.
    Returns None when the center is behind the near plane. cov2d is
    J W Sigma W^T J^T plus a diagonal floor.
    """
    W = dc.constant(camera.c2w[:, :3].T)      # world -> camera rotation
    eye = camera.c2w[:, 3]
    p_cam = W @ (attrs["mu"] - dc.constant(eye))
    depth = -float(p_cam.values[2])           # camera looks down -z
    if depth <= NEAR_CLIP:
        return None
    f = camera.focal
    x, y, z = p_cam[0], p_cam[1], p_cam[2]
    inv_d = -1.0 / z                           # = 1/depth, kept on tape
    u = f * x * inv_d + (camera.width / 2.0 - 0.5)
    v = -f * y * inv_d + (camera.height / 2.0 - 0.5)
    mean2d = dc.stack([u, v])

    zero = dc.constant(np.array(0.0))
    J = dc.stack([
        dc.stack([f * inv_d, zero, f * x * inv_d * inv_d]),
        dc.stack([zero, -f * inv_d, -f * y * inv_d * inv_d]),
    ])
    s2 = dc.exp(2.0 * dc.log(attrs["scale"]))  # scale^2, stays positive
    R = attrs["rot"]
    sigma3 = (R * dc.reshape(s2, (1, 3))) @ dc.transpose(R)
    sigma_cam = (W @ sigma3) @ dc.transpose(W)
    cov = (J @ sigma_cam) @ dc.transpose(J)
    if floor:
        cov = cov + dc.constant(floor * np.eye(2))
    return Splat2D(mean2d, cov, depth, attrs["opacity"], attrs["color"])


def _patch_bounds(splat, width, height, k_sigma=3.0):
    a, b, c = splat.cov2d.values[0, 0], splat.cov2d.values[0, 1], splat.cov2d.values[1, 1]
    lam = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = k_sigma * np.sqrt(max(lam, 0.0))
    u, v = splat.mean2d.values
    c0 = max(int(np.floor(u - r)), 0)
    c1 = min(int(np.ceil(u + r)), width - 1)
    r0 = max(int(np.floor(v - r)), 0)
    r1 = min(int(np.ceil(v + r)), height - 1)
    if c0 > c1 or r0 > r1:
        return None
    return r0, r1, c0, c1


class SplatBatch:
    """Projection results for the rendered primitives, batched row-wise in
    depth order. index[r] is the attr-list position of row r; rows for
    culled (behind near plane) primitives are absent."""

    __slots__ = ("mean2d", "cov2d", "depth", "opacity", "color", "index")

    def __init__(self, mean2d=None, cov2d=None, depth=None, opacity=None,
                 color=None, index=()):
        self.mean2d = mean2d
        self.cov2d = cov2d
        self.depth = depth
        self.opacity = opacity
        self.color = color
        self.index = np.asarray(index, dtype=np.intp)


def _box_pairs(mean2d, cov2d, width, height, k_sigma=3.0):
    """Active (row, pixel) index pairs: each row's clipped 3-sigma
    axis-aligned box, flattened and sorted by pixel then row position.
    Rows are assumed depth-sorted, so within a pixel the pairs run
    front to back."""
    m = mean2d.shape[0]
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    r = k_sigma * np.sqrt(np.maximum(lam, 0.0))
    u, v = mean2d[:, 0], mean2d[:, 1]
    c0 = np.maximum(np.floor(u - r).astype(int), 0)
    c1 = np.minimum(np.ceil(u + r).astype(int), width - 1)
    r0 = np.maximum(np.floor(v - r).astype(int), 0)
    r1 = np.minimum(np.ceil(v + r).astype(int), height - 1)
    bw = np.maximum(c1 - c0 + 1, 0)
    bh = np.maximum(r1 - r0 + 1, 0)
    sizes = bw * bh
    total = int(sizes.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    rows = np.repeat(np.arange(m, dtype=np.intp), sizes)
    offs = np.repeat(np.cumsum(sizes) - sizes, sizes)
    k = np.arange(total, dtype=np.intp) - offs    # position inside the box
    wr = bw[rows]
    pix = (r0[rows] + k // wr) * width + c0[rows] + k % wr
    srt = np.argsort(pix, kind="stable")          # stable keeps depth order
    return rows[srt], pix[srt]


def _blend_sparse(mean2d, qxx, qxy, qyy, opacity, color, pairs, width, height,
                  background):
    """Alpha evaluation plus front-to-back compositing over the active
    (row, pixel) pairs, recorded as one taped op with an analytic adjoint.
    Cost scales with the covered pixel area instead of rows x pixels.
    Returns the flat [H*W, 3] image."""
    hw = width * height
    r_, p_ = pairs
    mu_v = mean2d.values
    o_v = opacity.values
    col_v = color.values
    qxx_v, qxy_v, qyy_v = qxx.values, qxy.values, qyy.values
    bg = None
    if background is not None:
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64),
                             (3,)).astype(np.float64)
    out = np.tile(bg, (hw, 1)) if bg is not None else np.zeros((hw, 3))
    inputs = (mean2d, qxx, qxy, qyy, opacity, color)

    if r_.size == 0:
        def bwd_empty(g):
            return tuple(np.zeros_like(t.values) for t in inputs)
        return dc.custom_op("blend_sparse", out, inputs, bwd_empty)

    px = (p_ % width).astype(np.float64)
    py = (p_ // width).astype(np.float64)
    dx = px - mu_v[r_, 0]
    dy = py - mu_v[r_, 1]
    quad = qxx_v[r_] * dx * dx + qxy_v[r_] * dx * dy + qyy_v[r_] * dy * dy
    e = np.exp(-0.5 * quad)
    araw = o_v[r_] * e
    alpha = np.minimum(araw, ALPHA_MAX)   # o, e > 0, only the cap binds

    # per-pixel segments; pairs within a segment are front to back
    seg = np.flatnonzero(np.r_[True, p_[1:] != p_[:-1]])
    counts = np.diff(np.r_[seg, r_.size])
    cs = np.cumsum(np.log1p(-alpha))
    cs0 = np.r_[0.0, cs[:-1]]
    base = np.repeat(cs0[seg], counts)
    t_before = np.exp(cs0 - base)
    wgt = alpha * t_before
    pix_u = p_[seg]
    t_end = np.exp(cs[seg + counts - 1] - cs0[seg])

    col_p = col_v[r_]
    for ch in range(3):
        out[:, ch] += np.bincount(p_, weights=wgt * col_p[:, ch],
                                  minlength=hw)
    if bg is not None:
        out[pix_u] += (t_end - 1.0)[:, None] * bg

    m_rows = col_v.shape[0]

    def bwd(g):
        gp = g[p_]                                       # [P, 3]
        gc = np.einsum("pj,pj->p", gp, col_p)
        d_col = np.stack([np.bincount(r_, weights=wgt * gp[:, ch],
                                      minlength=m_rows) for ch in range(3)],
                         axis=1)

        # d/d alpha_k: direct weight term minus the occlusion of every
        # later contribution (and the background) at the same pixel
        z = wgt * gc
        csz = np.cumsum(z)
        basez = np.repeat(np.r_[0.0, csz[:-1]][seg], counts)
        incl = csz - basez
        tail = np.repeat(incl[seg + counts - 1], counts) - incl
        if bg is not None:
            tail = tail + np.repeat(t_end * (g[pix_u] @ bg), counts)
        d_alpha = t_before * gc - tail / (1.0 - alpha)

        d_araw = d_alpha * (araw <= ALPHA_MAX)           # cap, same as clamp
        d_o = np.bincount(r_, weights=d_araw * e, minlength=m_rows)
        d_quad = -0.5 * d_araw * araw
        d_qxx = np.bincount(r_, weights=d_quad * dx * dx, minlength=m_rows)
        d_qxy = np.bincount(r_, weights=d_quad * dx * dy, minlength=m_rows)
        d_qyy = np.bincount(r_, weights=d_quad * dy * dy, minlength=m_rows)
        ddx = d_quad * (2.0 * qxx_v[r_] * dx + qxy_v[r_] * dy)
        ddy = d_quad * (qxy_v[r_] * dx + 2.0 * qyy_v[r_] * dy)
        d_mean = np.stack([np.bincount(r_, weights=-ddx, minlength=m_rows),
                           np.bincount(r_, weights=-ddy, minlength=m_rows)],
                          axis=1)
        return (d_mean, d_qxx, d_qxy, d_qyy, d_o, d_col)

    return dc.custom_op("blend_sparse", out, inputs, bwd)


def rasterize(camera, attr_list, background=None, return_splats=False):
    """Depth-sorted front-to-back alpha blend of projected Gaussians.

    attr_list: per-primitive attribute dicts (see project_gaussian), or a
    pre-batched dict of stacked attribute tensors as produced by
    SplatModel.effective_attrs_batched. Each splat contributes inside its
    3-sigma bounding box only; equal depths tie-break by list index. The
    blend runs over the covered pixels as one taped op, so the tape
    length is independent of the primitive count. Returns an [H, W, 3]
    Tensor, optionally with a SplatBatch so callers can harvest
    view-space position gradients.
    """
    h, w = camera.height, camera.width
    f = camera.focal
    w2c = camera.c2w[:, :3].T                  # world -> camera rotation
    eye = camera.c2w[:, 3]

    def _flat_background():
        if background is None:
            return dc.constant(np.zeros((h, w, 3)))
        bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
        return dc.constant(np.tile(bg, (h, w, 1)))

    if not attr_list:
        img = _flat_background()
        return (img, SplatBatch()) if return_splats else img

    if isinstance(attr_list, dict):
        mu = attr_list["mu"]                                   # [N, 3]
        scale = attr_list["scale"]                             # [N, 3]
        rot = attr_list["rot"]                                 # [N, 3, 3]
        opacity = attr_list["opacity"]                         # [N]
        color = attr_list["color"]                             # [N, 3]
    else:
        mu = dc.stack([a["mu"] for a in attr_list])            # [N, 3]
        scale = dc.stack([a["scale"] for a in attr_list])      # [N, 3]
        rot = dc.stack([a["rot"] for a in attr_list])          # [N, 3, 3]
        opacity = dc.stack([a["opacity"] for a in attr_list])  # [N]
        color = dc.stack([a["color"] for a in attr_list])      # [N, 3]

    p_cam = (mu - dc.constant(eye)) @ dc.constant(w2c.T)   # [N, 3]
    depth_all = -p_cam.values[:, 2]
    keep = np.flatnonzero(depth_all > NEAR_CLIP)
    if keep.size == 0:
        img = _flat_background()
        return (img, SplatBatch()) if return_splats else img
    # depth sort, ties broken by original index
    order = keep[np.lexsort((keep, depth_all[keep]))]

    p_cam = dc.take(p_cam, order)
    scale = dc.take(scale, order)
    rot = dc.take(rot, order)
    opacity = dc.take(opacity, order)
    color = dc.take(color, order)
    m = order.size

    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_d = -1.0 / z                           # = 1/depth, kept on tape
    u = f * x * inv_d + (w / 2.0 - 0.5)
    v = -f * y * inv_d + (h / 2.0 - 0.5)
    mean2d = dc.stack([u, v], axis=1)          # [M, 2]

    s2 = dc.exp(2.0 * dc.log(scale))           # scale^2, stays positive
    sigma3 = (rot * dc.reshape(s2, (-1, 1, 3))) @ dc.transpose(rot, (0, 2, 1))
    sigma_cam = (dc.constant(w2c) @ sigma3) @ dc.constant(w2c.T)

    zero = dc.constant(np.zeros(m))
    jrow = dc.stack([f * inv_d, zero, f * x * inv_d * inv_d,
                     zero, -f * inv_d, -f * y * inv_d * inv_d], axis=1)
    J = dc.reshape(jrow, (-1, 2, 3))
    cov = (J @ sigma_cam) @ dc.transpose(J, (0, 2, 1))     # [M, 2, 2]
    cov = cov + dc.constant(COV_FLOOR * np.eye(2))

    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    qxx = c / det
    qxy = -2.0 * b / det
    qyy = a / det

    pairs = _box_pairs(mean2d.values, cov.values, w, h)
    flat = _blend_sparse(mean2d, qxx, qxy, qyy, opacity, color,
                         pairs, w, h, background)
    img = dc.reshape(flat, (h, w, 3))
    if return_splats:
        return img, SplatBatch(mean2d=mean2d, cov2d=cov,
                               depth=depth_all[order], opacity=opacity,
                               color=color, index=order)
    return img


# -- evolutive organization ----------------------------------------------------

def grow_delta_spherical(g: GaussianPrimitive, dirs, v_max, select="reparam"):
    """Displacement of a spherically grown child: direction selected from
    dirs by the grow logits, length v_max * sigmoid(grow_len_raw). v_max is
    frozen at grow time (2 * max parent std dev)."""
    pick = soft_select if select == "soft" else reparam_select
    d = pick(g.grow_logits, dirs)
    return d * (float(v_max) * dc.sigmoid(g.grow_len_raw))


def grow_delta_radial(g: GaussianPrimitive, direction, bins, select="reparam"):
    """Displacement along a fixed unit direction with a selected distance."""
    pick = soft_select if select == "soft" else reparam_select
    t = pick(g.grow_logits[: len(bins)], bins)
    return dc.constant(np.asarray(direction, dtype=np.float64)) * t


def split_children_attrs(g: GaussianPrimitive):
    """Differentiable split: children at mu +/- R(scale * sigmoid(s')),
    scales divided by phi = 1.2 * sigmoid(v) + 1 (v=0 recovers the
    heuristic 1.6 divisor exactly)."""
    base = _attrs_leaf(g)
    shift_local = base["scale"] * dc.sigmoid(g.split_shift_raw)
    delta = base["rot"] @ shift_local
    phi = 1.2 * dc.sigmoid(g.split_scale_raw) + 1.0
    out = []
    for sign in (1.0, -1.0):
        out.append({
            "mu": base["mu"] + sign * delta,
            "scale": base["scale"] / phi,
            "rot": base["rot"],
            "opacity": base["opacity"],
            "color": base["color"],
        })
    return out


class _Entry:
    """One rendered primitive: a leaf, a grown child (derived from parent
    until the next organization step), or one half of a learned split."""

    __slots__ = ("kind", "prim", "parent", "v_max", "sign")

    def __init__(self, kind, prim=None, parent=None, v_max=None, sign=1.0):
        self.kind = kind        # leaf | grown | split
        self.prim = prim        # leaf params (None while derived)
        self.parent = parent    # GaussianPrimitive supplying derived attrs
        self.v_max = v_max
        self.sign = sign


class SplatModel:
    """Primitive set plus organization state. Owns the optimizer-facing
    parameter list; the trainer registers/unregisters through the hooks."""

    def __init__(self, n_dirs=N_DIRECTIONS, cadence=CADENCE, cap=100_000,
                 grad_threshold=GRAD_THRESHOLD, scale_threshold=0.01,
                 prune_opacity=PRUNE_OPACITY, grow_kind="spherical",
                 radial_t_max=0.5, n_bins=N_DIRECTIONS, select_mode="reparam"):
        self.entries: list[_Entry] = []
        self.dirs = fibonacci_directions(n_dirs)
        self.bins = distance_bins(radial_t_max, n_bins)
        self.cadence = cadence
        self.cap = cap
        self.grad_threshold = grad_threshold
        self.scale_threshold = scale_threshold
        self.prune_opacity = prune_opacity
        self.grow_kind = grow_kind
        self.select_mode = select_mode
        self.n_dirs = n_dirs
        self.optimizer = None
        self.skipped_densify = False
        self.grew_with_gradient = False

    # -- parameter bookkeeping ------------------------------------------
    def _register(self, prim):
        if self.optimizer is not None:
            for p in prim.params():
                self.optimizer.add_param(p)

    def _unregister(self, prim):
        if self.optimizer is not None:
            for p in prim.params():
                self.optimizer.remove_param(p)

    def add_leaf(self, prim: GaussianPrimitive):
        self.entries.append(_Entry("leaf", prim=prim))
        self._register(prim)

    def attach_optimizer(self, optimizer):
        self.optimizer = optimizer
        for e in self.entries:
            if e.prim is not None:
                for p in e.prim.params():
                    optimizer.add_param(p)

    @property
    def n_primitives(self):
        return len(self.entries)

    def leaves(self):
        return [e.prim for e in self.entries if e.kind == "leaf"]

    # -- rendering-facing view -------------------------------------------
    def _derived_attrs(self, e: _Entry):
        if e.kind == "grown":
            base = _attrs_leaf(e.parent)
            if self.grow_kind == "radial":
                direction = self.dirs[0]
                delta = grow_delta_radial(e.parent, direction, self.bins,
                                          select=self.select_mode)
            else:
                delta = grow_delta_spherical(e.parent, self.dirs, e.v_max,
                                             select=self.select_mode)
            base["mu"] = base["mu"] + delta
            return base
        pair = split_children_attrs(e.parent)
        return pair[0] if e.sign > 0 else pair[1]

    def effective_attrs(self):
        """Attribute dicts for every rendered primitive, evaluated on the
        current tape. Derived entries pull from their parent's params."""
        out = []
        for e in self.entries:
            if e.kind == "leaf":
                out.append(_attrs_leaf(e.prim))
            else:
                out.append(self._derived_attrs(e))
        return out

    def effective_attrs_batched(self):
        """Same attributes as effective_attrs but stacked into one tensor
        per field ([N, 3] mu, [N, 3] scale, [N, 3, 3] rot, [N] opacity,
        [N, 3] color) so the tape does not grow with the primitive count.
        Leaves share a single batched transform; derived entries are built
        individually and spliced back into entry order."""
        leaf_rows, derived_rows = [], []
        for i, e in enumerate(self.entries):
            (leaf_rows if e.kind == "leaf" else derived_rows).append(i)
        if not self.entries:
            return None
        batch = None
        if leaf_rows:
            prims = [self.entries[i].prim for i in leaf_rows]
            batch = {
                "mu": dc.stack([g.mu for g in prims]),
                "scale": dc.exp(dc.stack([g.scale_raw for g in prims])),
                "rot": quat_to_rotation_batch(
                    dc.stack([g.rot_raw for g in prims])),
                "opacity": dc.sigmoid(dc.stack([g.opacity_raw for g in prims])),
                "color": dc.sigmoid(dc.stack([g.color_raw for g in prims])),
            }
            if not derived_rows:
                return batch
        derived = [self._derived_attrs(self.entries[i]) for i in derived_rows]
        dbatch = {k: dc.stack([d[k] for d in derived])
                  for k in ("mu", "scale", "rot", "opacity", "color")}
        if batch is None:
            return dbatch
        # rows are leaves first, then derived; permute back to entry order
        perm = np.argsort(np.asarray(leaf_rows + derived_rows))
        return {k: dc.take(dc.concat([batch[k], dbatch[k]]), perm)
                for k in batch}

    def record_view_gradients(self, splats):
        """Accumulate ||d loss / d mean2d|| for each rendered primitive;
        call after backward with the SplatBatch from rasterize."""
        if splats is None or splats.mean2d is None or splats.mean2d.grad is None:
            return
        norms = np.linalg.norm(splats.mean2d.grad, axis=1)
        for row, i in enumerate(splats.index):
            e = self.entries[i]
            target = e.prim if e.prim is not None else e.parent
            target.grad_accum += float(norms[row])
            target.grad_count += 1

    # -- organization -----------------------------------------------------
    def materialize(self):
        """Bake derived entries into independent leaves. Split parents'
        parameter blocks are retired; grown children get fresh params
        copied from the realized attribute values."""
        with dc.Tape():
            attrs = self.effective_attrs()
        new_entries = []
        retired = []
        for e, a in zip(self.entries, attrs):
            if e.kind == "leaf":
                new_entries.append(e)
                continue
            prim = GaussianPrimitive(
                mu=a["mu"].values.copy(),
                scale=a["scale"].values.copy(),
                opacity=float(dc.sigmoid(e.parent.opacity_raw).values),
                color=a["color"].values.copy(),
                n_dirs=self.n_dirs)
            prim.rot_raw.values = e.parent.rot_raw.values.copy()
            new_entries.append(_Entry("leaf", prim=prim))
            self._register(prim)
            if e.kind == "split":
                retired.append(e.parent)
        for p in retired:
            if any(ne.prim is p for ne in new_entries):
                continue
            self._unregister(p)
        self.entries = new_entries

    def prune(self):
        keep = []
        for e in self.entries:
            op = float(dc.sigmoid(e.prim.opacity_raw).values)
            if op < self.prune_opacity:
                self._unregister(e.prim)
            else:
                keep.append(e)
        self.entries = keep

    def _candidates(self):
        picked = []
        for e in self.entries:
            if e.prim.grad_stat > self.grad_threshold:
                picked.append(e)
        return picked

    def organize_step(self, iteration, mode, rng=None):
        """Run clone/split/grow/prune housekeeping when the iteration hits
        the cadence. Off-cadence calls leave the set untouched."""
        if iteration == 0 or iteration % self.cadence != 0:
            return
        if mode not in ("heuristic", "evolutive"):
            raise ValueError(f"unknown organization mode {mode!r}")
        self.materialize()
        self.prune()
        candidates = self._candidates()
        if not candidates:
            for e in self.entries:
                e.prim.reset_grad_stat()
            return
        room = self.cap - len(self.entries)
        if room <= 0:
            self.skipped_densify = True
            for e in self.entries:
                e.prim.reset_grad_stat()
            return
        if mode == "heuristic":
            self._heuristic_densify(candidates[:room], rng)
        else:
            self._evolutive_densify(candidates[:room])
        for e in self.entries:
            if e.prim is not None:
                e.prim.reset_grad_stat()

    def _heuristic_densify(self, candidates, rng):
        if rng is None:
            rng = np.random.default_rng(0)
        for e in candidates:
            g = e.prim
            scale = np.exp(g.scale_raw.values)
            if np.max(scale) > self.scale_threshold:
                # split: sample child positions from the Gaussian itself
                with dc.Tape():
                    R = quat_to_rotation(g.rot_raw).values
                cov = R @ np.diag(scale ** 2) @ R.T
                self.entries.remove(e)
                self._unregister(g)
                for _ in range(2):
                    mu = rng.multivariate_normal(g.mu.values, cov)
                    child = GaussianPrimitive(
                        mu=mu, scale=scale / SPLIT_FACTOR,
                        opacity=float(dc.sigmoid(g.opacity_raw).values),
                        color=dc.sigmoid(g.color_raw).values,
                        n_dirs=self.n_dirs)
                    child.rot_raw.values = g.rot_raw.values.copy()
                    self.add_leaf(child)
            else:
                # clone in place; both copies then drift apart by gradient
                clone = GaussianPrimitive(
                    mu=g.mu.values.copy(), scale=scale,
                    opacity=float(dc.sigmoid(g.opacity_raw).values),
                    color=dc.sigmoid(g.color_raw).values,
                    n_dirs=self.n_dirs)
                clone.rot_raw.values = g.rot_raw.values.copy()
                self.add_leaf(clone)

    def _evolutive_densify(self, candidates):
        for e in candidates:
            g = e.prim
            scale = np.exp(g.scale_raw.values)
            if np.max(scale) > self.scale_threshold:
                # learned split replaces the parent with two derived halves
                self.entries.remove(e)
                self.entries.append(_Entry("split", parent=g, sign=1.0))
                self.entries.append(_Entry("split", parent=g, sign=-1.0))
            else:
                v_max = 2.0 * float(np.max(scale))
                self.entries.append(_Entry("grown", parent=g, v_max=v_max))
            self.grew_with_gradient = True


# -- persistence ----------------------------------------------------------------

FIELD_NAMES = ("mu", "scale_raw", "rot_raw", "opacity_raw", "color_raw",
               "grow_logits", "grow_len_raw", "split_shift_raw",
               "split_scale_raw")


def model_state(model: SplatModel):
    """Flat name -> array mapping ("prim.<field>", leaves stacked)."""
    leaves = model.leaves()
    if len(leaves) != len(model.entries):
        raise ValueError("materialize derived primitives before saving")
    out = {}
    for name in FIELD_NAMES:
        out[f"prim.{name}"] = np.stack(
            [np.atleast_1d(getattr(p, name).values) for p in leaves]) \
            if leaves else np.zeros((0, 1))
    return out


def load_model_state(model: SplatModel, state, n_dirs=None):
    n = state["prim.mu"].shape[0]
    model.entries = []
    for i in range(n):
        prim = GaussianPrimitive(mu=np.zeros(3), scale=np.ones(3),
                                 n_dirs=state["prim.grow_logits"].shape[1])
        for name in FIELD_NAMES:
            arr = state[f"prim.{name}"][i]
            t = getattr(prim, name)
            t.values = np.array(arr, dtype=np.float64).reshape(t.shape)
        model.add_leaf(prim)


def export_ply(model: SplatModel, path):
    """ASCII PLY with positions and colors, for external viewers."""
    leaves = model.leaves()
    lines = ["ply", "format ascii 1.0", f"element vertex {len(leaves)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "end_header"]
    for p in leaves:
        x, y, z = p.mu.values
        col = np.clip(1.0 / (1.0 + np.exp(-p.color_raw.values)), 0, 1)
        r, g, b = (col * 255).astype(int)
        lines.append(f"{x} {y} {z} {r} {g} {b}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
