"""Training loops for the two pipeline kinds (volume fields, splat sets),
plus checkpoint plumbing shared with the CLI.

A training run is fully determined by (config, seed): batch order, variate
draws, and initialization all derive from the seed, and the wall-clock
column in the metrics CSV stays at 0.0 unless `train.wallclock=true`, so
repeated runs emit identical bytes.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .. import diffcore as dc
from .. import ermf
from .. import fields as fl
from .. import gauge as gg
from .. import primitives as pr
from .. import relay as rl
from .. import sampling as sp
from .. import volren as vr
from . import scenes
from .config import Config, format_config, parse_config
from .images import write_image
from .metrics import MetricsLog, psnr


class TrainAbort(RuntimeError):
    pass


# -- checkpoint container helpers -----------------------------------------

def _encode_text(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _decode_text(arr):
    return np.asarray(arr, dtype=np.float64).astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, cfg, state, extra=None):
    payload = dict(state)
    payload["__config__"] = _encode_text(format_config(cfg))
    for k, v in (extra or {}).items():
        payload[k] = np.asarray(v, dtype=np.float64)
    ermf.save_tensors(path, payload)


def load_checkpoint(path):
    state = ermf.load_tensors(path)
    cfg = parse_config(_decode_text(state.pop("__config__")))
    return cfg, state


# -- shared construction ----------------------------------------------------

def build_field(cfg, rng):
    kind = cfg.get("field.kind", "grid")
    res = cfg.get_int("field.resolution", 32)
    feat = cfg.get_int("field.features", 8)
    if kind == "grid":
        return fl.GridField(rng, resolution=res, feature_dim=feat)
    if kind == "plane":
        return fl.PlaneField(rng, resolution=res, feature_dim=feat)
    if kind == "mlp":
        return fl.MlpField(rng)
    raise ValueError(f"unknown field kind {kind!r}")


def build_gauge(cfg, rng):
    kind = cfg.get("gauge.kind", "none")
    if kind == "none":
        return gg.OrthogonalGauge()
    scale = cfg.get_float("gauge.offset_scale", 0.05)
    if kind == "plane":
        g = gg.EvolutiveGauge.plane_backed(cfg.get_int("gauge.resolution", 32),
                                           offset_scale=scale)
    elif kind == "mlp":
        g = gg.EvolutiveGauge.mlp_backed(rng, offset_scale=scale)
    else:
        raise ValueError(f"unknown gauge kind {kind!r}")
    g.enabled = False  # switched on by the relay
    return g


def build_schedule(cfg):
    """Relay schedule plus the set of elements pinned heuristic for the
    whole run (relay.<element>=off)."""
    total = cfg.get_int("train.iters", 3000)
    frac = cfg.get_float("relay.fraction", 0.1)
    overrides = {}
    disabled = set()
    for el in rl.ELEMENTS:
        key = f"relay.{el}"
        if key in cfg:
            if cfg.get(key) == "off":
                disabled.add(el)
            else:
                overrides[el] = cfg.get_float(key)
    return rl.RelaySchedule(total, relay_fraction=frac,
                            overrides=overrides), disabled


def _grad_norm_dump(optimizer, out_dir, step):
    lines = [f"aborted at step {step}: non-finite loss or gradient"]
    for i, p in enumerate(optimizer.params):
        g = p.grad_or_zeros()
        lines.append(f"param[{i}] op={p.op} shape={p.shape} "
                     f"|grad|={float(np.linalg.norm(g)):.6e}")
    text = "\n".join(lines)
    if out_dir is not None:
        with open(os.path.join(out_dir, "abort.txt"), "w") as fh:
            fh.write(text + "\n")
    return text


# -- volume pipeline ----------------------------------------------------------

class VolumePipeline:
    """State bundle handed to the relay hooks during volume training."""

    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.out_dir = out_dir
        seed = cfg.get_int("train.seed", 0)
        self.rng_init = np.random.default_rng(seed)
        self.rng_batch = np.random.default_rng(seed + 1)
        self.rng_variates = np.random.default_rng(seed + 2)
        self.scene = scenes.make_scene(
            cfg.get("scene.preset", "two-spheres"),
            n_cameras=cfg.get_int("scene.cameras", 20),
            width=cfg.get_int("scene.width", 64),
            height=cfg.get_int("scene.height", 64),
            oracle_samples=cfg.get_int("scene.oracle_samples",
                                       scenes.ORACLE_SAMPLES))
        self.field = build_field(cfg, self.rng_init)
        self.gauge = build_gauge(cfg, self.rng_init)
        self.relay_schedule, self.relay_disabled = build_schedule(cfg)
        self.n_coarse = cfg.get_int("sampler.n_coarse", 16)
        self.n_fine = cfg.get_int("sampler.n_fine", 32)
        self.union = cfg.get_bool("sampler.union", True)
        self.aux_kind = cfg.get("sampler.aux", "aux")
        self.aux_loss_weight = cfg.get_float("sampler.aux_weight", 1.0)
        self.sampling_mode = rl.HEURISTIC
        self.organize_mode = rl.HEURISTIC
        params = self.field.parameters()
        self.lr0 = cfg.get_float("train.lr", 5e-2)
        self.lr_final = cfg.get_float("train.lr_final", self.lr0)
        self.total_iters = cfg.get_int("train.iters", 3000)
        self.optimizer = dc.Adam(params, lr=self.lr0)
        if isinstance(self.gauge, gg.EvolutiveGauge):
            self.gauge.set_trainable(False)

        train_idx, self.test_idx = self.scene.split()
        os_, ds_, cs_ = [], [], []
        for i in train_idx:
            o, d = self.scene.cameras[i].rays()
            os_.append(o)
            ds_.append(d)
            cs_.append(self.scene.views[i].reshape(-1, 3))
        self.train_o = np.concatenate(os_)
        self.train_d = np.concatenate(ds_)
        self.train_c = np.concatenate(cs_)

    # sampling callback shared by the train and eval paths
    def _sigma_fn(self, pts):
        s, _ = fl.field_eval(self.field, pts, gauge=self.gauge)
        return s

    def _fire_relays(self, step):
        sched = self.relay_schedule
        for el in ("gauge", "sampling", "organization"):
            if el in self.relay_disabled:
                continue
            if el == "gauge" and not isinstance(self.gauge, gg.EvolutiveGauge):
                continue
            if sched.due(el, step):
                rl.on_relay(el, self)

    def train_step(self, step):
        self._fire_relays(step)
        if self.lr_final != self.lr0 and self.total_iters > 0:
            # exponential decay from lr to lr_final over the run
            frac = step / self.total_iters
            self.optimizer.lr = self.lr0 * (self.lr_final / self.lr0) ** frac
        batch = self.cfg.get_int("train.batch", 1024)
        idx = self.rng_batch.integers(0, self.train_o.shape[0], size=batch)
        o, d, gt = self.train_o[idx], self.train_d[idx], self.train_c[idx]
        sc = self.scene
        # Per-op finite checks cost a full pass over every intermediate;
        # a single check on the scalar loss catches the same failures.
        with dc.Tape(), dc.finite_checks(False):
            samples, seg = sp.hierarchical_sample(
                self._sigma_fn, o, d, sc.t_near, sc.t_far,
                self.n_coarse, self.n_fine, self.sampling_mode,
                rng=self.rng_variates, union_coarse=self.union)
            rgb, _, fine_w = vr.render_rays(self.field, o, d, samples,
                                            sc.t_far, gauge=self.gauge,
                                            background=sc.background)
            diff = rgb - dc.constant(gt)
            loss = dc.mean(diff * diff)
            if self.aux_loss_weight > 0.0 and self.sampling_mode == rl.HEURISTIC:
                aux = self._aux_loss(o, d, gt, seg, samples, fine_w)
                loss = loss + self.aux_loss_weight * aux
            self.optimizer.zero_grad()
            try:
                if not np.isfinite(loss.values).all():
                    raise dc.NonFiniteError("non-finite training loss")
                dc.backward(loss)
                self.optimizer.step()
            except dc.NonFiniteError as e:
                raise TrainAbort(_grad_norm_dump(self.optimizer, self.out_dir,
                                                 step) + f"\n{e}")
        return float(loss.values)

    def _aux_loss(self, o, d, gt, seg, samples, fine_w):
        """Coarse supervision while sampling gradients are detached:
        either an extra photometric render at the coarse boundaries, or a
        distillation loss pulling coarse weights toward the (detached)
        fine-render weight histogram."""
        if self.aux_kind == "aux":
            rgb_c, _, _ = vr.render_rays(self.field, o, d, seg.t,
                                         self.scene.t_far, gauge=self.gauge,
                                         background=self.scene.background)
            diff = rgb_c - dc.constant(gt)
            return dc.mean(diff * diff)
        if self.aux_kind == "distill":
            _, _, norm_w, _ = sp.weights_from_density(seg)
            # histogram the (detached) fine weights into the coarse bins
            pos = samples.values
            w = fine_w.values
            k = np.clip(np.searchsorted(seg.t[0], pos[:, : w.shape[1]],
                                        side="right") - 1, 0, seg.t.shape[1] - 2)
            hist = np.zeros((pos.shape[0], seg.t.shape[1] - 1))
            np.add.at(hist, (np.arange(pos.shape[0])[:, None], k), w)
            total = np.sum(hist, axis=1, keepdims=True)
            hist = hist / np.where(total > 0, total, 1.0)
            diff = norm_w - dc.constant(hist)
            return dc.mean(diff * diff)
        raise ValueError(f"unknown aux loss kind {self.aux_kind!r}")

    def eval_loss(self, step):
        """Deterministic forward loss over one fixed batch; used by the
        relay-continuity check (no optimizer update)."""
        rng_state = np.random.default_rng(12345)
        idx = rng_state.integers(0, self.train_o.shape[0], size=256)
        o, d, gt = self.train_o[idx], self.train_d[idx], self.train_c[idx]
        sc = self.scene
        with dc.Tape():
            samples, _ = sp.hierarchical_sample(
                self._sigma_fn, o, d, sc.t_near, sc.t_far,
                self.n_coarse, self.n_fine, self.sampling_mode,
                rng=None, union_coarse=self.union)
            rgb, _, _ = vr.render_rays(self.field, o, d, samples, sc.t_far,
                                       gauge=self.gauge, background=sc.background)
            diff = rgb - dc.constant(gt)
            loss = dc.mean(diff * diff)
        return float(loss.values)

    def render_test_views(self):
        sc = self.scene
        out = []
        for i in self.test_idx:
            img = vr.render_image(self.field, sc.cameras[i], self.n_coarse,
                                  self.n_fine, self.sampling_mode,
                                  gauge=self.gauge, background=sc.background,
                                  rng=None, t_near=sc.t_near, t_far=sc.t_far,
                                  union_coarse=self.union)
            out.append(img)
        return out

    def test_metrics(self):
        renders = self.render_test_views()
        losses, psnrs = [], []
        for img, i in zip(renders, self.test_idx):
            gt = self.scene.views[i]
            losses.append(float(np.mean((img - gt) ** 2)))
            psnrs.append(psnr(img, gt))
        return float(np.mean(losses)), float(np.mean(psnrs)), renders


def train_volume(cfg: Config, out_dir=None):
    """Run the volume pipeline; returns a dict with the metrics log, final
    PSNR, and the pipeline (for tests). Writes artifacts when out_dir is
    given: config copy, metrics.csv, checkpoint.ermf, test renders."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    pipe = VolumePipeline(cfg, out_dir)
    iters = cfg.get_int("train.iters", 3000)
    eval_every = cfg.get_int("train.eval_every", 500)
    wallclock = cfg.get_bool("train.wallclock", False)
    log = MetricsLog()
    count = pipe.n_coarse + pipe.n_fine
    t0 = time.perf_counter()

    def emit(it):
        loss, p, renders = pipe.test_metrics()
        sec = time.perf_counter() - t0 if wallclock else 0.0
        log.append(it, loss, p, sec, count)
        return loss, p, renders

    emit(0)
    for it in range(iters):
        pipe.train_step(it)
        if (it + 1) % eval_every == 0 and (it + 1) != iters:
            emit(it + 1)
    if iters > 0:
        pipe._fire_relays(iters)  # relays landing exactly at the end
        loss, final_psnr, renders = emit(iters)
    else:
        loss, final_psnr, renders = log.rows[-1][1], log.rows[-1][2], \
            pipe.render_test_views()

    if out_dir is not None:
        with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
            fh.write(format_config(cfg))
        log.write(os.path.join(out_dir, "metrics.csv"))
        state = fl.field_state(pipe.field, prefix="field.")
        if isinstance(pipe.gauge, gg.EvolutiveGauge):
            for i, p in enumerate(pipe.gauge.parameters()):
                state[f"gauge.p{i}"] = p.values
            state["gauge.enabled"] = np.array(1.0 if pipe.gauge.enabled else 0.0)
        ccfg = Config({k: cfg.get(k) for k in cfg.keys()})
        ccfg.set("pipeline.kind", "volume")
        save_checkpoint(os.path.join(out_dir, "checkpoint.ermf"), ccfg, state)
        for img, i in zip(renders, pipe.test_idx):
            write_image(img, os.path.join(out_dir, f"test_{i:02d}.png"))
    return {"log": log, "final_psnr": final_psnr, "final_loss": loss,
            "pipeline": pipe}


# -- splat pipeline --------------------------------------------------------------

class SplatPipeline:
    """2D image-fitting task: optimize a splat set against a procedural
    target image through the differentiable rasterizer."""

    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.out_dir = out_dir
        seed = cfg.get_int("train.seed", 0)
        rng = np.random.default_rng(seed)
        self.rng = rng
        size = cfg.get_int("scene.width", 64)
        self.target = scenes.target_image(cfg.get_int("scene.seed", 7), size)
        self.camera = vr.Camera.look_at([0.5, 0.5, 2.2], [0.5, 0.5, 0.5],
                                        [0, 1, 0], size, size, 1.4 * size)
        self.relay_schedule, self.relay_disabled = build_schedule(cfg)
        self.gauge = None
        self.sampling_mode = rl.HEURISTIC
        self.aux_loss_weight = 0.0
        self.organize_mode = rl.HEURISTIC
        self.model = pr.SplatModel(
            n_dirs=cfg.get_int("organize.directions", 128),
            cadence=cfg.get_int("organize.cadence", 100),
            cap=cfg.get_int("organize.cap", 400),
            grad_threshold=cfg.get_float("organize.grad_threshold", 2e-4),
            scale_threshold=cfg.get_float("organize.scale_threshold", 0.06),
            select_mode=cfg.get("organize.select", "reparam"))
        n_init = cfg.get_int("splat.n_init", 50)
        for _ in range(n_init):
            self.model.add_leaf(pr.GaussianPrimitive(
                mu=np.concatenate([rng.uniform(0.2, 0.8, 2),
                                   rng.uniform(0.45, 0.55, 1)]),
                scale=rng.uniform(0.03, 0.08, 3),
                opacity=rng.uniform(0.4, 0.7),
                color=rng.uniform(0.2, 0.8, 3),
                n_dirs=cfg.get_int("organize.directions", 128)))
        self.optimizer = dc.Adam([], lr=cfg.get_float("train.lr", 1e-2))
        self.model.attach_optimizer(self.optimizer)

    def _fire_relays(self, step):
        if "organization" in self.relay_disabled:
            return
        if self.relay_schedule.due("organization", step):
            rl.on_relay("organization", self)

    def forward_loss(self):
        img, splats = pr.rasterize(self.camera,
                                   self.model.effective_attrs_batched(),
                                   background=np.ones(3), return_splats=True)
        diff = img - dc.constant(self.target)
        return dc.mean(diff * diff), img, splats

    def train_step(self, step):
        self._fire_relays(step)
        with dc.Tape(), dc.finite_checks(False):
            loss, img, splats = self.forward_loss()
            if not np.isfinite(loss.values).all():
                raise TrainAbort(_grad_norm_dump(self.optimizer, self.out_dir,
                                                 step) + "\nnon-finite training loss")
            self.optimizer.zero_grad()
            try:
                dc.backward(loss)
                self.model.record_view_gradients(splats)
                self.optimizer.step()
            except dc.NonFiniteError as e:
                raise TrainAbort(_grad_norm_dump(self.optimizer, self.out_dir,
                                                 step) + f"\n{e}")
        self.model.organize_step(step + 1, self.organize_mode, rng=self.rng)
        return float(loss.values)

    def render(self):
        with dc.Tape():
            img = pr.rasterize(self.camera, self.model.effective_attrs_batched(),
                               background=np.ones(3))
        return np.clip(img.values, 0.0, 1.0)


def train_splat(cfg: Config, out_dir=None):
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    pipe = SplatPipeline(cfg, out_dir)
    iters = cfg.get_int("train.iters", 2000)
    eval_every = cfg.get_int("train.eval_every", 500)
    wallclock = cfg.get_bool("train.wallclock", False)
    log = MetricsLog()
    t0 = time.perf_counter()

    def emit(it):
        img = pipe.render()
        loss = float(np.mean((img - pipe.target) ** 2))
        sec = time.perf_counter() - t0 if wallclock else 0.0
        log.append(it, loss, psnr(img, pipe.target), sec, pipe.model.n_primitives)
        return loss, img

    emit(0)
    last = None
    for it in range(iters):
        last = pipe.train_step(it)
        if (it + 1) % eval_every == 0 and (it + 1) != iters:
            emit(it + 1)
    final_loss, img = emit(iters) if iters > 0 else (log.rows[-1][1], pipe.render())

    if out_dir is not None:
        with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
            fh.write(format_config(cfg))
        log.write(os.path.join(out_dir, "metrics.csv"))
        pipe.model.materialize()
        ccfg = Config({k: cfg.get(k) for k in cfg.keys()})
        ccfg.set("pipeline.kind", "splat")
        save_checkpoint(os.path.join(out_dir, "checkpoint.ermf"), ccfg,
                        pr.model_state(pipe.model))
        write_image(img, os.path.join(out_dir, "final.png"))
        pr.export_ply(pipe.model, os.path.join(out_dir, "final.ply"))
        write_image(pipe.target, os.path.join(out_dir, "target.png"))
    return {"log": log, "final_loss": final_loss,
            "final_psnr": log.rows[-1][2], "pipeline": pipe}


# -- checkpoint rendering ------------------------------------------------------

def render_from_checkpoint(ckpt_path, camera_index, out_path):
    """Rebuild the pipeline recorded in a checkpoint and render one view
    deterministically (test-view path for volume runs, the fitting view
    for splat runs)."""
    cfg, state = load_checkpoint(ckpt_path)
    kind = cfg.get("pipeline.kind")
    if kind == "volume":
        pipe = VolumePipeline(cfg)
        fl.load_field_state(pipe.field, state, prefix="field.")
        if isinstance(pipe.gauge, gg.EvolutiveGauge):
            pipe.gauge.enabled = bool(state.get("gauge.enabled", 0.0))
            for i, p in enumerate(pipe.gauge.parameters()):
                p.values = np.array(state[f"gauge.p{i}"]).reshape(p.shape)
        # the final CSV row was produced in the post-relay sampling mode
        sched = pipe.relay_schedule
        total = cfg.get_int("train.iters", 3000)
        if "sampling" not in pipe.relay_disabled:
            pipe.sampling_mode = sched.phase("sampling", total)
        cam = pipe.scene.cameras[camera_index]
        img = vr.render_image(pipe.field, cam, pipe.n_coarse, pipe.n_fine,
                              pipe.sampling_mode, gauge=pipe.gauge,
                              background=pipe.scene.background, rng=None,
                              t_near=pipe.scene.t_near, t_far=pipe.scene.t_far,
                              union_coarse=pipe.union)
    elif kind == "splat":
        pipe = SplatPipeline(cfg)
        model = pr.SplatModel(n_dirs=state["prim.grow_logits"].shape[1])
        pr.load_model_state(model, state)
        pipe.model = model
        img = pipe.render()
    else:
        raise ValueError(f"checkpoint has unknown pipeline kind {kind!r}")
    write_image(img, out_path)
    return img
