"""Per-scene reconstruction: batched rays, Adam updates, coarse-to-fine schedule."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .gradients import backward_render, zeros_like_params
from .metrics import mse_to_psnr, psnr, ssim
from .model import RadianceModel
from .optim import AdamState, LossConfig, LrSchedule, adam_step, lr_at
from .renderer import (RenderOptions, clip_rays, generate_rays, ndc_rays, occupancy_resolution, render_rays,
                       step_size_for, tight_bbox, update_occupancy)
from .tensor_field import GridGeometry, resolution_from_budget

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankConfig:
    """Per-type component counts (X, Y, Z types) for density and appearance."""

    density: tuple = (8, 8, 8)
    appearance: tuple = (8, 8, 8)

    def __post_init__(self):
        for name in ("density", "appearance"):
            v = getattr(self, name)
            v = (int(v),) * 3 if np.isscalar(v) else tuple(int(x) for x in v)
            if len(v) != 3 or min(v) < 1:
                raise ValueError(f"{name} ranks must be three counts >= 1, got {v}")
            object.__setattr__(self, name, v)

    def for_mode(self, mode):
        # CP has one rank (the sum over types)
        if mode == "CP":
            return sum(self.density), sum(self.appearance)
        return self.density, self.appearance


@dataclass
class TrainConfig:
    mode: str = "VM"
    ranks: RankConfig = field(default_factory=RankConfig)
    decoder: str = "mlp"
    n_features: int = 27
    batch_size: int = 4096
    total_steps: int = 30000
    n0: int = 128
    n_final: int = 300
    upsample_steps: tuple = (2000, 3000, 4000, 5500, 7000)
    occupancy_steps: tuple = (2000, 4000)
    bbox_shrink_step: int = 2000
    bbox_min: tuple = (-1.5, -1.5, -1.5)      # used when the dataset provides no bbox
    bbox_max: tuple = (1.5, 1.5, 1.5)
    reg_kind: str = "l1"
    reg_weight: float = 4e-4
    tv_appearance_scale: float = 0.1
    tv_squared: bool = False
    lr_factors: float = 0.02
    lr_decoder: float = 1e-3
    lr_final_factor: float = 0.1
    density_shift: float = 0.0
    init_std: float = 0.1
    alpha_cutoff: float = 1e-4
    occupancy_threshold: float = 1e-4
    max_samples: int = 1024
    samples_per_voxel: float = 2.0
    filter_rays: bool = True
    log_every: int = 100
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in ("CP", "VM"):
            raise ValueError(f"mode must be 'CP' or 'VM', got {self.mode!r}")
        if not isinstance(self.ranks, RankConfig):
            self.ranks = RankConfig(*self.ranks)
        self.upsample_steps = tuple(int(s) for s in self.upsample_steps)
        self.occupancy_steps = tuple(int(s) for s in self.occupancy_steps)
        ups = self.upsample_steps
        if any(b <= a for a, b in zip(ups, ups[1:])):
            raise ValueError(f"upsample steps must be strictly increasing: {ups}")
        if ups and ups[-1] >= self.total_steps:
            raise ValueError(f"upsample step {ups[-1]} is not below total_steps={self.total_steps}")
        if self.n_final < self.n0:
            raise ValueError("final resolution must be >= N0")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")
        self.bbox_min = tuple(float(x) for x in self.bbox_min)
        self.bbox_max = tuple(float(x) for x in self.bbox_max)

    @property
    def loss(self):
        return LossConfig(self.reg_kind, self.reg_weight, self.tv_appearance_scale, self.tv_squared)

    @property
    def schedule(self):
        return LrSchedule(self.lr_factors, self.lr_decoder, self.total_steps, self.lr_final_factor)

    def scaled(self, total_steps, n_final=None, batch_size=None, **overrides):
        """Same recipe on a shorter run: event steps and N0 scale with T and N."""
        f = total_steps / self.total_steps if self.total_steps else 1.0
        n_final = self.n_final if n_final is None else n_final
        n0 = max(2, int(round(self.n0 * n_final / self.n_final)))

        def sc(steps):
            out = []
            for s in steps:
                v = max(1, int(round(s * f)))
                if out and v <= out[-1]:
                    v = out[-1] + 1
                out.append(v)
            return tuple(out)

        kw = dict(total_steps=total_steps, n_final=n_final, n0=n0,
                  upsample_steps=sc(self.upsample_steps), occupancy_steps=sc(self.occupancy_steps),
                  bbox_shrink_step=max(1, int(round(self.bbox_shrink_step * f))),
                  batch_size=self.batch_size if batch_size is None else batch_size)
        kw.update(overrides)
        return dataclasses.replace(self, **kw)


_SYNTH = dict(decoder="mlp", reg_kind="l1", density_shift=-10.0)
_FF = dict(decoder="mlp", reg_kind="tv", reg_weight=1.0, density_shift=-10.0, n0=128, n_final=640,
           upsample_steps=(2000, 3000, 4000, 5500), occupancy_steps=(2500,), total_steps=25000,
           bbox_min=(-1.5, -1.67, -1.0), bbox_max=(1.5, 1.67, 1.0))

PRESETS = {
    "VM-48": dict(mode="VM", ranks=RankConfig(8, 8), **_SYNTH),
    "VM-96": dict(mode="VM", ranks=RankConfig(8, 24), **_SYNTH),
    "VM-192": dict(mode="VM", ranks=RankConfig(16, 48), **_SYNTH),
    "VM-384": dict(mode="VM", ranks=RankConfig(32, 96), **_SYNTH),
    "CP-384": dict(mode="CP", ranks=RankConfig(32, 96), **_SYNTH),
    "VM-48-FF": dict(mode="VM", ranks=RankConfig((4, 4, 16), (4, 4, 16)), **_FF),
    "VM-96-FF": dict(mode="VM", ranks=RankConfig((4, 4, 16), (16, 16, 16)), **_FF),
}


def preset(name) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return TrainConfig(**PRESETS[name])


def upsample_schedule(n0, n, n_stages):
    """Voxel budgets after each upsample, linear in log space from N0^3 to N^3."""
    if n < n0:
        raise ValueError("N must be >= N0")
    ratio = float(n) / float(n0)
    budgets = [float(n0) ** 3 * ratio ** (3.0 * k / n_stages) for k in range(1, n_stages + 1)]
    if n_stages:
        budgets[-1] = float(n) ** 3
    return budgets


@dataclass
class TraceRecord:
    step: int
    loss: float
    psnr: float
    lr: float
    wall: float

    def to_json(self):
        return json.dumps(dataclasses.asdict(self))


@dataclass
class TrainResult:
    model: RadianceModel
    occupancy: object
    trace: list
    config: TrainConfig
    step: float


def initial_model(config: TrainConfig, bbox, rng):
    lo, hi = bbox
    res = resolution_from_budget(lo, hi, float(config.n0) ** 3)
    geo = GridGeometry(tuple(lo), tuple(hi), res)
    dr, ar = config.ranks.for_mode(config.mode)
    return RadianceModel.create(config.mode, dr, ar, geo, decoder=config.decoder,
                                n_features=config.n_features, density_shift=config.density_shift,
                                init_std=config.init_std, rng=rng)


def model_step(model, config):
    g = model.geometry
    return step_size_for(g.lo, g.hi, g.resolution, config.max_samples, config.samples_per_voxel)


def _reset_resized(state: AdamState, before, after):
    for k, v in after.items():
        if k in before and before[k] != v.shape:
            state.reset(k)


def train(scene, config: TrainConfig, trace_path=None, progress=None) -> TrainResult:
    """Fit a model to the training views of ``scene`` (a ``data.SceneData``)."""
    rng = np.random.default_rng(config.seed)
    has_bbox = scene.bbox is not None
    bbox = tuple(np.asarray(b, float) for b in (scene.bbox if has_bbox else (config.bbox_min, config.bbox_max)))
    model = initial_model(config, bbox, rng)

    origins, dirs, colors = scene.rays()
    if scene.ndc:
        origins, dirs = ndc_rays(origins, dirs, scene.width, scene.height, scene.focal)
    if config.filter_rays:
        _, _, hit = clip_rays(origins, dirs, *bbox)
        origins, dirs, colors = origins[hit], dirs[hit], colors[hit]
    n_rays = len(origins)
    if n_rays == 0:
        raise RuntimeError("no training ray intersects the scene bounding box")
    bg = scene.background

    ups = dict(zip(config.upsample_steps, upsample_schedule(config.n0, config.n_final, len(config.upsample_steps))))
    occ_steps = set(config.occupancy_steps)
    loss_cfg = config.loss
    sched = config.schedule
    state = AdamState()
    occupancy = None
    step = model_step(model, config)

    perm = rng.permutation(n_rays)
    cursor = 0
    trace = []
    acc_loss = acc_mse = 0.0
    acc_n = 0
    t_start = time.perf_counter()
    out = open(trace_path, "w") if trace_path else None
    try:
        for it in range(config.total_steps):
            # schedule events: upsample -> occupancy -> shrink
            if it in ups:
                before = {k: v.shape for k, v in model.params().items()}
                model = model.upsampled(ups[it])
                _reset_resized(state, before, model.params())
                step = model_step(model, config)
                log.info("step %d: upsampled to %s", it, model.geometry.resolution)
            if it in occ_steps:
                occupancy = _refresh_occupancy(model, step, config)
            if it == config.bbox_shrink_step and not has_bbox:
                if occupancy is None:
                    occupancy = _refresh_occupancy(model, step, config)
                lo, hi = tight_bbox(occupancy)
                g = model.geometry
                res = resolution_from_budget(lo, hi, float(np.prod(g.resolution)))
                before = {k: v.shape for k, v in model.params().items()}
                model = model.resampled(GridGeometry(tuple(lo), tuple(hi), res))
                _reset_resized(state, before, model.params())
                step = model_step(model, config)
                occupancy = _refresh_occupancy(model, step, config)
                log.info("step %d: bbox shrunk to %s .. %s, resolution %s", it, lo, hi, res)

            if cursor + config.batch_size > n_rays:
                perm = rng.permutation(n_rays)
                cursor = 0
            idx = perm[cursor:cursor + config.batch_size]
            cursor += config.batch_size

            lr_f, lr_d = lr_at(it, sched)
            res, grads = backward_render(model, origins[idx], dirs[idx], colors[idx], step, loss_cfg,
                                         bg, occupancy, rng, config.alpha_cutoff)
            if not np.isfinite(res.loss):
                raise FloatingPointError(f"non-finite loss at step {it}")
            adam_step(model.params(), grads, state, {"factors": lr_f, "decoder": lr_d}, model.group_of)

            acc_loss += res.loss
            acc_mse += res.mse
            acc_n += 1
            if (it + 1) % config.log_every == 0 or it + 1 == config.total_steps:
                rec = TraceRecord(it + 1, acc_loss / acc_n, float(mse_to_psnr(acc_mse / acc_n)), lr_f,
                                  time.perf_counter() - t_start)
                trace.append(rec)
                if out:
                    out.write(rec.to_json() + "\n")
                    out.flush()
                if progress:
                    progress(rec)
                acc_loss = acc_mse = 0.0
                acc_n = 0
    finally:
        if out:
            out.close()
    return TrainResult(model, occupancy, trace, config, step)


def _refresh_occupancy(model, step, config):
    occ = update_occupancy(model, occupancy_resolution(model.geometry.resolution), step,
                           config.occupancy_threshold)
    if not occ.bits.any():
        raise RuntimeError("occupancy volume is empty; reconstruction has degenerated")
    return occ


def evaluate(model, scene, step, occupancy=None, compute_ssim=True, chunk=8192):
    """Render every view of ``scene`` and score it; returns per-view psnr/ssim lists."""
    opts = RenderOptions(step=step, alpha_cutoff=1e-4, chunk=chunk)
    psnrs, ssims, images = [], [], []
    for i, fr in enumerate(scene.frames):
        o, d = generate_rays(scene.camera(i))
        if scene.ndc:
            o, d = ndc_rays(o, d, scene.width, scene.height, scene.focal)
        rgb = render_rays(model, o, d, opts, scene.background, occupancy)["rgb"].reshape(fr.image.shape)
        images.append(rgb)
        psnrs.append(psnr(fr.image, rgb))
        if compute_ssim:
            ssims.append(ssim(fr.image, rgb))
    return {"psnr": psnrs, "ssim": ssims, "images": images}
