"""Hand-derived reverse-mode gradients of the rendering loss, and a finite-difference checker.

Backward pass order (adjoints flow right to left)::

    factors -> interpolated components -> (sum, softplus) -> sigma ------\\
    factors -> interpolated components -> B -> decoder -> color ----------> composite -> MSE

Only per-sample sigma, alpha, transmittance, weights and the appearance
components of live samples are kept from the forward pass; factor
interpolation weights are recomputed in the scatter kernels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .decoders import density_activation, density_activation_grad
from .optim import LossConfig, regularization
from .renderer import OccupancyVolume, RenderOptions, composite, render_rays, sample_points


def zeros_like_params(params):
    """A GradSet: zero buffers congruent with the parameter registry, same order."""
    return {k: np.zeros_like(v) for k, v in params.items()}


@dataclass
class RenderLoss:
    loss: float
    mse: float
    reg: float
    rgb: np.ndarray
    n_samples: int


def backward_render(model, origins, dirs, targets, step, loss_cfg: LossConfig | None = None,
                    background=(1.0, 1.0, 1.0), occupancy: OccupancyVolume | None = None,
                    rng=None, alpha_cutoff=1e-4, grads=None):
    """Loss (MSE over rays and channels + weighted regularizer) and its gradient.

    Returns ``(RenderLoss, grads)`` where ``grads`` maps every name of
    ``model.params()`` to an array of the same shape.
    """
    loss_cfg = LossConfig(reg_kind="none", weight=0.0) if loss_cfg is None else loss_cfg
    params = model.params()
    if grads is None:
        grads = zeros_like_params(params)
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = len(origins)
    bg = np.ascontiguousarray(np.broadcast_to(np.asarray(background, dtype=np.float64), (n_rays, 3)))
    geo = model.geometry

    smp = sample_points(origins, dirs, geo.lo, geo.hi, step, occupancy, rng)
    S = len(smp)
    u = geo.to_index(smp.positions)

    dens = model.density
    d_comp = dens.components(u)
    raw = d_comp.sum(axis=1, dtype=np.float64)
    sigma = density_activation(raw, model.density_shift)
    alpha = -np.expm1(-sigma * smp.delta)
    live = np.flatnonzero(alpha >= alpha_cutoff) if alpha_cutoff > 0 else np.arange(S)

    app = model.appearance
    basis = app.arrays["basis"]
    rgb = np.zeros((S, 3))
    if len(live):
        u_live = u[live]
        a_comp = app.components(u_live)
        feats = a_comp @ basis.T
        view = dirs[smp.ray_index[live]].astype(feats.dtype)
        rgb_live, dec_cache = model.decoder.forward(feats, view)
        rgb[live] = rgb_live

    color, _, _, weights, trans = composite(smp, sigma, rgb, bg)
    resid = color - targets
    mse = float(np.mean(resid * resid))
    reg = regularization(model, loss_cfg, grads)
    loss = mse + reg

    g_color_out = (2.0 / resid.size) * resid
    g_sigma = np.zeros(S)
    g_rgb = np.zeros((S, 3))
    _kernels.composite_backward(smp.offsets, sigma, smp.delta, rgb, bg, weights, trans,
                                g_color_out, g_sigma, g_rgb)

    if len(live):
        g_feat, _, dec_grads = model.decoder.backward(dec_cache, g_rgb[live].astype(feats.dtype))
        for k, g in dec_grads.items():
            grads[f"decoder.{k}"] += g
        grads["appearance.basis"] += (g_feat.T @ a_comp).astype(basis.dtype, copy=False)
        g_comp = np.ascontiguousarray(g_feat @ basis)
        app_grads = {k: grads[f"appearance.{k}"] for k in app.arrays if k != "basis"}
        app.components_backward(u_live, g_comp, app_grads)

    g_raw = g_sigma * density_activation_grad(raw, model.density_shift)
    if S:
        g_dcomp = np.broadcast_to(g_raw.astype(dens.dtype)[:, None], d_comp.shape)
        dens.components_backward(u, g_dcomp, {k: grads[f"density.{k}"] for k in dens.arrays})

    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
    return RenderLoss(loss, mse, reg, color, S), grads


def render_loss(model, origins, dirs, targets, step, loss_cfg=None, background=(1.0, 1.0, 1.0),
                occupancy=None, rng=None, alpha_cutoff=1e-4):
    """Forward-only evaluation of the same loss (used by finite differences)."""
    loss_cfg = LossConfig(reg_kind="none", weight=0.0) if loss_cfg is None else loss_cfg
    opts = RenderOptions(step=step, alpha_cutoff=alpha_cutoff)
    out = render_rays(model, origins, dirs, opts, background, occupancy, rng)
    resid = out["rgb"] - targets
    return float(np.mean(resid * resid)) + regularization(model, loss_cfg)


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self):
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}

    def __str__(self):
        lines = [f"{'PASS' if e < self.tolerance else 'FAIL'} {k}: {e:.3e}" for k, e in self.errors.items()]
        return "\n".join(lines)


def numerical_gradient(params, loss_fn, h=1e-4, names=None):
    """Central differences of ``loss_fn()`` w.r.t. every entry of the chosen arrays."""
    out = {}
    for name in names or params:
        p = params[name]
        g = np.zeros(p.shape)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Max absolute deviation scaled by the array's largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(params, loss_fn, analytic, h=1e-4, tolerance=1e-4, names=None):
    """Compare analytic gradients to central finite differences, one score per parameter."""
    numeric = numerical_gradient(params, loss_fn, h, names)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in numeric}
    return GradCheckReport(errors, tolerance)
