"""Regularizers, loss assembly, Adam and the exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_field import FactorField


@dataclass
class LossConfig:
    reg_kind: str = "l1"          # "l1", "tv" or "none"
    weight: float = 4e-4
    tv_appearance_scale: float = 0.1
    tv_squared: bool = False      # squared neighbor differences instead of absolute

    def __post_init__(self):
        if self.reg_kind not in ("l1", "tv", "none"):
            raise ValueError(f"unknown regularizer {self.reg_kind!r}")
        if self.weight < 0:
            raise ValueError("regularization weight must be >= 0")


def _spatial_factors(f: FactorField):
    return [(k, v) for k, v in f.arrays.items() if k != "basis"]


def l1_reg(density: FactorField, grads=None, scale=1.0):
    """Mean absolute value of the density factors, normalized by their parameter count.

    With ``grads`` (a dict keyed like ``density.arrays``), adds ``scale * d/dtheta``.
    """
    n = density.n_parameters()
    if n == 0:
        return 0.0
    total = sum(float(np.abs(v).sum(dtype=np.float64)) for _, v in _spatial_factors(density))
    if grads is not None:
        for k, v in _spatial_factors(density):
            grads[k] += (scale / n) * np.sign(v)
    return total / n


def _diffs(a):
    # neighbor differences along every spatial axis (axis 0 is the rank axis)
    return [np.diff(a, axis=ax) for ax in range(1, a.ndim)]


def _diff_adjoint(g, ax, shape):
    out = np.zeros(shape, dtype=np.float64)
    lo = [slice(None)] * len(shape)
    hi = [slice(None)] * len(shape)
    lo[ax] = slice(0, -1)
    hi[ax] = slice(1, None)
    out[tuple(hi)] += g
    out[tuple(lo)] -= g
    return out


def tv_reg(density: FactorField, appearance: FactorField | None = None, cfg: LossConfig | None = None,
           density_grads=None, appearance_grads=None, scale=1.0):
    """Mean neighbor difference over all vector/matrix factors; appearance terms scaled.

    The appearance basis is not a spatial factor and is excluded.
    """
    cfg = LossConfig(reg_kind="tv", weight=1.0) if cfg is None else cfg
    groups = [(f, w, g) for f, w, g in ((density, 1.0, density_grads),
                                         (appearance, cfg.tv_appearance_scale, appearance_grads))
              if f is not None]
    n_terms = 0
    total = 0.0
    for f, _, _ in groups:
        for _, v in _spatial_factors(f):
            n_terms += sum(d.size for d in _diffs(v))
    if n_terms == 0:
        return 0.0
    for f, w, grads in groups:
        for k, v in _spatial_factors(f):
            v64 = v.astype(np.float64)
            for ax, d in enumerate(_diffs(v64), start=1):
                if cfg.tv_squared:
                    total += w * float(np.sum(d * d))
                    local = 2.0 * d
                else:
                    total += w * float(np.abs(d).sum())
                    local = np.sign(d)
                if grads is not None:
                    grads[k] += (scale * w / n_terms) * _diff_adjoint(local, ax, v.shape)
    return total / n_terms


def regularization(model, cfg: LossConfig, grads=None):
    """``cfg.weight * reg`` with gradients added to the flat ``grads`` registry if given."""
    if cfg.reg_kind == "none" or cfg.weight == 0.0:
        return 0.0
    dg = ag = None
    if grads is not None:
        dg = {k: grads[f"density.{k}"] for k in model.density.arrays}
        ag = {k: grads[f"appearance.{k}"] for k in model.appearance.arrays}
    if cfg.reg_kind == "l1":
        return cfg.weight * l1_reg(model.density, dg, cfg.weight)
    return cfg.weight * tv_reg(model.density, model.appearance, cfg, dg, ag, cfg.weight)


def total_loss(render_l2, reg_value, weight):
    return render_l2 + weight * reg_value


@dataclass
class LrSchedule:
    lr_factors: float = 0.02
    lr_decoder: float = 0.001
    total_steps: int = 30000
    final_factor: float = 0.1

    def __post_init__(self):
        if self.lr_factors <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")


def lr_at(t, schedule: LrSchedule):
    """(factor lr, decoder lr) after ``t`` steps of exponential decay to ``final_factor``."""
    T = schedule.total_steps
    frac = 0.0 if T <= 0 else min(max(t, 0), T) / T
    decay = schedule.final_factor ** frac
    return schedule.lr_factors * decay, schedule.lr_decoder * decay


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def reset(self, name):
        """Forget the moments of a parameter (e.g. after it was resized)."""
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.steps.pop(name, None)


def adam_step(params, grads, state: AdamState, lr, group_of=None):
    """Bias-corrected Adam, updating ``params`` in place.

    ``lr`` is either a float or a dict keyed by group name; ``group_of(name)``
    maps parameter names to groups.
    """
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        rate = lr[group_of(name)] if isinstance(lr, dict) else lr
        if name not in state.m or state.m[name].shape != p.shape:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.steps[name] = 0
        m, v = state.m[name], state.v[name]
        state.steps[name] += 1
        t = state.steps[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= (rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state
