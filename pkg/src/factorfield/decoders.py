"""Shading functions mapping (appearance features, view direction) to RGB.

Both decoders expose ``forward(features, dirs)`` returning colors and a cache,
and ``backward(cache, grad_rgb)`` returning ``(grad_features, grad_dirs,
param_grads)``. Colors are squashed with the logistic function.
"""
import logging

import numpy as np

log = logging.getLogger(__name__)

# real spherical-harmonic normalization constants, degrees 0..2
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def density_activation(raw, shift=0.0):
    """Nonnegative density ``softplus(raw + shift)``."""
    return softplus(np.asarray(raw, dtype=np.float64) + shift)


def density_activation_grad(raw, shift=0.0):
    return sigmoid(np.asarray(raw, dtype=np.float64) + shift)


def freq_encode(v, n_freqs):
    """Append ``sin(2^l pi v), cos(2^l pi v)`` blocks for ``l < n_freqs`` along the last axis."""
    v = np.asarray(v)
    if n_freqs < 0:
        raise ValueError("frequency count must be >= 0")
    parts = [v]
    for l in range(n_freqs):
        arg = (2.0 ** l) * np.pi * v
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def freq_encode_backward(v, n_freqs, grad):
    n = v.shape[-1]
    g = grad[..., :n].copy()
    for l in range(n_freqs):
        scale = (2.0 ** l) * np.pi
        arg = scale * v
        base = n * (1 + 2 * l)
        g += grad[..., base:base + n] * scale * np.cos(arg)
        g -= grad[..., base + n:base + 2 * n] * scale * np.sin(arg)
    return g


def _unit(dirs, debug=False):
    dirs = np.asarray(dirs, dtype=np.float64)
    norm = np.linalg.norm(dirs, axis=-1, keepdims=True)
    if debug and np.any(np.abs(norm - 1.0) > 1e-6):
        log.warning("sh_basis received non-unit directions; normalizing")
    return dirs / norm


def sh_basis(dirs, debug=False):
    """Nine real SH functions (l <= 2) in (l, m) order: Y00, Y1-1, Y10, Y11, Y2-2 ... Y22."""
    d = _unit(dirs, debug)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (9,))
    out[..., 0] = SH_C0
    out[..., 1] = SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[0] * y * z
    out[..., 6] = SH_C2[1] * (3.0 * z * z - 1.0)
    out[..., 7] = SH_C2[0] * x * z
    out[..., 8] = SH_C2[2] * (x * x - y * y)
    return out


def sh_basis_jacobian(d):
    """d(basis)/d(unit direction), shape (..., 9, 3), for unit inputs."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    c0, c1, c2 = SH_C2
    rows = [
        (zero, zero, zero),
        (zero, SH_C1 + zero, zero),
        (zero, zero, SH_C1 + zero),
        (SH_C1 + zero, zero, zero),
        (c0 * y, c0 * x, zero),
        (zero, c0 * z, c0 * y),
        (zero, zero, 6.0 * c1 * z),
        (c0 * z, zero, c0 * x),
        (2.0 * c2 * x, -2.0 * c2 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _normalize_backward(dirs, grad_unit):
    norm = np.linalg.norm(dirs, axis=-1, keepdims=True)
    d = dirs / norm
    return (grad_unit - d * np.sum(grad_unit * d, axis=-1, keepdims=True)) / norm


class ShDecoder:
    """Degree-2 SH color with channel-major coefficients: ``features[c * 9 + b]``."""

    kind = "sh"
    n_basis = 9

    def __init__(self, channels=3):
        self.channels = channels
        self.params = {}

    @property
    def n_features(self):
        return self.n_basis * self.channels

    def _check(self, features):
        if features.shape[-1] != self.n_features:
            raise ValueError(f"SH decoder expects {self.n_features} features, got {features.shape[-1]}")

    def forward(self, features, dirs):
        self._check(features)
        basis = sh_basis(dirs)
        coeffs = features.reshape(features.shape[:-1] + (self.channels, self.n_basis))
        raw = np.einsum("...cb,...b->...c", coeffs, basis)
        rgb = sigmoid(raw)
        return rgb, (coeffs, basis, rgb, dirs)

    def __call__(self, features, dirs):
        return self.forward(features, dirs)[0]

    def backward(self, cache, grad_rgb, need_dirs=False):
        coeffs, basis, rgb, dirs = cache
        g_raw = grad_rgb * rgb * (1.0 - rgb)
        g_feat = (g_raw[..., :, None] * basis[..., None, :]).reshape(coeffs.shape[:-2] + (-1,))
        g_dirs = None
        if need_dirs:
            g_basis = np.einsum("...c,...cb->...b", g_raw, coeffs)
            g_unit = np.einsum("...b,...bk->...k", g_basis, sh_basis_jacobian(_unit(dirs)))
            g_dirs = _normalize_backward(np.asarray(dirs, dtype=np.float64), g_unit)
        return g_feat.astype(coeffs.dtype, copy=False), g_dirs, {}


class MlpDecoder:
    """Two affine layers with a ReLU between, on frequency-encoded features and direction."""

    kind = "mlp"

    def __init__(self, n_features=27, hidden=128, n_freqs=2, params=None, rng=None, dtype=np.float32):
        self.n_features = n_features
        self.hidden = hidden
        self.n_freqs = n_freqs
        if params is None:
            rng = np.random.default_rng() if rng is None else rng

            def xavier(fan_out, fan_in):
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                return rng.uniform(-bound, bound, (fan_out, fan_in))

            params = {
                "w1": xavier(hidden, self.in_width),
                "b1": np.zeros(hidden),
                "w2": xavier(3, hidden),
                "b2": np.zeros(3),
            }
        self.params = {k: np.ascontiguousarray(params[k], dtype=dtype) for k in ("w1", "b1", "w2", "b2")}
        if self.params["w1"].shape != (hidden, self.in_width):
            raise ValueError(f"w1 shape {self.params['w1'].shape} != {(hidden, self.in_width)}")

    @property
    def in_width(self):
        enc = 1 + 2 * self.n_freqs
        return enc * self.n_features + enc * 3

    def forward(self, features, dirs):
        if features.shape[-1] != self.n_features:
            raise ValueError(f"MLP decoder expects {self.n_features} features, got {features.shape[-1]}")
        p = self.params
        dirs = np.asarray(dirs, dtype=features.dtype)
        x = np.concatenate([freq_encode(features, self.n_freqs), freq_encode(dirs, self.n_freqs)], axis=-1)
        pre = x @ p["w1"].T + p["b1"]
        h = np.maximum(pre, 0.0)
        rgb = sigmoid(h @ p["w2"].T + p["b2"])
        return rgb, (features, dirs, x, pre, h, rgb)

    def __call__(self, features, dirs):
        return self.forward(features, dirs)[0]

    def backward(self, cache, grad_rgb, need_dirs=False):
        features, dirs, x, pre, h, rgb = cache
        p = self.params
        g_out = grad_rgb * rgb * (1.0 - rgb)
        g_out = g_out.astype(h.dtype, copy=False)
        grads = {"w2": g_out.T @ h, "b2": g_out.sum(axis=0)}
        g_h = g_out @ p["w2"]
        g_pre = np.where(pre > 0.0, g_h, 0.0)
        grads["w1"] = g_pre.T @ x
        grads["b1"] = g_pre.sum(axis=0)
        g_x = g_pre @ p["w1"]
        split = (1 + 2 * self.n_freqs) * self.n_features
        g_feat = freq_encode_backward(features, self.n_freqs, g_x[..., :split])
        g_dirs = freq_encode_backward(dirs, self.n_freqs, g_x[..., split:]) if need_dirs else None
        return g_feat, g_dirs, grads


def make_decoder(kind, n_features=27, rng=None, dtype=np.float32, params=None):
    if kind == "sh":
        dec = ShDecoder()
        if dec.n_features != n_features:
            raise ValueError(f"SH decoder needs {dec.n_features} features, configured {n_features}")
        return dec
    if kind == "mlp":
        return MlpDecoder(n_features, rng=rng, dtype=dtype, params=params)
    raise ValueError(f"unknown decoder kind {kind!r} (expected 'sh' or 'mlp')")
