"""Low-rank factorized feature grids (CP and vector-matrix).

A :class:`FactorField` stores the spatial factors of a 3D tensor over a
bounding box. Node ``0`` and node ``n - 1`` of every axis sit on the bbox faces
(align-corners), so continuous index coordinates are an affine map of world
positions.

Component stacking order, used everywhere a per-component vector appears
(``components`` output, columns of the appearance basis): all X-type
components in ascending rank, then Y-type, then Z-type. CP fields have a single
block in rank order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

AXES = "xyz"
# component type -> (vector axis, matrix plane axes)
VM_LAYOUT = ((0, (1, 2)), (1, (0, 2)), (2, (0, 1)))
VEC_NAMES = ("vec_x", "vec_y", "vec_z")
MAT_NAMES = ("mat_yz", "mat_xz", "mat_xy")


@dataclass(frozen=True)
class GridGeometry:
    bbox_min: tuple
    bbox_max: tuple
    resolution: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bbox_min)
        hi = tuple(float(v) for v in self.bbox_max)
        res = tuple(int(n) for n in self.resolution)
        if len(lo) != 3 or len(hi) != 3 or len(res) != 3:
            raise ValueError("geometry needs 3D bbox corners and 3 resolutions")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"bbox_min {lo} must be < bbox_max {hi} componentwise")
        if min(res) < 2:
            raise ValueError(f"every axis needs at least 2 nodes, got {res}")
        object.__setattr__(self, "bbox_min", lo)
        object.__setattr__(self, "bbox_max", hi)
        object.__setattr__(self, "resolution", res)

    @property
    def lo(self):
        return np.asarray(self.bbox_min)

    @property
    def hi(self):
        return np.asarray(self.bbox_max)

    @property
    def extent(self):
        return self.hi - self.lo

    @property
    def node_spacing(self):
        return self.extent / (np.asarray(self.resolution) - 1)

    def to_index(self, points):
        """World positions (..., 3) -> continuous node coordinates, clamped to the grid."""
        n = np.asarray(self.resolution, dtype=np.float64)
        u = (np.asarray(points, dtype=np.float64) - self.lo) / self.extent * (n - 1)
        return np.clip(u, 0.0, n - 1)

    def node_positions(self, axis):
        return np.linspace(self.bbox_min[axis], self.bbox_max[axis], self.resolution[axis])

    def contains(self, other: "GridGeometry", tol=1e-9):
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def with_resolution(self, resolution):
        return GridGeometry(self.bbox_min, self.bbox_max, tuple(resolution))


def resolution_from_budget(bbox_min, bbox_max, n_voxels):
    """Per-axis resolution proportional to the bbox extent with product ~= ``n_voxels``."""
    extent = np.asarray(bbox_max, dtype=np.float64) - np.asarray(bbox_min, dtype=np.float64)
    scale = (n_voxels / np.prod(extent)) ** (1.0 / 3.0)
    return tuple(max(2, int(round(e * scale))) for e in extent)


def interp_matrix(src_lo, src_hi, n_src, dst_lo, dst_hi, n_dst):
    """Dense (n_dst, n_src) matrix linearly resampling node values of one axis."""
    x = np.linspace(dst_lo, dst_hi, n_dst)
    u = (x - src_lo) / (src_hi - src_lo) * (n_src - 1)
    u = np.clip(u, 0.0, n_src - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n_src - 2)
    f = u - i0
    W = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    W[rows, i0] += 1.0 - f
    W[rows, i0 + 1] += f
    return W


class FactorField:
    """Factorized 3D tensor: a sum of rank-one (CP) or vector-matrix (VM) components.

    ``ranks`` is a 3-tuple of per-type counts for VM and a 1-tuple for CP.
    Factor arrays are kept in ``self.arrays`` keyed by ``vec_x``, ``mat_yz``, ...
    """

    def __init__(self, mode, ranks, geometry: GridGeometry, arrays=None, rng=None,
                 init_std=0.1, dtype=np.float32):
        mode = mode.upper()
        if mode not in ("CP", "VM"):
            raise ValueError(f"unknown factorization mode {mode!r}")
        ranks = tuple(int(r) for r in np.atleast_1d(ranks))
        if mode == "CP" and len(ranks) != 1:
            raise ValueError("CP fields take a single rank")
        if mode == "VM" and len(ranks) == 1:
            ranks = ranks * 3
        if mode == "VM" and len(ranks) != 3:
            raise ValueError("VM fields take one rank per component type")
        if min(ranks) < 0:
            raise ValueError("ranks must be non-negative")
        self.mode = mode
        self.ranks = ranks
        self.geometry = geometry
        if arrays is None:
            rng = np.random.default_rng() if rng is None else rng
            arrays = {name: init_std * rng.standard_normal(shape)
                      for name, shape in self.array_shapes().items()}
        self.arrays = {}
        for name, shape in self.array_shapes().items():
            if name not in arrays:
                raise ValueError(f"missing factor array {name!r}")
            a = np.ascontiguousarray(arrays[name], dtype=dtype)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            self.arrays[name] = a

    def array_shapes(self):
        n = self.geometry.resolution
        if self.mode == "CP":
            r = self.ranks[0]
            return {"vec_x": (r, n[0]), "vec_y": (r, n[1]), "vec_z": (r, n[2])}
        shapes = {}
        for (vax, (a, b)), vname, mname, r in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES, self.ranks):
            shapes[vname] = (r, n[vax])
            shapes[mname] = (r, n[a], n[b])
        return shapes

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    @property
    def n_components(self):
        return sum(self.ranks)

    def n_parameters(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        return type(self)(self.mode, self.ranks, self.geometry,
                          {k: v.copy() for k, v in self.arrays.items()}, dtype=self.dtype)

    # -- direct evaluation ---------------------------------------------------

    def element(self, i, j, k):
        """Tensor entry at integer node indices, straight from the factors."""
        idx = (i, j, k)
        for ax, (v, n) in enumerate(zip(idx, self.geometry.resolution)):
            if not (0 <= v < n):
                raise IndexError(f"index {v} out of range for axis {AXES[ax]} of size {n}")
        A = self.arrays
        if self.mode == "CP":
            return float(np.sum(A["vec_x"][:, i].astype(np.float64)
                                * A["vec_y"][:, j] * A["vec_z"][:, k]))
        total = 0.0
        for (vax, (a, b)), vname, mname in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES):
            total += float(np.sum(A[vname][:, idx[vax]].astype(np.float64)
                                  * A[mname][:, idx[a], idx[b]]))
        return total

    # -- continuous sampling -------------------------------------------------

    def components(self, u):
        """Interpolated component values A_r^m at node coordinates ``u`` (S, 3) -> (S, C)."""
        u = np.ascontiguousarray(u, dtype=np.float64)
        out = np.empty((u.shape[0], self.n_components), dtype=self.dtype)
        A = self.arrays
        if self.mode == "CP":
            _kernels.cp_forward(A["vec_x"], A["vec_y"], A["vec_z"], u, out)
            return out
        col = 0
        for (vax, (a, b)), vname, mname, r in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES, self.ranks):
            if r:
                _kernels.vm_forward(A[vname], A[mname], u[:, vax], u[:, a], u[:, b], out, col)
            col += r
        return out

    def components_backward(self, u, grad, grads):
        """Accumulate dL/dfactor into ``grads`` given dL/dA of shape (S, C)."""
        u = np.ascontiguousarray(u, dtype=np.float64)
        A = self.arrays
        if self.mode == "CP":
            _kernels.cp_backward(A["vec_x"], A["vec_y"], A["vec_z"], u, grad,
                                 grads["vec_x"], grads["vec_y"], grads["vec_z"])
            return grads
        col = 0
        for (vax, (a, b)), vname, mname, r in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES, self.ranks):
            if r:
                _kernels.vm_backward(A[vname], A[mname], u[:, vax], u[:, a], u[:, b],
                                     grad, col, grads[vname], grads[mname])
            col += r
        return grads

    def sum_at(self, u, chunk=1 << 18):
        """Sum over components (the raw density) at node coordinates ``u``."""
        u = np.asarray(u, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(u), dtype=np.float64)
        for s in range(0, len(u), chunk):
            out[s:s + chunk] = self.components(u[s:s + chunk]).sum(axis=1, dtype=np.float64)
        return out

    # -- resampling ----------------------------------------------------------

    def resample(self, geometry: GridGeometry):
        """Re-evaluate every factor at the nodes of ``geometry`` (linear/bilinear)."""
        old = self.geometry
        W = [interp_matrix(old.bbox_min[ax], old.bbox_max[ax], old.resolution[ax],
                           geometry.bbox_min[ax], geometry.bbox_max[ax], geometry.resolution[ax])
             for ax in range(3)]
        A = {k: v.astype(np.float64) for k, v in self.arrays.items()}
        new = {}
        if self.mode == "CP":
            for ax, name in enumerate(VEC_NAMES):
                new[name] = A[name] @ W[ax].T
        else:
            for (vax, (a, b)), vname, mname in zip(VM_LAYOUT, VEC_NAMES, MAT_NAMES):
                new[vname] = A[vname] @ W[vax].T
                new[mname] = np.einsum("pa,rab,qb->rpq", W[a], A[mname], W[b])
        return self._rebuilt(geometry, new)

    def _rebuilt(self, geometry, arrays):
        return FactorField(self.mode, self.ranks, geometry, arrays, dtype=self.dtype)


class AppearanceField(FactorField):
    """Factor field plus the feature-mode basis ``B`` of shape (P, C)."""

    def __init__(self, mode, ranks, geometry, n_features=27, arrays=None, rng=None,
                 init_std=0.1, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(mode, ranks, geometry, arrays, rng=rng, init_std=init_std, dtype=dtype)
        if arrays is not None and "basis" in arrays:
            basis = np.ascontiguousarray(arrays["basis"], dtype=dtype)
        else:
            basis = (init_std * rng.standard_normal((n_features, self.n_components))).astype(dtype)
        if basis.shape != (n_features, self.n_components):
            raise ValueError(f"basis: expected shape {(n_features, self.n_components)}, got {basis.shape}")
        self.arrays["basis"] = basis

    @property
    def n_features(self):
        return self.arrays["basis"].shape[0]

    def copy(self):
        return AppearanceField(self.mode, self.ranks, self.geometry, self.n_features,
                               {k: v.copy() for k, v in self.arrays.items()}, dtype=self.dtype)

    def features(self, u):
        comps = self.components(u)
        return comps @ self.arrays["basis"].T, comps

    def resample(self, geometry):
        resampled = super().resample(geometry)
        resampled.arrays["basis"] = self.arrays["basis"].copy()
        return resampled

    def _rebuilt(self, geometry, arrays):
        arrays = dict(arrays, basis=self.arrays["basis"])
        return AppearanceField(self.mode, self.ranks, geometry, self.n_features, arrays, dtype=self.dtype)


def _require_mode(field, mode):
    if field.mode != mode:
        raise ValueError(f"expected a {mode} field, got {field.mode}")


def cp_element(field: FactorField, i, j, k):
    _require_mode(field, "CP")
    return field.element(i, j, k)


def vm_element(field: FactorField, i, j, k):
    _require_mode(field, "VM")
    return field.element(i, j, k)


def sample_density(field: FactorField, points):
    """Raw (pre-activation) density at world positions inside the bbox."""
    points = np.atleast_2d(points)
    return field.sum_at(field.geometry.to_index(points))


def sample_appearance(field: AppearanceField, points):
    """P-channel appearance features ``B @ stack(A_c(x))`` at world positions."""
    points = np.atleast_2d(points)
    feats, _ = field.features(field.geometry.to_index(points))
    return feats


def upsample(field, new_resolution):
    new_resolution = tuple(int(n) for n in new_resolution)
    if any(n < o for n, o in zip(new_resolution, field.geometry.resolution)):
        raise ValueError(f"upsample cannot shrink {field.geometry.resolution} -> {new_resolution}; "
                         "use resample_bbox")
    return field.resample(field.geometry.with_resolution(new_resolution))


def resample_bbox(field, bbox_min, bbox_max, new_resolution):
    geometry = GridGeometry(tuple(bbox_min), tuple(bbox_max), tuple(new_resolution))
    if not field.geometry.contains(geometry):
        raise ValueError(f"new bbox {geometry.bbox_min}..{geometry.bbox_max} exceeds "
                         f"{field.geometry.bbox_min}..{field.geometry.bbox_max}")
    return field.resample(geometry)


def parameter_count(density: FactorField | None, appearance: AppearanceField | None = None):
    """Real parameters in the density factors, appearance factors and basis."""
    return sum(f.n_parameters() for f in (density, appearance) if f is not None)


def dense_parameter_count(resolution, n_features):
    """Parameters of the uncompressed grid: one density plus ``n_features`` channels per voxel."""
    return int(np.prod(resolution)) * (n_features + 1)
