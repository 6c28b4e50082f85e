"""Camera rays, bbox clipping, ray marching and the volume-rendering quadrature.

Camera convention (OpenGL / NeRF-synthetic): the 4x4 camera-to-world pose has
columns right, up, backward and the camera translation; the camera looks along
its local -z axis and image rows grow downwards.

Anything passed as ``field`` to :func:`render_rays` needs ``bbox`` (lo, hi),
``sigma(points)`` and ``rgb(points, dirs)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels

CLIP_EPS = 1e-6


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        R = self.pose[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4:
            raise ValueError("camera pose rotation block is not orthonormal")

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, pose):
        return cls(width, height, 0.5 * width / np.tan(0.5 * camera_angle_x), pose)

    @property
    def origin(self):
        return self.pose[:3, 3]

    def project(self, points):
        """World points -> continuous pixel coordinates (px, py) of the pixel grid."""
        cam = (np.asarray(points) - self.origin) @ self.pose[:3, :3]
        px = self.focal * cam[..., 0] / -cam[..., 2] + 0.5 * self.width - 0.5
        py = -self.focal * cam[..., 1] / -cam[..., 2] + 0.5 * self.height - 0.5
        return np.stack([px, py], axis=-1)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf


def pixel_directions(cam: Camera, px, py):
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    d_cam = np.stack([(px + 0.5 - 0.5 * cam.width) / cam.focal,
                      -(py + 0.5 - 0.5 * cam.height) / cam.focal,
                      -np.ones_like(px)], axis=-1)
    d = d_cam @ cam.pose[:3, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(cam: Camera, px, py) -> Ray:
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise IndexError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} image")
    return Ray(cam.origin.copy(), pixel_directions(cam, px, py))


def generate_rays(cam: Camera):
    """All pixel rays in row-major order: (H*W, 3) origins and unit directions."""
    py, px = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    dirs = pixel_directions(cam, px.ravel(), py.ravel())
    origins = np.broadcast_to(cam.origin, dirs.shape).copy()
    return origins, dirs


def clip_rays(origins, dirs, lo, hi, eps=CLIP_EPS):
    """Slab test. Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped to ``eps``."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    parallel = dirs == 0.0
    safe = np.where(parallel, 1.0, dirs)
    t1 = (lo - origins) / safe
    t2 = (hi - origins) / safe
    inside = (origins >= lo) & (origins <= hi)
    t_lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = np.maximum(t_lo.max(axis=-1), eps)
    t_far = t_hi.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def clip_ray(ray: Ray, lo, hi):
    """Entry/exit parameters of the box, or ``None`` on a miss."""
    tn, tf, hit = clip_rays(ray.origin[None], ray.direction[None], lo, hi)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


def step_size_for(lo, hi, resolution, max_samples=1024, samples_per_voxel=2.0):
    """Step along rays: bbox diagonal over ceil(diagonal-in-voxels * 2), capped."""
    diag = float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    diag_vox = float(np.linalg.norm(np.asarray(resolution, dtype=np.float64)))
    n = min(int(np.ceil(diag_vox * samples_per_voxel)), int(max_samples))
    return diag / n


@dataclass
class OccupancyVolume:
    lo: np.ndarray
    hi: np.ndarray
    bits: np.ndarray
    threshold: float = 1e-4

    @property
    def resolution(self):
        return self.bits.shape

    @property
    def cell_size(self):
        return (np.asarray(self.hi) - np.asarray(self.lo)) / np.asarray(self.bits.shape)

    def cell_index(self, points):
        res = np.asarray(self.bits.shape)
        idx = np.floor((np.asarray(points) - self.lo) / (np.asarray(self.hi) - self.lo) * res)
        return np.clip(idx.astype(np.int64), 0, res - 1)

    def lookup(self, points):
        idx = self.cell_index(points)
        return self.bits[idx[..., 0], idx[..., 1], idx[..., 2]]

    def cell_centers(self):
        axes = [self.lo[a] + (np.arange(n) + 0.5) * self.cell_size[a] for a, n in enumerate(self.bits.shape)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


@dataclass
class Samples:
    """Shading points packed ray after ray; ``offsets[i]:offsets[i+1]`` belong to ray ``i``."""
    ray_index: np.ndarray
    t: np.ndarray
    delta: np.ndarray
    positions: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.t)


def sample_points(origins, dirs, lo, hi, step, occupancy: OccupancyVolume | None = None,
                  rng=None, t_near=None, t_far=None):
    """Uniform samples at spacing ``step`` from the bbox entry point.

    Sample q of a ray sits at ``t_near + (q + o) * step``: ``o = 0.5`` for
    evaluation (midpoint rule) and one uniform draw in [0, 1) per ray when an
    ``rng`` is given. Samples in empty occupancy cells are dropped.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = len(origins)
    if t_near is None:
        t_near, t_far, hit = clip_rays(origins, dirs, lo, hi)
    else:
        hit = t_far > t_near
    offset = rng.random(n_rays) if rng is not None else np.full(n_rays, 0.5)
    span = np.where(hit, (t_far - t_near) / step - offset, 0.0)
    counts = np.maximum(np.ceil(span), 0).astype(np.int64)
    ray_index = np.repeat(np.arange(n_rays), counts)
    starts = np.cumsum(counts) - counts
    q = np.arange(len(ray_index)) - starts[ray_index]
    t = t_near[ray_index] + (q + offset[ray_index]) * step
    positions = origins[ray_index] + t[:, None] * dirs[ray_index]
    if occupancy is not None and len(t):
        keep = occupancy.lookup(positions)
        ray_index, t, positions = ray_index[keep], t[keep], positions[keep]
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(np.bincount(ray_index, minlength=n_rays), out=offsets[1:])
    return Samples(ray_index, t, np.full(len(t), step), positions, offsets)


def composite(samples: Samples, sigma, rgb, background):
    """Batch form of the quadrature; returns (rgb, depth, acc, weights, trans)."""
    n_rays = len(samples.offsets) - 1
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (n_rays, 3))
    out_rgb = np.empty((n_rays, 3))
    depth = np.empty(n_rays)
    acc = np.empty(n_rays)
    weights = np.empty(len(samples))
    trans = np.empty(len(samples))
    _kernels.composite_forward(samples.offsets, np.asarray(sigma, dtype=np.float64),
                               samples.delta, np.asarray(rgb, dtype=np.float64), samples.t,
                               np.ascontiguousarray(bg), out_rgb, depth, acc, weights, trans)
    return out_rgb, depth, acc, weights, trans


def volume_render(sigma, delta, rgb, background=(0.0, 0.0, 0.0)):
    """Composite one ray: sum_q T_q (1 - exp(-sigma_q delta_q)) c_q + T_{Q+1} * background."""
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if np.any(sigma < 0):
        raise ValueError("densities must be nonnegative")
    n = len(sigma)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(n, 3)
    s = Samples(np.zeros(n, dtype=np.int64), np.zeros(n), np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,)).copy(),
                np.zeros((n, 3)), np.array([0, n]))
    color, _, _, weights, trans = composite(s, sigma, rgb, np.asarray(background, dtype=np.float64)[None])
    residual = trans[-1] * np.exp(-sigma[-1] * s.delta[-1]) if n else 1.0
    return color[0], weights, residual


@dataclass
class RenderOptions:
    step: float
    alpha_cutoff: float = 1e-4
    chunk: int = 4096


def render_rays(field, origins, dirs, opts: RenderOptions, background=(1.0, 1.0, 1.0),
                occupancy: OccupancyVolume | None = None, rng=None):
    """Forward render of many rays; returns dict with ``rgb``, ``depth``, ``acc``."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(origins)
    bg_all = np.broadcast_to(np.asarray(background, dtype=np.float64), (n, 3))
    out = {"rgb": np.empty((n, 3)), "depth": np.empty(n), "acc": np.empty(n)}
    lo, hi = field.bbox
    for s in range(0, n, opts.chunk):
        o, d = origins[s:s + opts.chunk], dirs[s:s + opts.chunk]
        smp = sample_points(o, d, lo, hi, opts.step, occupancy, rng)
        sigma = np.zeros(len(smp))
        rgb = np.zeros((len(smp), 3))
        if len(smp):
            sigma = field.sigma(smp.positions)
            alpha = 1.0 - np.exp(-sigma * smp.delta)
            live = alpha >= opts.alpha_cutoff if opts.alpha_cutoff > 0 else np.ones(len(smp), bool)
            if np.any(live):
                rgb[live] = field.rgb(smp.positions[live], d[smp.ray_index[live]])
        color, depth, acc, _, _ = composite(smp, sigma, rgb, bg_all[s:s + opts.chunk])
        out["rgb"][s:s + opts.chunk] = color
        out["depth"][s:s + opts.chunk] = depth
        out["acc"][s:s + opts.chunk] = acc
    return out


def render_pixel(field, ray: Ray, opts: RenderOptions, background=(1.0, 1.0, 1.0), occupancy=None):
    res = render_rays(field, ray.origin[None], ray.direction[None], opts, background, occupancy)
    return res["rgb"][0]


def render_image(field, cam: Camera, opts: RenderOptions, background=(1.0, 1.0, 1.0), occupancy=None):
    o, d = generate_rays(cam)
    res = render_rays(field, o, d, opts, background, occupancy)
    return {k: v.reshape((cam.height, cam.width) + v.shape[1:]) for k, v in res.items()}


def update_occupancy(field, resolution, step, threshold=1e-4, dilate=1):
    """Mark cells whose center alpha at the nominal step exceeds ``threshold``, then dilate."""
    lo, hi = field.bbox
    occ = OccupancyVolume(np.asarray(lo, float), np.asarray(hi, float),
                          np.zeros(tuple(int(r) for r in resolution), dtype=bool), threshold)
    centers = occ.cell_centers()
    sigma = np.empty(len(centers))
    chunk = 1 << 18
    for s in range(0, len(centers), chunk):
        sigma[s:s + chunk] = field.sigma(centers[s:s + chunk])
    alpha = 1.0 - np.exp(-sigma * step)
    bits = (alpha > threshold).reshape(occ.bits.shape)
    if dilate:
        bits = ndimage.binary_dilation(bits, structure=np.ones((3, 3, 3), bool), iterations=dilate)
    occ.bits = bits
    return occ


def occupancy_resolution(field_resolution, cap=128):
    return tuple(min(int(r), cap) for r in field_resolution)


def tight_bbox(occupancy: OccupancyVolume, pad=1):
    """Smallest box around the occupied cells, padded by ``pad`` cells and kept inside the volume."""
    idx = np.argwhere(occupancy.bits)
    if len(idx) == 0:
        raise RuntimeError("occupancy volume is empty; reconstruction has degenerated")
    cell = occupancy.cell_size
    lo = occupancy.lo + (idx.min(axis=0) - pad) * cell
    hi = occupancy.lo + (idx.max(axis=0) + 1 + pad) * cell
    return np.maximum(lo, occupancy.lo), np.minimum(hi, occupancy.hi)


def ndc_rays(origins, dirs, width, height, focal, near=1.0):
    """Warp forward-facing rays so the camera frustum (z <= -near) maps to [-1, 1]^3.

    Origins are first moved onto the near plane. Returned directions are not
    normalized; the NDC ray parameter runs over [0, 1) from near plane to infinity.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t = -(near + origins[..., 2]) / dirs[..., 2]
    o = origins + t[..., None] * dirs
    ax = -focal / (0.5 * width)
    ay = -focal / (0.5 * height)
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    o_ndc = np.stack([ax * ox / oz, ay * oy / oz, 1.0 + 2.0 * near / oz], axis=-1)
    d_ndc = np.stack([ax * (dx / dz - ox / oz), ay * (dy / dz - oy / oz), -2.0 * near / oz], axis=-1)
    return o_ndc, d_ndc


def ndc_point(points, width, height, focal, near=1.0):
    """Projective map of camera-space points into NDC, consistent with :func:`ndc_rays`."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([-focal / (0.5 * width) * x / z,
                     -focal / (0.5 * height) * y / z,
                     1.0 + 2.0 * near / z], axis=-1)
