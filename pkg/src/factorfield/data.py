"""Dataset loading (NeRF-synthetic layout) and analytic oracle scenes.

Oracle scenes are dense density/RGB grids rendered with the same ray marcher
and quadrature as the factorized model, so their images are exact ground
truth for the reconstruction pipeline. They can be written out in the
NeRF-synthetic layout and read back through :func:`load_nerf_synthetic`.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .renderer import Camera, RenderOptions, generate_rays, render_rays, step_size_for

WHITE = np.ones(3)
BLACK = np.zeros(3)


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray          # H x W x 3 float in [0, 1], background already composited
    pose: np.ndarray           # 4 x 4 camera-to-world
    path: str = ""


@dataclass
class SceneData:
    width: int
    height: int
    focal: float
    frames: list
    background: np.ndarray = field(default_factory=lambda: WHITE.copy())
    bbox: tuple | None = None
    ndc: bool = False

    def camera(self, i):
        return Camera(self.width, self.height, self.focal, self.frames[i].pose)

    def rays(self):
        """All pixels of all frames: origins, directions, target colors (N, 3) each."""
        origins, dirs, rgbs = [], [], []
        for i, fr in enumerate(self.frames):
            o, d = generate_rays(self.camera(i))
            origins.append(o)
            dirs.append(d)
            rgbs.append(fr.image.reshape(-1, 3))
        return np.concatenate(origins), np.concatenate(dirs), np.concatenate(rgbs).astype(np.float64)


def _to_float_rgb(arr, path):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise DatasetError(f"{path}: expected an 8-bit image, got {arr.dtype}")
    img = arr.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.shape[-1] == 4:
        rgb, a = img[..., :3], img[..., 3:]
        return rgb * a + (1.0 - a), True
    return img[..., :3], False


def load_nerf_synthetic(root, split="train", downscale=1):
    """Read ``transforms_{split}.json`` and its images.

    RGBA images are composited onto white; a scene whose images are all RGB
    gets a black background.
    """
    root = Path(root)
    path = root / f"transforms_{split}.json"
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from e
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DatasetError(f"{path}: missing key {key!r}")
    frames = []
    any_alpha = False
    width = height = None
    for n, fr in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in fr:
                raise DatasetError(f"{path}: frames[{n}] missing key {key!r}")
        img_path = root / fr["file_path"]
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"{path}: frames[{n}] image {img_path} not found")
        with Image.open(img_path) as im:
            if downscale > 1:
                im = im.resize((im.width // downscale, im.height // downscale), Image.LANCZOS)
            img, has_alpha = _to_float_rgb(np.array(im), img_path)
        any_alpha |= has_alpha
        pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if pose.shape != (4, 4):
            raise DatasetError(f"{path}: frames[{n}].transform_matrix must be 4x4, got {pose.shape}")
        h, w = img.shape[:2]
        if width is None:
            width, height = w, h
        elif (w, h) != (width, height):
            raise DatasetError(f"{path}: frames[{n}] is {w}x{h}, expected {width}x{height}")
        frames.append(Frame(img, pose, str(img_path)))
    if not frames:
        raise DatasetError(f"{path}: no frames")
    focal = 0.5 * width / np.tan(0.5 * float(meta["camera_angle_x"]))
    bbox = None
    if "bbox" in meta:
        b = np.asarray(meta["bbox"], dtype=np.float64)
        if b.shape != (2, 3):
            raise DatasetError(f"{path}: 'bbox' must be [[xmin, ymin, zmin], [xmax, ymax, zmax]]")
        bbox = (b[0], b[1])
    return SceneData(width, height, focal, frames, WHITE.copy() if any_alpha else BLACK.copy(), bbox)


def load_llff(root, downscale=1, near=1.0):
    """Forward-facing captures from ``poses_bounds.npy`` (experimental).

    Each row holds a 3x5 matrix (rotation in LLFF's down-right-back order,
    translation, and [H, W, focal]) followed by near/far depth bounds. Poses
    are recentered, rescaled so the nearest bound sits past ``near`` and
    converted to the right-up-back convention used by the renderer.
    """
    root = Path(root)
    path = root / "poses_bounds.npy"
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    raw = np.load(path)
    if raw.ndim != 2 or raw.shape[1] != 17:
        raise DatasetError(f"{path}: expected (N, 17) array, got {raw.shape}")
    mats = raw[:, :15].reshape(-1, 3, 5)
    bounds = raw[:, 15:]
    h, w, f = mats[0, :, 4]
    rot = np.concatenate([mats[:, :, 1:2], -mats[:, :, 0:1], mats[:, :, 2:4]], axis=2)
    scale = 1.0 / (bounds.min() * 0.75)
    rot[:, :, 3] *= scale
    center = rot[:, :, 3].mean(axis=0)
    rot[:, :, 3] -= center
    img_dir = root / ("images" if downscale == 1 else f"images_{downscale}")
    names = sorted(p for p in os.listdir(img_dir) if p.lower().endswith((".png", ".jpg", ".jpeg")))
    if len(names) != len(rot):
        raise DatasetError(f"{img_dir}: {len(names)} images for {len(rot)} poses")
    frames = []
    for name, m in zip(names, rot):
        with Image.open(img_dir / name) as im:
            img, _ = _to_float_rgb(np.array(im.convert("RGB")), img_dir / name)
        pose = np.eye(4)
        pose[:3, :4] = m
        frames.append(Frame(img, pose, str(img_dir / name)))
    H, W = frames[0].image.shape[:2]
    focal = f * W / w
    return SceneData(W, H, focal, frames, BLACK.copy(), ((-1.5, -1.67, -1.0), (1.5, 1.67, 1.0)), ndc=True)


def save_png(path, rgb, alpha=None):
    img = np.clip(np.asarray(rgb), 0.0, 1.0)
    if alpha is not None:
        img = np.concatenate([img, np.clip(alpha, 0.0, 1.0)[..., None]], axis=-1)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


# -- oracle scenes -------------------------------------------------------------


class DenseGridField:
    """Trilinearly interpolated dense density and RGB grids over a bbox (align-corners)."""

    def __init__(self, density, rgb, lo, hi):
        self.grid = np.ascontiguousarray(np.concatenate([density[..., None], rgb], axis=-1), dtype=np.float64)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    @property
    def bbox(self):
        return self.lo, self.hi

    @property
    def resolution(self):
        return self.grid.shape[:3]

    def _query(self, points):
        n = np.asarray(self.resolution, dtype=np.float64)
        u = np.clip((np.asarray(points, dtype=np.float64) - self.lo) / (self.hi - self.lo) * (n - 1), 0, n - 1)
        out = np.empty((len(u), 4))
        _kernels.trilinear(self.grid, np.ascontiguousarray(u), out)
        return out

    def sigma(self, points):
        return np.maximum(self._query(points)[:, 0], 0.0)

    def rgb(self, points, dirs):
        return np.clip(self._query(points)[:, 1:], 0.0, 1.0)


@dataclass
class OracleScene:
    kind: str
    seed: int
    field: DenseGridField
    data: SceneData          # training views
    test: SceneData          # held-out views
    step: float
    bbox: tuple = None       # extent of the dense grid; not handed to the trainer


def _node_grid(lo, hi, n):
    axes = [np.linspace(lo[a], hi[a], n) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _albedo(x, rng):
    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = rng.uniform(1.0, 2.5, 3)
    base = np.stack([0.5 + 0.35 * np.sin(freq[c] * x[..., c] * np.pi + phase[c]) for c in range(3)], axis=-1)
    return base


def _shade(albedo, normal, light=np.array([0.4, 0.5, 0.77])):
    light = light / np.linalg.norm(light)
    lam = np.clip(np.sum(normal * light, axis=-1, keepdims=True), 0.0, 1.0)
    return np.clip(albedo * (0.35 + 0.65 * lam), 0.0, 1.0)


def oracle_grids(kind, n=64, seed=0, lo=(-0.6,) * 3, hi=(0.6,) * 3, peak=40.0):
    """Dense (density, rgb) node grids of an analytic scene; RGB is view independent."""
    rng = np.random.default_rng(seed)
    x = _node_grid(np.asarray(lo, float), np.asarray(hi, float), n)
    if kind == "sphere":
        radius = 0.5
        r = np.linalg.norm(x, axis=-1)
        density = peak * np.maximum(0.0, 1.0 - (r / radius) ** 2)
        normal = x / np.maximum(r, 1e-9)[..., None]
    elif kind == "two-blobs":
        centers = np.array([[-0.22, -0.05, 0.0], [0.24, 0.08, 0.05]])
        radii = np.array([0.3, 0.25])
        density = np.zeros(x.shape[:3])
        normal = np.zeros_like(x)
        for c, rad in zip(centers, radii):
            dx = x - c
            r = np.linalg.norm(dx, axis=-1)
            part = peak * np.maximum(0.0, 1.0 - (r / rad) ** 2)
            sel = part > density
            normal[sel] = (dx / np.maximum(r, 1e-9)[..., None])[sel]
            density = np.maximum(density, part)
    elif kind == "checker-cube":
        half = 0.4
        inside = np.all(np.abs(x) <= half, axis=-1)
        density = np.where(inside, peak, 0.0)
        ax = np.argmax(np.abs(x), axis=-1)
        normal = np.zeros_like(x)
        np.put_along_axis(normal, ax[..., None], np.sign(np.take_along_axis(x, ax[..., None], -1)), -1)
        check = (np.floor((x + half) / (half / 2)).astype(int).sum(axis=-1) % 2)[..., None]
        albedo = np.where(check == 1, np.array([0.85, 0.3, 0.2]), np.array([0.2, 0.45, 0.85]))
        return density, _shade(albedo, normal)
    else:
        raise ValueError(f"unknown oracle scene {kind!r} (expected sphere, two-blobs or checker-cube)")
    return density, _shade(_albedo(x, rng), normal)


def sphere_poses(n_views, radius=2.5, seed=0, offset=0.0):
    """Cameras on a Fibonacci sphere looking at the origin, world z up."""
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0, 2 * np.pi)
    poses = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        z = 1.0 - 2.0 * (i + 0.5 + offset) / n_views
        z = float(np.clip(z, -0.95, 0.95))
        theta = golden * i + jitter
        rho = np.sqrt(1.0 - z * z)
        eye = radius * np.array([rho * np.cos(theta), rho * np.sin(theta), z])
        back = eye / np.linalg.norm(eye)
        right = np.cross([0.0, 0.0, 1.0], back)
        right /= np.linalg.norm(right)
        up = np.cross(back, right)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, up, back, eye
        poses.append(pose)
    return poses


def render_views(fld, poses, width, height, focal, step, background=WHITE):
    frames = []
    accs = []
    for pose in poses:
        cam = Camera(width, height, focal, pose)
        o, d = generate_rays(cam)
        out = render_rays(fld, o, d, RenderOptions(step=step, alpha_cutoff=0.0, chunk=8192), background)
        frames.append(Frame(out["rgb"].reshape(height, width, 3), pose))
        accs.append(out["acc"].reshape(height, width))
    return frames, accs


def make_oracle_scene(kind="sphere", seed=0, n_grid=64, n_train=40, n_test=10, width=200, height=None,
                      camera_angle_x=0.6911112, radius=2.5, lo=(-0.6,) * 3, hi=(0.6,) * 3, peak=40.0):
    """Dense analytic scene plus rendered training and held-out views (white background)."""
    height = width if height is None else height
    density, rgb = oracle_grids(kind, n_grid, seed, lo, hi, peak)
    fld = DenseGridField(density, rgb, lo, hi)
    step = step_size_for(lo, hi, (n_grid,) * 3)
    focal = 0.5 * width / np.tan(0.5 * camera_angle_x)
    train_poses = sphere_poses(n_train, radius, seed)
    test_poses = sphere_poses(n_test, radius, seed + 1, offset=0.37)
    train, train_acc = render_views(fld, train_poses, width, height, focal, step)
    test, test_acc = render_views(fld, test_poses, width, height, focal, step)
    bbox = (np.asarray(lo, float), np.asarray(hi, float))
    scene = OracleScene(kind, seed, fld,
                        SceneData(width, height, focal, train, WHITE.copy()),
                        SceneData(width, height, focal, test, WHITE.copy()), step, bbox)
    scene.train_acc, scene.test_acc = train_acc, test_acc
    return scene


def export_scene(scene: OracleScene, root, camera_angle_x=None, include_bbox=False):
    """Write the views as RGBA PNGs plus ``transforms_{train,test,val}.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data = scene.data
    if camera_angle_x is None:
        camera_angle_x = 2.0 * np.arctan(0.5 * data.width / data.focal)
    for split, sd, accs in (("train", scene.data, scene.train_acc), ("test", scene.test, scene.test_acc),
                            ("val", scene.test, scene.test_acc)):
        (root / split).mkdir(exist_ok=True)
        frames = []
        for i, (fr, acc) in enumerate(zip(sd.frames, accs)):
            # un-composite from white so the loader's compositing reproduces the render
            fg = (fr.image - (1.0 - acc[..., None])) / np.maximum(acc[..., None], 1e-8)
            name = f"{split}/r_{i}"
            save_png(root / f"{name}.png", np.where(acc[..., None] > 1e-8, fg, 0.0), acc)
            frames.append({"file_path": f"./{name}", "transform_matrix": fr.pose.tolist()})
        meta = {"camera_angle_x": float(camera_angle_x), "frames": frames}
        if include_bbox:
            meta["bbox"] = [list(map(float, scene.bbox[0])), list(map(float, scene.bbox[1]))]
        (root / f"transforms_{split}.json").write_text(json.dumps(meta, indent=2))
    return root
