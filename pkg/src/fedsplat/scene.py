"""Synthetic desk-scale scenes: a textured ground plane with box-shaped
"buildings", photographed by downward-looking cameras on a jittered grid.

The seasonal variant renders every camera twice: once in a summer regime
(warm tint, plus a cluster of "trees" that only exists in summer) and once
in a winter regime (cool tint, no trees).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, GaussianCloud, logit, rgb_to_sh_dc, SH_COEFFS
from .render import render, visible_count

SUMMER = "summer"
WINTER = "winter"


@dataclass(frozen=True)
class SceneSpec:
    """Knobs for `generate_scene`. Lengths are world units, sizes pixels."""

    layout: str = "aerial"  # aerial | blob | random
    half_extent: float = 4.0
    ground_spacing: float = 0.25
    n_buildings: int = 6
    building_spacing: float = 0.2
    n_random: int = 200  # only for layout="random"
    image_size: int = 32
    focal: float = 36.0
    camera_height: float = 3.0
    camera_grid: int = 14  # camera_grid**2 training cameras
    camera_margin: float = 0.6
    camera_jitter: float = 0.15
    tilt: float = 0.35  # max horizontal offset of the look-at target, relative to height
    n_validation: int = 24
    orbit_cameras: int = 8  # only for layout="blob"
    seasonal: bool = False
    summer_tint: tuple = (1.0, 0.95, 0.8)
    winter_tint: tuple = (0.8, 0.9, 1.0)
    n_trees: int = 3

    def __post_init__(self):
        if self.layout not in ("aerial", "blob", "random"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.image_size < 22:
            # evaluation scores SSIM on the right half of each view
            raise ValueError("image_size must be at least 22 (two 11-pixel SSIM windows)")
        if self.half_extent <= 0 or self.ground_spacing <= 0 or self.focal <= 0:
            raise ValueError("extent, spacing and focal length must be positive")
        if self.camera_grid < 1 or self.n_validation < 0:
            raise ValueError("camera counts must be positive")


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    cloud: GaussianCloud  # ground truth (summer cloud for seasonal scenes)
    cameras: list
    images: list
    val_cameras: list
    val_images: list
    regimes: dict = field(default_factory=dict)  # name -> dict(tint, cloud, images, val_images)

    @property
    def bounds(self) -> np.ndarray:
        return self.cloud.bounds

    def dataset(self, regime: str | None = None) -> list:
        """Training views as (image, camera) pairs."""
        if regime is None:
            return list(zip(self.images, self.cameras))
        r = self.regimes[regime]
        return list(zip(r["images"], r["cameras"]))

    def validation(self, regime: str | None = None) -> list:
        if regime is None:
            return list(zip(self.val_images, self.val_cameras))
        r = self.regimes[regime]
        return list(zip(r["val_images"], r["val_cameras"]))

    def init_points(self, cameras, rng, noise: float = 0.05, random_ratio: float = 0.2,
                    regime: str | None = None) -> np.ndarray:
        """Stand-in for structure-from-motion points seen by `cameras`.

        Ground-truth centres visible from any camera, perturbed by Gaussian
        noise, plus uniform random points in the scene box.
        """
        cloud = self.cloud if regime is None else self.regimes[regime]["cloud"]
        seen = np.zeros(len(cloud), dtype=bool)
        for cam in cameras:
            seen |= _in_view(cam, cloud.positions)
        pts = cloud.positions[seen] + rng.normal(0.0, noise, (int(seen.sum()), 3))
        n_rand = int(round(random_ratio * len(pts)))
        lo, hi = cloud.bounds
        rand = rng.uniform(lo, hi, (n_rand, 3))
        return np.concatenate([pts, rand])


def _in_view(camera: Camera, positions: np.ndarray) -> np.ndarray:
    t = positions @ camera.rotation.T + camera.translation
    z = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * t[:, 0] / z + camera.cx
        v = camera.fy * t[:, 1] / z + camera.cy
    return (z > 0.01) & (u >= -0.5) & (u < camera.width - 0.5) & (v >= -0.5) & (v < camera.height - 0.5)


def _flat_quat(n):
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def _gaussians(pos, scale, rgb, opacity):
    n = len(pos)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rgb)
    return (np.asarray(pos, float), np.log(np.broadcast_to(scale, (n, 3))).copy(), _flat_quat(n),
            sh, np.full(n, logit(opacity)))


def _join(parts, bounds=None):
    cols = [np.concatenate([p[i] for p in parts]) for i in range(5)]
    return GaussianCloud(*cols, bounds=bounds)


def _ground(spec: SceneSpec, rng):
    h = spec.half_extent
    xs = np.arange(-h, h + 1e-9, spec.ground_spacing)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    # smooth colour field plus per-splat speckle, so images carry texture
    phase = rng.uniform(0, 2 * np.pi, (3, 2))
    freq = rng.uniform(0.4, 1.2, (3, 2))
    rgb = np.empty((len(pos), 3))
    for c in range(3):
        rgb[:, c] = (0.45 + 0.2 * np.sin(freq[c, 0] * pos[:, 0] + phase[c, 0])
                     * np.cos(freq[c, 1] * pos[:, 1] + phase[c, 1]))
    rgb += rng.normal(0, 0.08, rgb.shape)
    rgb = np.clip(rgb, 0.05, 0.95)
    s = 0.7 * spec.ground_spacing
    return _gaussians(pos, (s, s, 0.02), rgb, 0.95)


def _box(center, size, spacing, rgb, rng):
    """Gaussians on the roof and four walls of an axis-aligned box standing on z=0."""
    cx, cy = center
    sx, sy, sz = size
    pts = []
    xs = np.arange(-sx / 2, sx / 2 + 1e-9, spacing)
    ys = np.arange(-sy / 2, sy / 2 + 1e-9, spacing)
    zs = np.arange(spacing / 2, sz, spacing)
    for x in xs:
        for y in ys:
            pts.append((cx + x, cy + y, sz))
    for z in zs:
        for x in xs:
            pts.append((cx + x, cy - sy / 2, z))
            pts.append((cx + x, cy + sy / 2, z))
        for y in ys:
            pts.append((cx - sx / 2, cy + y, z))
            pts.append((cx + sx / 2, cy + y, z))
    pts = np.array(pts)
    colors = np.clip(np.asarray(rgb) + rng.normal(0, 0.05, (len(pts), 3)), 0.02, 0.98)
    return _gaussians(pts, 0.6 * spacing, colors, 0.95)


def _buildings(spec: SceneSpec, rng, count: int, palette=None):
    parts = []
    lim = spec.half_extent - 0.8
    for _ in range(count):
        center = rng.uniform(-lim, lim, 2)
        size = (rng.uniform(0.6, 1.2), rng.uniform(0.6, 1.2), rng.uniform(0.4, 1.0))
        rgb = rng.uniform(0.1, 0.9, 3) if palette is None else palette(rng)
        parts.append(_box(center, size, spec.building_spacing, rgb, rng))
    return parts


def _tree(rng):
    return np.array([0.1, 0.55, 0.15]) + rng.normal(0, 0.05, 3)


def _grid_cameras(spec: SceneSpec, rng, count_side: int | None, n: int | None, prefix: str):
    h = spec.half_extent - spec.camera_margin
    if count_side is not None:
        xs = np.linspace(-h, h, count_side)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
        xy = xy + rng.uniform(-spec.camera_jitter, spec.camera_jitter, xy.shape)
    else:
        xy = rng.uniform(-h, h, (n, 2))
    cams = []
    for i, (x, y) in enumerate(xy):
        z = spec.camera_height * rng.uniform(0.9, 1.1)
        off = rng.uniform(-spec.tilt, spec.tilt, 2) * z
        eye = (x, y, z)
        target = (x + off[0], y + off[1], 0.0)
        cams.append(Camera.look_at(eye, target, spec.image_size, spec.image_size, spec.focal,
                                   up=(0.0, 1.0, 0.0), image_id=f"{prefix}{i:04d}"))
    return cams


def _orbit_cameras(spec: SceneSpec, prefix: str):
    cams = []
    for i in range(spec.orbit_cameras):
        a = 2 * np.pi * i / spec.orbit_cameras
        eye = (3.0 * np.cos(a), 3.0 * np.sin(a), 1.0)
        cams.append(Camera.look_at(eye, (0, 0, 0), spec.image_size, spec.image_size, spec.focal,
                                   image_id=f"{prefix}{i:04d}"))
    return cams


def render_views(cloud: GaussianCloud, cameras, tint=None) -> list:
    tint = np.ones(3) if tint is None else np.asarray(tint, dtype=np.float64)
    return [np.clip(render(c, cloud, keep_state=False).image * tint, 0.0, 1.0) for c in cameras]


def generate_scene(spec: SceneSpec = SceneSpec(), seed: int = 0) -> SyntheticScene:
    """Build the ground-truth cloud, cameras and rendered images; deterministic per seed."""
    rng = np.random.default_rng(seed)
    if spec.layout == "blob":
        cloud = _join([_gaussians(np.zeros((1, 3)), 0.3, np.ones((1, 3)), 0.95)],
                      bounds=np.array([[-1.0] * 3, [1.0] * 3]))
        cams = _orbit_cameras(spec, "cam")
        return SyntheticScene(spec, seed, cloud, cams, render_views(cloud, cams), [], [])

    if spec.layout == "random":
        h = spec.half_extent / 2
        pos = rng.uniform(-h, h, (spec.n_random, 3)) * (1, 1, 0.3)
        parts = [_gaussians(pos, 0.15, rng.uniform(0.1, 0.9, (spec.n_random, 3)), 0.8)]
    else:
        parts = [_ground(spec, rng)] + _buildings(spec, rng, spec.n_buildings)
    bounds = np.array([[-spec.half_extent] * 2 + [-0.5], [spec.half_extent] * 2 + [2.0]])
    base = _join(parts, bounds)
    trees = _join(_buildings(spec, rng, spec.n_trees, palette=_tree), bounds) if spec.seasonal else None

    cams = _grid_cameras(spec, rng, spec.camera_grid, None, "cam")
    val = _grid_cameras(spec, rng, None, spec.n_validation, "val")
    # every camera must see something; the ground plane guarantees it for aerial layouts
    for c in cams + val:
        if visible_count(c, base) == 0:
            raise ValueError(f"camera {c.image_id} sees no Gaussian; adjust the spec")

    if not spec.seasonal:
        return SyntheticScene(spec, seed, base, cams, render_views(base, cams), val,
                              render_views(base, val))

    summer_cloud = base.concat(trees)
    regimes = {}
    for name, cloud, tint in ((SUMMER, summer_cloud, spec.summer_tint),
                              (WINTER, base, spec.winter_tint)):
        tag = name[0].upper()
        rc = [c.with_image_id(f"{tag}-{c.image_id}") for c in cams]
        rv = [c.with_image_id(f"{tag}-{c.image_id}") for c in val]
        regimes[name] = dict(tint=np.asarray(tint, dtype=np.float64), cloud=cloud, cameras=rc,
                             images=render_views(cloud, rc, tint), val_cameras=rv,
                             val_images=render_views(cloud, rv, tint))
    s = regimes[SUMMER]
    return SyntheticScene(spec, seed, summer_cloud, s["cameras"], s["images"],
                          s["val_cameras"], s["val_images"], regimes)
