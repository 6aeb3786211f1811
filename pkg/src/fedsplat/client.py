"""Simulated client: local data sampling, local 3DGS + appearance training, packaging.

Training follows the usual 3DGS recipe scaled down: Adam with per-group
step sizes, exponential decay of the position step, periodic
densification (clone small / split large Gaussians with a large mean
screen-space gradient), opacity resets and low-opacity pruning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .appearance import APPEARANCE_DIM, AppearanceModel
from .core import Camera, GaussianCloud, SH_COEFFS, check_image, logit, quat_to_rotmat, rgb_to_sh_dc, sigmoid
from .losses import LossConfig, loss_3dgs_grad
from .optim import Adam
from .render import render, render_backward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LocalDataset:
    items: list  # (image, camera) pairs
    seed: int = 0
    anchor: int = -1  # index of the anchor view in the full dataset

    def __post_init__(self):
        ids = [cam.image_id for _, cam in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("local dataset contains duplicate image ids")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def cameras(self) -> list:
        return [cam for _, cam in self.items]

    @property
    def images(self) -> list:
        return [img for img, _ in self.items]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    densify_grad_threshold: float = 0.0004
    opacity_reset_interval: int = 1000
    sh_degree: int = 2
    densify_from: int = 100
    densify_until: int | None = None  # default: half of the iterations
    densify_interval: int = 100
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    prune_large: bool = False
    max_gaussians: int = 20000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh_dc: float = 0.0025
    lr_sh_rest: float = 0.000125
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    use_appearance: bool = True
    lr_mlp: float = 1e-4
    lr_hash: float = 1e-4
    lr_ell: float = 1e-3
    mlp_weight_decay: float = 1e-4
    lambda_dssim: float = 0.2
    init_opacity: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.densify_interval <= 0 or self.opacity_reset_interval <= 0:
            raise ValueError("iteration counts must be positive")
        if self.sh_degree != 2:
            raise ValueError("only degree-2 spherical harmonics are supported")


@dataclass
class TrainedClient:
    cloud: GaussianCloud
    appearance: AppearanceModel | None
    ells: np.ndarray  # (n_images, 32)
    cameras: list
    losses: list = field(default_factory=list)
    client_id: str = ""


@dataclass(frozen=True)
class ClientPackage:
    """What leaves the client: the cloud and the camera parameters, nothing else."""

    cloud: GaussianCloud
    cameras: tuple
    client_id: str = ""

    def __post_init__(self):
        if len(self.cameras) == 0:
            raise ValueError("a package needs at least one camera")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    @property
    def image_ids(self) -> set:
        return {c.image_id for c in self.cameras}


# ---------------------------------------------------------------------------
# data sampling


def sample_local_data(full_dataset, k_range=(100, 200), seed: int = 0,
                      anchor: int | None = None) -> LocalDataset:
    """k nearest views (by camera centre) around a uniformly drawn anchor view.

    Passing `anchor` pins the anchor view instead of drawing it.
    """
    k_lo, k_hi = k_range
    if not 1 <= k_lo <= k_hi:
        raise ValueError("k_range must satisfy 1 <= low <= high")
    if len(full_dataset) < k_hi:
        raise ValueError(f"dataset has {len(full_dataset)} views, need at least {k_hi}")
    rng = np.random.default_rng(seed)
    drawn = int(rng.integers(len(full_dataset)))
    anchor = drawn if anchor is None else int(anchor)
    k = int(rng.integers(k_lo, k_hi + 1))
    centers = np.array([cam.center for _, cam in full_dataset])
    d = np.linalg.norm(centers - centers[anchor], axis=1)
    # stable sort: ties resolved by dataset order, anchor always first
    order = np.argsort(d, kind="stable")
    order = np.concatenate([[anchor], order[order != anchor]])[:k]
    return LocalDataset([full_dataset[i] for i in order], seed=seed, anchor=anchor)


# ---------------------------------------------------------------------------
# initialisation


def _point_colors(points, data: LocalDataset) -> np.ndarray:
    """Mean colour of each point over the training images it projects into."""
    acc = np.zeros((len(points), 3))
    cnt = np.zeros(len(points))
    for img, cam in data.items:
        t = points @ cam.rotation.T + cam.translation
        z = t[:, 2]
        ok = z > 0.01
        u = np.full(len(points), -1)
        v = np.full(len(points), -1)
        u[ok] = np.round(cam.fx * t[ok, 0] / z[ok] + cam.cx).astype(int)
        v[ok] = np.round(cam.fy * t[ok, 1] / z[ok] + cam.cy).astype(int)
        ok &= (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        acc[ok] += img[v[ok], u[ok]]
        cnt[ok] += 1
    rgb = np.full((len(points), 3), 0.5)
    seen = cnt > 0
    rgb[seen] = acc[seen] / cnt[seen, None]
    return rgb


def init_cloud(points, data: LocalDataset, init_opacity: float = 0.1, bounds=None) -> GaussianCloud:
    """Isotropic Gaussians at `points`, sized by the distance to their 3 nearest neighbours."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one initial point")
    if len(pts) > 1:
        k = min(4, len(pts))
        d, _ = cKDTree(pts).query(pts, k=k)
        mean_sq = np.mean(d[:, 1:] ** 2, axis=1)
    else:
        mean_sq = np.array([0.01])
    scale = np.sqrt(np.maximum(mean_sq, 1e-7))
    n = len(pts)
    sh = np.zeros((n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(_point_colors(pts, data))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(pts, np.repeat(np.log(scale)[:, None], 3, axis=1), rot, sh,
                         np.full(n, logit(init_opacity)), bounds)


def camera_extent(cameras) -> float:
    """Radius of the camera centres around their mean, times 1.1 (3DGS convention)."""
    c = np.array([cam.center for cam in cameras])
    r = np.max(np.linalg.norm(c - c.mean(0), axis=1)) if len(c) > 1 else 0.0
    return 1.1 * max(r, 1.0)


# ---------------------------------------------------------------------------
# training


class _Params:
    """Mutable per-Gaussian arrays registered with the optimiser."""

    ROWS = ("positions", "log_scales", "rotations", "sh_dc", "sh_rest", "opacity_logits")

    def __init__(self, cloud: GaussianCloud, opt: Adam, cfg: TrainConfig, extent: float):
        self.opt = opt
        self.bounds = cloud.bounds
        arrays = dict(positions=cloud.positions, log_scales=cloud.log_scales,
                      rotations=cloud.rotations, sh_dc=cloud.sh[:, :1], sh_rest=cloud.sh[:, 1:],
                      opacity_logits=cloud.opacity_logits)
        lrs = dict(positions=cfg.lr_position * extent, log_scales=cfg.lr_scale,
                   rotations=cfg.lr_rotation, sh_dc=cfg.lr_sh_dc, sh_rest=cfg.lr_sh_rest,
                   opacity_logits=cfg.lr_opacity)
        for k in self.ROWS:
            opt.add(k, np.array(arrays[k], dtype=np.float64), lrs[k])

    def __getitem__(self, k):
        return self.opt[k]

    def __len__(self):
        return len(self.opt["positions"])

    def cloud(self) -> GaussianCloud:
        q = self["rotations"]
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        sh = np.concatenate([self["sh_dc"], self["sh_rest"]], axis=1)
        return GaussianCloud(self["positions"], self["log_scales"], q, sh,
                             self["opacity_logits"], self.bounds)

    def grads(self, g) -> dict:
        return dict(positions=g.positions, log_scales=g.log_scales, rotations=g.rotations,
                    sh_dc=g.sh[:, :1], sh_rest=g.sh[:, 1:], opacity_logits=g.opacity_logits)

    def remap(self, source, new_arrays):
        self.opt.remap_rows(self.ROWS, new_arrays, source)


def _densify_and_prune(p: _Params, grad_acc, denom, cfg: TrainConfig, extent, rng, prune_large):
    grads = np.where(denom > 0, grad_acc / np.maximum(denom, 1), 0.0)
    n = len(p)
    arrays = {k: p[k].copy() for k in _Params.ROWS}
    max_scale = np.exp(arrays["log_scales"]).max(axis=1)
    hot = grads >= cfg.densify_grad_threshold
    room = cfg.max_gaussians - n
    clone = np.flatnonzero(hot & (max_scale <= cfg.percent_dense * extent))
    split = np.flatnonzero(hot & (max_scale > cfg.percent_dense * extent))
    if room <= 0:
        clone, split = clone[:0], split[:0]
    clone = clone[:max(room, 0)]
    split = split[:max((room - len(clone)), 0)]

    new_rows = {k: [arrays[k], arrays[k][clone]] for k in _Params.ROWS}
    source = [np.arange(n), np.full(len(clone), -1)]
    if len(split):
        s = np.exp(arrays["log_scales"][split])
        R = quat_to_rotmat(arrays["rotations"][split])
        for _ in range(2):
            offs = rng.normal(size=(len(split), 3)) * s
            pos = arrays["positions"][split] + np.einsum("nij,nj->ni", R, offs)
            new_rows["positions"].append(pos)
            new_rows["log_scales"].append(np.log(s / 1.6))
            for k in ("rotations", "sh_dc", "sh_rest", "opacity_logits"):
                new_rows[k].append(arrays[k][split])
            source.append(np.full(len(split), -1))
    merged = {k: np.concatenate(v) for k, v in new_rows.items()}
    source = np.concatenate(source)

    keep = sigmoid(merged["opacity_logits"]) >= cfg.min_opacity
    keep[split] = False  # split parents are replaced by their children
    if prune_large:
        keep &= np.exp(merged["log_scales"]).max(axis=1) <= 0.1 * extent
    if not keep.any():
        keep[np.argmax(merged["opacity_logits"])] = True
    merged = {k: np.ascontiguousarray(v[keep]) for k, v in merged.items()}
    p.remap(source[keep], merged)
    return int(len(clone)), int(len(split)), int(np.sum(~keep))


def train_local(data: LocalDataset, config: TrainConfig = TrainConfig(), init_points=None,
                init: GaussianCloud | None = None, bounds=None, client_id: str = "") -> TrainedClient:
    """Optimise a cloud (and appearance model) on the client's views from scratch."""
    if init is None:
        if init_points is None or len(init_points) == 0:
            raise ValueError("train_local needs initial points")
        init = init_cloud(init_points, data, config.init_opacity, bounds)
    cams = data.cameras
    images = [check_image(img, (cam.height, cam.width)) for img, cam in data.items]
    if len(images) == 0:
        raise ValueError("empty local dataset")
    rng = np.random.default_rng(config.seed)
    extent = camera_extent(cams)
    loss_cfg = LossConfig(lambda_dssim=config.lambda_dssim)

    opt = Adam(eps=1e-15)
    p = _Params(init, opt, config, extent)
    app = None
    ells = np.zeros((len(images), APPEARANCE_DIM))
    if config.use_appearance:
        app = AppearanceModel(seed=config.seed)
        for k, arr in app.params().items():
            if k == "tables":
                opt.add(k, arr, config.lr_hash)
            else:
                opt.add(k, arr, config.lr_mlp, config.mlp_weight_decay)
        opt.add("ell", ells, config.lr_ell)
        ells = opt["ell"]

    until = config.densify_until if config.densify_until is not None else config.iterations // 2
    grad_acc = np.zeros(len(p))
    denom = np.zeros(len(p))
    losses = []
    order = np.zeros(0, dtype=np.int64)
    decay = np.log(config.lr_position_final / config.lr_position)
    for it in range(1, config.iterations + 1):
        frac = (it - 1) / max(config.iterations - 1, 1)
        opt.set_lr("positions", config.lr_position * extent * np.exp(decay * frac))
        if len(order) == 0:
            order = rng.permutation(len(images))
        j, order = int(order[0]), order[1:]
        cam = cams[j]
        cloud = p.cloud()
        appearance = (app, ells[j], p.bounds) if app is not None else None
        out = render(cam, cloud, appearance)
        loss, dimg = loss_3dgs_grad(images[j], out.image, loss_cfg)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it} (client {client_id!r})")
        losses.append(loss)
        g = render_backward(cam, cloud, dimg, appearance, out.state)
        grads = p.grads(g)
        if app is not None:
            ga = g.appearance.as_dict()
            ell_grad = np.zeros_like(ells)
            ell_grad[j] = ga.pop("ell")
            grads.update(ga)
            grads["ell"] = ell_grad
        opt.step(grads)

        if it <= until:
            # screen-space gradient in normalised device units, as in 3DGS
            ndc = g.means2d * np.array([cam.width / 2.0, cam.height / 2.0])
            vis = out.visibility
            grad_acc[vis] += np.linalg.norm(ndc[vis], axis=1)
            denom[vis] += 1
            if it >= config.densify_from and it % config.densify_interval == 0:
                prune_large = config.prune_large and it > config.opacity_reset_interval
                c, s, r = _densify_and_prune(p, grad_acc, denom, config, extent, rng, prune_large)
                log.debug("iter %d: cloned %d, split %d, pruned %d -> %d", it, c, s, r, len(p))
                grad_acc = np.zeros(len(p))
                denom = np.zeros(len(p))
            if it % config.opacity_reset_interval == 0 and it < config.iterations:
                o = p["opacity_logits"]
                o[:] = np.minimum(o, logit(0.01))
                opt.reset_moments("opacity_logits")

    final = p.cloud()
    # final pruning pass of the 3DGS schedule
    keep = sigmoid(final.opacity_logits) >= config.min_opacity
    if config.iterations > 0 and keep.any():
        final = final.subset(np.flatnonzero(keep))
    return TrainedClient(final, app, np.array(ells), cams, losses, client_id)


def package_for_server(trained: TrainedClient) -> ClientPackage:
    """Strip images, the appearance model and the appearance vectors."""
    return ClientPackage(trained.cloud, tuple(trained.cameras), trained.client_id)
