"""Server-side global model update.

`distill_update` merges one client package into the global model by
distillation: both models are unioned, opacities around the incoming model
are reset to a small value, and then only opacities, the appearance
network and per-teacher appearance vectors are optimised so that the
union reproduces teacher images rendered by the local model (at the
client's cameras) and by the previous global model (at cameras sampled
from the bank). Low-opacity Gaussians are pruned afterwards.

`merge_replacement` and `merge_voxel_filter` are the two baselines.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .appearance import APPEARANCE_DIM, AppearanceModel
from .client import ClientPackage
from .core import Camera, GaussianCloud, logit, prune_by_opacity
from .losses import LossConfig, entropy_loss_grad, loss_3dgs_grad
from .metrics import psnr
from .optim import Adam
from .render import render, render_backward, visible_count
from .spatial import PointIndex, median_nn_distance, range_search

log = logging.getLogger(__name__)


class MergeError(RuntimeError):
    """A merge failed; the global state it was applied to is unchanged."""


@dataclass(frozen=True)
class MergeConfig:
    epochs: int = 5
    lr_opacity: float = 0.05
    lr_mlp: float = 1e-4
    lr_hash: float = 1e-4
    lr_ell: float = 1e-3
    mlp_weight_decay: float = 1e-4
    prune_threshold: float = 0.05
    reset_opacity_value: float = 0.05
    n_sampled: int | None = None  # None: as many as the client sent
    lambda_dssim: float = 0.2
    eta: float = 0.01
    overlap_threshold: int = 20
    reset_opacity: bool = True
    use_entropy: bool = True
    use_global_cameras: bool = True
    use_appearance: bool = True
    duplicate_rule: str = "image_id"  # image_id | extrinsic
    duplicate_max_angle_deg: float = 5.0
    duplicate_max_offset: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.prune_threshold < 1.0 or not 0.0 < self.reset_opacity_value < 1.0:
            raise ValueError("opacity thresholds must lie in (0, 1)")
        if self.duplicate_rule not in ("image_id", "extrinsic"):
            raise ValueError(f"unknown duplicate rule {self.duplicate_rule!r}")
        for k in ("lr_opacity", "lr_mlp", "lr_hash", "lr_ell"):
            if getattr(self, k) <= 0:
                raise ValueError(f"{k} must be positive")

    @property
    def reset_logit(self) -> float:
        return logit(self.reset_opacity_value)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lambda_dssim=self.lambda_dssim, eta=self.eta)


@dataclass(frozen=True)
class GlobalState:
    cloud: GaussianCloud
    camera_bank: tuple
    appearance: AppearanceModel
    bounds: np.ndarray
    merged_clients: tuple = ()

    @property
    def image_ids(self) -> set:
        return {c.image_id for c in self.camera_bank}


@dataclass
class UpdateReport:
    client_id: str
    strategy: str
    n_global: int
    n_local: int
    n_union: int
    n_reset: int
    n_after: int
    n_local_cameras: int
    n_sampled_cameras: int
    teacher_psnr: float
    steps: int
    wall_time: float
    losses: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# camera sampling


def _is_duplicate(cam: Camera, others, config: MergeConfig) -> bool:
    if config.duplicate_rule == "image_id":
        return any(cam.image_id == o.image_id for o in others)
    for o in others:
        R = cam.rotation @ o.rotation.T
        angle = np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)))
        if angle <= config.duplicate_max_angle_deg and \
                np.linalg.norm(cam.center - o.center) <= config.duplicate_max_offset:
            return True
    return False


def distill_candidates(bank, local_cameras, config: MergeConfig = MergeConfig()) -> list:
    """Bank cameras that do not duplicate any of the client's cameras."""
    if config.duplicate_rule == "image_id":
        ids = {c.image_id for c in local_cameras}
        return [c for c in bank if c.image_id not in ids]
    return [c for c in bank if not _is_duplicate(c, local_cameras, config)]


def sampling_probabilities(candidates, local_cloud: GaussianCloud) -> np.ndarray:
    """N_j / sum_i N_i with N_j the number of local Gaussians in camera j's frustum."""
    counts = np.array([visible_count(c, local_cloud) for c in candidates], dtype=np.float64)
    total = counts.sum()
    return counts / total if total > 0 else np.zeros(len(candidates))


def sample_distill_cameras(state: GlobalState, local_cameras, local_cloud: GaussianCloud,
                           seed=0, config: MergeConfig = MergeConfig()) -> list:
    """Draw |C_l| (or `config.n_sampled`) bank cameras, with replacement, weighted by visibility."""
    rng = np.random.default_rng(seed)
    candidates = distill_candidates(state.camera_bank, local_cameras, config)
    if not candidates:
        return []
    p = sampling_probabilities(candidates, local_cloud)
    if p.sum() == 0:
        return []
    n = len(local_cameras) if config.n_sampled is None else config.n_sampled
    picks = rng.choice(len(candidates), size=n, replace=True, p=p)
    return [candidates[i] for i in picks]


# ---------------------------------------------------------------------------
# cloud-level merges


def neighbourhood(global_cloud: GaussianCloud, local_cloud: GaussianCloud):
    """(epsilon, indices of global Gaussians within epsilon of any local one)."""
    eps = median_nn_distance(local_cloud.positions)
    if len(global_cloud) == 0:
        return eps, np.zeros(0, dtype=np.int64)
    return eps, range_search(PointIndex(global_cloud.positions), local_cloud.positions, eps)


def reset_opacity_pre_merge(global_cloud: GaussianCloud, local_cloud: GaussianCloud,
                            reset_logit: float = logit(0.05)):
    """Union global || local with opacities reset near the local model.

    Returns (merged cloud, boolean mask of reset entries).
    """
    if len(global_cloud) == 0 or len(local_cloud) == 0:
        raise ValueError("both clouds must be non-empty")
    _, near = neighbourhood(global_cloud, local_cloud)
    merged = global_cloud.concat(local_cloud)
    mask = np.zeros(len(merged), dtype=bool)
    mask[near] = True
    mask[len(global_cloud):] = True
    logits = np.where(mask, reset_logit, merged.opacity_logits)
    return merged.replace(opacity_logits=logits), mask


def merge_replacement(global_cloud: GaussianCloud, local_cloud: GaussianCloud) -> GaussianCloud:
    """Drop global Gaussians within epsilon of the local model and append the local model."""
    if len(global_cloud) == 0 or len(local_cloud) == 0:
        raise ValueError("both clouds must be non-empty")
    _, near = neighbourhood(global_cloud, local_cloud)
    keep = np.ones(len(global_cloud), dtype=bool)
    keep[near] = False
    return global_cloud.subset(np.flatnonzero(keep)).concat(local_cloud)


def merge_voxel_filter(global_cloud: GaussianCloud, local_cloud: GaussianCloud,
                       voxel_size: float | None = None) -> GaussianCloud:
    """Concatenate, then average all Gaussians falling in the same voxel."""
    merged = global_cloud.concat(local_cloud)
    if len(merged) == 0:
        return merged
    if voxel_size is None:
        voxel_size = median_nn_distance(merged.positions) if len(merged) > 1 else 1.0
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    keys = np.floor(merged.positions / voxel_size).astype(np.int64)
    # buckets in order of first appearance keep the output deterministic and stable
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    bucket = rank[inverse]
    n_b = len(order)
    counts = np.bincount(bucket, minlength=n_b).astype(np.float64)

    def mean(a):
        flat = a.reshape(len(a), -1)
        out = np.stack([np.bincount(bucket, weights=flat[:, j], minlength=n_b)
                        for j in range(flat.shape[1])], axis=1)
        return (out / counts[:, None]).reshape((n_b,) + a.shape[1:])

    q = merged.rotations
    ref = q[first[order]][bucket]
    sign = np.where(np.sum(q * ref, axis=1) < 0, -1.0, 1.0)
    qm = mean(q * sign[:, None])
    qm /= np.linalg.norm(qm, axis=1, keepdims=True)
    return GaussianCloud(mean(merged.positions), mean(merged.log_scales), qm, mean(merged.sh),
                         mean(merged.opacity_logits), merged.bounds)


# ---------------------------------------------------------------------------
# distillation


def _teacher_set(state: GlobalState, package: ClientPackage, config: MergeConfig, rng):
    cams_r = []
    if config.use_global_cameras:
        cams_r = sample_distill_cameras(state, package.cameras, package.cloud,
                                        seed=rng.integers(2 ** 63), config=config)
    teachers = [(c, render(c, package.cloud, keep_state=False).image) for c in package.cameras]
    teachers += [(c, render(c, state.cloud, keep_state=False).image) for c in cams_r]
    return teachers, len(cams_r)


def distill_update(state: GlobalState, package: ClientPackage, config: MergeConfig = MergeConfig(),
                   seed: int | None = None):
    """Merge `package` into `state`; returns (new state, UpdateReport).

    The input state is never modified. Any failure raises MergeError.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    local = package.cloud
    if len(local) < 2:
        raise MergeError(f"package {package.client_id!r} has fewer than two Gaussians")
    try:
        teachers, n_r = _teacher_set(state, package, config, rng)
        if config.reset_opacity:
            merged, reset_mask = reset_opacity_pre_merge(state.cloud, local, config.reset_logit)
        else:
            merged, reset_mask = state.cloud.concat(local), np.zeros(len(state.cloud) + len(local), bool)

        app = state.appearance.copy() if config.use_appearance else None
        opt = Adam()
        opacity = np.array(merged.opacity_logits)
        opt.add("opacity_logits", opacity, config.lr_opacity)
        ells = np.zeros((len(teachers), APPEARANCE_DIM))
        if app is not None:
            for k, arr in app.params().items():
                if k == "tables":
                    opt.add(k, arr, config.lr_hash)
                else:
                    opt.add(k, arr, config.lr_mlp, config.mlp_weight_decay)
            opt.add("ell", ells, config.lr_ell)

        loss_cfg = config.loss
        eta = config.eta if config.use_entropy else 0.0
        losses = []
        for _ in range(config.epochs):
            for k in rng.permutation(len(teachers)):
                cam, target = teachers[k]
                cloud = merged.replace(opacity_logits=opacity)
                appearance = (app, ells[k], state.bounds) if app is not None else None
                out = render(cam, cloud, appearance)
                loss, dimg = loss_3dgs_grad(target, out.image, loss_cfg)
                grads = {}
                if eta > 0:
                    ent, dent = entropy_loss_grad(opacity, out.visibility)
                    loss += eta * ent
                if not np.isfinite(loss):
                    raise MergeError(f"non-finite distillation loss for {package.client_id!r}")
                losses.append(float(loss))
                g = render_backward(cam, cloud, dimg, appearance, out.state)
                grads["opacity_logits"] = g.opacity_logits + (eta * dent if eta > 0 else 0.0)
                if app is not None:
                    ga = g.appearance.as_dict()
                    ell_grad = np.zeros_like(ells)
                    ell_grad[k] = ga.pop("ell")
                    grads.update(ga)
                    grads["ell"] = ell_grad
                opt.step(grads)

        final = merged.replace(opacity_logits=opacity)
        final = prune_by_opacity(final, config.prune_threshold)
        if len(final) == 0:
            raise MergeError(f"merge of {package.client_id!r} pruned every Gaussian")

        scores = []
        for k, (cam, target) in enumerate(teachers):
            appearance = (app, ells[k], state.bounds) if app is not None else None
            scores.append(psnr(target, render(cam, final, appearance, keep_state=False).image))
    except MergeError:
        raise
    except (ValueError, FloatingPointError, ArithmeticError) as exc:
        raise MergeError(f"merge of {package.client_id!r} failed: {exc}") from exc

    new_state = GlobalState(
        cloud=final,
        camera_bank=tuple(state.camera_bank) + tuple(package.cameras),
        appearance=app if app is not None else state.appearance,
        bounds=state.bounds,
        merged_clients=tuple(state.merged_clients) + (package.client_id,),
    )
    report = UpdateReport(
        client_id=package.client_id, strategy="distill", n_global=len(state.cloud),
        n_local=len(local), n_union=len(merged), n_reset=int(reset_mask.sum()), n_after=len(final),
        n_local_cameras=len(package.cameras), n_sampled_cameras=n_r,
        teacher_psnr=_finite_mean(scores), steps=len(losses),
        wall_time=time.perf_counter() - t0, losses=losses)
    return new_state, report


def _finite_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean(np.minimum(v, 100.0))) if len(v) else float("nan")


def baseline_update(state: GlobalState, package: ClientPackage, strategy: str,
                    voxel_size: float | None = None):
    """Apply a non-learned merge (replace | voxel) with the same bookkeeping as distillation."""
    t0 = time.perf_counter()
    if strategy == "replace":
        cloud = merge_replacement(state.cloud, package.cloud)
    elif strategy == "voxel":
        cloud = merge_voxel_filter(state.cloud, package.cloud, voxel_size)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    scores = [psnr(render(c, package.cloud, keep_state=False).image,
                   render(c, cloud, keep_state=False).image) for c in package.cameras]
    new_state = dc_replace(state, cloud=cloud,
                           camera_bank=tuple(state.camera_bank) + tuple(package.cameras),
                           merged_clients=tuple(state.merged_clients) + (package.client_id,))
    report = UpdateReport(package.client_id, strategy, len(state.cloud), len(package.cloud),
                          len(state.cloud) + len(package.cloud), 0, len(cloud), len(package.cameras),
                          0, _finite_mean(scores), 0, time.perf_counter() - t0)
    return new_state, report
