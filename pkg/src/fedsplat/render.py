"""Differentiable splat rasterizer: projection, alpha compositing and its exact reverse pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _raster
from .appearance import AppearanceForward, AppearanceGrads, AppearanceModel
from .core import (NEAR_PLANE, SH_COEFFS, SH_COLOR_OFFSET, Camera, Gaussian, GaussianCloud,
                   covariance_from_factors, quat_to_rotmat, rotmat_grad_to_quat,
                   sh_basis, sh_basis_jacobian, sigmoid)

LOW_PASS = 0.3
ALPHA_MAX = _raster.ALPHA_MAX
ALPHA_MIN = _raster.ALPHA_MIN
T_MIN = _raster.T_MIN


class BehindCameraError(ValueError):
    """The Gaussian centre is not in front of the near plane."""


class EmptyCloudError(ValueError):
    pass


class ProjectedPoint(NamedTuple):
    pixel: np.ndarray
    depth: float
    in_front: bool


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    source_index: int = -1


class AppearanceInput(NamedTuple):
    model: AppearanceModel
    ell: np.ndarray
    bounds: np.ndarray | None = None


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W), final prod(1 - alpha)
    visibility: np.ndarray  # (N,) bool, Gaussian reached some pixel with alpha >= 1/255
    state: "_Frame | None" = field(default=None, repr=False)


@dataclass
class GradientBuffer:
    """Gradients of a scalar loss w.r.t. every stored Gaussian parameter.

    `sh` and `sh_hat` coincide (k_hat = k + offset); `means2d` is the
    screen-space mean gradient used by densification. `appearance` is set
    only when an appearance model took part in the render.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    opacity_logits: np.ndarray
    means2d: np.ndarray
    appearance: AppearanceGrads | None = None

    @property
    def sh_hat(self) -> np.ndarray:
        return self.sh


def project_position(camera: Camera, position) -> ProjectedPoint:
    """Pixel coordinates K (Ex / (Ex)_z) and camera-space depth."""
    t = camera.rotation @ np.asarray(position, dtype=np.float64) + camera.translation
    depth = float(t[2])
    in_front = depth > NEAR_PLANE
    with np.errstate(divide="ignore", invalid="ignore"):
        pixel = (camera.intrinsic @ (t / t[2]))[:2]
    return ProjectedPoint(pixel, depth, in_front)


def _jacobian(camera: Camera, t: np.ndarray) -> np.ndarray:
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = camera.fx / tz
    J[:, 0, 2] = -camera.fx * tx / tz ** 2
    J[:, 1, 1] = camera.fy / tz
    J[:, 1, 2] = -camera.fy * ty / tz ** 2
    return J


def project_covariance(camera: Camera, gaussian: Gaussian) -> np.ndarray:
    """J W Sigma W^T J^T + 0.3 I for one Gaussian."""
    t = camera.rotation @ gaussian.position + camera.translation
    if t[2] <= NEAR_PLANE:
        raise BehindCameraError("Gaussian is behind the near plane")
    M = _jacobian(camera, t[None])[0] @ camera.rotation
    return M @ gaussian.covariance @ M.T + LOW_PASS * np.eye(2)


def compute_alpha(projected: ProjectedGaussian, opacity_logit: float, pixel) -> float:
    """Blending weight of one Gaussian at one pixel, with the 0.99 cap and 1/255 floor."""
    d = np.asarray(pixel, dtype=np.float64) - projected.mean2d
    power = -0.5 * d @ np.linalg.solve(projected.cov2d, d)
    alpha = min(ALPHA_MAX, sigmoid(opacity_logit) * np.exp(power))
    return 0.0 if alpha < ALPHA_MIN else float(alpha)


def visible_count(camera: Camera, cloud: GaussianCloud) -> int:
    """Gaussians whose centre projects onto the image plane in front of the near plane."""
    if len(cloud) == 0:
        return 0
    t = cloud.positions @ camera.rotation.T + camera.translation
    front = t[:, 2] > NEAR_PLANE
    z = np.where(front, t[:, 2], 1.0)
    u = camera.fx * t[:, 0] / z + camera.cx
    v = camera.fy * t[:, 1] / z + camera.cy
    on_plane = (u >= -0.5) & (u < camera.width - 0.5) & (v >= -0.5) & (v < camera.height - 0.5)
    return int(np.count_nonzero(front & on_plane))


# ---------------------------------------------------------------------------
# forward


@dataclass
class _Frame:
    camera: Camera
    n: int
    idx: np.ndarray  # source index of each rendered Gaussian, front to back
    t: np.ndarray
    J: np.ndarray
    M: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    cov3: np.ndarray
    conic: np.ndarray
    means: np.ndarray
    opac: np.ndarray
    colors: np.ndarray
    color_live: np.ndarray
    basis: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    sh_hat: np.ndarray  # k + offset of the rasterised Gaussians, in render order
    offsets: np.ndarray
    lists: np.ndarray
    trans: np.ndarray
    last: np.ndarray
    app: AppearanceForward | None
    app_model: AppearanceModel | None


def _as_appearance(appearance) -> AppearanceInput | None:
    if appearance is None:
        return None
    if isinstance(appearance, AppearanceInput):
        return appearance
    return AppearanceInput(*appearance)


def _screen_rects(means, conic_cov, opac, width, height):
    """Integer pixel rectangles outside of which alpha < 1/255."""
    a, b, c = conic_cov
    lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = 2.0 * lam_max * np.log(255.0 * opac)
    live = reach > 0
    r = np.sqrt(np.where(live, reach, 0.0)) * (1 + 1e-7) + 1e-7
    x0 = np.maximum(np.ceil(means[:, 0] - r), 0)
    x1 = np.minimum(np.floor(means[:, 0] + r), width - 1)
    y0 = np.maximum(np.ceil(means[:, 1] - r), 0)
    y1 = np.minimum(np.floor(means[:, 1] + r), height - 1)
    live &= (x0 <= x1) & (y0 <= y1)
    rects = np.stack([x0, x1, y0, y1], axis=1)
    rects = np.where(np.isfinite(rects), rects, -1).astype(np.int64)
    return rects, live


def _prepare(camera: Camera, cloud: GaussianCloud, appearance) -> _Frame:
    W = camera.rotation
    t_all = cloud.positions @ W.T + camera.translation
    front = np.flatnonzero(t_all[:, 2] > NEAR_PLANE)
    t = t_all[front]
    J = _jacobian(camera, t)
    M = J @ W
    R = quat_to_rotmat(cloud.rotations[front])
    scales = np.exp(cloud.log_scales[front])
    L = R * scales[:, None, :]
    cov3 = L @ np.swapaxes(L, 1, 2)
    cov2 = M @ cov3 @ np.swapaxes(M, 1, 2)
    a = cov2[:, 0, 0] + LOW_PASS
    b = 0.5 * (cov2[:, 0, 1] + cov2[:, 1, 0])
    c = cov2[:, 1, 1] + LOW_PASS
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    means = np.stack([camera.fx * t[:, 0] / t[:, 2] + camera.cx,
                      camera.fy * t[:, 1] / t[:, 2] + camera.cy], axis=1)
    opac = sigmoid(cloud.opacity_logits[front])

    rects, live = _screen_rects(means, (a, b, c), opac, camera.width, camera.height)
    keep = np.flatnonzero(live)
    order = keep[np.argsort(t[keep, 2], kind="stable")]

    idx = front[order]
    # appearance offsets are only needed for the Gaussians that are rasterised
    app_in = _as_appearance(appearance)
    sh_hat = cloud.sh[idx]
    app_fwd = None
    if app_in is not None:
        bounds = cloud.bounds if app_in.bounds is None else app_in.bounds
        offsets, app_fwd = app_in.model.forward(cloud.positions, bounds, app_in.ell, rows=idx)
        sh_hat = sh_hat + offsets
    dirs_raw = cloud.positions[idx] - camera.center
    dir_norm = np.linalg.norm(dirs_raw, axis=1)
    dirs = dirs_raw / dir_norm[:, None]
    basis = sh_basis(dirs)
    raw_color = np.einsum("nk,nkc->nc", basis, sh_hat) + SH_COLOR_OFFSET
    colors = np.maximum(raw_color, 0.0)

    frame = _Frame(
        camera=camera, n=len(cloud), idx=idx, t=t[order], J=J[order], M=M[order], R=R[order],
        scales=scales[order], cov3=cov3[order], conic=np.ascontiguousarray(conic[order]),
        means=np.ascontiguousarray(means[order]), opac=np.ascontiguousarray(opac[order]),
        colors=np.ascontiguousarray(colors), color_live=raw_color > 0, basis=basis, dirs=dirs,
        dir_norm=dir_norm, sh_hat=sh_hat, offsets=None, lists=None, trans=None, last=None,
        app=app_fwd, app_model=None if app_in is None else app_in.model,
    )
    frame.offsets, frame.lists = _raster.build_tiles(
        np.ascontiguousarray(rects[order]), camera.width, camera.height, _raster.TILE)
    return frame


def render(camera: Camera, cloud: GaussianCloud, appearance=None, keep_state: bool = True) -> RenderOutput:
    """Render `cloud` from `camera` over a black background.

    `appearance` is an optional (model, ell[, bounds]) tuple; when given,
    every Gaussian is coloured from k + model(ell, x).
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot render an empty cloud")
    f = _prepare(camera, cloud, appearance)
    image, trans, last, contributed = _raster.forward(
        camera.width, camera.height, _raster.TILE, f.means, f.conic, f.opac, f.colors,
        f.offsets, f.lists)
    f.trans, f.last = trans, last
    visibility = np.zeros(len(cloud), dtype=bool)
    visibility[f.idx[contributed]] = True
    return RenderOutput(image, trans, visibility, f if keep_state else None)


# ---------------------------------------------------------------------------
# backward


def render_backward(camera: Camera, cloud: GaussianCloud, loss_grad, appearance=None,
                    state: _Frame | None = None) -> GradientBuffer:
    """Reverse pass: dL/d(parameters) given dL/d(image).

    Pass the `state` of a previous `render` call to skip the forward replay.
    """
    grad_image = np.ascontiguousarray(loss_grad, dtype=np.float64)
    if grad_image.shape != (camera.height, camera.width, 3):
        raise ValueError(f"loss gradient has shape {grad_image.shape}, "
                         f"expected {(camera.height, camera.width, 3)}")
    f = state
    if f is None:
        f = render(camera, cloud, appearance).state
    if f.n != len(cloud):
        raise ValueError("forward state does not match the cloud")

    d_means, d_conics, d_opac, d_colors = _raster.backward(
        camera.width, camera.height, _raster.TILE, f.means, f.conic, f.opac, f.colors,
        f.offsets, f.lists, f.trans, f.last, grad_image)

    n = f.n
    idx = f.idx
    g_pos = np.zeros((n, 3))
    g_logscale = np.zeros((n, 3))
    g_rot = np.zeros((n, 4))
    g_sh = np.zeros((n, SH_COEFFS, 3))
    g_logit = np.zeros(n)
    g_means2d = np.zeros((n, 2))

    # colour: clamp at zero, SH basis, view direction
    d_raw = d_colors * f.color_live
    g_sh[idx] = f.basis[:, :, None] * d_raw[:, None, :]
    d_basis = np.einsum("nc,nkc->nk", d_raw, f.sh_hat)
    d_dir = np.einsum("nk,nkd->nd", d_basis, sh_basis_jacobian(f.dirs))
    d_pos = (d_dir - f.dirs * np.sum(f.dirs * d_dir, axis=1, keepdims=True)) / f.dir_norm[:, None]

    # opacity
    g_logit[idx] = d_opac * f.opac * (1.0 - f.opac)

    # conic -> 2D covariance (inverse), symmetric off-diagonal split
    qa, qb, qc = f.conic[:, 0], f.conic[:, 1], f.conic[:, 2]
    Q = np.stack([np.stack([qa, qb], -1), np.stack([qb, qc], -1)], -2)
    GQ = np.stack([np.stack([d_conics[:, 0], 0.5 * d_conics[:, 1]], -1),
                   np.stack([0.5 * d_conics[:, 1], d_conics[:, 2]], -1)], -2)
    d_cov2 = -Q @ GQ @ Q

    # cov2 = M cov3 M^T + 0.3 I with M = J W
    M = f.M
    d_cov3 = np.swapaxes(M, 1, 2) @ d_cov2 @ M
    d_M = 2.0 * d_cov2 @ M @ f.cov3
    d_J = d_M @ camera.rotation.T

    t = f.t
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = camera.fx, camera.fy
    d_t = np.zeros_like(t)
    d_t[:, 0] = fx / tz * d_means[:, 0] - fx / tz ** 2 * d_J[:, 0, 2]
    d_t[:, 1] = fy / tz * d_means[:, 1] - fy / tz ** 2 * d_J[:, 1, 2]
    d_t[:, 2] = (-(fx * tx * d_means[:, 0] + fy * ty * d_means[:, 1]) / tz ** 2
                 - fx / tz ** 2 * d_J[:, 0, 0] + 2 * fx * tx / tz ** 3 * d_J[:, 0, 2]
                 - fy / tz ** 2 * d_J[:, 1, 1] + 2 * fy * ty / tz ** 3 * d_J[:, 1, 2])
    d_pos += d_t @ camera.rotation
    g_pos[idx] = d_pos
    g_means2d[idx] = d_means

    # cov3 = L L^T with L = R diag(s)
    d_cov3 = 0.5 * (d_cov3 + np.swapaxes(d_cov3, 1, 2))
    L = f.R * f.scales[:, None, :]
    d_L = 2.0 * d_cov3 @ L
    d_s = np.sum(d_L * f.R, axis=1)
    g_logscale[idx] = d_s * f.scales
    d_R = d_L * f.scales[:, None, :]
    g_rot[idx] = rotmat_grad_to_quat(cloud.rotations[idx], d_R)

    app_grads = None
    if f.app is not None:
        app_grads = f.app_model.backward(f.app, g_sh[idx])
        g_pos[idx] += app_grads.positions
        full = np.zeros((n, 3))
        full[idx] = app_grads.positions
        app_grads.positions = full
    return GradientBuffer(g_pos, g_logscale, g_rot, g_sh, g_logit, g_means2d, app_grads)


def project_cloud(camera: Camera, cloud: GaussianCloud) -> list[ProjectedGaussian]:
    """Projected footprint of every in-front Gaussian, front to back."""
    out = []
    for i in range(len(cloud)):
        g = cloud[i]
        p = project_position(camera, g.position)
        if not p.in_front:
            continue
        out.append(ProjectedGaussian(p.pixel, project_covariance(camera, g), p.depth, i))
    out.sort(key=lambda pg: (pg.view_depth, pg.source_index))
    return out
