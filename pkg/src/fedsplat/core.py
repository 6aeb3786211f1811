"""Splat, camera and cloud containers plus the small math every stage shares.

Arrays are float64 throughout. A cloud stores its parameters as
struct-of-arrays; all arrays are copied on construction and marked
read-only, so clouds can be shared freely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SH_DEGREE = 2
SH_COEFFS = (SH_DEGREE + 1) ** 2  # 9 per channel
SH_DIM = 3 * SH_COEFFS  # 27

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_COLOR_OFFSET = 0.5

NEAR_PLANE = 0.01


class InvalidModelError(ValueError):
    """A Gaussian, camera or cloud violates its invariants."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p / (1.0 - p))
    return out if out.ndim else float(out)


def _frozen(a, dtype=np.float64) -> np.ndarray:
    # an owning read-only array can never change, so it is shared, not copied
    if isinstance(a, np.ndarray) and a.dtype == dtype and a.flags.owndata and not a.flags.writeable:
        return a
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# rotations and covariance


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions stored as (w, x, y, z).

    Accepts shape (4,) or (N, 4); the input is normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_grad_to_quat(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull dL/dR (N,3,3) back to the raw (possibly unnormalized) quaternion."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    # through q / |q|
    return (dqn - qn * np.sum(qn * dqn, axis=1, keepdims=True)) / norm


def covariance_from_factors(scale, rotation) -> np.ndarray:
    """R diag(scale^2) R^T for one Gaussian (scale (3,), quaternion (4,)) or a batch."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidModelError("covariance factors must be finite")
    if np.any(scale <= 0):
        raise InvalidModelError("scale components must be positive")
    R = quat_to_rotmat(rotation)
    L = R * scale[..., None, :]
    cov = L @ np.swapaxes(L, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# ---------------------------------------------------------------------------
# spherical harmonics (degree 2, coefficient-major layout (9, 3))


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values (N, 9) for unit directions (N, 3)."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    return np.stack([
        np.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
    ], axis=1)


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """d basis / d direction, shape (N, 9, 3)."""
    dirs = np.atleast_2d(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    J = np.zeros((len(dirs), SH_COEFFS, 3))
    J[:, 1, 1] = -SH_C1
    J[:, 2, 2] = SH_C1
    J[:, 3, 0] = -SH_C1
    J[:, 4, 0] = SH_C2[0] * y
    J[:, 4, 1] = SH_C2[0] * x
    J[:, 5, 1] = SH_C2[1] * z
    J[:, 5, 2] = SH_C2[1] * y
    J[:, 6, 0] = -2 * SH_C2[2] * x
    J[:, 6, 1] = -2 * SH_C2[2] * y
    J[:, 6, 2] = 4 * SH_C2[2] * z
    J[:, 7, 0] = SH_C2[3] * z
    J[:, 7, 2] = SH_C2[3] * x
    J[:, 8, 0] = 2 * SH_C2[4] * x
    J[:, 8, 1] = -2 * SH_C2[4] * y
    return J


def sh_to_color(sh_coeffs, view_dir) -> np.ndarray:
    """RGB from degree-2 SH coefficients (9, 3) seen along a unit direction.

    Batched inputs (N, 9, 3) / (N, 3) give (N, 3). The result is the SH
    value plus 0.5, clamped below at zero.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    if not (np.all(np.isfinite(sh)) and np.all(np.isfinite(d))):
        raise InvalidModelError("SH coefficients and direction must be finite")
    single = sh.ndim == 2
    sh = sh.reshape(-1, SH_COEFFS, 3)
    basis = sh_basis(d.reshape(-1, 3))
    rgb = np.einsum("nk,nkc->nc", basis, sh) + SH_COLOR_OFFSET
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def rgb_to_sh_dc(rgb) -> np.ndarray:
    """Degree-0 coefficient that reproduces `rgb` when all others are zero."""
    return (np.asarray(rgb, dtype=np.float64) - SH_COLOR_OFFSET) / SH_C0


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True, eq=False)
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logit: float

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position))
        object.__setattr__(self, "log_scale", _frozen(self.log_scale))
        object.__setattr__(self, "rotation", _frozen(self.rotation))
        object.__setattr__(self, "sh_coeffs", _frozen(np.reshape(self.sh_coeffs, (SH_COEFFS, 3))))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        _check_params(self.position[None], self.log_scale[None], self.rotation[None],
                      self.sh_coeffs[None], np.array([self.opacity_logit]))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return sigmoid(self.opacity_logit)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_factors(self.scale, self.rotation)

    @classmethod
    def create(cls, position, scale, rotation=(1.0, 0.0, 0.0, 0.0), sh_coeffs=None,
               opacity_logit=0.0) -> "Gaussian":
        if sh_coeffs is None:
            sh_coeffs = np.zeros((SH_COEFFS, 3))
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise InvalidModelError("scale components must be positive")
        return cls(position, np.log(scale), rotation, sh_coeffs, opacity_logit)


def _check_params(positions, log_scales, rotations, sh, opacity_logits, quat_tol=1e-6):
    n = len(positions)
    shapes = {
        "positions": (positions.shape, (n, 3)),
        "log_scales": (log_scales.shape, (n, 3)),
        "rotations": (rotations.shape, (n, 4)),
        "sh": (sh.shape, (n, SH_COEFFS, 3)),
        "opacity_logits": (opacity_logits.shape, (n,)),
    }
    for name, (got, want) in shapes.items():
        if got != want:
            raise InvalidModelError(f"{name} has shape {got}, expected {want}")
    for name, arr in (("positions", positions), ("log_scales", log_scales),
                      ("rotations", rotations), ("sh", sh), ("opacity_logits", opacity_logits)):
        if not np.all(np.isfinite(arr)):
            raise InvalidModelError(f"{name} contains non-finite values")
    if n and np.max(np.abs(np.linalg.norm(rotations, axis=1) - 1.0)) > quat_tol:
        raise InvalidModelError("rotation quaternions must be unit length")


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Ordered set of Gaussians with an axis-aligned bounding box (2, 3)."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    sh: np.ndarray
    opacity_logits: np.ndarray
    bounds: np.ndarray | None = None

    def __post_init__(self):
        for name in ("positions", "log_scales", "rotations", "sh", "opacity_logits"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.sh.ndim == 2:
            object.__setattr__(self, "sh", _frozen(self.sh.reshape(-1, SH_COEFFS, 3)))
        _check_params(self.positions, self.log_scales, self.rotations, self.sh,
                      self.opacity_logits)
        if self.bounds is None:
            bounds = _bounds_of(self.positions)
        else:
            bounds = np.asarray(self.bounds, dtype=np.float64)
            if bounds.shape != (2, 3) or np.any(bounds[0] > bounds[1]):
                raise InvalidModelError("bounds must be a (2, 3) [min, max] box")
            if len(self.positions):
                bounds = np.stack([np.minimum(bounds[0], self.positions.min(0)),
                                   np.maximum(bounds[1], self.positions.max(0))])
        object.__setattr__(self, "bounds", _frozen(bounds))

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i], self.log_scales[i], self.rotations[i],
                        self.sh[i], self.opacity_logits[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls, bounds=None) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros((0, SH_COEFFS, 3)), np.zeros(0), bounds)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian], bounds=None) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            return cls.empty(bounds)
        return cls(np.stack([g.position for g in gs]), np.stack([g.log_scale for g in gs]),
                   np.stack([g.rotation for g in gs]), np.stack([g.sh_coeffs for g in gs]),
                   np.array([g.opacity_logit for g in gs]), bounds)

    def replace(self, **changes) -> "GaussianCloud":
        fields = dict(positions=self.positions, log_scales=self.log_scales,
                      rotations=self.rotations, sh=self.sh,
                      opacity_logits=self.opacity_logits, bounds=self.bounds)
        fields.update(changes)
        return GaussianCloud(**fields)

    def subset(self, index) -> "GaussianCloud":
        index = np.asarray(index)
        return GaussianCloud(self.positions[index], self.log_scales[index],
                             self.rotations[index], self.sh[index],
                             self.opacity_logits[index], self.bounds)

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        bounds = np.stack([np.minimum(self.bounds[0], other.bounds[0]),
                           np.maximum(self.bounds[1], other.bounds[1])])
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.sh, other.sh]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            bounds,
        )

    def covariances(self) -> np.ndarray:
        return covariance_from_factors(self.scales, self.rotations)

    def equals(self, other: "GaussianCloud") -> bool:
        """Bitwise equality of all parameters (bounds excluded)."""
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in
                   ("positions", "log_scales", "rotations", "sh", "opacity_logits"))


def _bounds_of(positions: np.ndarray) -> np.ndarray:
    if len(positions) == 0:
        return np.zeros((2, 3))
    return np.stack([positions.min(0), positions.max(0)])


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera: intrinsic K (3x3) and world-to-camera extrinsic [R | t] (3x4).

    Camera space follows the usual vision convention: +z forward, +x right,
    +y down. Pixel (u, v) is sampled at coordinate (u, v).
    """

    intrinsic: np.ndarray
    extrinsic: np.ndarray
    width: int
    height: int
    image_id: str = ""

    def __post_init__(self):
        K = _frozen(self.intrinsic)
        E = _frozen(self.extrinsic)
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "extrinsic", E)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "image_id", str(self.image_id))
        if K.shape != (3, 3) or E.shape != (3, 4):
            raise InvalidModelError("intrinsic must be 3x3 and extrinsic 3x4")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(E))):
            raise InvalidModelError("camera matrices must be finite")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[0, 1] != 0 or np.any(K[2] != (0, 0, 1)) or K[1, 0] != 0:
            raise InvalidModelError("intrinsic needs positive focal lengths and zero skew")
        R = E[:, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise InvalidModelError("extrinsic rotation block must be orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise InvalidModelError("image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def fx(self) -> float:
        return float(self.intrinsic[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsic[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsic[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsic[1, 2])

    def with_image_id(self, image_id: str) -> "Camera":
        return Camera(self.intrinsic, self.extrinsic, self.width, self.height, image_id)

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, focal: float,
                up=(0.0, 0.0, 1.0), image_id: str = "") -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight along `up`; any perpendicular will do
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        t = -R @ eye
        K = np.array([[focal, 0.0, (width - 1) / 2.0],
                      [0.0, focal, (height - 1) / 2.0],
                      [0.0, 0.0, 1.0]])
        return cls(K, np.concatenate([R, t[:, None]], axis=1), width, height, image_id)


def check_image(img, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Validate an image buffer: float array (H, W, 3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H, W, 3), got {img.shape}")
    if shape is not None and img.shape[:2] != tuple(shape):
        raise ValueError(f"image is {img.shape[:2]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def prune_by_opacity(cloud: GaussianCloud, threshold: float) -> GaussianCloud:
    """Keep Gaussians with sigmoid(opacity_logit) >= threshold, order preserved."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    # compare in logit space so that logits set to logit(threshold) survive exactly
    keep = cloud.opacity_logits >= logit(threshold)
    return cloud.subset(np.flatnonzero(keep))


def stack_cameras(cameras: Sequence[Camera]) -> np.ndarray:
    """Camera centers as an (M, 3) array."""
    return np.array([c.center for c in cameras]).reshape(-1, 3)
