"""Photometric and opacity objectives with analytic gradients.

Every loss returns its value; the `*_grad` variants also return the
gradient w.r.t. the second (rendered) argument. Images are (H, W, 3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import check_image, sigmoid

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
ENTROPY_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_dssim: float = 0.2
    eta: float = 0.01
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ValueError("lambda_dssim must lie in [0, 1]")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def _pair(a, b):
    a = check_image(a)
    b = check_image(b, a.shape[:2])
    return a, b


def l1_loss(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_grad(a, b):
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b))), np.sign(b - a) / a.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-x ** 2 / (2 * sigma ** 2))
    return w / w.sum()


def _filter(x, w):
    """'valid' separable correlation over the two image axes of (H, W, C)."""
    k = len(w)
    y = sliding_window_view(x, k, axis=0) @ w  # (H-k+1, W, C)
    return sliding_window_view(y, k, axis=1) @ w  # (H-k+1, W-k+1, C)


def _filter_adjoint(g, w, shape):
    k = len(w)
    pad = np.pad(g, ((k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    wf = w[::-1]
    y = sliding_window_view(pad, k, axis=0) @ wf
    out = sliding_window_view(y, k, axis=1) @ wf
    assert out.shape == shape
    return out


def _ssim_terms(a, b, window, sigma):
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} SSIM window")
    w = gaussian_window(window, sigma)
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    s_aa = _filter(a * a, w) - mu_a ** 2
    s_bb = _filter(b * b, w) - mu_b ** 2
    s_ab = _filter(a * b, w) - mu_a * mu_b
    num_l = 2 * mu_a * mu_b + SSIM_C1
    num_c = 2 * s_ab + SSIM_C2
    den_l = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    den_c = s_aa + s_bb + SSIM_C2
    return w, mu_a, mu_b, num_l, num_c, den_l, den_c


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-inside windows and the three channels."""
    a, b = _pair(a, b)
    _, _, _, num_l, num_c, den_l, den_c = _ssim_terms(a, b, window, sigma)
    return float(np.mean(num_l * num_c / (den_l * den_c)))


def ssim_grad(a, b, window: int = 11, sigma: float = 1.5):
    a, b = _pair(a, b)
    w, mu_a, mu_b, num_l, num_c, den_l, den_c = _ssim_terms(a, b, window, sigma)
    smap = num_l * num_c / (den_l * den_c)
    g = np.full(smap.shape, 1.0 / smap.size)
    # partials of the map w.r.t. mu_b, sigma_bb and sigma_ab
    d_mu_b = g * (2 * mu_a * num_c / (den_l * den_c) - smap * 2 * mu_b / den_l)
    d_s_bb = g * (-smap / den_c)
    d_s_ab = g * (2 * num_l / (den_l * den_c))
    # sigma_bb = F(b^2) - mu_b^2 and sigma_ab = F(ab) - mu_a mu_b
    d_mu_b = d_mu_b - 2 * mu_b * d_s_bb - mu_a * d_s_ab
    grad = (_filter_adjoint(d_mu_b, w, b.shape)
            + 2 * b * _filter_adjoint(d_s_bb, w, b.shape)
            + a * _filter_adjoint(d_s_ab, w, b.shape))
    return float(np.mean(smap)), grad


def loss_3dgs(a, b, config: LossConfig = LossConfig()) -> float:
    """(1 - lambda) L1 + lambda (1 - SSIM) / 2."""
    lam = config.lambda_dssim
    value = (1 - lam) * l1_loss(a, b)
    if lam > 0:
        value += lam * (1 - ssim(a, b, config.ssim_window, config.ssim_sigma)) / 2
    return value


def loss_3dgs_grad(a, b, config: LossConfig = LossConfig()):
    lam = config.lambda_dssim
    l1, g1 = l1_loss_grad(a, b)
    value = (1 - lam) * l1
    grad = (1 - lam) * g1
    if lam > 0:
        s, gs = ssim_grad(a, b, config.ssim_window, config.ssim_sigma)
        value += lam * (1 - s) / 2
        grad = grad - (lam / 2) * gs
    return value, grad


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -p * np.log(np.maximum(p, ENTROPY_EPS)) - (1 - p) * np.log(np.maximum(1 - p, ENTROPY_EPS))


def entropy_loss(opacity_logits, visibility) -> float:
    """Sum of visible Gaussians' opacity entropy, divided by the total count."""
    logits = np.asarray(opacity_logits, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != logits.shape:
        raise ValueError("visibility must have one flag per Gaussian")
    if logits.size == 0:
        return 0.0
    return float(np.sum(binary_entropy(sigmoid(logits))[vis]) / logits.size)


def entropy_loss_grad(opacity_logits, visibility):
    logits = np.asarray(opacity_logits, dtype=np.float64)
    vis = np.asarray(visibility, dtype=bool)
    value = entropy_loss(logits, vis)
    if logits.size == 0:
        return value, np.zeros(0)
    p = sigmoid(logits)
    # dH/dp = log((1-p)/p), dp/do = p(1-p)
    dh = np.log(np.maximum(1 - p, ENTROPY_EPS)) - np.log(np.maximum(p, ENTROPY_EPS))
    grad = np.where(vis, dh * p * (1 - p), 0.0) / logits.size
    return value, grad


def cloud_entropy_loss(cloud, visibility) -> float:
    return entropy_loss(cloud.opacity_logits, visibility)
