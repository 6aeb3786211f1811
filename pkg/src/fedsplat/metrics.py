"""Evaluation: PSNR/SSIM and the left-half appearance fitting protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import check_image
from .losses import ssim
from .optim import Adam
from .render import render, render_backward


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf for identical images."""
    a = check_image(a)
    b = check_image(b, a.shape[:2])
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def split_columns(width: int) -> int:
    """Number of columns in the left (fitting) half; the odd column goes left."""
    if width < 2:
        raise ValueError("need at least two columns to split an image")
    return (width + 1) // 2


@dataclass
class EvalReport:
    view_ids: list
    psnr: list
    ssim: list
    ells: list = field(default_factory=list, repr=False)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def rows(self):
        return [dict(view=v, psnr=p, ssim=s) for v, p, s in zip(self.view_ids, self.psnr, self.ssim)]


def fit_appearance_vector(state, camera, target_left, iterations: int = 100, lr: float = 0.05):
    """Optimise one appearance vector on the left half of a view (cloud and network frozen)."""
    model = state.appearance
    ell = np.zeros(model.appearance_dim)
    if iterations <= 0:
        return ell
    target_left = check_image(target_left)
    left = split_columns(camera.width)
    if target_left.shape[:2] != (camera.height, left):
        raise ValueError(f"left half must be {(camera.height, left)}, got {target_left.shape[:2]}")
    opt = Adam()
    opt.add("ell", ell, lr)
    n = target_left.size
    for _ in range(iterations):
        appearance = (model, ell, state.bounds)
        out = render(camera, state.cloud, appearance)
        diff = out.image[:, :left] - target_left
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite loss while fitting an appearance vector")
        grad = np.zeros_like(out.image)
        grad[:, :left] = 2.0 * diff / n
        g = render_backward(camera, state.cloud, grad, appearance, out.state)
        opt.step({"ell": g.appearance.ell})
    return ell.copy()


def evaluate_model(state, views, use_appearance: bool = True, iterations: int = 100,
                   lr: float = 0.05) -> EvalReport:
    """Fit ell on the left half of every held-out view, score the right half."""
    report = EvalReport([], [], [])
    for image, cam in views:
        image = check_image(image, (cam.height, cam.width))
        left = split_columns(cam.width)
        if use_appearance:
            ell = fit_appearance_vector(state, cam, image[:, :left], iterations, lr)
            pred = render(cam, state.cloud, (state.appearance, ell, state.bounds),
                          keep_state=False).image
        else:
            ell = None
            pred = render(cam, state.cloud, keep_state=False).image
        report.view_ids.append(cam.image_id)
        report.psnr.append(psnr(image[:, left:], pred[:, left:]))
        report.ssim.append(ssim(image[:, left:], pred[:, left:]))
        report.ells.append(ell)
    return report
