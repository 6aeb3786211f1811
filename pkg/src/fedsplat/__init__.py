"""Federated 3D Gaussian splatting at desk scale.

Submodules:
    core         splats, clouds, cameras
    spatial      nearest-neighbour and range queries
    render       differentiable rasteriser
    losses       L1 / SSIM / entropy objectives
    appearance   hash-encoded appearance network
    client       local data sampling and training
    merge        distillation merge and baselines
    federation   the federated protocol
    metrics      PSNR and the evaluation protocol
    scene, plyio, config, cli   synthetic data, I/O and the command line
"""

from .core import Camera, Gaussian, GaussianCloud, covariance_from_factors, prune_by_opacity, sh_to_color
from .render import render, render_backward

__version__ = "0.1.0"

__all__ = [
    "Camera",
    "Gaussian",
    "GaussianCloud",
    "covariance_from_factors",
    "prune_by_opacity",
    "render",
    "render_backward",
    "sh_to_color",
    "__version__",
]
