"""Adam / AdamW over named parameter groups, updating arrays in place."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    step = lr / bc1
    inv_bc2 = 1.0 / np.sqrt(bc2)
    decay = 1.0 - lr * wd
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] = p[i] * decay - step * mi / (np.sqrt(vi) * inv_bc2 + eps)


@dataclass
class ParamGroup:
    param: np.ndarray
    lr: float
    weight_decay: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if not self.param.flags.c_contiguous or not self.param.flags.writeable:
            raise ValueError("optimised arrays must be writeable and C-contiguous")
        if self.m is None:
            self.m = np.zeros_like(self.param)
            self.v = np.zeros_like(self.param)


class Adam:
    """Adam with decoupled weight decay when a group's `weight_decay` > 0 (AdamW).

    Each group keeps its own step counter so groups can be added later
    (fresh appearance vectors) without disturbing the others.
    """

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.groups: dict[str, ParamGroup] = {}

    def add(self, name: str, param: np.ndarray, lr: float, weight_decay: float = 0.0):
        self.groups[name] = ParamGroup(param, float(lr), float(weight_decay))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.groups[name].param

    def set_lr(self, name: str, lr: float):
        self.groups[name].lr = float(lr)

    def step(self, grads: dict):
        """Apply one update to every group that has an entry in `grads`."""
        for name, g in grads.items():
            if g is None or name not in self.groups:
                continue
            grp = self.groups[name]
            g = np.ascontiguousarray(g, dtype=np.float64)
            if g.shape != grp.param.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"expected {grp.param.shape}")
            grp.step += 1
            bc1 = 1.0 - self.b1 ** grp.step
            bc2 = 1.0 - self.b2 ** grp.step
            _adam_kernel(grp.param.reshape(-1), g.reshape(-1), grp.m.reshape(-1),
                         grp.v.reshape(-1), grp.lr, self.b1, self.b2, self.eps,
                         grp.weight_decay, bc1, bc2)

    def remap_rows(self, names, new_params: dict, source: np.ndarray):
        """Replace row-indexed groups after densification or pruning.

        `source[i]` is the old row that new row i inherits its moments from,
        or -1 for a freshly created row (zero moments).
        """
        source = np.asarray(source, dtype=np.int64)
        fresh = source < 0
        for name in names:
            grp = self.groups[name]
            param = np.ascontiguousarray(new_params[name], dtype=np.float64)
            if len(param) != len(source):
                raise ValueError("source map length must match the new row count")
            m = grp.m[np.where(fresh, 0, source)]
            v = grp.v[np.where(fresh, 0, source)]
            m[fresh] = 0.0
            v[fresh] = 0.0
            grp.param, grp.m, grp.v = param, m, v

    def reset_moments(self, name: str):
        grp = self.groups[name]
        grp.m[...] = 0.0
        grp.v[...] = 0.0
