"""Hash-encoded MLP that offsets per-Gaussian SH coefficients given an appearance vector.

The network maps concat(hash_encoding(x), ell) -> 27 SH offsets through
two ReLU hidden layers of width 64 and a linear output layer whose weights
and bias start at exactly zero, so a fresh model leaves colours untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
from numba import njit

from .core import SH_COEFFS, SH_DIM

APPEARANCE_DIM = 32
HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

# corner offsets of a unit cell, (8, 3)
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


@dataclass
class HashLookup:
    """Per-point corner indices and trilinear weights, reusable while positions are fixed."""

    indices: np.ndarray  # (N, L, 8) flat rows into the (L*T, F) table
    weights: np.ndarray  # (N, L, 8)
    dweights: np.ndarray  # (N, L, 8, 3) d weight / d world position
    n_points: int


class HashEncoding:
    """Multiresolution hash grid: 16 levels x 2 features, resolutions 32 -> 2048."""

    def __init__(self, levels: int = 16, features_per_level: int = 2,
                 coarsest: int = 32, finest: int = 2048, table_size_log2: int = 15,
                 seed: int = 0, init_range: float = 1e-4):
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = 1 << table_size_log2
        growth = np.exp(np.log(finest / coarsest) / (levels - 1)) if levels > 1 else 1.0
        self.growth = float(growth)
        # tiny epsilon keeps 32*b^15 from flooring to 2047
        self.resolutions = np.floor(coarsest * growth ** np.arange(levels) + 1e-6).astype(np.int64)
        if np.any(np.diff(self.resolutions) <= 0):
            raise ValueError("level resolutions must be strictly increasing")
        rng = np.random.default_rng(seed)
        self.tables = rng.uniform(-init_range, init_range,
                                  size=(levels, self.table_size, features_per_level))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def hash_corners(self, coords: np.ndarray) -> np.ndarray:
        """Spatial hash of integer grid coordinates (..., 3) into [0, T)."""
        c = coords.astype(np.uint64) * HASH_PRIMES
        h = c[..., 0] ^ c[..., 1] ^ c[..., 2]
        return (h & np.uint64(self.table_size - 1)).astype(np.int64)

    def lookup(self, positions: np.ndarray, bounds: np.ndarray) -> HashLookup:
        pos = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        lo, hi = np.asarray(bounds, dtype=np.float64)
        extent = np.maximum(hi - lo, 1e-12)
        idx, w, dw = _lookup_kernel(pos, lo, extent, self.resolutions, self.table_size)
        return HashLookup(idx, w, dw, len(pos))

    def encode(self, lookup: HashLookup) -> np.ndarray:
        flat = self.tables.reshape(-1, self.features_per_level)
        return _encode_kernel(flat, lookup.indices, lookup.weights)

    def backward(self, lookup: HashLookup, grad_out: np.ndarray):
        """Returns (table gradient (L, T, F), world-position gradient (N, 3))."""
        F = self.features_per_level
        g = np.ascontiguousarray(grad_out, dtype=np.float64).reshape(lookup.n_points, self.levels, F)
        flat = self.tables.reshape(-1, F)
        table_grad, pos_grad = _backward_kernel(flat, lookup.indices, lookup.weights,
                                                lookup.dweights, g)
        return table_grad.reshape(self.tables.shape), pos_grad


@njit(cache=True)
def _lookup_kernel(pos, lo, extent, resolutions, table_size):
    n = pos.shape[0]
    levels = resolutions.shape[0]
    idx = np.empty((n, levels, 8), np.int64)
    w = np.empty((n, levels, 8))
    dw = np.empty((n, levels, 8, 3))
    mask = np.uint64(table_size - 1)
    p1 = np.uint64(2654435761)
    p2 = np.uint64(805459861)
    unit = np.empty(3)
    inside = np.empty(3)
    frac = np.empty(3)
    base = np.empty(3, np.int64)
    for i in range(n):
        for d in range(3):
            raw = (pos[i, d] - lo[d]) / extent[d]
            # clamped coordinates carry no positional gradient
            if raw < 0.0:
                unit[d] = 0.0
                inside[d] = 0.0
            elif raw > 1.0:
                unit[d] = 1.0
                inside[d] = 0.0
            else:
                unit[d] = raw
                inside[d] = 1.0 / extent[d]
        for l in range(levels):
            res = float(resolutions[l])
            for d in range(3):
                s = unit[d] * res
                b = math.floor(s)
                base[d] = np.int64(b)
                frac[d] = s - b
            for c in range(8):
                wx = frac[0] if c & 1 else 1.0 - frac[0]
                wy = frac[1] if c & 2 else 1.0 - frac[1]
                wz = frac[2] if c & 4 else 1.0 - frac[2]
                sx = 1.0 if c & 1 else -1.0
                sy = 1.0 if c & 2 else -1.0
                sz = 1.0 if c & 4 else -1.0
                hx = np.uint64(base[0] + (c & 1))
                hy = np.uint64(base[1] + ((c >> 1) & 1))
                hz = np.uint64(base[2] + ((c >> 2) & 1))
                h = hx ^ (hy * p1) ^ (hz * p2)
                idx[i, l, c] = np.int64(h & mask) + l * table_size
                w[i, l, c] = wx * wy * wz
                dw[i, l, c, 0] = sx * wy * wz * res * inside[0]
                dw[i, l, c, 1] = wx * sy * wz * res * inside[1]
                dw[i, l, c, 2] = wx * wy * sz * res * inside[2]
    return idx, w, dw


@njit(cache=True)
def _encode_kernel(flat, idx, w):
    n, levels, _ = idx.shape
    F = flat.shape[1]
    out = np.zeros((n, levels * F))
    for i in range(n):
        for l in range(levels):
            for c in range(8):
                r = idx[i, l, c]
                for f in range(F):
                    out[i, l * F + f] += w[i, l, c] * flat[r, f]
    return out


@njit(cache=True)
def _backward_kernel(flat, idx, w, dw, g):
    n, levels, _ = idx.shape
    F = flat.shape[1]
    table_grad = np.zeros(flat.shape)
    pos_grad = np.zeros((n, 3))
    for i in range(n):
        for l in range(levels):
            for c in range(8):
                r = idx[i, l, c]
                dfeat = 0.0
                for f in range(F):
                    table_grad[r, f] += w[i, l, c] * g[i, l, f]
                    dfeat += flat[r, f] * g[i, l, f]
                for d in range(3):
                    pos_grad[i, d] += dfeat * dw[i, l, c, d]
    return table_grad, pos_grad


class AppearanceMLP:
    """Three affine layers 64 -> 64 -> 64 -> 27 with ReLU after the hidden ones."""

    def __init__(self, in_dim: int = 64, hidden: int = 64, out_dim: int = SH_DIM, seed: int = 0):
        rng = np.random.default_rng(seed)
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for hidden layers
        b0 = 1.0 / np.sqrt(in_dim)
        b1 = 1.0 / np.sqrt(hidden)
        self.weights = [
            rng.uniform(-b0, b0, (in_dim, hidden)),
            rng.uniform(-b1, b1, (hidden, hidden)),
            np.zeros((hidden, out_dim)),
        ]
        self.biases = [
            rng.uniform(-b0, b0, hidden),
            rng.uniform(-b1, b1, hidden),
            np.zeros(out_dim),
        ]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if layer < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray):
        """Returns (weight grads, bias grads, input grad)."""
        dW = [None] * len(self.weights)
        db = [None] * len(self.weights)
        g = grad_out
        for layer in reversed(range(len(self.weights))):
            if layer < len(self.weights) - 1:
                g = g * (acts[layer + 1] > 0)
            dW[layer] = acts[layer].T @ g
            db[layer] = g.sum(axis=0)
            g = g @ self.weights[layer].T
        return dW, db, g


@dataclass
class AppearanceGrads:
    tables: np.ndarray
    weights: list
    biases: list
    ell: np.ndarray
    positions: np.ndarray

    def as_dict(self) -> dict:
        d = {"tables": self.tables, "ell": self.ell}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"w{i}"] = w
            d[f"b{i}"] = b
        return d


@dataclass
class AppearanceForward:
    lookup: HashLookup
    acts: list
    ell: np.ndarray


class AppearanceModel:
    """The pair (hash encoding, MLP) plus a cached lookup for fixed positions."""

    def __init__(self, seed: int = 0, appearance_dim: int = APPEARANCE_DIM, **encoding_kw):
        self.encoding = HashEncoding(seed=seed, **encoding_kw)
        self.appearance_dim = appearance_dim
        self.mlp = AppearanceMLP(self.encoding.output_dim + appearance_dim, seed=seed + 1)
        self._cache = None

    def params(self) -> dict:
        """Mutable views of every trainable array, keyed for the optimizer."""
        d = {"tables": self.encoding.tables}
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            d[f"w{i}"] = w
            d[f"b{i}"] = b
        return d

    def copy(self) -> "AppearanceModel":
        new = object.__new__(AppearanceModel)
        new.appearance_dim = self.appearance_dim
        enc = object.__new__(HashEncoding)
        enc.__dict__.update(self.encoding.__dict__)
        enc.tables = self.encoding.tables.copy()
        mlp = object.__new__(AppearanceMLP)
        mlp.weights = [w.copy() for w in self.mlp.weights]
        mlp.biases = [b.copy() for b in self.mlp.biases]
        new.encoding, new.mlp, new._cache = enc, mlp, None
        return new

    def zero_ell(self) -> np.ndarray:
        return np.zeros(self.appearance_dim)

    def lookup(self, positions: np.ndarray, bounds: np.ndarray, rows=None) -> HashLookup:
        """Hash lookup of `positions[rows]` (all rows when `rows` is None)."""
        bounds = np.asarray(bounds, dtype=np.float64)
        c = self._cache
        # cloud arrays are read-only, so identity implies identical contents
        if c is not None and c[0] is positions and np.array_equal(c[1], bounds):
            lk = c[2]
        elif not positions.flags.writeable:
            lk = self.encoding.lookup(positions, bounds)
            self._cache = (positions, bounds.copy(), lk)
        else:
            pos = positions if rows is None else positions[rows]
            return self.encoding.lookup(pos, bounds)
        if rows is None:
            return lk
        return HashLookup(lk.indices[rows], lk.weights[rows], lk.dweights[rows], len(rows))

    def forward(self, positions, bounds, ell, rows=None):
        """SH offsets (N, 9, 3) and the state needed by `backward`.

        With `rows`, only the offsets of `positions[rows]` are computed.
        """
        ell = np.asarray(ell, dtype=np.float64).reshape(self.appearance_dim)
        lk = self.lookup(positions, bounds, rows)
        enc = self.encoding.encode(lk)
        x = np.concatenate([enc, np.broadcast_to(ell, (lk.n_points, self.appearance_dim))], axis=1)
        out, acts = self.mlp.forward(x)
        return out.reshape(-1, SH_COEFFS, 3), AppearanceForward(lk, acts, ell)

    def backward(self, fwd: AppearanceForward, grad_offsets: np.ndarray) -> AppearanceGrads:
        g = np.asarray(grad_offsets, dtype=np.float64).reshape(fwd.lookup.n_points, SH_DIM)
        dW, db, dx = self.mlp.backward(fwd.acts, g)
        enc_dim = self.encoding.output_dim
        tables, pos = self.encoding.backward(fwd.lookup, dx[:, :enc_dim])
        return AppearanceGrads(tables, dW, db, dx[:, enc_dim:].sum(axis=0), pos)


def encode_position(encoding: HashEncoding, position, bounds) -> np.ndarray:
    """32-dim hash feature of one position (or (N, 32) for a batch)."""
    pos = np.asarray(position, dtype=np.float64)
    out = encoding.encode(encoding.lookup(pos.reshape(-1, 3), bounds))
    return out[0] if pos.ndim == 1 else out


def apply_appearance(model: AppearanceModel, ell, gaussian_or_cloud, bounds) -> np.ndarray:
    """k + phi(ell, x): modified SH coefficients; the stored ones are not touched."""
    if hasattr(gaussian_or_cloud, "positions"):
        offsets, _ = model.forward(gaussian_or_cloud.positions, bounds, ell)
        return gaussian_or_cloud.sh + offsets
    offsets, _ = model.forward(gaussian_or_cloud.position[None], bounds, ell)
    return gaussian_or_cloud.sh_coeffs + offsets[0]


def appearance_backward(model: AppearanceModel, fwd: AppearanceForward, grad_sh) -> AppearanceGrads:
    return model.backward(fwd, grad_sh)
