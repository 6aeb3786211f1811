"""Binary PLY for Gaussian clouds (3DGS property layout) and JSON for cameras.

Properties are written as little-endian doubles so that a round trip is
bit-exact; `float` properties are accepted on read, and the normal
channels (nx, ny, nz) that some 3DGS writers emit are ignored. Scene
bounds travel in a comment line as hex floats.
"""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager

import numpy as np

from .core import Camera, GaussianCloud, SH_COEFFS

REST = SH_COEFFS - 1
PROPERTIES = (["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)]
              + [f"f_rest_{i}" for i in range(3 * REST)] + ["opacity"]
              + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
IGNORED = ("nx", "ny", "nz")
_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


class PlyFormatError(ValueError):
    pass


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary sibling and rename on success; never leaves partial files."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cloud_to_table(cloud: GaussianCloud) -> np.ndarray:
    """(N, 38) matrix in PROPERTIES order; f_rest is channel-major as in 3DGS."""
    n = len(cloud)
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * REST)
    return np.concatenate([cloud.positions, cloud.sh[:, 0, :], rest, cloud.opacity_logits[:, None],
                           cloud.log_scales, cloud.rotations], axis=1)


def table_to_cloud(t: np.ndarray, bounds=None) -> GaussianCloud:
    n = len(t)
    sh = np.empty((n, SH_COEFFS, 3))
    sh[:, 0, :] = t[:, 3:6]
    sh[:, 1:, :] = np.transpose(t[:, 6:6 + 3 * REST].reshape(n, 3, REST), (0, 2, 1))
    o = 6 + 3 * REST
    return GaussianCloud(t[:, 0:3], t[:, o + 1:o + 4], t[:, o + 4:o + 8], sh, t[:, o], bounds)


def write_model(path, cloud: GaussianCloud):
    table = np.ascontiguousarray(cloud_to_table(cloud), dtype="<f8")
    header = ["ply", "format binary_little_endian 1.0",
              "comment bounds " + " ".join(float(v).hex() for v in cloud.bounds.ravel()),
              f"element vertex {len(cloud)}"]
    header += [f"property double {p}" for p in PROPERTIES]
    header.append("end_header")
    with atomic_write(path) as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.tobytes())


def read_model(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_model(data)


def parse_model(data: bytes) -> GaussianCloud:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise PlyFormatError("missing PLY magic or end_header")
    lines = data[:end].decode("ascii", errors="replace").splitlines()[1:]
    payload = data[end + len(b"end_header\n"):]
    fmt, count, props, bounds = None, None, [], None
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1:]
        elif parts[0] == "comment":
            if len(parts) == 8 and parts[1] == "bounds":
                bounds = np.array([float.fromhex(v) for v in parts[2:]]).reshape(2, 3)
        elif parts[0] == "element":
            if parts[1] != "vertex" or count is not None:
                raise PlyFormatError(f"unexpected element {' '.join(parts[1:])!r}")
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise PlyFormatError("bad vertex count") from None
            if count < 0:
                raise PlyFormatError("negative vertex count")
        elif parts[0] == "property":
            if len(parts) != 3 or parts[1] not in _TYPES:
                raise PlyFormatError(f"unsupported property line {line!r}")
            props.append((parts[2], _TYPES[parts[1]]))
        else:
            raise PlyFormatError(f"unexpected header line {line!r}")
    if fmt != ["binary_little_endian", "1.0"]:
        raise PlyFormatError("only binary_little_endian 1.0 is supported")
    if count is None:
        raise PlyFormatError("no vertex element")
    names = [p for p, _ in props]
    unknown = [p for p in names if p not in PROPERTIES and p not in IGNORED]
    if unknown:
        raise PlyFormatError(f"unknown properties {unknown}")
    missing = [p for p in PROPERTIES if p not in names]
    if missing:
        raise PlyFormatError(f"missing properties {missing}")
    if len(set(names)) != len(names):
        raise PlyFormatError("duplicate properties")
    dtype = np.dtype(props)
    if len(payload) != count * dtype.itemsize:
        raise PlyFormatError(f"payload has {len(payload)} bytes, expected {count * dtype.itemsize}")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    table = np.stack([rec[p].astype(np.float64) for p in PROPERTIES], axis=1) if count else \
        np.zeros((0, len(PROPERTIES)))
    return table_to_cloud(table, bounds)


# ---------------------------------------------------------------------------
# cameras


def camera_to_dict(cam: Camera) -> dict:
    return dict(image_id=cam.image_id, width=cam.width, height=cam.height,
                intrinsic=cam.intrinsic.tolist(), extrinsic=cam.extrinsic.tolist())


def camera_from_dict(d: dict) -> Camera:
    return Camera(np.array(d["intrinsic"]), np.array(d["extrinsic"]), d["width"], d["height"],
                  d.get("image_id", ""))


def write_cameras(path, cameras):
    text = json.dumps([camera_to_dict(c) for c in cameras], indent=1)
    with atomic_write(path, "w") as fh:
        fh.write(text)


def read_cameras(path) -> list:
    with open(path) as fh:
        return [camera_from_dict(d) for d in json.load(fh)]


def write_package(directory, package):
    """A client package on disk: cloud.ply + cameras.json (no images, no appearance)."""
    os.makedirs(directory, exist_ok=True)
    write_model(os.path.join(directory, "cloud.ply"), package.cloud)
    write_cameras(os.path.join(directory, "cameras.json"), package.cameras)
    with atomic_write(os.path.join(directory, "package.json"), "w") as fh:
        json.dump({"client_id": package.client_id}, fh)


def read_package(directory):
    from .client import ClientPackage

    with open(os.path.join(directory, "package.json")) as fh:
        meta = json.load(fh)
    return ClientPackage(read_model(os.path.join(directory, "cloud.ply")),
                         tuple(read_cameras(os.path.join(directory, "cameras.json"))),
                         meta.get("client_id", ""))


def write_state(directory, state):
    """Global state: cloud, camera bank, appearance network and bounds."""
    os.makedirs(directory, exist_ok=True)
    write_model(os.path.join(directory, "cloud.ply"), state.cloud)
    write_cameras(os.path.join(directory, "cameras.json"), state.camera_bank)
    params = state.appearance.params()
    with atomic_write(os.path.join(directory, "appearance.npz")) as fh:
        np.savez(fh, **params)
    meta = dict(bounds=[float(v).hex() for v in np.ravel(state.bounds)],
                merged_clients=list(state.merged_clients))
    with atomic_write(os.path.join(directory, "state.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def read_state(directory):
    from .appearance import AppearanceModel
    from .merge import GlobalState

    with open(os.path.join(directory, "state.json")) as fh:
        meta = json.load(fh)
    app = AppearanceModel()
    with np.load(os.path.join(directory, "appearance.npz")) as z:
        for k, arr in app.params().items():
            arr[...] = z[k]
    bounds = np.array([float.fromhex(v) for v in meta["bounds"]]).reshape(2, 3)
    return GlobalState(read_model(os.path.join(directory, "cloud.ply")),
                       tuple(read_cameras(os.path.join(directory, "cameras.json"))), app, bounds,
                       tuple(meta["merged_clients"]))
