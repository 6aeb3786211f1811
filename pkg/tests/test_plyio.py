import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsplat.client import ClientPackage
from fedsplat.merge import GlobalState
from fedsplat.appearance import AppearanceModel
from fedsplat.core import GaussianCloud
from fedsplat.plyio import (PROPERTIES, PlyFormatError, atomic_write, cloud_to_table, parse_model,
                            read_cameras, read_model, read_package, read_state, write_cameras,
                            write_model, write_package, write_state)

from conftest import random_cloud, small_camera


def header(props, n, fmt="binary_little_endian 1.0", ptype="float"):
    lines = ["ply", f"format {fmt}", f"element vertex {n}"] + [f"property {ptype} {p}" for p in props]
    return ("\n".join(lines + ["end_header"]) + "\n").encode()


def test_property_layout():
    assert len(PROPERTIES) == 38 and PROPERTIES[:6] == ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    assert PROPERTIES[-8:] == ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def test_f_rest_is_channel_major(rng):
    c = random_cloud(rng, 2)
    t = cloud_to_table(c)
    # f_rest_0..7 are the red channel of coefficients 1..8
    np.testing.assert_array_equal(t[:, 6:14], c.sh[:, 1:, 0])
    np.testing.assert_array_equal(t[:, 14:22], c.sh[:, 1:, 1])


def test_round_trip_is_bit_exact(rng, tmp_path):
    c = random_cloud(rng, 17)
    write_model(tmp_path / "m.ply", c)
    back = read_model(tmp_path / "m.ply")
    assert back.equals(c)
    np.testing.assert_array_equal(back.bounds, c.bounds)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 20), st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(n, seed):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, n, bounds=np.array([[-5.0] * 3, [5.0] * 3])) if n else GaussianCloud.empty()
    tab = np.ascontiguousarray(cloud_to_table(c), dtype="<f8")
    data = header(PROPERTIES, n, ptype="double") + tab.tobytes()
    back = parse_model(data)
    np.testing.assert_array_equal(back.positions, c.positions)
    np.testing.assert_array_equal(back.sh, c.sh)


def test_reads_float32_and_ignores_normals(rng):
    c = random_cloud(rng, 3)
    props = ["nx", "ny", "nz"] + PROPERTIES[::-1]
    tab = cloud_to_table(c)[:, ::-1]
    tab = np.concatenate([np.zeros((3, 3)), tab], axis=1).astype("<f4")
    back = parse_model(header(props, 3) + tab.tobytes())
    np.testing.assert_allclose(back.positions, c.positions, rtol=1e-6)
    np.testing.assert_allclose(back.opacity_logits, c.opacity_logits.astype(np.float32), rtol=0)


@pytest.mark.parametrize("data", [
    b"not a ply",
    header(PROPERTIES, 1, fmt="ascii 1.0"),
    header(PROPERTIES[:-1], 0),
    header(PROPERTIES + ["extra"], 0),
    header(PROPERTIES, 2) + b"\x00" * 10,
    header(PROPERTIES, 1, ptype="uchar"),
    b"ply\nformat binary_little_endian 1.0\nend_header\n",
])
def test_malformed_files_raise(data):
    with pytest.raises(PlyFormatError):
        parse_model(data)


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("interrupted")
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]


def test_cameras_round_trip(tmp_path):
    cams = [small_camera(size=22, eye=(0.1 * i, 0, 0), image_id=f"c{i}") for i in range(3)]
    write_cameras(tmp_path / "c.json", cams)
    back = read_cameras(tmp_path / "c.json")
    for a, b in zip(cams, back):
        assert a.image_id == b.image_id and (a.width, a.height) == (b.width, b.height)
        np.testing.assert_array_equal(a.extrinsic, b.extrinsic)
        np.testing.assert_array_equal(a.intrinsic, b.intrinsic)


def test_package_and_state_round_trip(rng, tmp_path):
    cloud = random_cloud(rng, 5)
    cams = (small_camera(size=22, image_id="a"), small_camera(size=22, eye=(1, 0, 0), image_id="b"))
    write_package(tmp_path / "pkg", ClientPackage(cloud, cams, "client7"))
    pkg = read_package(tmp_path / "pkg")
    assert pkg.client_id == "client7" and pkg.cloud.equals(cloud) and pkg.image_ids == {"a", "b"}

    app = AppearanceModel(seed=2)
    app.encoding.tables[:] = rng.normal(size=app.encoding.tables.shape)
    state = GlobalState(cloud, cams, app, np.array([[-1.0, -2, -3], [1, 2, 3]]), ("a", "b"))
    write_state(tmp_path / "st", state)
    back = read_state(tmp_path / "st")
    assert back.cloud.equals(cloud) and back.merged_clients == ("a", "b")
    np.testing.assert_array_equal(back.bounds, state.bounds)
    for k, arr in app.params().items():
        np.testing.assert_array_equal(back.appearance.params()[k], arr)
