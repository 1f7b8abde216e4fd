import numpy as np
import pytest
import trimesh

from satcity.errors import EmptyInputError, NonFiniteError, ObjFormatError, PlyFormatError, PlyTruncatedError
from satcity.geom_core import (Frame, HeightMap, PointCloud, TriMesh, concatenate_meshes, denormalize_cloud,
                               normalize_cloud, read_obj, read_ply, transform_for_bounds, write_obj, write_ply)


def test_cube_measures(cube):
    assert cube.area() == pytest.approx(6.0)
    assert cube.signed_volume() == pytest.approx(1.0)
    assert cube.flipped().signed_volume() == pytest.approx(-1.0)
    np.testing.assert_allclose(cube.face_normals()[2], [0.0, 0.0, 1.0])


def test_compact_drops_unused_vertices(cube):
    top = cube.select_faces(np.isclose(cube.face_normals()[:, 2], 1.0)).compact()
    assert len(top.vertices) == 4
    assert top.triangles.max() == 3


def test_concatenate_offsets_indices(cube):
    both = concatenate_meshes([cube, cube])
    assert len(both.vertices) == 16
    assert both.triangles[12:].min() == 8


def test_cell_centers():
    np.testing.assert_allclose(HeightMap.cell_centers(4), [-0.75, -0.25, 0.25, 0.75])


def test_normalize_round_trip(rng):
    pts = rng.uniform([100.0, -50.0, 3.0], [900.0, 250.0, 60.0], size=(500, 3))
    norm, transform = normalize_cloud(PointCloud(pts))
    assert norm.frame is Frame.NORMALIZED
    assert norm.points.min() >= -1.0 and norm.points.max() <= 1.0
    # x and y share one scale; the longer side spans [-1, 1]
    assert transform.scale[0] == transform.scale[1]
    assert np.ptp(norm.points[:, 0]) == pytest.approx(2.0)
    np.testing.assert_allclose(denormalize_cloud(norm, transform).points, pts, atol=1e-9)


def test_isotropic_normalization_shares_scale(rng):
    pts = rng.uniform([0.0, 0.0, 0.0], [1000.0, 500.0, 50.0], size=(200, 3))
    _, transform = normalize_cloud(PointCloud(pts), isotropic=True)
    assert np.all(transform.scale == transform.scale[0])


def test_padding_shrinks_range():
    t = transform_for_bounds([0, 0, 0], [10, 10, 10], padding=0.1)
    np.testing.assert_allclose(t.to_normalized([[10.0, 10.0, 10.0]]), [[0.8, 0.8, 0.8]])
    with pytest.raises(ValueError):
        transform_for_bounds([0, 0, 0], [1, 1, 1], padding=0.5)


def test_normalize_rejects_bad_clouds():
    with pytest.raises(EmptyInputError):
        normalize_cloud(PointCloud(np.zeros((0, 3))))
    pts = np.zeros((5, 3))
    pts[3, 1] = np.nan
    with pytest.raises(NonFiniteError) as err:
        normalize_cloud(PointCloud(pts))
    assert err.value.index == 3


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, rng, binary):
    pts = rng.normal(size=(64, 3)) * 100.0
    path = str(tmp_path / "cloud.ply")
    write_ply(PointCloud(pts), path, binary=binary)
    np.testing.assert_array_equal(read_ply(path).points, pts)


def test_ply_truncated_body(tmp_path, rng):
    path = tmp_path / "cloud.ply"
    write_ply(PointCloud(rng.normal(size=(10, 3))), str(path))
    data = path.read_bytes()
    path.write_bytes(data[:-30])
    with pytest.raises(PlyTruncatedError) as err:
        read_ply(str(path))
    assert err.value.expected == 10
    assert err.value.actual == 8


def test_ply_rejects_big_endian(tmp_path):
    path = tmp_path / "be.ply"
    path.write_bytes(b"ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                     b"property float x\nproperty float y\nproperty float z\nend_header\n")
    with pytest.raises(PlyFormatError):
        read_ply(str(path))


def test_ply_ignores_extra_properties(tmp_path):
    path = tmp_path / "rgb.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty uchar red\n"
                    "property float y\nproperty float z\nend_header\n1 255 2 3\n4 0 5 6\n")
    np.testing.assert_array_equal(read_ply(str(path)).points, [[1, 2, 3], [4, 5, 6]])


def test_ply_rejects_a_malformed_ascii_row(tmp_path):
    path = tmp_path / "bad_row.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                    "property float z\nend_header\n1 2 3\n1 2 abc\n")
    with pytest.raises(PlyFormatError, match="malformed ascii vertex row"):
        read_ply(str(path))


def test_obj_round_trip_with_uvs(tmp_path, cube):
    mesh = TriMesh(cube.vertices, cube.triangles, uvs=cube.vertices[:, :2])
    path = str(tmp_path / "cube.obj")
    write_obj(mesh, path, material=str(tmp_path / "atlas.png"))
    back = read_obj(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.uvs, mesh.uvs)
    assert "map_Kd atlas.png" in (tmp_path / "cube.mtl").read_text()


def test_obj_parses_in_trimesh(tmp_path, cube):
    path = str(tmp_path / "cube.obj")
    write_obj(cube, path)
    loaded = trimesh.load(path, process=False, force="mesh")
    assert len(loaded.faces) == 12
    assert loaded.is_watertight
    assert loaded.volume == pytest.approx(1.0)


def test_obj_fan_triangulates_quads(tmp_path):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    mesh = read_obj(str(path))
    np.testing.assert_array_equal(mesh.triangles, [[0, 1, 2], [0, 2, 3]])


def test_obj_malformed(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 zero\n")
    with pytest.raises(ObjFormatError):
        read_obj(str(path))
