import numpy as np
import pytest

from satcity.geom_core import GROUP_BOTTOM, GROUP_TOP, GROUP_WALL, Frame, PointCloud, TriMesh, transform_for_bounds
from satcity.mesh_extract import (VoxelGrid, boundary_half_edges, build_height_sheet, close_height_sheet,
                                  extract_height_mesh, marching_cubes, merge_tiles, naive_mc_baseline,
                                  sample_sdf, tile_height_meshes, watertight_check, weld_vertices)
from satcity.optimizer import TileFit, tile_regions
from satcity.zmono_field import ZMonoField


def tiled_fits(heights, scene=10.0, z_range=(0.0, 5.0)):
    """2x2 constant-height tile fits over a square scene, heights in world units."""
    fits = []
    for region, h in zip(tile_regions([0.0, 0.0], [scene, scene], 2, overlap=0.1), heights):
        transform = transform_for_bounds([*region.region_lo, z_range[0]], [*region.region_hi, z_range[1]])
        zn = float(transform.to_normalized([0.0, 0.0, h])[2])
        fits.append(TileFit(ZMonoField.constant(4, zn), transform, region))
    return fits


def test_height_mesh_is_watertight(small_field):
    mesh = extract_height_mesh(small_field, res=6)
    report = watertight_check(mesh)
    assert report.watertight
    assert report.euler_characteristic == 2
    assert report.connected_components == 1
    # lattice + dropped boundary ring + bottom centre
    assert report.vertex_count == 36 + 4 * 5 + 1
    assert mesh.signed_volume() > 0
    assert set(np.unique(mesh.face_groups)) == {GROUP_TOP, GROUP_WALL, GROUP_BOTTOM}
    assert mesh.uvs.min() >= 0.0 and mesh.uvs.max() <= 1.0


def test_height_mesh_top_follows_the_field():
    mesh = extract_height_mesh(ZMonoField.constant(8, 0.4), res=5)
    top = mesh.select_faces(mesh.face_groups == GROUP_TOP).compact()
    np.testing.assert_allclose(top.vertices[:, 2], 0.4, atol=1e-9)
    # floor one lattice step (2 / (res - 1)) below z = -1
    assert mesh.vertices[:, 2].min() == pytest.approx(-1.5)


def test_open_sheet_has_a_boundary_and_closes():
    xs = np.linspace(0.0, 1.0, 3)
    sheet = build_height_sheet(xs, xs, np.zeros((3, 3)))
    assert len(boundary_half_edges(sheet.triangles)) == 8
    assert watertight_check(sheet).boundary_edge_count == 8
    closed = close_height_sheet(sheet, -1.0)
    assert watertight_check(closed).watertight
    assert closed.signed_volume() == pytest.approx(1.0)


def test_watertight_check_flags_non_manifold_edges(cube):
    fin = TriMesh(np.vstack([cube.vertices, [[0.5, -1.0, 0.5]]]),
                  np.vstack([cube.triangles, [[0, 1, 8]]]))
    report = watertight_check(fin)
    assert report.non_manifold_edge_count == 1
    assert not report.watertight
    assert watertight_check(TriMesh.empty()).face_count == 0


def test_marching_cubes_without_crossing_is_empty():
    assert marching_cubes(VoxelGrid(8, np.ones((8, 8, 8)))).is_empty
    with pytest.raises(ValueError):
        VoxelGrid(4, np.ones((4, 4, 4)))
    bad = np.ones((8, 8, 8))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        marching_cubes(VoxelGrid(8, bad))


def test_marching_cubes_sphere():
    c = VoxelGrid(24, np.zeros((24, 24, 24))).centers()
    xx, yy, zz = np.meshgrid(c, c, c, indexing="ij")
    grid = VoxelGrid(24, np.sqrt(xx ** 2 + yy ** 2 + zz ** 2) - 0.5)
    mesh = marching_cubes(grid)
    assert watertight_check(mesh).watertight
    assert mesh.signed_volume() == pytest.approx(4.0 / 3.0 * np.pi * 0.125, rel=0.05)


def test_sample_sdf_sign_matches_height():
    field = ZMonoField.constant(8, 0.0)
    grid = sample_sdf(field, res=8)
    centers = grid.centers()
    assert np.all(grid.values[:, :, centers > 0] > 0)
    assert np.all(grid.values[:, :, centers < 0] < 0)


def test_naive_baseline_is_stair_stepped_and_closed():
    xy = np.random.default_rng(5).uniform(-1, 1, size=(4000, 2))
    cloud = PointCloud(np.column_stack([xy, np.zeros(len(xy))]), Frame.NORMALIZED)
    mesh = naive_mc_baseline(cloud, res=16)
    assert watertight_check(mesh).watertight
    assert mesh.vertices[:, 2].max() == pytest.approx(0.0, abs=1e-9)


def test_weld_merges_close_duplicates():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 0, 1e-9], [1, 1, 1e-9], [0, 1, 0]], dtype=float)
    mesh = TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    welded, removed = weld_vertices(mesh, tol=1e-6)
    assert removed == 2
    assert len(welded.vertices) == 4
    assert len(welded.triangles) == 2


def test_merge_equal_tiles_is_watertight():
    tiles = tile_height_meshes(tiled_fits([2.0, 2.0, 2.0, 2.0]), res=5)
    for t in tiles:
        assert watertight_check(t.mesh).vertex_count == 25 + 16 + 1
    merged, seams = merge_tiles(tiles, policy="snap")
    report = watertight_check(merged)
    assert report.watertight
    assert report.euler_characteristic == 2
    assert report.vertex_count == 81 + 32 + 1
    assert seams.seam_gap_edges == 0
    assert seams.max_gap < 1e-9
    top = merged.select_faces(merged.face_groups == GROUP_TOP).compact()
    np.testing.assert_allclose(top.vertices[:, 2], 2.0, atol=1e-9)
    np.testing.assert_allclose(top.vertices[:, :2].min(axis=0), [0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(top.vertices[:, :2].max(axis=0), [10.0, 10.0], atol=1e-9)


def test_merge_policies_on_mismatched_tiles():
    heights = [1.0, 2.0, 3.0, 4.0]
    weld_mesh, weld_report = merge_tiles(tile_height_meshes(tiled_fits(heights), res=5), policy="weld")
    assert weld_report.seam_gap_edges > 0
    assert weld_report.max_gap == pytest.approx(3.0, abs=1e-6)
    assert not watertight_check(weld_mesh).watertight

    snap_mesh, snap_report = merge_tiles(tile_height_meshes(tiled_fits(heights), res=5), policy="snap")
    assert snap_report.seam_gap_edges == 0
    assert snap_report.snapped_vertices > 0
    assert snap_report.max_snap == pytest.approx(3.0, abs=1e-6)
    assert watertight_check(snap_mesh).watertight

    with pytest.raises(ValueError):
        merge_tiles([], policy="glue")
    with pytest.raises(ValueError):
        tile_regions([0, 0], [1, 1], 0)


def test_snap_warns_when_it_moves_seams_beyond_the_weld_tolerance(caplog):
    caplog.set_level("WARNING", logger="satcity.mesh_extract")
    _, report = merge_tiles(tile_height_meshes(tiled_fits([1.0, 2.0, 3.0, 4.0]), res=5), policy="snap", tol=1e-6)
    assert report.max_snap == pytest.approx(3.0, abs=1e-6)
    assert any("Snapped" in r.getMessage() and r.levelname == "WARNING" for r in caplog.records)

    caplog.clear()
    merge_tiles(tile_height_meshes(tiled_fits([2.0, 2.0, 2.0, 2.0]), res=5), policy="snap", tol=1e-6)
    assert not any("Snapped" in r.getMessage() for r in caplog.records)


def test_snap_tol_leaves_tall_seams_open(caplog):
    caplog.set_level("WARNING", logger="satcity.mesh_extract")
    tiles = tile_height_meshes(tiled_fits([1.0, 2.0, 3.0, 4.0]), res=5)
    mesh, report = merge_tiles(tiles, policy="snap", tol=1e-6, snap_tol=1.5)
    assert report.seam_gap_edges > 0
    assert report.max_gap == pytest.approx(3.0, abs=1e-6)
    # one-unit steps between neighbouring tiles are still closed
    assert report.snapped_vertices > 0
    assert report.max_snap <= 1.5
    assert not watertight_check(mesh).watertight
    assert any("Seam gaps left open" in r.getMessage() for r in caplog.records)
