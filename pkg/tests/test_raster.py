import numpy as np
import pytest
from PIL import Image

from satcity.geom_core import TriMesh
from satcity.raster import (atlas_footprint, load_rgb, ortho_height_raster, rasterize, render_with_atlas,
                            sample_atlas, save_channel_png, save_rgb, visibility_map)
from satcity.sat_camera import camera_from_angles
from satcity.texture import TextureAtlas

RED = (1.0, 0.0, 0.0)
BLUE = (0.0, 0.0, 1.0)


def quad(half, z, color=RED, flip=False):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    t = np.array([[0, 1, 2], [0, 2, 3]])
    if flip:
        t = t[:, ::-1]
    uvs = (v[:, :2] / half + 1.0) * 0.5
    return TriMesh(v, t, uvs=uvs, face_colors=np.array([color, color]))


def stack(*meshes):
    verts, tris, colors, uvs, offset = [], [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        uvs.append(m.uvs)
        tris.append(m.triangles + offset)
        colors.append(m.face_colors)
        offset += len(m.vertices)
    return TriMesh(np.vstack(verts), np.vstack(tris), uvs=np.vstack(uvs), face_colors=np.vstack(colors))


@pytest.fixture
def cam():
    # 90 degree nadir view from 10 m: one pixel per metre at the ground
    return camera_from_angles([0.0, 0.0, 10.0], 0.0, 90.0, 20, 20, 90.0)


def test_quad_coverage(cam):
    fb = rasterize(quad(5.0, 0.0), cam)
    assert fb.covered.sum() == 100
    assert fb.covered[5:15, 5:15].all()
    np.testing.assert_allclose(fb.depth[fb.covered], 10.0)
    np.testing.assert_allclose(fb.heights()[fb.covered], 0.0, atol=1e-9)
    assert np.isnan(fb.heights()[0, 0])


def test_nearest_surface_wins(cam):
    fb = rasterize(stack(quad(5.0, 0.0, RED), quad(2.5, 2.0, BLUE)), cam)
    colors = fb.colors()
    center = colors[10, 10]
    np.testing.assert_array_equal(center, BLUE)
    np.testing.assert_array_equal(colors[6, 6], RED)
    assert fb.depth[10, 10] == pytest.approx(8.0)


def test_equal_depth_keeps_lower_triangle_id(cam):
    red_first = rasterize(stack(quad(5.0, 0.0, RED), quad(5.0, 0.0, BLUE)), cam).colors()
    blue_first = rasterize(stack(quad(5.0, 0.0, BLUE), quad(5.0, 0.0, RED)), cam).colors()
    np.testing.assert_array_equal(red_first[8:12, 8:12], np.broadcast_to(RED, (4, 4, 3)))
    np.testing.assert_array_equal(blue_first[8:12, 8:12], np.broadcast_to(BLUE, (4, 4, 3)))


def test_backface_culling(cam):
    assert rasterize(quad(5.0, 0.0), cam, cull_backfaces=True).covered.sum() == 100
    assert rasterize(quad(5.0, 0.0, flip=True), cam, cull_backfaces=True).covered.sum() == 0
    assert rasterize(quad(5.0, 0.0, flip=True), cam).covered.sum() == 100


def test_geometry_behind_the_camera_is_culled(cam):
    assert not rasterize(quad(5.0, 20.0), cam).covered.any()
    assert not rasterize(TriMesh.empty(), cam).covered.any()


def test_perspective_correct_uvs(cam):
    fb = rasterize(quad(5.0, 0.0), cam)
    uv = fb.uvs()
    # pixel (10, 10) centre sits at ground (0.5, -0.5)
    np.testing.assert_allclose(uv[10, 10], [0.55, 0.45], atol=1e-12)


def test_ortho_height_raster_keeps_the_maximum():
    hm = ortho_height_raster(stack(quad(1.0, 0.2), quad(0.5, 0.6)), 4)
    assert hm.valid.all()
    assert hm.heights[0, 0] == pytest.approx(0.2)
    assert hm.heights[1, 1] == pytest.approx(0.6)
    empty = ortho_height_raster(TriMesh.empty(), 4)
    assert not empty.valid.any()


def test_atlas_footprint():
    idx, w = atlas_footprint([[0.5 / 4, 1.0 - 0.5 / 2]], 4, 2)
    assert idx[0, 0] == 0
    assert w[0, 0] == pytest.approx(1.0)
    idx, w = atlas_footprint([[0.0, 1.0], [1.0, 0.0], [0.3, 0.7]], 4, 2)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert np.all(idx[0] == 0)
    assert np.all(idx[1] == 7)


def test_sample_atlas_is_exact_on_linear_ramps():
    cols = (np.arange(8) + 0.5) / 8
    rgb = np.broadcast_to(cols[None, :, None], (4, 8, 3)).copy()
    out = sample_atlas(rgb, [[0.3, 0.5], [0.6, 0.2]])
    np.testing.assert_allclose(out[:, 0], [0.3, 0.6])


def test_render_with_atlas(cam):
    atlas = TextureAtlas.constant(8, 8, (0.2, 0.4, 0.6))
    img = render_with_atlas(quad(5.0, 0.0), atlas, cam, background=(1.0, 1.0, 1.0))
    np.testing.assert_allclose(img[10, 10], [0.2, 0.4, 0.6])
    np.testing.assert_array_equal(img[0, 0], [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        render_with_atlas(TriMesh(np.zeros((3, 3)), [[0, 1, 2]]), atlas, cam)


def test_visibility_map(cam):
    fb = rasterize(quad(5.0, 0.0), cam)
    vis = visibility_map(fb, 8, 8)
    assert len(vis.pixels) == 100
    np.testing.assert_allclose(vis.weights.sum(axis=1), 1.0)
    assert vis.texels.max() < 64


def test_channel_exports(tmp_path, cam):
    fb = rasterize(stack(quad(5.0, 0.0), quad(2.5, 2.0)), cam)
    save_channel_png(fb, "height", str(tmp_path / "h.png"))
    heights = np.asarray(Image.open(tmp_path / "h.png")).astype(np.int64)
    assert heights.max() == 65535
    assert heights[0, 0] == 0
    exact = np.load(tmp_path / "h.npy")
    assert np.nanmax(exact) == pytest.approx(2.0)

    save_channel_png(fb, "mask", str(tmp_path / "m.png"))
    mask = np.asarray(Image.open(tmp_path / "m.png"))
    assert (mask == 255).sum() == 100

    for channel in ("depth", "normal", "uv", "rgb"):
        save_channel_png(fb, channel, str(tmp_path / f"{channel}.png"))
    normal = load_rgb(str(tmp_path / "normal.png"))
    np.testing.assert_allclose(normal[10, 10], [0.5, 0.5, 1.0], atol=1 / 255)
    with pytest.raises(ValueError):
        save_channel_png(fb, "albedo", str(tmp_path / "x.png"))


def test_rgb_png_round_trip(tmp_path, rng):
    img = rng.uniform(size=(6, 5, 3))
    save_rgb(img, str(tmp_path / "x.png"))
    np.testing.assert_allclose(load_rgb(str(tmp_path / "x.png")), img, atol=0.5 / 255 + 1e-12)
