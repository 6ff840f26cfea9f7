import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import write_obj
from mvtex.geometry import (
    BACKGROUND, CANONICAL_CENTER, ConditionMaps, downsample_conditions, load_mesh, make_camera, make_camera_rig,
    normalize_to_canonical, project, rasterize_conditions, rasterize_texels, save_mesh, unproject_depth,
)
from mvtex.procedural import make_cube

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
vt 0 0
vt 1 0
vt 1 1
vt 0 1
f 5/1 6/2 7/3 8/4
f 2/1 1/2 4/3 3/4
f 6/1 2/2 3/3 7/4
f 1/1 5/2 8/3 4/4
f 8/1 7/2 3/3 4/4
f 1/1 2/2 6/3 5/4
"""


def test_load_cube_quads(tmp_path):
    mesh = load_mesh(write_obj(tmp_path / 'cube.obj', CUBE_OBJ))
    assert mesh.triangle_count == 12
    assert len(mesh.vertices) == 8


def test_missing_normals_are_computed(tmp_path):
    mesh = load_mesh(write_obj(tmp_path / 'cube.obj', CUBE_OBJ))
    assert np.allclose(np.linalg.norm(mesh.normals, axis=-1), 1.0, atol=1e-9)


def test_negative_indices_and_comments(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0  # apex\nvt 0 0\nvt 1 0\nvt 0 1\nf -3/-3 -2/-2 -1/-1\n"
    mesh = load_mesh(write_obj(tmp_path / 'tri.obj', text))
    assert mesh.tri_vertices.tolist() == [[0, 1, 2]]
    assert mesh.tri_uvs.tolist() == [[0, 1, 2]]


def test_mesh_without_uvs(tmp_path):
    path = write_obj(tmp_path / 'nouv.obj', "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(ValueError, match="mesh lacks UV parameterization"):
        load_mesh(path)


def test_empty_mesh(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        load_mesh(write_obj(tmp_path / 'empty.obj', "# nothing\n"))


def test_unreadable_mesh(tmp_path):
    with pytest.raises(ValueError):
        load_mesh(str(tmp_path / 'missing.obj'))


def test_save_and_reload(tmp_path, sphere):
    path = str(tmp_path / 'sphere.obj')
    save_mesh(sphere, path)
    loaded = load_mesh(path)
    assert loaded.triangle_count == sphere.triangle_count
    assert np.allclose(loaded.vertices, sphere.vertices, atol=1e-7)
    assert np.allclose(loaded.uvs, sphere.uvs, atol=1e-7)


def test_canonical_cube_is_fixed_point():
    cube = make_cube()
    assert np.allclose(normalize_to_canonical(cube).vertices, cube.vertices, atol=1e-6)


def test_offset_cube_maps_to_unit_box():
    cube = make_cube()
    moved = replace(cube, vertices=cube.vertices * 2.0 + 10.0)
    out = normalize_to_canonical(moved)
    assert np.allclose(out.vertices.min(axis=0), 0.0, atol=1e-9)
    assert np.allclose(out.vertices.max(axis=0), 1.0, atol=1e-9)


def test_box_keeps_aspect_ratio():
    cube = make_cube()
    box = replace(cube, vertices=cube.vertices * np.array([2.0, 1.0, 1.0]))
    out = normalize_to_canonical(box)
    assert np.allclose(out.vertices.min(axis=0), [0.0, 0.25, 0.25], atol=1e-9)
    assert np.allclose(out.vertices.max(axis=0), [1.0, 0.75, 0.75], atol=1e-9)


def test_zero_extent_rejected():
    cube = make_cube()
    flat = replace(cube, vertices=np.zeros_like(cube.vertices))
    with pytest.raises(ValueError):
        normalize_to_canonical(flat)


def test_camera_rig_azimuths():
    rig = make_camera_rig(6)
    assert [c.azimuth for c in rig] == [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
    assert rig[0].is_reference_pose and not rig[1].is_reference_pose
    assert len(make_camera_rig(1)) == 1
    with pytest.raises(ValueError):
        make_camera_rig(13)


def test_view_matrix_is_rigid():
    for cam in make_camera_rig(12, elevation=35.0):
        r = cam.rotation
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-5)
        assert math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-5)


def test_sphere_center_pixel_matches_ray(sphere):
    res = 64
    cam = make_camera(0.0, 0.0, 0.6)
    maps = rasterize_conditions(sphere, cam, res)
    row = col = res // 2
    x = ((col + 0.5) / res * 2.0 - 1.0) * 0.6
    y = (1.0 - (row + 0.5) / res * 2.0) * 0.6
    expected = np.array([0.5 + x, 0.5 + y, 0.5 + math.sqrt(0.25 - x * x - y * y)])
    assert maps.mask[row, col]
    assert np.abs(maps.ccm[row, col] - expected).max() < 2.0 / res


def test_background_sentinel(sphere):
    maps = rasterize_conditions(sphere, make_camera(30.0, 20.0, 0.6), 32)
    assert not maps.mask[0, 0]
    background = ~maps.mask
    for channels in (maps.ccm, maps.normal, maps.uv):
        assert np.all(channels[background] == BACKGROUND)
    assert np.all(maps.depth[background] == BACKGROUND)


def test_covered_pixels_are_valid(sphere):
    maps = rasterize_conditions(sphere, make_camera(45.0, 20.0, 0.6), 48)
    covered = maps.mask
    assert np.all((maps.ccm[covered] >= 0.0) & (maps.ccm[covered] <= 1.0))
    assert np.allclose(np.linalg.norm(maps.normal[covered], axis=-1), 1.0, atol=1e-3)
    assert np.all(maps.depth[covered] > 0)


def test_front_and_back_masks_mirror(sphere):
    front = rasterize_conditions(sphere, make_camera(0.0, 0.0, 0.6), 64).mask
    back = rasterize_conditions(sphere, make_camera(180.0, 0.0, 0.6), 64).mask
    mismatch = int((front != back[:, ::-1]).sum())
    assert mismatch <= 0.01 * front.sum()


def test_rasterizer_is_deterministic(sphere):
    cam = make_camera(60.0, 20.0, 0.6)
    a = rasterize_conditions(sphere, cam, 32).stacked()
    b = rasterize_conditions(sphere, cam, 32).stacked()
    assert a.tobytes() == b.tobytes()


def test_empty_view_is_all_background(sphere):
    far = replace(sphere, vertices=sphere.vertices + 10.0)
    empty = rasterize_conditions(far, make_camera(0.0, 0.0, 0.6), 8)
    assert not empty.mask.any()
    assert np.all(empty.ccm == BACKGROUND)


def test_depth_unprojects_to_ccm(sphere):
    res = 64
    cam = make_camera(120.0, 20.0, 0.6)
    maps = rasterize_conditions(sphere, cam, res)
    world = unproject_depth(maps, cam)
    assert np.abs(world[maps.mask] - maps.ccm[maps.mask]).max() < 2.0 / res


def test_cube_faces_render(cube):
    maps = rasterize_conditions(cube, make_camera(45.0, 20.0, 0.9), 32)
    assert maps.mask.sum() > 100
    normals = np.unique(np.round(maps.normal[maps.mask], 3), axis=0)
    assert len(normals) == 3


def _solid_maps(res: int) -> ConditionMaps:
    grid = np.random.default_rng(0).random((res, res, 3)).astype(np.float32)
    return ConditionMaps(
        resolution=res, ccm=grid, normal=np.tile(np.float32([0, 0, 1]), (res, res, 1)),
        mask=np.ones((res, res), dtype=bool), uv=grid[..., :2].copy(), depth=grid[..., 2].copy(),
    )


def test_downsample_identity():
    maps = _solid_maps(16)
    same = downsample_conditions(maps, 16)
    assert np.array_equal(same.stacked(), maps.stacked())


def test_downsample_composes(sphere):
    maps = rasterize_conditions(sphere, make_camera(0.0, 20.0, 0.6), 64)
    two_step = downsample_conditions(downsample_conditions(maps, 16), 8)
    direct = downsample_conditions(maps, 8)
    assert np.array_equal(two_step.stacked(), direct.stacked())


def test_downsample_picks_real_samples(sphere):
    maps = rasterize_conditions(sphere, make_camera(0.0, 20.0, 0.6), 64)
    small = downsample_conditions(maps, 16)
    source = {tuple(v) for v in maps.ccm[maps.mask].tolist()}
    assert all(tuple(v) in source for v in small.ccm[small.mask].tolist())


def test_downsample_solid_coverage_and_divisibility():
    maps = _solid_maps(32)
    for res in (16, 8, 4, 2, 1):
        assert downsample_conditions(maps, res).mask.all()
    with pytest.raises(ValueError):
        downsample_conditions(maps, 12)


def test_canonical_center_projects_to_image_center():
    for azimuth, elevation in ((0.0, 0.0), (75.0, 20.0), (200.0, -30.0)):
        cam = make_camera(azimuth, elevation, 0.6)
        col, row, depth = project(CANONICAL_CENTER[None], cam, 64)
        assert col[0] == pytest.approx(32.0)
        assert row[0] == pytest.approx(32.0)
        assert depth[0] == pytest.approx(2.0)


def test_texel_surface_lies_on_sphere(sphere):
    surface = rasterize_texels(sphere, 64)
    assert surface.mask.mean() > 0.9
    radius = np.linalg.norm(surface.position[surface.mask] - CANONICAL_CENTER, axis=-1)
    assert radius.max() <= 0.5 + 1e-6
    assert radius.min() > 0.47
    normals = surface.normal[surface.mask]
    assert np.allclose(np.linalg.norm(normals, axis=-1), 1.0, atol=1e-6)
    outward = (surface.position[surface.mask] - CANONICAL_CENTER) / radius[:, None]
    assert np.einsum('nc,nc->n', normals, outward).min() > 0.95


def test_texel_surface_matches_rendered_uv(sphere):
    res = 64
    cam = make_camera(0.0, 0.0, 0.6)
    maps = rasterize_conditions(sphere, cam, res)
    surface = rasterize_texels(sphere, res)
    row = col = res // 2
    u, v = maps.uv[row, col]
    texel = (int((1.0 - v) * res), int(u * res))
    p_col, p_row, _ = project(surface.position[texel][None], cam, res)
    assert abs(p_col[0] - (col + 0.5)) < 2.0
    assert abs(p_row[0] - (row + 0.5)) < 1.5


def test_texel_surface_of_uv_less_region(caplog):
    square = normalize_to_canonical(make_cube())
    empty = replace(square, uvs=np.full_like(square.uvs, 0.001))
    with caplog.at_level('WARNING', logger='mvtex.geometry'):
        surface = rasterize_texels(empty, 16)
    assert not surface.mask.any()
    assert 'covers no texel' in caplog.text
