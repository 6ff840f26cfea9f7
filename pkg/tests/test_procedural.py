import numpy as np
import pytest

from mvtex.geometry import make_camera, rasterize_conditions
from mvtex.numerics import seeded_rng
from mvtex.procedural import (
    MESH_BUILDERS, PATTERN_NAMES, make_pattern_texture, make_uv_sphere, random_palette,
)


@pytest.mark.parametrize('name', sorted(MESH_BUILDERS))
def test_meshes_fit_canonical_box(name):
    mesh = MESH_BUILDERS[name]()
    assert mesh.vertices.min() >= -1e-9 and mesh.vertices.max() <= 1.0 + 1e-9
    assert np.all((mesh.uvs >= 0.0) & (mesh.uvs <= 1.0))
    assert name in PATTERN_NAMES


def test_sphere_spans_unit_box():
    sphere = make_uv_sphere()
    assert np.allclose(sphere.vertices.min(axis=0), 0.0, atol=1e-12)
    assert np.allclose(sphere.vertices.max(axis=0), 1.0, atol=1e-12)


@pytest.mark.parametrize('name', sorted(MESH_BUILDERS))
def test_meshes_face_outward(name):
    maps = rasterize_conditions(MESH_BUILDERS[name](), make_camera(30.0, 20.0, 0.7), 32)
    assert maps.mask.sum() > 50
    toward_camera = maps.normal[maps.mask] @ maps.view_direction
    assert np.mean(toward_camera > 0) > 0.95


def test_checker_alternates():
    palette = np.array([[0, 0, 0], [1, 1, 1]], dtype=np.float32)
    tex = make_pattern_texture('checker', 8, palette=palette, cells=2)
    assert tex[0, 0].tolist() != tex[0, 4].tolist()
    assert tex[0, 0].tolist() == tex[4, 4].tolist()


def test_palette_from_rng_is_reproducible():
    a = make_pattern_texture('stripes', 16, rng=seeded_rng(1))
    b = make_pattern_texture('stripes', 16, rng=seeded_rng(1))
    assert np.array_equal(a, b)
    palette = random_palette(seeded_rng(2))
    assert palette.shape == (2, 3) and palette.min() >= 0.15 and palette.max() <= 0.85


def test_pattern_errors():
    with pytest.raises(ValueError):
        make_pattern_texture('plaid', 8, rng=seeded_rng(0))
    with pytest.raises(ValueError):
        make_pattern_texture('checker', 8)
    with pytest.raises(ValueError):
        make_pattern_texture('checker', 8, palette=np.zeros((3, 3)))
