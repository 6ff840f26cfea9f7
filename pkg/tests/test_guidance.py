import logging

import pytest
import torch

from conftest import random_tensor
from mvtex.guidance import (
    GuidanceBundle, GuidanceConfig, compose, compose_orthogonal, compose_plain, compose_reference,
    drop_condition, project_out,
)
from mvtex.numerics import NumericalError, seeded_rng, spawn

SHAPE = (4, 3, 8, 8)


def bundle_from(uncond: torch.Tensor, g: torch.Tensor, r: torch.Tensor) -> GuidanceBundle:
    eps_geo = uncond + g
    return GuidanceBundle(eps_uncond=uncond, eps_geo=eps_geo, eps_full=eps_geo + r)


def random_bundle(seed: int) -> GuidanceBundle:
    return GuidanceBundle(*(random_tensor(seed * 3 + k, SHAPE) for k in range(3)))


def test_unit_scales_telescope_to_full():
    b = random_bundle(0)
    out = compose_plain(b, GuidanceConfig(s_geo=1.0, s_ref=1.0))
    assert torch.allclose(out, b.eps_full, atol=1e-6)


def test_reduced_scales():
    b = random_bundle(1)
    assert torch.allclose(compose_plain(b, GuidanceConfig(s_geo=1.0, s_ref=0.0)), b.eps_geo, atol=1e-6)
    assert torch.equal(compose_plain(b, GuidanceConfig(s_geo=0.0, s_ref=0.0)), b.eps_uncond)


def test_plain_is_affine_in_each_member():
    cfg = GuidanceConfig()
    a, b = random_bundle(2), random_bundle(3)
    mixed = GuidanceBundle(*(0.3 * x + 0.7 * y for x, y in zip(a.stacked(), b.stacked())))
    expected = 0.3 * compose_plain(a, cfg) + 0.7 * compose_plain(b, cfg)
    assert torch.allclose(compose_plain(mixed, cfg), expected, atol=1e-5)


def test_reference_mode_keeps_geometry():
    b = random_bundle(4)
    cfg = GuidanceConfig(s_ref=3.0, mode='reference')
    assert torch.allclose(compose_reference(b, cfg), b.eps_geo + 3.0 * (b.eps_full - b.eps_geo))
    assert torch.allclose(compose(b, cfg).eps, b.eps_geo + 3.0 * b.reference_direction)


def test_parallel_reference_direction_vanishes():
    uncond, g = random_tensor(5, SHAPE), random_tensor(6, SHAPE)
    b = bundle_from(uncond, g, 2.5 * g)
    cfg = GuidanceConfig(mode='orthogonal')
    out = compose_orthogonal(b, cfg)
    assert not out.degenerate
    assert torch.allclose(out.eps, uncond + cfg.s_geo * g, atol=1e-4)


def test_orthogonal_reference_matches_plain():
    uncond = random_tensor(7, SHAPE)
    g = torch.zeros(SHAPE)
    r = torch.zeros(SHAPE)
    g[0] = 1.0
    r[1] = 1.0
    b = bundle_from(uncond, g, r)
    cfg = GuidanceConfig(mode='orthogonal')
    assert torch.allclose(compose_orthogonal(b, cfg).eps, compose_plain(b, cfg), atol=1e-6)


def test_projection_is_orthogonal_on_random_bundles():
    for seed in range(100):
        r, g = random_tensor(1000 + seed, SHAPE).double(), random_tensor(2000 + seed, SHAPE).double()
        r_perp, degenerate = project_out(r, g)
        assert not degenerate.any()
        assert abs(float((r_perp * g).sum())) <= 1e-4 * float(r.norm()) * float(g.norm())
        assert float(r_perp.norm()) <= float(r.norm()) + 1e-9


def test_per_view_projection():
    r, g = random_tensor(8, SHAPE).double(), random_tensor(9, SHAPE).double()
    r_perp, _ = project_out(r, g, 'per_view')
    per_view = (r_perp * g).sum(dim=(1, 2, 3))
    assert torch.allclose(per_view, torch.zeros(SHAPE[0], dtype=torch.float64), atol=1e-9)
    global_perp, _ = project_out(r, g, 'global')
    assert not torch.allclose(global_perp, r_perp)


def test_degenerate_geometry_falls_back_to_plain(caplog):
    uncond = random_tensor(10, SHAPE)
    b = bundle_from(uncond, torch.zeros(SHAPE), random_tensor(11, SHAPE))
    cfg = GuidanceConfig(mode='orthogonal')
    with caplog.at_level(logging.WARNING, logger='mvtex.guidance'):
        out = compose(b, cfg)
    assert out.degenerate
    assert torch.allclose(out.eps, compose_plain(b, cfg), atol=1e-6)
    assert 'degenerate' in caplog.text


def test_larger_geometry_direction_wins():
    uncond, g_dir, r = random_tensor(12, SHAPE), random_tensor(13, SHAPE), random_tensor(14, SHAPE)
    cfg = GuidanceConfig(mode='orthogonal')
    cosines = []
    for scale in (0.1, 0.5, 1.0, 2.0, 8.0):
        g = g_dir * scale
        step = compose(bundle_from(uncond, g, r), cfg).eps - uncond
        cosines.append(float(torch.nn.functional.cosine_similarity(step.flatten(), g.flatten(), dim=0)))
    assert all(b > a for a, b in zip(cosines, cosines[1:]))


def test_bundle_validation():
    with pytest.raises(ValueError):
        GuidanceBundle(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 2))
    with pytest.raises(NumericalError):
        GuidanceBundle(torch.zeros(2), torch.tensor([0.0, float('nan')]), torch.zeros(2))


@pytest.mark.parametrize('kwargs', [
    {'s_geo': -1.0}, {'s_ref': float('inf')}, {'mode': 'sideways'}, {'projection_scope': 'local'},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        GuidanceConfig(**kwargs)


def test_drop_condition_extremes():
    rng = seeded_rng(0)
    assert all(drop_condition('c', 0.0, rng) == 'c' for _ in range(100))
    assert all(drop_condition('c', 1.0, rng) is None for _ in range(100))
    with pytest.raises(ValueError):
        drop_condition('c', 1.5, rng)


def test_drop_condition_rate():
    rng = spawn(seeded_rng(42), 'dropout')
    draws = 100_000
    dropped = sum(drop_condition(1, 0.1, rng) is None for _ in range(draws))
    assert 0.09 <= dropped / draws <= 0.11
