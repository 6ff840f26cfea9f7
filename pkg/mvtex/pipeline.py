"""
Inference-side procedures shared by the command line and the evaluation tests:
conditioning a mesh, guided generation, baking and LAD.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from mvtex.baking import LADReport, UVTexture, bake, compute_lad, unproject_views
from mvtex.denoiser import DenoiserState, NoiseSchedule, SampleResult, sample
from mvtex.geometry import (
    CameraView, ConditionMaps, Mesh, make_camera_rig, rasterize_conditions, rasterize_texels,
)
from mvtex.guidance import GuidanceConfig
from mvtex.numerics import RngState, resize, seeded_rng, spawn
from mvtex.run_config import RunConfig
from mvtex.voxelmap import build_phase_grids, build_pyramid, identity_phase_grids

logger = logging.getLogger(__name__)


@dataclass
class ViewSetup:
    mesh: Mesh
    cams: List[CameraView]
    maps: List[ConditionMaps]
    cond: torch.Tensor            # (V, 7, H, W)
    phases: List[torch.Tensor]    # per level (V, H_l, W_l, 3)
    identity_phases: List[torch.Tensor]


def prepare_views(mesh: Mesh, n_views: int, config: RunConfig, level_resolutions: Sequence[int]) -> ViewSetup:
    cams = make_camera_rig(n_views, config.elevation, config.half_extent)
    maps = [rasterize_conditions(mesh, cam, config.resolution) for cam in cams]
    pyramid = build_pyramid(level_resolutions)
    cond = torch.from_numpy(np.stack([m.geometry_channels() for m in maps]))
    return ViewSetup(
        mesh=mesh,
        cams=cams,
        maps=maps,
        cond=cond,
        phases=build_phase_grids(maps, pyramid),
        identity_phases=identity_phase_grids(n_views, pyramid),
    )


def reference_tensor(image: np.ndarray, resolution: int) -> torch.Tensor:
    """(H, W, 3) image in [0, 1] -> (3, R, R) in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(image[..., :3].transpose(2, 0, 1))).float()
    if t.shape[-1] != resolution:
        t = resize(t, resolution, mode='bilinear')
    return t * 2.0 - 1.0


def guidance_from_config(config: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(config.s_geo, config.s_ref, config.guidance_mode, config.projection_scope)


def generate_views(state: DenoiserState, setup: ViewSetup, reference: Optional[torch.Tensor],
                   config: RunConfig, rng: RngState, use_rope: Optional[bool] = None,
                   lambda_mv: Optional[float] = None, dump_bundles: bool = False) -> SampleResult:
    use_rope = config.use_rope if use_rope is None else use_rope
    schedule = NoiseSchedule.linear(config.schedule_steps, config.beta_start, config.beta_end)
    return sample(
        state, setup.cond, reference, setup.phases if use_rope else setup.identity_phases,
        schedule, guidance_from_config(config), config.sample_steps, rng,
        eta=config.eta, lambda_mv=lambda_mv, dump_bundles=dump_bundles,
    )


def bake_views(images: Sequence[np.ndarray], maps: Sequence[ConditionMaps], cams: Sequence[CameraView],
               mesh: Mesh, config: RunConfig) -> UVTexture:
    return bake(images, maps, cams, mesh, config.texture_resolution, config.blend_exponent,
                max_view_angle=config.max_view_angle)


def views_lad(images: Sequence[np.ndarray], maps: Sequence[ConditionMaps], cams: Sequence[CameraView],
              mesh: Mesh, config: RunConfig) -> LADReport:
    surface = rasterize_texels(mesh, config.texture_resolution)
    return compute_lad(unproject_views(images, maps, cams, surface, config.max_view_angle))


ABLATIONS = ('no_mva', 'mva_no_rope', 'mva_rope')


def lad_ablation(state: DenoiserState, setup: ViewSetup, reference: Optional[torch.Tensor],
                 config: RunConfig, seed: int,
                 rope_free_state: Optional[DenoiserState] = None) -> Dict[str, float]:
    """
    LAD of generated views without MVA, with MVA but no rotation, and with both.

    `rope_free_state` is a model trained with identity phases; when given it
    produces the rotation-free views instead of `state`.
    """
    settings = {
        'no_mva': (state, dict(use_rope=True, lambda_mv=0.0)),
        'mva_no_rope': (rope_free_state or state, dict(use_rope=False, lambda_mv=None)),
        'mva_rope': (state, dict(use_rope=True, lambda_mv=None)),
    }
    result = {}
    for name in ABLATIONS:
        model, kwargs = settings[name]
        rng = spawn(seeded_rng(seed), 'sample')
        out = generate_views(model, setup, reference, config, rng, **kwargs)
        images = [img.numpy() for img in out.images]
        result[name] = views_lad(images, setup.maps, setup.cams, setup.mesh, config).lad
    logger.info("LAD ablation seed %d: %s", seed, result)
    return result
