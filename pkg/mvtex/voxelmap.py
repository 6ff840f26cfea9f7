"""
Multi-resolution voxel pyramid over canonical space and the pixel-to-voxel
mapping that turns CCM pixels into integer rotary phases.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from mvtex.geometry import ConditionMaps, downsample_conditions
from mvtex.image_io import write_png16


@dataclass(frozen=True)
class VoxelPyramid:
    """Voxels per axis at each level; level 0 is the finest."""
    resolutions: Tuple[int, ...]

    @property
    def levels(self) -> int:
        return len(self.resolutions)


@dataclass(eq=False)
class PhaseGrid:
    level: int
    phases: np.ndarray  # (H, W, 3) int64
    valid: np.ndarray   # (H, W) bool

    @property
    def resolution(self) -> int:
        return int(self.phases.shape[0])

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.phases.copy())


def build_pyramid(feature_resolutions: Sequence[int]) -> VoxelPyramid:
    """One level per feature-map side length; the voxel count per axis equals that side."""
    resolutions = tuple(int(r) for r in feature_resolutions)
    if not resolutions:
        raise ValueError("Pyramid needs at least one level")
    if any(r < 1 for r in resolutions):
        raise ValueError(f"Pyramid resolutions must be positive: {resolutions}")
    if any(b >= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError(f"Pyramid resolutions must be strictly decreasing: {resolutions}")
    return VoxelPyramid(resolutions)


def quantize(pos: np.ndarray, resolution: int) -> np.ndarray:
    """round(pos * R) with halves away from zero, clamped to [0, R]."""
    scaled = np.asarray(pos, dtype=np.float64) * resolution
    return np.clip(np.floor(scaled + 0.5), 0, resolution).astype(np.int64)


def pixel_to_voxel(maps: ConditionMaps, pyramid: VoxelPyramid, level: int) -> PhaseGrid:
    if not 0 <= level < pyramid.levels:
        raise ValueError(f"Level {level} outside pyramid with {pyramid.levels} levels")
    resolution = pyramid.resolutions[level]
    if maps.resolution != resolution:
        raise ValueError(
            f"Condition maps at {maps.resolution}px do not match level {level} ({resolution}px)"
        )
    phases = quantize(maps.ccm, resolution)
    phases[~maps.mask] = 0
    return PhaseGrid(level=level, phases=phases, valid=maps.mask.copy())


def build_phase_grids(maps_per_view: Sequence[ConditionMaps], pyramid: VoxelPyramid) -> List[torch.Tensor]:
    """Per-level (views, H, W, 3) int64 phase tensors from full-resolution maps."""
    grids = []
    for level, resolution in enumerate(pyramid.resolutions):
        per_view = [
            pixel_to_voxel(downsample_conditions(maps, resolution), pyramid, level).phases
            for maps in maps_per_view
        ]
        grids.append(torch.from_numpy(np.stack(per_view)))
    return grids


def identity_phase_grids(n_views: int, pyramid: VoxelPyramid) -> List[torch.Tensor]:
    """All-zero phases: multi-view attention without positional rotation."""
    return [torch.zeros((n_views, r, r, 3), dtype=torch.int64) for r in pyramid.resolutions]


def save_phase_grid(grid: PhaseGrid, filepath: str, config_hash: Optional[str] = None) -> str:
    """16-bit debug image with the x, y and z planes side by side."""
    tiled = np.concatenate([grid.phases[..., k] for k in range(3)], axis=1)
    return write_png16(tiled, filepath, config_hash)
