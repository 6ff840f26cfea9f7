"""
Rotary positional embedding driven by 3D voxel phases.

Channels are split into three equal chunks (x, y, z). Within a chunk, the
interleaved pair (2i, 2i+1) is rotated by phase * theta_i with
theta_i = base ** (-2i / (dim / 3)).
"""
from dataclasses import dataclass
from typing import Tuple, Union

import torch

from mvtex.voxelmap import PhaseGrid


@dataclass(frozen=True)
class RopeConfig:
    dim: int
    base: float = 10000.0

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 6:
            raise ValueError(f"Rotary dim must be a positive multiple of 6, got {self.dim}")

    @property
    def axis_split(self) -> Tuple[int, int, int]:
        third = self.dim // 3
        return third, third, third

    def frequencies(self) -> torch.Tensor:
        third = self.dim // 3
        i = torch.arange(third // 2, dtype=torch.float64)
        return self.base ** (-2.0 * i / third)


def rotation_angles(phases: torch.Tensor, cfg: RopeConfig) -> torch.Tensor:
    """(..., 3) integer phases -> (..., dim/2) angles in float64."""
    if phases.shape[-1] != 3:
        raise ValueError(f"Phases must end in an (x, y, z) axis, got {tuple(phases.shape)}")
    angles = phases.to(torch.float64)[..., :, None] * cfg.frequencies()
    return angles.reshape(*phases.shape[:-1], cfg.dim // 2)


def apply_rotary(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs of `x` (..., dim) by `angles` (..., dim/2)."""
    cos = torch.cos(angles).to(x.dtype)
    sin = torch.sin(angles).to(x.dtype)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1).flatten(-2)


def rotate(vec: torch.Tensor, phase, cfg: RopeConfig) -> torch.Tensor:
    """Rotate a single feature vector (or a batch ending in `dim`) by an (x, y, z) phase."""
    if vec.shape[-1] != cfg.dim:
        raise ValueError(f"Vector has {vec.shape[-1]} channels, rotary dim is {cfg.dim}")
    phase = torch.as_tensor(phase, dtype=torch.int64)
    return apply_rotary(vec, rotation_angles(phase, cfg))


def rotate_grid(latents: torch.Tensor, phases: Union[torch.Tensor, PhaseGrid], cfg: RopeConfig) -> torch.Tensor:
    """
    Per-pixel rotation of a (..., C, H, W) grid.

    C may hold several heads of `dim` channels each; every head gets the same
    rotation. Pixels with phase (0, 0, 0), which includes all invalid pixels,
    pass through unchanged.
    """
    if isinstance(phases, PhaseGrid):
        phases = phases.as_tensor()
    *lead, c, h, w = latents.shape
    if tuple(phases.shape[-3:-1]) != (h, w):
        raise ValueError(f"Phase grid {tuple(phases.shape)} does not match latents {tuple(latents.shape)}")
    if c % cfg.dim:
        raise ValueError(f"{c} channels is not a multiple of rotary dim {cfg.dim}")
    heads = c // cfg.dim
    x = latents.movedim(-3, -1).reshape(*lead, h, w, heads, cfg.dim)
    angles = rotation_angles(phases, cfg)[..., None, :]
    out = apply_rotary(x, angles)
    return out.reshape(*lead, h, w, c).movedim(-1, -3)
