"""
Classifier-free guidance over two droppable conditions (geometry, reference).

With g = eps_geo - eps_uncond and r = eps_full - eps_geo:
  plain:       eps_uncond + s_geo * g + s_ref * r
  orthogonal:  eps_uncond + s_geo * g + s_ref * (r minus its component along g)
  reference:   eps_geo + s_ref * r   (geometry always on, no geometry guidance)
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, TypeVar

import torch

from mvtex.numerics import RngState, check_finite, uniform

logger = logging.getLogger(__name__)

MODES = ('plain', 'orthogonal', 'reference')
SCOPES = ('global', 'per_view')
DEGENERATE_NORM = 1e-8

T = TypeVar('T')


@dataclass
class GuidanceConfig:
    s_geo: float = 2.0
    s_ref: float = 5.0
    mode: str = 'plain'
    projection_scope: str = 'global'

    def __post_init__(self):
        for name in ('s_geo', 's_ref'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.mode not in MODES:
            raise ValueError(f"Unknown guidance mode: {self.mode}")
        if self.projection_scope not in SCOPES:
            raise ValueError(f"Unknown projection scope: {self.projection_scope}")


@dataclass
class GuidanceBundle:
    """Noise estimates without conditions, with geometry, and with geometry plus reference."""
    eps_uncond: torch.Tensor
    eps_geo: torch.Tensor
    eps_full: torch.Tensor

    def __post_init__(self):
        shape = self.eps_uncond.shape
        if self.eps_geo.shape != shape or self.eps_full.shape != shape:
            raise ValueError(
                f"Bundle shapes differ: {tuple(shape)}, {tuple(self.eps_geo.shape)}, {tuple(self.eps_full.shape)}"
            )
        check_finite(self.eps_uncond, 'eps_uncond')
        check_finite(self.eps_geo, 'eps_geo')
        check_finite(self.eps_full, 'eps_full')

    @property
    def geometry_direction(self) -> torch.Tensor:
        return self.eps_geo - self.eps_uncond

    @property
    def reference_direction(self) -> torch.Tensor:
        return self.eps_full - self.eps_geo

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.eps_uncond, self.eps_geo, self.eps_full])


@dataclass
class GuidedNoise:
    eps: torch.Tensor
    degenerate: bool = False


def compose_plain(b: GuidanceBundle, c: GuidanceConfig) -> torch.Tensor:
    return b.eps_uncond + c.s_geo * b.geometry_direction + c.s_ref * b.reference_direction


def compose_reference(b: GuidanceBundle, c: GuidanceConfig) -> torch.Tensor:
    return b.eps_geo + c.s_ref * b.reference_direction


def _reduce_dims(t: torch.Tensor, scope: str):
    if scope == 'global' or t.dim() < 4:
        return tuple(range(t.dim()))
    # Views sit at axis -4 of a (..., V, C, H, W) grid
    return (-3, -2, -1)


def project_out(r: torch.Tensor, g: torch.Tensor, scope: str = 'global'):
    """
    Remove from `r` its component along `g`.
    Returns (r_perp, degenerate mask); where |g| is degenerate r is returned unchanged.
    """
    dims = _reduce_dims(g, scope)
    g_norm = torch.sqrt((g * g).sum(dim=dims, keepdim=True))
    degenerate = g_norm <= DEGENERATE_NORM
    g_hat = g / torch.where(degenerate, torch.ones_like(g_norm), g_norm)
    along = (r * g_hat).sum(dim=dims, keepdim=True)
    r_perp = torch.where(degenerate, r, r - along * g_hat)
    return r_perp, degenerate


def compose_orthogonal(b: GuidanceBundle, c: GuidanceConfig) -> GuidedNoise:
    g = b.geometry_direction
    r_perp, degenerate = project_out(b.reference_direction, g, c.projection_scope)
    flag = bool(degenerate.any())
    if flag:
        logger.warning("Geometry guidance direction is degenerate; using plain composition")
    return GuidedNoise(b.eps_uncond + c.s_geo * g + c.s_ref * r_perp, degenerate=flag)


def compose(b: GuidanceBundle, c: GuidanceConfig) -> GuidedNoise:
    """Dispatch on `c.mode`."""
    if c.mode == 'plain':
        return GuidedNoise(compose_plain(b, c))
    if c.mode == 'orthogonal':
        return compose_orthogonal(b, c)
    if c.mode == 'reference':
        return GuidedNoise(compose_reference(b, c))
    raise ValueError(f"Unknown guidance mode: {c.mode}")


def drop_condition(cond: T, p: float, rng: RngState) -> Optional[T]:
    """Return None with probability p, otherwise `cond`."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"Drop probability must lie in [0, 1], got {p}")
    return None if float(uniform(rng)) < p else cond
