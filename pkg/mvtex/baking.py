"""
Multi-view to UV texture baking and cross-view consistency measures.

Texel (row, col) has its center at u = (col + 0.5) / W, v = 1 - (row + 0.5) / H.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse
import scipy.sparse.linalg

from mvtex.geometry import (
    CameraView, ConditionMaps, Mesh, TexelSurface, project, rasterize_conditions, rasterize_texels,
)

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
MAX_VIEW_ANGLE = 60.0
# Depth test slack, in pixel widths
DEPTH_TOLERANCE_PIXELS = 4.0
REFINE_ITERATIONS = 100


@dataclass(eq=False)
class PartialTexture:
    """Texture and coverage obtained by unprojecting one view."""
    texture: np.ndarray           # (H, W, 3)
    mask: np.ndarray              # (H, W) bool
    normals: np.ndarray           # (H, W, 3) surface normal under each seen texel
    view_direction: Optional[np.ndarray] = None

    @property
    def resolution(self) -> int:
        return int(self.mask.shape[0])


@dataclass(eq=False)
class UVTexture:
    resolution: int
    texels: np.ndarray            # (H, W, 3)
    coverage: np.ndarray          # (H, W) blend weight sum
    per_view_partials: List[PartialTexture] = field(default_factory=list)

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0


@dataclass
class LADReport:
    lad: float
    overlap_texel_count: int
    per_view_contributions: List[float]
    no_overlap: bool = False
    adjacent_lad: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'view': list(range(len(self.per_view_contributions))),
            'contribution': self.per_view_contributions,
        })

    def to_text(self, config_hash: Optional[str] = None) -> str:
        lines = [
            f"lad: {self.lad:.8f}",
            f"overlap_texel_count: {self.overlap_texel_count}",
            f"no_overlap: {str(self.no_overlap).lower()}",
            f"adjacent_lad: {self.adjacent_lad:.8f}",
        ]
        lines.extend(f"view_{v:02d}: {c:.8f}" for v, c in enumerate(self.per_view_contributions))
        if config_hash:
            lines.append(f"config_hash: {config_hash}")
        return '\n'.join(lines) + '\n'


def bilinear_taps(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    The four grid neighbours of continuous coordinates whose sample centers
    sit at integers. Returns unclamped (rows, cols) and weights, each (4, ...).
    """
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    c0 = x0.astype(np.int64)
    r0 = y0.astype(np.int64)
    rows = np.stack([r0, r0, r0 + 1, r0 + 1])
    cols = np.stack([c0, c0 + 1, c0, c0 + 1])
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return rows, cols, weights


def _texel_taps(uv: np.ndarray, h: int, w: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols, weights = bilinear_taps(uv[..., 0] * w - 0.5, (1.0 - uv[..., 1]) * h - 0.5)
    return np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1), weights


def unproject_view(image: np.ndarray, maps: ConditionMaps, cam: CameraView, surface: TexelSurface,
                   max_view_angle: float = MAX_VIEW_ANGLE,
                   refine_iterations: int = REFINE_ITERATIONS) -> PartialTexture:
    """
    Gather one view into UV space.

    Every texel of `surface` facing the camera within `max_view_angle` is
    projected into the image and sampled bilinearly. A tap counts only when
    its pixel is covered and its depth matches the texel's; texels keeping
    less than half the tap weight are left unseen. The gathered values then
    seed a least-squares fit of the seen texels to the pixels they render.
    """
    if image.shape[:2] != (maps.resolution, maps.resolution):
        raise ValueError(f"Image {image.shape[:2]} does not match condition maps at {maps.resolution}px")
    res = surface.resolution
    texture = np.zeros((res, res, 3), dtype=np.float32)
    mask = np.zeros((res, res), dtype=bool)
    facing = np.einsum('...c,c->...', surface.normal, cam.direction) >= math.cos(math.radians(max_view_angle))
    candidates = np.flatnonzero(surface.mask & facing)
    if candidates.size:
        n = maps.resolution
        col, row, depth = project(surface.position.reshape(-1, 3)[candidates], cam, n)
        rows, cols, weights = bilinear_taps(col - 0.5, row - 0.5)
        inside = (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
        rows = np.clip(rows, 0, n - 1)
        cols = np.clip(cols, 0, n - 1)
        tolerance = DEPTH_TOLERANCE_PIXELS * 2.0 * cam.ortho_half_extent / n
        visible = inside & maps.mask[rows, cols] & (np.abs(maps.depth[rows, cols] - depth) <= tolerance)
        weights = weights * visible
        total = weights.sum(axis=0)
        seen = total >= 0.5
        values = np.einsum('kn,knc->nc', weights, image[rows, cols, :3]) / np.maximum(total, 1e-12)[:, None]
        texture.reshape(-1, 3)[candidates[seen]] = values[seen]
        mask.reshape(-1)[candidates[seen]] = True
        if refine_iterations > 0 and mask.any():
            texture = _refine(texture, mask, image, maps, refine_iterations)
    normals = np.where(mask[..., None], surface.normal, 0.0).astype(np.float32)
    return PartialTexture(texture, mask, normals, cam.direction)


def _refine(texture: np.ndarray, mask: np.ndarray, image: np.ndarray, maps: ConditionMaps,
            iterations: int) -> np.ndarray:
    """
    Solve pixels = bilinear(texels) for the seen texels with LSQR, starting
    from the gathered values. Pixels that also read unseen texels are left
    out of the system.
    """
    res = mask.shape[0]
    if not maps.mask.any():
        return texture
    rows, cols, weights = _texel_taps(maps.uv[maps.mask].astype(np.float64), res, res)
    column = np.full(res * res, -1, dtype=np.int64)
    column[mask.reshape(-1)] = np.arange(int(mask.sum()))
    unknown = column[rows * res + cols]
    usable = np.all((unknown >= 0) | (weights <= 0.0), axis=0)
    count = int(usable.sum())
    if count == 0:
        return texture
    system = scipy.sparse.coo_matrix(
        (weights[:, usable].ravel(), (np.tile(np.arange(count), 4), np.maximum(unknown[:, usable], 0).ravel())),
        shape=(count, int(mask.sum())),
    ).tocsr()
    pixels = image[maps.mask][usable, :3].astype(np.float64)
    start = texture[mask].astype(np.float64)
    fitted = np.empty_like(start)
    for c in range(3):
        fitted[:, c] = scipy.sparse.linalg.lsqr(system, pixels[:, c], x0=start[:, c], iter_lim=iterations)[0]
    out = texture.copy()
    out[mask] = fitted
    return out


def unproject_views(images: Sequence[np.ndarray], maps: Sequence[ConditionMaps], cams: Sequence[CameraView],
                    surface: TexelSurface, max_view_angle: float = MAX_VIEW_ANGLE) -> List[PartialTexture]:
    if not len(images) == len(maps) == len(cams):
        raise ValueError(f"Got {len(images)} images, {len(maps)} condition maps and {len(cams)} cameras")
    return [unproject_view(img, m, cam, surface, max_view_angle) for img, m, cam in zip(images, maps, cams)]


def view_weight(normals: np.ndarray, view_direction: np.ndarray, exponent: float) -> np.ndarray:
    """max(cos, 0) ** k between surface normal and direction toward the camera."""
    cos = np.einsum('...c,c->...', normals, np.asarray(view_direction, dtype=np.float32))
    return np.maximum(cos, 0.0) ** exponent


def blend(partials: Sequence[PartialTexture], exponent: float = 4.0) -> UVTexture:
    """Visibility-weighted average of the partials; unseen texels stay empty."""
    if not partials:
        raise ValueError("Blending needs at least one partial texture")
    res = partials[0].resolution
    acc = np.zeros((res, res, 3), dtype=np.float64)
    total = np.zeros((res, res), dtype=np.float64)
    for p in partials:
        if p.resolution != res:
            raise ValueError(f"Partial resolutions differ: {p.resolution} vs {res}")
        if p.view_direction is None:
            w = np.ones((res, res))
        else:
            w = view_weight(p.normals, p.view_direction, exponent).astype(np.float64)
        w = np.where(p.mask, w + WEIGHT_FLOOR, 0.0)
        acc += w[..., None] * p.texture
        total += w
    texels = np.where(total[..., None] > 0, acc / np.maximum(total, 1e-300)[..., None], 0.0)
    return UVTexture(res, texels.astype(np.float32), total.astype(np.float32), list(partials))


def bake(images: Sequence[np.ndarray], maps: Sequence[ConditionMaps], cams: Sequence[CameraView], mesh: Mesh,
         texture_resolution: int, exponent: float = 4.0, fill: bool = True,
         max_view_angle: float = MAX_VIEW_ANGLE) -> UVTexture:
    surface = rasterize_texels(mesh, texture_resolution)
    tex = blend(unproject_views(images, maps, cams, surface, max_view_angle), exponent)
    return inpaint(tex) if fill else tex


def _stack(partials: Sequence[PartialTexture]) -> Tuple[np.ndarray, np.ndarray]:
    textures = np.stack([p.texture for p in partials]).astype(np.float64)
    masks = np.stack([p.mask for p in partials])
    return textures, masks


def adjacent_lad(partials: Sequence[PartialTexture]) -> float:
    """Mean per-texel MSE between cyclically adjacent views over their common texels."""
    textures, masks = _stack(partials)
    n = len(partials)
    pairs = [(0, 1)] if n == 2 else [(v, (v + 1) % n) for v in range(n)]
    values = []
    for a, b in pairs:
        common = masks[a] & masks[b]
        if common.any():
            values.append(float(((textures[a] - textures[b]) ** 2).mean(axis=-1)[common].mean()))
    return float(np.mean(values)) if values else 0.0


def compute_lad(partials: Sequence[PartialTexture]) -> LADReport:
    """
    Squared deviation of each partial from the cross-view mean, summed over
    views and normalized by the number of texels seen by at least two views.
    """
    if len(partials) < 2:
        raise ValueError(f"LAD needs at least two partials, got {len(partials)}")
    textures, masks = _stack(partials)
    count = masks.sum(axis=0)
    overlap = int((count >= 2).sum())
    if overlap == 0:
        logger.warning("Partials share no texels; LAD reported as 0")
        return LADReport(0.0, 0, [0.0] * len(partials), no_overlap=True, adjacent_lad=0.0)
    mean = (textures * masks[..., None]).sum(axis=0) / np.maximum(count, 1)[..., None]
    dev = ((textures - mean[None]) ** 2).mean(axis=-1) * masks
    per_view = [float(d.sum() / overlap) for d in dev]
    return LADReport(
        lad=float(sum(per_view)),
        overlap_texel_count=overlap,
        per_view_contributions=per_view,
        adjacent_lad=adjacent_lad(partials),
    )


def inpaint(tex: UVTexture, max_iterations: Optional[int] = None) -> UVTexture:
    """
    Fill unseen texels by repeated dilation: each pass gives every empty texel
    with a filled 4-neighbour the mean of those neighbours. Passes read only
    the previous pass, so the result does not depend on visit order.
    """
    filled = tex.covered.copy()
    if not filled.any():
        raise ValueError("Cannot inpaint a texture with no covered texels")
    values = np.where(filled[..., None], tex.texels, 0.0).astype(np.float64)
    limit = max_iterations or 2 * tex.resolution
    for _ in range(limit):
        if filled.all():
            break
        pv = np.pad(values, ((1, 1), (1, 1), (0, 0)))
        pf = np.pad(filled, 1).astype(np.float64)
        nsum = pv[:-2, 1:-1] + pv[2:, 1:-1] + pv[1:-1, :-2] + pv[1:-1, 2:]
        ncount = pf[:-2, 1:-1] + pf[2:, 1:-1] + pf[1:-1, :-2] + pf[1:-1, 2:]
        grow = ~filled & (ncount > 0)
        if not grow.any():
            break
        values[grow] = nsum[grow] / ncount[grow][:, None]
        filled = filled | grow
    return UVTexture(tex.resolution, values.astype(np.float32), tex.coverage.copy(), tex.per_view_partials)


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup at texel centers; edges clamp."""
    rows, cols, weights = _texel_taps(uv, texture.shape[0], texture.shape[1])
    return (weights[..., None] * texture[rows, cols]).sum(axis=0).astype(np.float32)


def render_textured(mesh: Mesh, texture: np.ndarray, cam: CameraView, resolution: int,
                    clear_color: Tuple[float, float, float] = (0.0, 0.0, 0.0),
                    maps: Optional[ConditionMaps] = None) -> np.ndarray:
    """Unshaded albedo render with bilinear texture lookup."""
    maps = maps if maps is not None else rasterize_conditions(mesh, cam, resolution)
    image = np.empty((maps.resolution, maps.resolution, 3), dtype=np.float32)
    image[:] = np.asarray(clear_color, dtype=np.float32)
    if maps.mask.any():
        image[maps.mask] = sample_texture(texture, maps.uv[maps.mask].astype(np.float64))
    return image


def psnr(a: np.ndarray, b: np.ndarray, mask: Optional[np.ndarray] = None, peak: float = 1.0) -> float:
    diff = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2
    if mask is not None:
        diff = diff[mask]
    if diff.size == 0:
        raise ValueError("PSNR over an empty region")
    mse = float(diff.mean())
    return math.inf if mse == 0 else 10.0 * math.log10(peak ** 2 / mse)
