"""
Procedural meshes and textures for the synthetic dataset.
Every mesh comes with a non-overlapping UV layout and outward counter-clockwise winding.
"""
import math
from typing import Dict, Optional, Tuple

import numpy as np

from mvtex.geometry import Mesh
from mvtex.numerics import RngState, uniform


def make_uv_sphere(segments: int = 32, rings: int = 16, radius: float = 0.5,
                   center: Tuple[float, float, float] = (0.5, 0.5, 0.5)) -> Mesh:
    """Latitude/longitude sphere; u runs with longitude, v from south (0) to north (1)."""
    i = np.arange(rings + 1)[:, None]
    j = np.arange(segments + 1)[None, :]
    theta = np.pi * i / rings
    phi = 2.0 * np.pi * j / segments
    unit = np.stack(np.broadcast_arrays(
        np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)
    ), axis=-1).reshape(-1, 3)
    vertices = np.asarray(center) + radius * unit
    uvs = np.stack(np.broadcast_arrays(j / segments, 1.0 - i / rings), axis=-1).reshape(-1, 2)

    def idx(r, s):
        return r * (segments + 1) + s

    tris = []
    for r in range(rings):
        for s in range(segments):
            a, b, c, d = idx(r, s), idx(r + 1, s), idx(r + 1, s + 1), idx(r, s + 1)
            if r != rings - 1:
                tris.append((a, b, c))
            if r != 0:
                tris.append((a, c, d))
    tri = np.array(tris, dtype=np.int64)
    return Mesh(vertices=vertices, normals=unit.copy(), uvs=uvs.astype(np.float64),
                tri_vertices=tri, tri_normals=tri.copy(), tri_uvs=tri.copy())


# Corners of each face listed counter-clockwise seen from outside.
_CUBE_FACES = [
    ((0, 0, 1), [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]),  # +z
    ((0, 0, -1), [(1, 0, 0), (0, 0, 0), (0, 1, 0), (1, 1, 0)]),  # -z
    ((1, 0, 0), [(1, 0, 1), (1, 0, 0), (1, 1, 0), (1, 1, 1)]),  # +x
    ((-1, 0, 0), [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)]),  # -x
    ((0, 1, 0), [(0, 1, 1), (1, 1, 1), (1, 1, 0), (0, 1, 0)]),  # +y
    ((0, -1, 0), [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)]),  # -y
]


def make_cube(margin: float = 0.01) -> Mesh:
    """Unit cube with its six faces laid out on a 3x2 UV atlas."""
    corners = [(x, y, z) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    lookup = {c: k for k, c in enumerate(corners)}
    uvs, normals, tri_v, tri_t, tri_n = [], [], [], [], []
    for f, (normal, quad) in enumerate(_CUBE_FACES):
        col, row = f % 3, f // 3
        u0, u1 = col / 3 + margin, (col + 1) / 3 - margin
        v0, v1 = 1 - (row + 1) / 2 + margin, 1 - row / 2 - margin
        base = len(uvs)
        uvs.extend([(u0, v0), (u1, v0), (u1, v1), (u0, v1)])
        normals.append(normal)
        q = [lookup[c] for c in quad]
        for a, b, c in ((0, 1, 2), (0, 2, 3)):
            tri_v.append((q[a], q[b], q[c]))
            tri_t.append((base + a, base + b, base + c))
            tri_n.append((f, f, f))
    return Mesh(
        vertices=np.asarray(corners, dtype=np.float64),
        normals=np.asarray(normals, dtype=np.float64),
        uvs=np.asarray(uvs, dtype=np.float64),
        tri_vertices=np.asarray(tri_v, dtype=np.int64),
        tri_normals=np.asarray(tri_n, dtype=np.int64),
        tri_uvs=np.asarray(tri_t, dtype=np.int64),
    )


def make_torus(major: float = 0.35, minor: float = 0.15, segments: int = 32, rings: int = 16,
               center: Tuple[float, float, float] = (0.5, 0.5, 0.5)) -> Mesh:
    """Torus around the world y axis; u follows the ring, v the tube."""
    i = np.arange(rings + 1)[:, None]
    j = np.arange(segments + 1)[None, :]
    theta = 2.0 * np.pi * i / rings
    phi = 2.0 * np.pi * j / segments
    normal = np.stack(np.broadcast_arrays(
        np.cos(theta) * np.sin(phi), np.sin(theta), np.cos(theta) * np.cos(phi)
    ), axis=-1).reshape(-1, 3)
    ring = np.stack(np.broadcast_arrays(np.sin(phi), 0.0 * theta, np.cos(phi)), axis=-1).reshape(-1, 3)
    vertices = np.asarray(center) + major * ring + minor * normal
    uvs = np.stack(np.broadcast_arrays(j / segments, i / rings), axis=-1).reshape(-1, 2)

    def idx(r, s):
        return r * (segments + 1) + s

    tris = []
    for r in range(rings):
        for s in range(segments):
            a, b, c, d = idx(r, s), idx(r, s + 1), idx(r + 1, s + 1), idx(r + 1, s)
            tris.extend([(a, b, c), (a, c, d)])
    tri = np.array(tris, dtype=np.int64)
    return Mesh(vertices=vertices, normals=normal, uvs=uvs.astype(np.float64),
                tri_vertices=tri, tri_normals=tri.copy(), tri_uvs=tri.copy())


MESH_BUILDERS = {
    'cube': make_cube,
    'sphere': make_uv_sphere,
    'torus': make_torus,
}


def random_palette(rng: RngState, low: float = 0.15, high: float = 0.85) -> np.ndarray:
    """Two RGB colours drawn from the stream."""
    draw = uniform(rng, (2, 3)).numpy().astype(np.float64)
    return (low + (high - low) * draw).astype(np.float32)


class BasePattern:
    """Base class for UV-space texture patterns."""

    def __init__(self, palette: np.ndarray):
        self.palette = np.asarray(palette, dtype=np.float32)
        if self.palette.shape != (2, 3):
            raise ValueError(f"Palette must hold two RGB colours, got shape {self.palette.shape}")

    def weights(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Mixing weight toward the second colour for each texel centre."""
        raise NotImplementedError

    def render(self, resolution: int) -> np.ndarray:
        centers = (np.arange(resolution) + 0.5) / resolution
        u, v = np.meshgrid(centers, 1.0 - centers)
        w = self.weights(u, v)[..., None]
        return ((1.0 - w) * self.palette[0] + w * self.palette[1]).astype(np.float32)


class CheckerPattern(BasePattern):
    def __init__(self, palette: np.ndarray, cells: int = 4):
        super().__init__(palette)
        self.cells = cells

    def weights(self, u, v):
        return ((np.floor(u * self.cells) + np.floor(v * self.cells)) % 2).astype(np.float64)


class GradientPattern(BasePattern):
    def weights(self, u, v):
        return 0.5 * (u + v)


class StripePattern(BasePattern):
    def __init__(self, palette: np.ndarray, stripes: int = 6):
        super().__init__(palette)
        self.stripes = stripes

    def weights(self, u, v):
        return (np.floor(v * self.stripes) % 2).astype(np.float64)


def get_pattern(name: str, palette: np.ndarray, **kwargs) -> BasePattern:
    """Get the pattern class registered under `name`."""
    patterns = {
        'checker': CheckerPattern,
        'gradient': GradientPattern,
        'stripes': StripePattern,
    }

    pattern_class = patterns.get(name)
    if pattern_class is None:
        raise ValueError(f"Unknown pattern: {name}")
    return pattern_class(palette, **kwargs)


def make_pattern_texture(name: str, resolution: int, rng: Optional[RngState] = None,
                         palette: Optional[np.ndarray] = None, **kwargs) -> np.ndarray:
    """(resolution, resolution, 3) float32 texture in [0, 1]."""
    if palette is None:
        if rng is None:
            raise ValueError("Either a palette or an rng is required")
        palette = random_palette(rng)
    return get_pattern(name, palette, **kwargs).render(resolution)


PATTERN_NAMES: Dict[str, str] = {'cube': 'checker', 'sphere': 'gradient', 'torus': 'stripes'}
