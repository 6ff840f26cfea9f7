"""
Mesh ingestion, canonical normalization, orthographic cameras and a software
rasterizer that emits per-view condition maps.

World frame: y is up, the canonical box is [0,1]^3 centered at (0.5, 0.5, 0.5).
Pixel (row, col) has its center at (row + 0.5, col + 0.5); row 0 is the top.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND = -1.0
EYE_DISTANCE = 2.0
MAX_VIEWS = 12
CANONICAL_CENTER = np.array([0.5, 0.5, 0.5])

# Edge inclusion tolerance for barycentric coverage tests
_COVERAGE_EPS = 1e-9


@dataclass
class Mesh:
    """Triangle mesh with separate position / normal / uv index streams."""
    vertices: np.ndarray      # (N, 3)
    normals: np.ndarray       # (Nn, 3) unit length
    uvs: np.ndarray           # (Nt, 2)
    tri_vertices: np.ndarray  # (T, 3)
    tri_normals: np.ndarray   # (T, 3)
    tri_uvs: np.ndarray       # (T, 3)

    @property
    def triangle_count(self) -> int:
        return int(self.tri_vertices.shape[0])

    def __repr__(self):
        return f'<Mesh {len(self.vertices)} vertices, {self.triangle_count} triangles>'


def _resolve_index(token: str, count: int, lineno: int) -> int:
    idx = int(token)
    resolved = idx - 1 if idx > 0 else count + idx
    if idx == 0 or not 0 <= resolved < count:
        raise ValueError(f"Face index {idx} out of range at line {lineno}")
    return resolved


def _parse_corner(token: str, counts: Tuple[int, int, int], lineno: int):
    parts = token.split('/')
    vi = _resolve_index(parts[0], counts[0], lineno)
    ti = _resolve_index(parts[1], counts[1], lineno) if len(parts) > 1 and parts[1] else None
    ni = _resolve_index(parts[2], counts[2], lineno) if len(parts) > 2 and parts[2] else None
    return vi, ti, ni


def vertex_normals(vertices: np.ndarray, tri_vertices: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals (unnormalized face cross products summed per vertex)."""
    p0, p1, p2 = (vertices[tri_vertices[:, k]] for k in range(3))
    face = np.cross(p1 - p0, p2 - p0)
    acc = np.zeros_like(vertices, dtype=np.float64)
    for k in range(3):
        np.add.at(acc, tri_vertices[:, k], face)
    return _normalize_rows(acc)


def _normalize_rows(v: np.ndarray, fallback=(0.0, 1.0, 0.0)) -> np.ndarray:
    length = np.linalg.norm(v, axis=-1, keepdims=True)
    out = np.where(length > 1e-12, v / np.maximum(length, 1e-12), np.asarray(fallback, dtype=np.float64))
    return out


def load_mesh(path: str) -> Mesh:
    """
    Parse a Wavefront .obj triangle mesh.

    Polygons are fan-triangulated. UVs are required; normals are computed
    as area-weighted vertex normals when the file has none.
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.readlines()
    except (OSError, UnicodeDecodeError) as e:
        raise ValueError(f"Could not read mesh file {path}: {e}") from e

    positions, uvs, normals, faces = [], [], [], []
    for lineno, raw in enumerate(lines, 1):
        parts = raw.split('#', 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == 'v':
                positions.append([float(x) for x in parts[1:4]])
            elif tag == 'vt':
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == 'vn':
                normals.append([float(x) for x in parts[1:4]])
            elif tag == 'f':
                counts = (len(positions), len(uvs), len(normals))
                corners = [_parse_corner(tok, counts, lineno) for tok in parts[1:]]
                if len(corners) < 3:
                    raise ValueError(f"Face with fewer than 3 corners at line {lineno}")
                faces.append(corners)
        except (IndexError, TypeError) as e:
            raise ValueError(f"Malformed '{tag}' record at line {lineno}") from e

    if not positions or not faces:
        raise ValueError(f"Mesh {path} is empty")
    if not uvs or any(c[1] is None for face in faces for c in face):
        raise ValueError("mesh lacks UV parameterization")

    tris = []
    for corners in faces:
        for k in range(1, len(corners) - 1):
            tris.append((corners[0], corners[k], corners[k + 1]))

    tri_vertices = np.array([[c[0] for c in t] for t in tris], dtype=np.int64)
    tri_uvs = np.array([[c[1] for c in t] for t in tris], dtype=np.int64)
    vertices = np.asarray(positions, dtype=np.float64)

    if normals and all(c[2] is not None for face in faces for c in face):
        normal_array = _normalize_rows(np.asarray(normals, dtype=np.float64))
        tri_normals = np.array([[c[2] for c in t] for t in tris], dtype=np.int64)
    else:
        normal_array = vertex_normals(vertices, tri_vertices)
        tri_normals = tri_vertices.copy()

    mesh = Mesh(
        vertices=vertices,
        normals=normal_array,
        uvs=np.asarray(uvs, dtype=np.float64),
        tri_vertices=tri_vertices,
        tri_normals=tri_normals,
        tri_uvs=tri_uvs,
    )
    logger.debug("Loaded %r from %s", mesh, path)
    return mesh


def save_mesh(mesh: Mesh, path: str):
    """Write a mesh as Wavefront .obj with v/vt/vn corners."""
    lines = []
    lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices)
    lines.extend(f"vt {u:.9g} {v:.9g}" for u, v in mesh.uvs)
    lines.extend(f"vn {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.normals)
    for tv, tt, tn in zip(mesh.tri_vertices, mesh.tri_uvs, mesh.tri_normals):
        corners = ' '.join(f"{v + 1}/{t + 1}/{n + 1}" for v, t, n in zip(tv, tt, tn))
        lines.append(f"f {corners}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def normalize_to_canonical(mesh: Mesh) -> Mesh:
    """Uniformly scale and translate the bounding box into [0,1]^3, centered at 0.5."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 1e-12:
        raise ValueError("Mesh bounding box has zero extent")
    center = (lo + hi) / 2.0
    vertices = (mesh.vertices - center) / extent + CANONICAL_CENTER
    return replace(mesh, vertices=vertices)


@dataclass(eq=False)
class CameraView:
    """Orthographic camera orbiting the canonical center."""
    azimuth: float
    elevation: float
    ortho_half_extent: float
    view_matrix: np.ndarray
    is_reference_pose: bool = False

    @property
    def rotation(self) -> np.ndarray:
        return self.view_matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.view_matrix[:3, 3]

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from the canonical center toward the camera."""
        return self.view_matrix[2, :3].copy()

    @property
    def eye(self) -> np.ndarray:
        return CANONICAL_CENTER + EYE_DISTANCE * self.direction

    def to_dict(self) -> dict:
        return {
            'azimuth': self.azimuth,
            'elevation': self.elevation,
            'half_extent': self.ortho_half_extent,
            'is_reference_pose': self.is_reference_pose,
        }

    def __repr__(self):
        return f'<CameraView az={self.azimuth:g} el={self.elevation:g}>'


def make_camera(azimuth: float, elevation: float, half_extent: float,
                is_reference_pose: bool = False) -> CameraView:
    if not abs(elevation) < 89.0:
        raise ValueError(f"Elevation must lie in (-89, 89) degrees, got {elevation}")
    if half_extent <= 0:
        raise ValueError(f"Half extent must be positive, got {half_extent}")
    a, e = math.radians(azimuth), math.radians(elevation)
    back = np.array([math.sin(a) * math.cos(e), math.sin(e), math.cos(a) * math.cos(e)])
    right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    rotation = np.stack([right, up, back])
    eye = CANONICAL_CENTER + EYE_DISTANCE * back
    view = np.eye(4)
    view[:3, :3] = rotation
    view[:3, 3] = -rotation @ eye
    return CameraView(float(azimuth), float(elevation), float(half_extent), view, is_reference_pose)


def camera_from_dict(data: dict) -> CameraView:
    return make_camera(data['azimuth'], data['elevation'], data['half_extent'],
                       bool(data.get('is_reference_pose', False)))


def make_camera_rig(n_views: int, elevation: float = 20.0, half_extent: float = 0.6) -> List[CameraView]:
    """Evenly spaced azimuths starting at the 0 degree reference pose."""
    if not 1 <= n_views <= MAX_VIEWS:
        raise ValueError(f"n_views must be between 1 and {MAX_VIEWS}, got {n_views}")
    return [
        make_camera(360.0 * k / n_views, elevation, half_extent, is_reference_pose=(k == 0))
        for k in range(n_views)
    ]


@dataclass(eq=False)
class ConditionMaps:
    """Per-view rasterized geometry. Background pixels hold -1 in every channel."""
    resolution: int
    ccm: np.ndarray      # (H, W, 3)
    normal: np.ndarray   # (H, W, 3)
    mask: np.ndarray     # (H, W) bool
    uv: np.ndarray       # (H, W, 2)
    depth: np.ndarray    # (H, W)
    view_direction: Optional[np.ndarray] = None

    def stacked(self) -> np.ndarray:
        """(H, W, 10) float32: ccm, normal, mask, uv, depth."""
        return np.concatenate([
            self.ccm, self.normal, self.mask[..., None].astype(np.float32),
            self.uv, self.depth[..., None],
        ], axis=-1).astype(np.float32)

    @classmethod
    def from_stacked(cls, arr: np.ndarray, view_direction: Optional[np.ndarray] = None) -> 'ConditionMaps':
        if arr.ndim != 3 or arr.shape[-1] != 10:
            raise ValueError(f"Expected (H, W, 10) condition array, got {arr.shape}")
        return cls(
            resolution=int(arr.shape[0]),
            ccm=arr[..., 0:3].copy(),
            normal=arr[..., 3:6].copy(),
            mask=arr[..., 6] > 0.5,
            uv=arr[..., 7:9].copy(),
            depth=arr[..., 9].copy(),
            view_direction=view_direction,
        )

    def geometry_channels(self) -> np.ndarray:
        """(7, H, W) network input: ccm, normal, mask."""
        return np.concatenate([
            self.ccm, self.normal, self.mask[..., None].astype(np.float32),
        ], axis=-1).transpose(2, 0, 1).astype(np.float32)


def _camera_space(points: np.ndarray, cam: CameraView) -> np.ndarray:
    return points @ cam.rotation.T + cam.translation


def project(points: np.ndarray, cam: CameraView, resolution: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (col, row) image coordinates and depth; pixel centers sit at half-integers."""
    h = cam.ortho_half_extent
    p = _camera_space(points, cam)
    col = (p[..., 0] / h + 1.0) * 0.5 * resolution
    row = (1.0 - p[..., 1] / h) * 0.5 * resolution
    return col, row, -p[..., 2]


def _cover_triangle(cols, rows, res: int):
    """
    Barycentric coverage of one triangle over the sample centers of a
    res x res grid. Returns (window, weights (h, w, 3), inside) or None.
    """
    c0, c1, c2 = cols
    r0, r1, r2 = rows
    cmin = max(int(math.floor(min(c0, c1, c2) - 0.5)), 0)
    cmax = min(int(math.ceil(max(c0, c1, c2) - 0.5)), res - 1)
    rmin = max(int(math.floor(min(r0, r1, r2) - 0.5)), 0)
    rmax = min(int(math.ceil(max(r0, r1, r2) - 0.5)), res - 1)
    if cmin > cmax or rmin > rmax:
        return None
    d = (r1 - r2) * (c0 - c2) + (c2 - c1) * (r0 - r2)
    if abs(d) < 1e-12:
        return None
    pc, pr = np.meshgrid(np.arange(cmin, cmax + 1) + 0.5, np.arange(rmin, rmax + 1) + 0.5)
    w0 = ((r1 - r2) * (pc - c2) + (c2 - c1) * (pr - r2)) / d
    w1 = ((r2 - r0) * (pc - c2) + (c0 - c2) * (pr - r2)) / d
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -_COVERAGE_EPS) & (w1 >= -_COVERAGE_EPS) & (w2 >= -_COVERAGE_EPS)
    if not inside.any():
        return None
    window = (slice(rmin, rmax + 1), slice(cmin, cmax + 1))
    return window, np.stack([w0, w1, w2], axis=-1), inside


def rasterize_ids(mesh: Mesh, cam: CameraView, resolution: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Z-buffered coverage pass.

    Returns (face id per pixel, -1 for background), barycentric weights and
    depth. Back faces are culled; on equal depth the lower face id wins.
    """
    res = int(resolution)
    p = _camera_space(mesh.vertices, cam)
    col, row, depth = project(mesh.vertices, cam, res)

    zbuf = np.full((res, res), np.inf)
    face_ids = np.full((res, res), -1, dtype=np.int64)
    bary = np.zeros((res, res, 3))

    for f, tri in enumerate(mesh.tri_vertices):
        i0, i1, i2 = tri
        area = ((p[i1, 0] - p[i0, 0]) * (p[i2, 1] - p[i0, 1])
                - (p[i2, 0] - p[i0, 0]) * (p[i1, 1] - p[i0, 1]))
        if area <= 1e-12:
            continue
        covered = _cover_triangle(col[tri], row[tri], res)
        if covered is None:
            continue
        window, w, inside = covered
        z = w @ depth[tri]
        win = inside & (z < zbuf[window])
        zbuf[window][win] = z[win]
        face_ids[window][win] = f
        bary[window][win] = w[win]

    return face_ids, bary, zbuf


def _interpolate(values: np.ndarray, index: np.ndarray, faces: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.einsum('nk,nkd->nd', weights, values[index[faces]])


def rasterize_conditions(mesh: Mesh, cam: CameraView, resolution: int) -> ConditionMaps:
    """Render CCM, world normal, coverage mask, texel UV and depth for one view."""
    res = int(resolution)
    face_ids, bary, zbuf = rasterize_ids(mesh, cam, res)
    mask = face_ids >= 0

    ccm = np.full((res, res, 3), BACKGROUND, dtype=np.float32)
    normal = np.full((res, res, 3), BACKGROUND, dtype=np.float32)
    uv = np.full((res, res, 2), BACKGROUND, dtype=np.float32)
    depth = np.full((res, res), BACKGROUND, dtype=np.float32)

    if mask.any():
        faces = face_ids[mask]
        w = bary[mask]
        pos = _interpolate(mesh.vertices, mesh.tri_vertices, faces, w)
        nrm = _interpolate(mesh.normals, mesh.tri_normals, faces, w)
        p0, p1, p2 = (mesh.vertices[mesh.tri_vertices[faces, k]] for k in range(3))
        face_normal = _normalize_rows(np.cross(p1 - p0, p2 - p0))
        length = np.linalg.norm(nrm, axis=-1, keepdims=True)
        nrm = np.where(length > 1e-8, nrm / np.maximum(length, 1e-8), face_normal)
        ccm[mask] = np.clip(pos, 0.0, 1.0)
        normal[mask] = nrm
        uv[mask] = _interpolate(mesh.uvs, mesh.tri_uvs, faces, w)
        depth[mask] = zbuf[mask]
    else:
        logger.warning("View %r covers no pixels", cam)

    return ConditionMaps(res, ccm, normal, mask, uv, depth, view_direction=cam.direction)


@dataclass(eq=False)
class TexelSurface:
    """Surface point and normal under every texel center; texels outside all UV triangles are unmasked."""
    resolution: int
    position: np.ndarray  # (H, W, 3)
    normal: np.ndarray    # (H, W, 3)
    mask: np.ndarray      # (H, W) bool


def rasterize_texels(mesh: Mesh, resolution: int) -> TexelSurface:
    """
    Rasterize the mesh in UV space. Texel (row, col) has its center at
    u = (col + 0.5) / W, v = 1 - (row + 0.5) / H; overlapping charts keep
    the lower face id.
    """
    res = int(resolution)
    face_ids = np.full((res, res), -1, dtype=np.int64)
    bary = np.zeros((res, res, 3))
    col = mesh.uvs[:, 0] * res
    row = (1.0 - mesh.uvs[:, 1]) * res
    for f, tri in enumerate(mesh.tri_uvs):
        covered = _cover_triangle(col[tri], row[tri], res)
        if covered is None:
            continue
        window, w, inside = covered
        win = inside & (face_ids[window] < 0)
        face_ids[window][win] = f
        bary[window][win] = w[win]

    mask = face_ids >= 0
    position = np.zeros((res, res, 3))
    normal = np.zeros((res, res, 3))
    if mask.any():
        faces = face_ids[mask]
        w = bary[mask]
        position[mask] = _interpolate(mesh.vertices, mesh.tri_vertices, faces, w)
        p0, p1, p2 = (mesh.vertices[mesh.tri_vertices[faces, k]] for k in range(3))
        face_normal = _normalize_rows(np.cross(p1 - p0, p2 - p0))
        nrm = _interpolate(mesh.normals, mesh.tri_normals, faces, w)
        length = np.linalg.norm(nrm, axis=-1, keepdims=True)
        normal[mask] = np.where(length > 1e-8, nrm / np.maximum(length, 1e-8), face_normal)
    else:
        logger.warning("Mesh UV layout covers no texel centers at %d", res)
    return TexelSurface(res, position, normal, mask)


def unproject_depth(maps: ConditionMaps, cam: CameraView) -> np.ndarray:
    """World position of every covered pixel recovered from its depth; background is -1."""
    res = maps.resolution
    h = cam.ortho_half_extent
    centers = (np.arange(res) + 0.5) / res
    x = (centers * 2.0 - 1.0) * h
    y = (1.0 - centers * 2.0) * h
    xx, yy = np.meshgrid(x, y)
    p_cam = np.stack([xx, yy, -maps.depth.astype(np.float64)], axis=-1)
    world = (p_cam - cam.translation) @ cam.rotation
    return np.where(maps.mask[..., None], world, BACKGROUND).astype(np.float32)


def downsample_conditions(maps: ConditionMaps, target_resolution: int) -> ConditionMaps:
    """Nearest (top-left) sampling; never averages, so every CCM value is a real surface point."""
    src = maps.resolution
    if target_resolution < 1 or src % target_resolution:
        raise ValueError(f"Cannot downsample {src} to {target_resolution}: sizes are not divisible")
    f = src // target_resolution
    pick = (slice(None, None, f), slice(None, None, f))
    return ConditionMaps(
        resolution=target_resolution,
        ccm=maps.ccm[pick].copy(),
        normal=maps.normal[pick].copy(),
        mask=maps.mask[pick].copy(),
        uv=maps.uv[pick].copy(),
        depth=maps.depth[pick].copy(),
        view_direction=maps.view_direction,
    )
