"""
Reading and writing images, condition maps and float sidecars.
PNG files carry the producing config hash in a text chunk.
"""
import json
import os
from typing import Optional, Tuple

import numpy as np
from PIL import Image, PngImagePlugin

from mvtex.geometry import ConditionMaps


def read_png(filepath: str) -> np.ndarray:
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"Image not found: {filepath}")
    with Image.open(filepath) as img:
        rgb = img.convert('RGB')
        return np.asarray(rgb, dtype=np.float32) / 255.0


def read_png_hash(filepath: str) -> Optional[str]:
    with Image.open(filepath) as img:
        return img.info.get('config_hash')


def _pnginfo(config_hash: Optional[str]) -> PngImagePlugin.PngInfo:
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text('config_hash', config_hash)
    return info


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(image: np.ndarray, filepath: str, config_hash: Optional[str] = None,
              alpha: Optional[np.ndarray] = None) -> str:
    """Write an (H, W, 3) float image in [0, 1]; `alpha` (H, W) bool adds an alpha channel."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"Expected an (H, W, 3) image, got {image.shape}")
    data = to_uint8(image)
    if alpha is not None:
        data = np.concatenate([data, (alpha.astype(np.uint8) * 255)[..., None]], axis=-1)
    Image.fromarray(data).save(filepath, pnginfo=_pnginfo(config_hash))
    return filepath


def write_png16(grid: np.ndarray, filepath: str, config_hash: Optional[str] = None) -> str:
    """Write a 2-D integer grid as a 16-bit grayscale PNG."""
    if grid.ndim != 2:
        raise ValueError(f"Expected a 2-D grid, got {grid.shape}")
    if grid.min() < 0 or grid.max() > 0xFFFF:
        raise ValueError("Grid values do not fit in 16 bits")
    Image.fromarray(np.ascontiguousarray(grid, dtype=np.uint16)).save(filepath, pnginfo=_pnginfo(config_hash))
    return filepath


def read_png16(filepath: str) -> np.ndarray:
    with Image.open(filepath) as img:
        return np.asarray(img, dtype=np.int64)


def _meta_path(filepath: str) -> str:
    return os.path.splitext(filepath)[0] + '.json'


def write_array(arr: np.ndarray, filepath: str, config_hash: Optional[str] = None, **meta) -> str:
    """Save a lossless `.npy` sidecar plus a small JSON metadata companion."""
    np.save(filepath, np.ascontiguousarray(arr), allow_pickle=False)
    record = {'config_hash': config_hash, 'shape': list(arr.shape), 'dtype': str(arr.dtype)}
    record.update(meta)
    with open(_meta_path(filepath), 'w') as f:
        json.dump(record, f, indent=2, sort_keys=True)
    return filepath


def read_array(filepath: str) -> np.ndarray:
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"Array not found: {filepath}")
    return np.load(filepath, allow_pickle=False)


def read_array_meta(filepath: str) -> dict:
    path = _meta_path(filepath)
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return json.load(f)


def write_condition_maps(maps: ConditionMaps, stem: str, config_hash: Optional[str] = None) -> Tuple[str, str]:
    """
    PNG preview (CCM in RGB, mask in alpha, background black) and lossless sidecar.
    Returns (png path, npy path).
    """
    preview = np.where(maps.mask[..., None], maps.ccm, 0.0)
    png_path = write_png(preview, stem + '.png', config_hash, alpha=maps.mask)
    meta = {}
    if maps.view_direction is not None:
        meta['view_direction'] = [float(x) for x in maps.view_direction]
    npy_path = write_array(maps.stacked(), stem + '.npy', config_hash, **meta)
    return png_path, npy_path


def read_condition_maps(npy_path: str) -> ConditionMaps:
    arr = read_array(npy_path)
    meta = read_array_meta(npy_path)
    direction = meta.get('view_direction')
    return ConditionMaps.from_stacked(arr, np.asarray(direction) if direction is not None else None)
