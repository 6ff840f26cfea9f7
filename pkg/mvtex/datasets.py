"""
Synthetic multi-view dataset: procedural meshes with procedural textures,
rendered views, condition maps and a checksummed manifest.
"""
import hashlib
import logging
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from mvtex.baking import render_textured
from mvtex.denoiser import TrainingBatch
from mvtex.geometry import (
    Mesh, load_mesh, make_camera_rig, normalize_to_canonical, rasterize_conditions, save_mesh,
)
from mvtex.image_io import read_condition_maps, read_png, write_condition_maps, write_png
from mvtex.ledger import file_sha256
from mvtex.numerics import RngState, randint, spawn
from mvtex.procedural import MESH_BUILDERS, PATTERN_NAMES, make_pattern_texture
from mvtex.run_config import RunConfig
from mvtex.voxelmap import build_phase_grids, build_pyramid, identity_phase_grids

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.csv'
MANIFEST_CHECKSUM = 'manifest.sha256'
MANIFEST_COLUMNS = [
    'sample', 'mesh', 'pattern', 'view', 'azimuth', 'elevation', 'seed',
    'image', 'conditions', 'sha256', 'config_hash',
]


def dataset_meshes(config: RunConfig) -> List[Tuple[str, Mesh, str]]:
    """(name, canonical mesh, pattern) for the procedural set plus any configured files."""
    meshes = [(name, normalize_to_canonical(builder()), PATTERN_NAMES[name])
              for name, builder in MESH_BUILDERS.items()]
    for path in config.mesh_paths:
        name = os.path.splitext(os.path.basename(path))[0]
        meshes.append((name, normalize_to_canonical(load_mesh(path)), 'checker'))
    return meshes


def generate_dataset(config: RunConfig, out_dir: str, rng: RngState,
                     on_file: Optional[Callable[[str, str], None]] = None) -> pd.DataFrame:
    """Write the dataset under `out_dir` and return the manifest."""
    try:
        os.makedirs(os.path.join(out_dir, 'meshes'), exist_ok=True)
        os.makedirs(os.path.join(out_dir, 'samples'), exist_ok=True)
    except OSError as e:
        raise ValueError(f"Cannot write dataset to {out_dir}: {e}") from e

    def emit(path: str, kind: str):
        if on_file is not None:
            on_file(path, kind)

    cams = make_camera_rig(config.n_views, config.elevation, config.half_extent)
    rows = []
    for name, mesh, pattern in dataset_meshes(config):
        mesh_path = os.path.join(out_dir, 'meshes', f"{name}.obj")
        save_mesh(mesh, mesh_path)
        emit(mesh_path, 'mesh')
        maps = [rasterize_conditions(mesh, cam, config.resolution) for cam in cams]
        for variant in range(config.variants):
            sample = f"{name}_{variant:02d}"
            sample_rng = spawn(rng, sample)
            texture = make_pattern_texture(pattern, config.texture_resolution, rng=sample_rng)
            sample_dir = os.path.join(out_dir, 'samples', sample)
            os.makedirs(sample_dir, exist_ok=True)
            tex_path = write_png(texture, os.path.join(sample_dir, 'texture.png'), config.config_hash)
            emit(tex_path, 'texture')
            for k, (cam, m) in enumerate(zip(cams, maps)):
                image = render_textured(mesh, texture, cam, config.resolution, maps=m)
                image_path = write_png(image, os.path.join(sample_dir, f"view_{k:02d}.png"), config.config_hash)
                _, cond_path = write_condition_maps(m, os.path.join(sample_dir, f"cond_{k:02d}"), config.config_hash)
                emit(image_path, 'image')
                emit(cond_path, 'conditions')
                rows.append({
                    'sample': sample,
                    'mesh': os.path.relpath(mesh_path, out_dir),
                    'pattern': pattern,
                    'view': k,
                    'azimuth': cam.azimuth,
                    'elevation': cam.elevation,
                    'seed': sample_rng.seed,
                    'image': os.path.relpath(image_path, out_dir),
                    'conditions': os.path.relpath(cond_path, out_dir),
                    'sha256': file_sha256(image_path) + ':' + file_sha256(cond_path),
                    'config_hash': config.config_hash,
                })

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest_path = os.path.join(out_dir, MANIFEST)
    manifest.to_csv(manifest_path, index=False)
    with open(os.path.join(out_dir, MANIFEST_CHECKSUM), 'w') as f:
        f.write(file_sha256(manifest_path) + '\n')
    emit(manifest_path, 'manifest')
    logger.info("Dataset written: %d samples, %d views each, to %s",
                manifest['sample'].nunique(), config.n_views, out_dir)
    return manifest


def load_manifest(dataset_dir: str, verify_files: bool = True) -> pd.DataFrame:
    """Read the manifest, verifying its checksum and every referenced file."""
    manifest_path = os.path.join(dataset_dir, MANIFEST)
    checksum_path = os.path.join(dataset_dir, MANIFEST_CHECKSUM)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"No dataset manifest at {manifest_path}")
    if not os.path.exists(checksum_path):
        raise ValueError(f"Manifest checksum missing: {checksum_path}")
    with open(checksum_path) as f:
        expected = f.read().strip()
    if file_sha256(manifest_path) != expected:
        raise ValueError(f"Manifest checksum mismatch in {dataset_dir}")
    manifest = pd.read_csv(manifest_path)
    missing = set(MANIFEST_COLUMNS) - set(manifest.columns)
    if missing:
        raise ValueError(f"Manifest is missing columns: {sorted(missing)}")
    if verify_files:
        for row in manifest.itertuples():
            image_path = os.path.join(dataset_dir, row.image)
            cond_path = os.path.join(dataset_dir, row.conditions)
            actual = file_sha256(image_path) + ':' + file_sha256(cond_path)
            if actual != row.sha256:
                raise ValueError(f"Checksum mismatch for sample {row.sample} view {row.view}")
    return manifest


@dataclass
class TrainingSet:
    clean: torch.Tensor          # (N, V, 3, H, W) in [-1, 1]
    cond: torch.Tensor           # (N, V, 7, H, W)
    phases: List[torch.Tensor]   # per level (N, V, H_l, W_l, 3)
    samples: List[str]

    def __len__(self):
        return int(self.clean.shape[0])

    def batch(self, index: torch.Tensor) -> TrainingBatch:
        return TrainingBatch(
            clean=self.clean[index],
            cond=self.cond[index],
            phases=[p[index] for p in self.phases],
            reference=self.clean[index, 0],  # view 0 is the reference pose
        )

    def batch_source(self, batch_size: int):
        def next_batch(rng: RngState, step: int) -> TrainingBatch:
            return self.batch(randint(rng, len(self), (batch_size,)))
        return next_batch


def load_training_set(dataset_dir: str, config: RunConfig, level_resolutions: List[int]) -> TrainingSet:
    manifest = load_manifest(dataset_dir)
    pyramid = build_pyramid(level_resolutions)
    clean, cond, phases, samples = [], [], [[] for _ in level_resolutions], []
    for sample, rows in manifest.groupby('sample', sort=True):
        rows = rows.sort_values('view')
        if len(rows) != config.n_views:
            raise ValueError(f"Sample {sample} has {len(rows)} views, config expects {config.n_views}")
        images = [read_png(os.path.join(dataset_dir, p)) for p in rows['image']]
        maps = [read_condition_maps(os.path.join(dataset_dir, p)) for p in rows['conditions']]
        if images[0].shape[0] != config.resolution:
            raise ValueError(f"Dataset resolution {images[0].shape[0]} does not match config {config.resolution}")
        clean.append(np.stack([img.transpose(2, 0, 1) * 2.0 - 1.0 for img in images]))
        cond.append(np.stack([m.geometry_channels() for m in maps]))
        grids = (build_phase_grids(maps, pyramid) if config.use_rope
                 else identity_phase_grids(len(maps), pyramid))
        for level, g in enumerate(grids):
            phases[level].append(g)
        samples.append(sample)
    if not samples:
        raise ValueError(f"Dataset at {dataset_dir} has no samples")
    return TrainingSet(
        clean=torch.from_numpy(np.stack(clean).astype(np.float32)),
        cond=torch.from_numpy(np.stack(cond).astype(np.float32)),
        phases=[torch.stack(level) for level in phases],
        samples=samples,
    )


def manifest_digest(dataset_dir: str) -> str:
    """SHA-256 over every file of the dataset in sorted path order."""
    digest = hashlib.sha256()
    for root, _, files in sorted(os.walk(dataset_dir)):
        for name in sorted(files):
            path = os.path.join(root, name)
            digest.update(os.path.relpath(path, dataset_dir).encode('utf-8'))
            digest.update(file_sha256(path).encode('utf-8'))
    return digest.hexdigest()
