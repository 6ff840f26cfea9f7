"""
Command-line surface.

Every command validates its RunConfig first, records a ledger row, and maps
failures to exit codes: 1 unexpected error, 2 invalid input, 3 numerical failure, 4 LAD threshold.
"""
import functools
import glob
import json
import os
import sys
from typing import Dict, List, Optional

import click
import numpy as np
import pandas as pd
from flask import Blueprint, current_app

from mvtex.baking import PartialTexture, compute_lad
from mvtex.checkpoint import load_state, save_state
from mvtex.datasets import generate_dataset, load_training_set
from mvtex.denoiser import DenoiserConfig, DenoiserState, NoiseSchedule, train
from mvtex.geometry import (
    camera_from_dict, downsample_conditions, load_mesh, normalize_to_canonical, rasterize_conditions,
)
from mvtex.image_io import (
    read_array, read_array_meta, read_png, write_array, write_condition_maps, write_png,
)
from mvtex.ledger import LedgerService
from mvtex.numerics import NumericalError, seeded_rng, spawn
from mvtex.pipeline import bake_views, generate_views, prepare_views, reference_tensor
from mvtex.run_config import RunConfig
from mvtex.voxelmap import build_pyramid, pixel_to_voxel, save_phase_grid

commands = Blueprint('commands', __name__, cli_group=None)

EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
EXIT_THRESHOLD = 4

# rgb, coverage mask, world normal
PARTIAL_CHANNELS = 7


class ThresholdExceeded(Exception):
    """LAD above the configured threshold."""

    def __init__(self, lad: float, threshold: float):
        super().__init__(f"LAD {lad:.6f} exceeds threshold {threshold:.6f}")
        self.lad = lad
        self.threshold = threshold


def _output_path(path: Optional[str], default: str) -> str:
    path = path or default
    if os.path.isabs(path):
        return path
    return os.path.join(current_app.config['OUTPUT_ROOT'], path)


def _load_config(config_path: Optional[str], **overrides) -> RunConfig:
    return RunConfig.load(config_path, overrides)


class RunContext:
    """Ledger bookkeeping for one command invocation."""

    def __init__(self, command: str, config: RunConfig, output_path: str):
        self.config = config
        self.output_path = output_path
        self.run = LedgerService.start_run(command, config.config_hash, config.seed, output_path)
        self.summary: Dict = {}

    def artifact(self, path: str, kind: str) -> str:
        LedgerService.record_artifact(self.run, path, kind, self.config.config_hash)
        return path


def ledgered(command: str):
    """Wrap a command body `fn(config, out_dir, ctx, **kwargs)` with ledger rows and exit codes."""

    def decorator(fn):
        @functools.wraps(fn)
        def wrapper(config_path=None, overrides=None, out=None, default_out='runs', **kwargs):
            run_ctx = None
            try:
                config = _load_config(config_path, **(overrides or {}))
                out_dir = _output_path(out, default_out(config) if callable(default_out) else default_out)
                os.makedirs(out_dir, exist_ok=True)
                run_ctx = RunContext(command, config, out_dir)
                fn(config, out_dir, run_ctx, **kwargs)
                LedgerService.complete_run(run_ctx.run, run_ctx.summary)
            except ThresholdExceeded as e:
                _fail(run_ctx, e, EXIT_THRESHOLD)
            except NumericalError as e:
                _fail(run_ctx, e, EXIT_NUMERICAL)
            except (ValueError, FileNotFoundError, OSError) as e:
                _fail(run_ctx, e, EXIT_INVALID)
            except Exception as e:
                current_app.logger.exception("Unexpected failure in %s", command)
                _fail(run_ctx, e, EXIT_FAILURE)
        return wrapper
    return decorator


def _fail(run_ctx: Optional[RunContext], error: Exception, code: int):
    if run_ctx is not None:
        LedgerService.fail_run(run_ctx.run, error)
    current_app.logger.error("%s", error)
    click.echo(f"Error: {error}", err=True)
    sys.exit(code)


def _canonical_mesh(path: str):
    return normalize_to_canonical(load_mesh(path))


def _level_resolutions(config: RunConfig) -> List[int]:
    return DenoiserConfig.from_run_config(config).level_resolutions


# gen-dataset

@ledgered('gen-dataset')
def _gen_dataset(config, out_dir, ctx):
    rng = spawn(seeded_rng(config.seed), 'dataset')
    manifest = generate_dataset(config, out_dir, rng, on_file=ctx.artifact)
    ctx.summary = {'samples': int(manifest['sample'].nunique()), 'entries': len(manifest)}
    click.echo(f"Wrote {len(manifest)} manifest entries to {os.path.join(out_dir, 'manifest.csv')}")


@commands.cli.command('gen-dataset')
@click.option('--config', 'config_path', type=click.Path(), help='Run config JSON')
@click.option('--seed', type=int)
@click.option('--views', type=int, help='Views per sample')
@click.option('--variants', type=int, help='Texture variants per mesh')
@click.option('--out', help='Dataset directory (defaults to dataset_dir)')
def gen_dataset_command(config_path, seed, views, variants, out):
    """Render the procedural training set."""
    _gen_dataset(config_path, dict(seed=seed, n_views=views, variants=variants), out,
                 default_out=lambda config: config.dataset_dir)


# render-conditions

@ledgered('render-conditions')
def _render_conditions(config, out_dir, ctx, mesh_path):
    mesh = _canonical_mesh(mesh_path)
    setup = prepare_views(mesh, config.n_views, config, _level_resolutions(config))
    pyramid = build_pyramid(_level_resolutions(config))
    for k, maps in enumerate(setup.maps):
        png_path, npy_path = write_condition_maps(maps, os.path.join(out_dir, f"cond_{k:02d}"), config.config_hash)
        ctx.artifact(png_path, 'conditions')
        ctx.artifact(npy_path, 'conditions')
        for level, res in enumerate(pyramid.resolutions):
            grid = pixel_to_voxel(downsample_conditions(maps, res), pyramid, level)
            path = save_phase_grid(grid, os.path.join(out_dir, f"phase_{k:02d}_l{level}.png"), config.config_hash)
            ctx.artifact(path, 'phases')
    cams_path = _write_cameras(setup.cams, config, out_dir)
    ctx.artifact(cams_path, 'cameras')
    ctx.summary = {'views': len(setup.maps)}
    click.echo(f"Rendered {len(setup.maps)} views to {out_dir}")


@commands.cli.command('render-conditions')
@click.option('--config', 'config_path', type=click.Path())
@click.option('--mesh', 'mesh_path', required=True, type=click.Path())
@click.option('--views', type=int)
@click.option('--resolution', type=int)
@click.option('--out', help='Output directory')
def render_conditions_command(config_path, mesh_path, views, resolution, out):
    """Write condition maps and phase-grid debug images for a mesh."""
    _render_conditions(config_path, dict(n_views=views, resolution=resolution), out,
                       default_out='conditions', mesh_path=mesh_path)


def _write_cameras(cams, config: RunConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, 'cameras.json')
    with open(path, 'w') as f:
        json.dump({
            'config_hash': config.config_hash,
            'resolution': config.resolution,
            'cameras': [c.to_dict() for c in cams],
        }, f, indent=2, sort_keys=True)
    return path


def _read_cameras(images_dir: str):
    path = os.path.join(images_dir, 'cameras.json')
    if not os.path.exists(path):
        raise FileNotFoundError(f"No cameras.json in {images_dir}")
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict) or not isinstance(data.get('cameras'), list):
        raise ValueError(f"{path} has no camera list")
    return [camera_from_dict(c) for c in data['cameras']]


# train

@ledgered('train')
def _train(config, out_dir, ctx, dataset, resume):
    denoiser_config = DenoiserConfig.from_run_config(config)
    if resume:
        state, meta = load_state(resume)
        if meta['denoiser'] != denoiser_config.to_dict():
            raise ValueError(f"Checkpoint {resume} was trained with a different network configuration")
        current_app.logger.info("Resuming from %s at step %d", resume, state.step)
    else:
        state = DenoiserState(denoiser_config, seed=config.seed, learning_rate=config.learning_rate,
                              weight_decay=config.weight_decay, warmup_steps=config.warmup_steps)

    dataset_dir = _output_path(dataset, config.dataset_dir)
    training_set = load_training_set(dataset_dir, config, denoiser_config.level_resolutions)
    schedule = NoiseSchedule.linear(config.schedule_steps, config.beta_start, config.beta_end)
    log_path = os.path.join(out_dir, 'train_log.csv')

    def on_step(result):
        row = result.to_row()
        row['config_hash'] = config.config_hash
        pd.DataFrame([row]).to_csv(log_path, mode='a', header=not os.path.exists(log_path), index=False)

    def on_checkpoint(s):
        ctx.artifact(save_state(s, os.path.join(out_dir, f"checkpoint_{s.step:06d}.ckpt"), config.config_hash),
                     'checkpoint')

    results = train(
        state, training_set.batch_source(config.batch_size), schedule,
        spawn(seeded_rng(config.seed), 'train'), config.train_steps, config.pretrain_steps,
        config.dropout_probs, on_step=on_step, on_checkpoint=on_checkpoint,
        checkpoint_every=config.checkpoint_every,
    )
    final = ctx.artifact(save_state(state, os.path.join(out_dir, 'checkpoint.ckpt'), config.config_hash),
                         'checkpoint')
    if os.path.exists(log_path):
        ctx.artifact(log_path, 'log')
    ctx.summary = {'steps': state.step, 'final_loss': results[-1].loss if results else None}
    click.echo(f"Trained to step {state.step}; checkpoint {final}")


@commands.cli.command('train')
@click.option('--config', 'config_path', type=click.Path())
@click.option('--dataset', help='Dataset directory (defaults to dataset_dir)')
@click.option('--steps', type=int, help='Total training steps')
@click.option('--seed', type=int)
@click.option('--resume', type=click.Path(), help='Checkpoint to continue from')
@click.option('--out', help='Run directory')
def train_command(config_path, dataset, steps, seed, resume, out):
    """Train the toy denoiser on a generated dataset."""
    _train(config_path, dict(train_steps=steps, seed=seed), out, default_out='train',
           dataset=dataset, resume=resume)


# generate

@ledgered('generate')
def _generate(config, out_dir, ctx, checkpoint, mesh_path, reference_path, dump_bundles):
    state, _ = load_state(checkpoint)
    if state.config.resolution != config.resolution:
        raise ValueError(f"Checkpoint resolution {state.config.resolution} differs from config {config.resolution}")
    mesh = _canonical_mesh(mesh_path)
    setup = prepare_views(mesh, config.n_views, config, state.config.level_resolutions)
    reference = reference_tensor(read_png(reference_path), config.resolution) if reference_path else None
    result = generate_views(state, setup, reference, config, spawn(seeded_rng(config.seed), 'sample'),
                            dump_bundles=dump_bundles)
    for k, image in enumerate(result.images):
        ctx.artifact(write_png(image.numpy(), os.path.join(out_dir, f"view_{k:02d}.png"), config.config_hash), 'image')
    ctx.artifact(_write_cameras(setup.cams, config, out_dir), 'cameras')
    if dump_bundles and result.bundles is not None:
        path = write_array(result.bundles.numpy(), os.path.join(out_dir, 'bundles.npy'), config.config_hash)
        ctx.artifact(path, 'bundles')
    ctx.summary = {'views': len(result.images), 'degenerate_steps': result.degenerate_steps}
    click.echo(f"Generated {len(result.images)} views in {out_dir}")


@commands.cli.command('generate')
@click.option('--config', 'config_path', type=click.Path())
@click.option('--checkpoint', required=True, type=click.Path())
@click.option('--mesh', 'mesh_path', required=True, type=click.Path())
@click.option('--reference', 'reference_path', type=click.Path(), help='Reference image (PNG)')
@click.option('--views', type=int)
@click.option('--guidance-mode', type=click.Choice(['plain', 'orthogonal', 'reference']))
@click.option('--projection-scope', type=click.Choice(['global', 'per_view']))
@click.option('--s-geo', type=float)
@click.option('--s-ref', type=float)
@click.option('--steps', type=int, help='Sampling steps')
@click.option('--seed', type=int)
@click.option('--dump-bundles', is_flag=True, help='Also write every step\'s three noise estimates')
@click.option('--out', help='Output directory')
def generate_command(config_path, checkpoint, mesh_path, reference_path, views, guidance_mode, projection_scope,
                     s_geo, s_ref, steps, seed, dump_bundles, out):
    """Sample multi-view images of a mesh with a trained checkpoint."""
    overrides = dict(n_views=views, guidance_mode=guidance_mode, projection_scope=projection_scope,
                     s_geo=s_geo, s_ref=s_ref, sample_steps=steps, seed=seed)
    _generate(config_path, overrides, out, default_out='generate', checkpoint=checkpoint,
              mesh_path=mesh_path, reference_path=reference_path, dump_bundles=dump_bundles)


# bake

def _view_images(images_dir: str) -> List[str]:
    return sorted(glob.glob(os.path.join(images_dir, 'view_*.png')))


@ledgered('bake')
def _bake(config, out_dir, ctx, mesh_path, images_dir):
    mesh = _canonical_mesh(mesh_path)
    cams = _read_cameras(images_dir)
    paths = _view_images(images_dir)
    if len(paths) != len(cams):
        raise ValueError(f"Found {len(paths)} images for {len(cams)} cameras")
    images = [read_png(p) for p in paths]
    resolution = images[0].shape[0]
    maps = [rasterize_conditions(mesh, cam, resolution) for cam in cams]
    texture = bake_views(images, maps, cams, mesh, config)
    ctx.artifact(write_png(texture.texels, os.path.join(out_dir, 'texture.png'), config.config_hash), 'texture')
    ctx.artifact(write_array(texture.texels, os.path.join(out_dir, 'texture.npy'), config.config_hash), 'texture')
    for k, partial in enumerate(texture.per_view_partials):
        stacked = np.concatenate(
            [partial.texture, partial.mask[..., None].astype(np.float32), partial.normals], axis=-1)
        direction = [float(x) for x in partial.view_direction] if partial.view_direction is not None else None
        path = write_array(stacked, os.path.join(out_dir, f"partial_{k:02d}.npy"), config.config_hash,
                           view_direction=direction)
        ctx.artifact(path, 'partial')
    ctx.summary = {'views': len(images), 'texture_resolution': texture.resolution}
    click.echo(f"Baked {len(images)} views into {os.path.join(out_dir, 'texture.png')}")


@commands.cli.command('bake')
@click.option('--config', 'config_path', type=click.Path())
@click.option('--mesh', 'mesh_path', required=True, type=click.Path())
@click.option('--images', 'images_dir', required=True, type=click.Path(), help='Directory with view_XX.png and cameras.json')
@click.option('--texture-resolution', type=int)
@click.option('--out', help='Output directory')
def bake_command(config_path, mesh_path, images_dir, texture_resolution, out):
    """Bake generated views into a UV texture."""
    _bake(config_path, dict(texture_resolution=texture_resolution), out, default_out='bake',
          mesh_path=mesh_path, images_dir=images_dir)


# eval

def read_partials(partials_dir: str) -> List[PartialTexture]:
    paths = sorted(glob.glob(os.path.join(partials_dir, 'partial_*.npy')))
    if not paths:
        raise FileNotFoundError(f"No partial textures in {partials_dir}")
    partials = []
    for path in paths:
        arr = read_array(path)
        if arr.ndim != 3 or arr.shape[-1] != PARTIAL_CHANNELS:
            raise ValueError(f"{path} is not a partial texture")
        direction = read_array_meta(path).get('view_direction')
        partials.append(PartialTexture(
            texture=arr[..., :3].astype(np.float32),
            mask=arr[..., 3] > 0.5,
            normals=arr[..., 4:7].astype(np.float32),
            view_direction=np.asarray(direction) if direction is not None else None,
        ))
    return partials


@ledgered('eval')
def _eval(config, out_dir, ctx, partials_dir):
    report = compute_lad(read_partials(partials_dir))
    text = report.to_text(config.config_hash)
    report_path = os.path.join(out_dir, 'lad_report.txt')
    with open(report_path, 'w') as f:
        f.write(text)
    ctx.artifact(report_path, 'report')
    table_path = os.path.join(out_dir, 'lad_views.csv')
    frame = report.to_frame()
    frame['config_hash'] = config.config_hash
    frame.to_csv(table_path, index=False)
    ctx.artifact(table_path, 'report')
    ctx.summary = {'lad': report.lad, 'overlap_texel_count': report.overlap_texel_count}
    click.echo(text, nl=False)
    if report.lad > config.lad_threshold:
        raise ThresholdExceeded(report.lad, config.lad_threshold)


@commands.cli.command('eval')
@click.option('--config', 'config_path', type=click.Path())
@click.option('--partials', 'partials_dir', required=True, type=click.Path(), help='Directory with partial_XX.npy')
@click.option('--threshold', type=float, help='Fail when LAD exceeds this value')
@click.option('--out', help='Output directory')
def eval_command(config_path, partials_dir, threshold, out):
    """Report LAD over baked partial textures."""
    _eval(config_path, dict(lad_threshold=threshold), out, default_out='eval', partials_dir=partials_dir)


@commands.cli.command('runs')
@click.option('--command', 'command_name', help='Only runs of this command')
@click.option('--limit', type=int, default=20)
@click.option('--json', 'as_json', is_flag=True, help='Print runs and their artifacts as JSON')
def runs_command(command_name, limit, as_json):
    """List recent ledger entries."""
    runs = LedgerService.get_runs(command_name, limit)
    if as_json:
        click.echo(json.dumps([run.to_dict() for run in runs], indent=2))
        return
    for run in runs:
        click.echo(f"{run.run_id}  {run.command:<18} {run.status:<10} {run.config_hash or '-'}  {run.output_path or ''}")
