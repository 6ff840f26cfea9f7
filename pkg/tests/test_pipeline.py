import time

import numpy as np
import pytest
import torch

from conftest import TINY_RUN
from mvtex.baking import render_textured
from mvtex.datasets import generate_dataset, load_training_set
from mvtex.denoiser import DenoiserConfig, DenoiserState, NoiseSchedule, train
from mvtex.numerics import seeded_rng, spawn
from mvtex.pipeline import (
    ABLATIONS, bake_views, generate_views, guidance_from_config, lad_ablation, prepare_views, reference_tensor,
    views_lad,
)
from mvtex.procedural import make_pattern_texture
from mvtex.run_config import RunConfig


@pytest.fixture
def tiny_run():
    return RunConfig(TINY_RUN)


def test_prepare_views(sphere, tiny_run):
    setup = prepare_views(sphere, 3, tiny_run, [8, 4])
    assert len(setup.cams) == len(setup.maps) == 3
    assert setup.cond.shape == (3, 7, 16, 16)
    assert [tuple(p.shape) for p in setup.phases] == [(3, 8, 8, 3), (3, 4, 4, 3)]
    assert all(int(p.abs().sum()) == 0 for p in setup.identity_phases)
    assert setup.cams[0].is_reference_pose


def test_reference_tensor_range_and_size():
    image = np.random.default_rng(0).random((32, 32, 4)).astype(np.float32)
    t = reference_tensor(image, 16)
    assert t.shape == (3, 16, 16)
    assert float(t.min()) >= -1.0 and float(t.max()) <= 1.0


def test_guidance_from_config():
    config = RunConfig({'s_geo': 1.5, 'guidance_mode': 'orthogonal', 'projection_scope': 'per_view'})
    g = guidance_from_config(config)
    assert (g.s_geo, g.s_ref, g.mode, g.projection_scope) == (1.5, 5.0, 'orthogonal', 'per_view')


def test_generate_views_honours_rope_switch(sphere, tiny_run, tiny_state):
    setup = prepare_views(sphere, 2, tiny_run, tiny_state.config.level_resolutions)
    with_rope = generate_views(tiny_state, setup, None, tiny_run, seeded_rng(0))
    without = generate_views(tiny_state, setup, None, tiny_run, seeded_rng(0), use_rope=False)
    again = generate_views(tiny_state, setup, None, tiny_run, seeded_rng(0))
    assert torch.equal(with_rope.images, again.images)
    assert not torch.equal(with_rope.images, without.images)


def test_consistent_views_bake_cleanly(sphere, tiny_run):
    setup = prepare_views(sphere, 4, tiny_run, [8, 4])
    texture = make_pattern_texture('gradient', 32, palette=np.float32([[0.2, 0.3, 0.4], [0.8, 0.7, 0.6]]))
    images = [render_textured(sphere, texture, cam, 16, maps=m) for cam, m in zip(setup.cams, setup.maps)]
    baked = bake_views(images, setup.maps, setup.cams, sphere, tiny_run)
    assert baked.resolution == 32
    assert views_lad(images, setup.maps, setup.cams, sphere, tiny_run).lad < 2e-2


@pytest.mark.slow
def test_training_loss_drops(tmp_path):
    config = RunConfig()
    dataset = str(tmp_path / 'dataset')
    generate_dataset(config, dataset, spawn(seeded_rng(config.seed), 'dataset'))
    denoiser_config = DenoiserConfig.from_run_config(config)
    training_set = load_training_set(dataset, config, denoiser_config.level_resolutions)
    state = DenoiserState(denoiser_config, seed=config.seed, learning_rate=config.learning_rate,
                          weight_decay=config.weight_decay, warmup_steps=config.warmup_steps)
    schedule = NoiseSchedule.linear(config.schedule_steps, config.beta_start, config.beta_end)
    started = time.perf_counter()
    results = train(state, training_set.batch_source(config.batch_size), schedule,
                    spawn(seeded_rng(config.seed), 'train'), config.train_steps, config.pretrain_steps,
                    config.dropout_probs)
    elapsed = time.perf_counter() - started
    assert len(results) == config.train_steps
    assert elapsed < 1800.0, f"{config.train_steps} steps took {elapsed:.0f}s"
    losses = [r.loss for r in results]
    assert np.mean(losses[-50:]) <= 0.7 * np.mean(losses[:50])


@pytest.mark.slow
def test_dropout_rates(tiny_state, batch_source):
    schedule = NoiseSchedule.linear(tiny_state.config.schedule_steps)
    results = train(tiny_state, batch_source, schedule, seeded_rng(1), 2000, 0, (0.1, 0.1, 0.1))
    draws = sum(r.batch_size for r in results)
    for key in ('geo_dropped', 'ref_dropped', 'mva_dropped'):
        rate = sum(getattr(r, key) for r in results) / draws
        assert abs(rate - 0.1) <= 0.02, key


@pytest.fixture(scope='module')
def trained_pair(tmp_path_factory):
    """A rotary model and a rotation-free model trained on the same data, evaluated at unit guidance."""
    config = RunConfig({'train_steps': 2000, 'pretrain_steps': 300, 's_geo': 1.0, 's_ref': 1.0})
    rope_free = RunConfig({**config.to_dict(), 'use_rope': False})
    dataset = str(tmp_path_factory.mktemp('ablation') / 'dataset')
    generate_dataset(config, dataset, spawn(seeded_rng(config.seed), 'dataset'))
    denoiser_config = DenoiserConfig.from_run_config(config)
    schedule = NoiseSchedule.linear(config.schedule_steps, config.beta_start, config.beta_end)
    states = []
    for run in (config, rope_free):
        training_set = load_training_set(dataset, run, denoiser_config.level_resolutions)
        state = DenoiserState(denoiser_config, seed=run.seed, learning_rate=run.learning_rate,
                              weight_decay=run.weight_decay, warmup_steps=run.warmup_steps)
        train(state, training_set.batch_source(run.batch_size), schedule, spawn(seeded_rng(run.seed), 'train'),
              run.train_steps, run.pretrain_steps, run.dropout_probs)
        states.append(state)
    return config, states[0], states[1]


@pytest.mark.slow
def test_lad_ablation_ordering(trained_pair, sphere):
    config, state, rope_free_state = trained_pair
    setup = prepare_views(sphere, config.n_views, config, state.config.level_resolutions)
    texture = make_pattern_texture('checker', config.texture_resolution,
                                   palette=np.float32([[0.2, 0.2, 0.7], [0.9, 0.8, 0.2]]))
    reference = reference_tensor(
        render_textured(sphere, texture, setup.cams[0], config.resolution, maps=setup.maps[0]), config.resolution)
    ordered = 0
    for seed in range(5):
        lad = lad_ablation(state, setup, reference, config, seed, rope_free_state=rope_free_state)
        assert set(lad) == set(ABLATIONS)
        ordered += lad['no_mva'] > lad['mva_no_rope'] > lad['mva_rope']
    assert ordered >= 4
