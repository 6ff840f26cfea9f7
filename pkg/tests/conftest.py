import json

import pytest
import torch

from mvtex import create_app
from mvtex.denoiser import DenoiserConfig, DenoiserState, TrainingBatch
from mvtex.geometry import normalize_to_canonical
from mvtex.numerics import gaussian, seeded_rng, spawn, uniform
from mvtex.procedural import make_cube, make_uv_sphere

# Small enough to train a few steps in well under a second
TINY_RUN = {
    'n_views': 2,
    'resolution': 16,
    'texture_resolution': 32,
    'widths': [12, 24],
    'heads': [2, 2],
    'time_dim': 16,
    'schedule_steps': 20,
    'sample_steps': 3,
    'batch_size': 1,
    'train_steps': 4,
    'pretrain_steps': 2,
    'warmup_steps': 1,
    'checkpoint_every': 2,
}


@pytest.fixture
def sphere():
    return normalize_to_canonical(make_uv_sphere())


@pytest.fixture
def cube():
    return make_cube()


@pytest.fixture
def tiny_config():
    return DenoiserConfig(resolution=16, widths=(12, 24), heads=(2, 2), time_dim=16, schedule_steps=20)


@pytest.fixture
def tiny_state(tiny_config):
    return DenoiserState(tiny_config, seed=3, learning_rate=1e-3, warmup_steps=1)


def random_batch(config: DenoiserConfig, rng, batch: int = 2, views: int = 2) -> TrainingBatch:
    res = config.resolution
    clean = uniform(spawn(rng, 'clean'), (batch, views, 3, res, res)) * 2.0 - 1.0
    cond = uniform(spawn(rng, 'cond'), (batch, views, 7, res, res))
    phases = [torch.randint(0, r + 1, (batch, views, r, r, 3), generator=spawn(rng, f'phase-{r}').generator)
              for r in config.level_resolutions]
    return TrainingBatch(clean=clean, cond=cond, phases=phases, reference=clean[:, 0].clone())


@pytest.fixture
def batch_source(tiny_config):
    def next_batch(rng, step):
        return random_batch(tiny_config, rng)
    return next_batch


@pytest.fixture
def app(tmp_path):
    app = create_app({
        'TESTING': True,
        'SQLALCHEMY_DATABASE_URI': 'sqlite://',
        'OUTPUT_ROOT': str(tmp_path / 'output'),
    })
    yield app


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def run_config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(TINY_RUN))
    return str(path)


def write_obj(path, text: str) -> str:
    path.write_text(text)
    return str(path)


def random_tensor(seed: int, shape, scale: float = 1.0) -> torch.Tensor:
    return gaussian(seeded_rng(seed), shape) * scale
