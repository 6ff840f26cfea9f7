import json

import pytest

from mvtex.run_config import RunConfig


def test_defaults():
    config = RunConfig()
    assert config.n_views == 6
    assert config.widths == [48, 96]
    assert config.guidance_mode == 'plain'
    assert config.dropout_probs == (0.1, 0.1, 0.1)
    assert len(config.config_hash) == 12


def test_file_then_overrides(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'n_views': 4, 'seed': 3, 's_geo': 1}))
    config = RunConfig.load(str(path), {'seed': 9, 'n_views': None})
    assert config.n_views == 4
    assert config.seed == 9
    assert config.s_geo == 1.0 and isinstance(config.s_geo, float)


def test_hash_tracks_values(tmp_path):
    a, b = RunConfig(), RunConfig({'seed': 0})
    assert a.config_hash == b.config_hash
    assert RunConfig({'seed': 1}).config_hash != a.config_hash
    path = str(tmp_path / 'saved.json')
    a.save(path)
    assert RunConfig.load(path).config_hash == a.config_hash


@pytest.mark.parametrize('values', [
    {'colour': 'red'},
    {'n_views': 13},
    {'n_views': 2.5},
    {'use_rope': 1},
    {'guidance_mode': 'sideways'},
    {'dropout_geo': 1.5},
    {'widths': [40], 'heads': [2]},
    {'widths': [48, 96], 'heads': [2]},
    {'resolution': 34},
    {'beta_start': 0.3, 'beta_end': 0.2},
    {'version': 2},
    {'s_ref': -1.0},
    {'max_view_angle': 0.0},
    {'max_view_angle': 95.0},
    {'output_dir': 'runs'},
])
def test_invalid_values(values):
    with pytest.raises(ValueError):
        RunConfig(values)


def test_unreadable_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunConfig.load(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{not json')
    with pytest.raises(ValueError):
        RunConfig.load(str(broken))
    listing = tmp_path / 'list.json'
    listing.write_text('[1, 2]')
    with pytest.raises(ValueError):
        RunConfig.load(str(listing))


def test_missing_attribute():
    with pytest.raises(AttributeError):
        RunConfig().not_a_key
