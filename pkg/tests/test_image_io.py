import numpy as np
import pytest

from mvtex.geometry import make_camera, rasterize_conditions
from mvtex.image_io import (
    read_array, read_array_meta, read_condition_maps, read_png, read_png_hash, to_uint8, write_array,
    write_condition_maps, write_png,
)


def test_png_carries_config_hash(tmp_path):
    image = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    path = write_png(image, str(tmp_path / 'a.png'), 'abcdef012345')
    assert read_png_hash(path) == 'abcdef012345'
    assert np.array_equal(to_uint8(read_png(path)), to_uint8(image))


def test_png_rejects_wrong_shape(tmp_path):
    with pytest.raises(ValueError):
        write_png(np.zeros((8, 8)), str(tmp_path / 'gray.png'))
    with pytest.raises(FileNotFoundError):
        read_png(str(tmp_path / 'missing.png'))


def test_array_sidecar_metadata(tmp_path):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    path = write_array(arr, str(tmp_path / 'arr.npy'), 'hash', note='sidecar')
    assert np.array_equal(read_array(path), arr)
    meta = read_array_meta(path)
    assert meta['shape'] == [3, 4] and meta['note'] == 'sidecar' and meta['config_hash'] == 'hash'


def test_condition_maps_survive_disk(tmp_path, sphere):
    maps = rasterize_conditions(sphere, make_camera(30.0, 20.0, 0.6), 16)
    png_path, npy_path = write_condition_maps(maps, str(tmp_path / 'cond_00'), 'hash')
    assert png_path.endswith('.png')
    loaded = read_condition_maps(npy_path)
    assert np.array_equal(loaded.stacked(), maps.stacked())
    assert np.array_equal(loaded.mask, maps.mask)
