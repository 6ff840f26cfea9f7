"""
Run configuration.
A flat, versioned JSON object; defaults live in code, a file overrides them
and command-line flags override the file.
"""
import hashlib
import json
import math
import os
from typing import Any, Dict, Optional

CONFIG_VERSION = 1

_CHOICES = {
    'guidance_mode': ('plain', 'orthogonal', 'reference'),
    'projection_scope': ('global', 'per_view'),
}


class RunConfig:
    """Validated run parameters, readable as attributes."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = self._get_default_configs()
        if values:
            self.update(values)
        self.validate()

    @staticmethod
    def _get_default_configs() -> Dict[str, Any]:
        """Get default run configuration."""
        return {
            "version": CONFIG_VERSION,
            "mesh_paths": [],
            "dataset_dir": "dataset",
            "n_views": 6,
            "elevation": 20.0,
            "half_extent": 0.6,
            "resolution": 32,
            "texture_resolution": 64,
            "widths": [48, 96],
            "heads": [2, 4],
            "time_dim": 64,
            "schedule_steps": 100,
            "beta_start": 1e-4,
            "beta_end": 0.2,
            "sample_steps": 25,
            "eta": 0.0,
            "s_geo": 2.0,
            "s_ref": 5.0,
            "guidance_mode": "plain",
            "projection_scope": "global",
            "dropout_geo": 0.1,
            "dropout_ref": 0.1,
            "dropout_mva": 0.1,
            "lambda_ref": 1.0,
            "lambda_mv": 1.0,
            "use_rope": True,
            "seed": 0,
            "batch_size": 2,
            "train_steps": 500,
            "pretrain_steps": 150,
            "learning_rate": 1e-3,
            "warmup_steps": 50,
            "weight_decay": 0.01,
            "checkpoint_every": 100,
            "variants": 1,
            "blend_exponent": 4.0,
            "max_view_angle": 60.0,
            "lad_threshold": 0.05,
        }

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """Defaults, then the file at `path`, then non-None `overrides`."""
        values: Dict[str, Any] = {}
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(f"Config file not found: {path}")
            with open(path, 'r') as f:
                try:
                    values = json.load(f)
                except json.JSONDecodeError as e:
                    raise ValueError(f"Config file {path} is not valid JSON: {e}") from e
            if not isinstance(values, dict):
                raise ValueError(f"Config file {path} must hold a JSON object")
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(values)

    def update(self, values: Dict[str, Any]):
        defaults = self._get_default_configs()
        for key, value in values.items():
            if key not in defaults:
                raise ValueError(f"Unknown config key: {key}")
            self.values[key] = self._coerce(key, value, defaults[key])

    @staticmethod
    def _coerce(key: str, value: Any, default: Any) -> Any:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError(f"Config key {key} must be true or false, got {value!r}")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"Config key {key} must be an integer, got {value!r}")
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"Config key {key} must be a number, got {value!r}")
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise ValueError(f"Config key {key} must be a list, got {value!r}")
            return list(value)
        if not isinstance(value, str):
            raise ValueError(f"Config key {key} must be a string, got {value!r}")
        return value

    def validate(self):
        v = self.values
        if v['version'] != CONFIG_VERSION:
            raise ValueError(f"Unsupported config version: {v['version']}")
        for key, choices in _CHOICES.items():
            if v[key] not in choices:
                raise ValueError(f"Unsupported {key}: {v[key]}")
        if not 1 <= v['n_views'] <= 12:
            raise ValueError(f"n_views must be between 1 and 12, got {v['n_views']}")
        if not -89.0 < v['elevation'] < 89.0:
            raise ValueError(f"elevation must lie in (-89, 89), got {v['elevation']}")
        for key in ('half_extent', 'learning_rate'):
            if not v[key] > 0:
                raise ValueError(f"{key} must be positive, got {v[key]}")
        for key in ('resolution', 'texture_resolution', 'time_dim', 'schedule_steps', 'sample_steps',
                    'batch_size', 'variants'):
            if v[key] < 1:
                raise ValueError(f"{key} must be at least 1, got {v[key]}")
        for key in ('train_steps', 'pretrain_steps', 'warmup_steps', 'checkpoint_every', 'seed'):
            if v[key] < 0:
                raise ValueError(f"{key} must be non-negative, got {v[key]}")
        for key in ('dropout_geo', 'dropout_ref', 'dropout_mva'):
            if not 0.0 <= v[key] <= 1.0:
                raise ValueError(f"{key} must lie in [0, 1], got {v[key]}")
        for key in ('s_geo', 's_ref', 'lambda_ref', 'lambda_mv', 'eta', 'blend_exponent', 'lad_threshold',
                    'weight_decay'):
            if not math.isfinite(v[key]) or v[key] < 0:
                raise ValueError(f"{key} must be finite and non-negative, got {v[key]}")
        if not 0.0 < v['max_view_angle'] <= 90.0:
            raise ValueError(f"max_view_angle must lie in (0, 90], got {v['max_view_angle']}")
        if not 0.0 < v['beta_start'] <= v['beta_end'] < 1.0:
            raise ValueError(f"Betas must satisfy 0 < beta_start <= beta_end < 1")
        if len(v['widths']) != len(v['heads']) or not v['widths']:
            raise ValueError(f"widths {v['widths']} and heads {v['heads']} must be non-empty and equal length")
        for w, h in zip(v['widths'], v['heads']):
            if not isinstance(w, int) or not isinstance(h, int) or h < 1 or w % (h * 6):
                raise ValueError(f"Width {w} must be divisible by 6 * heads ({h})")
        if v['resolution'] % (2 ** len(v['widths'])):
            raise ValueError(f"resolution {v['resolution']} must be divisible by 2^{len(v['widths'])}")
        if not all(isinstance(p, str) for p in v['mesh_paths']):
            raise ValueError("mesh_paths must be a list of file paths")

    def __getattr__(self, key: str) -> Any:
        values = self.__dict__.get('values')
        if values is not None and key in values:
            return values[key]
        raise AttributeError(key)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def canonical_json(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(',', ':'))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()[:12]

    @property
    def dropout_probs(self):
        return self.dropout_geo, self.dropout_ref, self.dropout_mva

    def save(self, path: str):
        """Save run config to file."""
        with open(path, 'w') as f:
            json.dump(self.values, f, indent=2, sort_keys=True)

    def __repr__(self):
        return f'<RunConfig {self.config_hash}>'
