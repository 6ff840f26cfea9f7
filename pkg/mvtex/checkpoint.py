"""
Flat binary checkpoint format.

    magic      8 bytes  b'MVTXCKPT'
    version    u32
    meta_len   u32, followed by meta_len bytes of UTF-8 JSON
    count      u32 number of records
    records    u16 name length, name, u8 dtype code, u8 ndim, ndim x u32 dims,
               u64 byte count, raw little-endian bytes

All integers are little-endian.
"""
import json
import logging
import struct
from typing import Dict, Tuple

import numpy as np
import torch

from mvtex.denoiser import MULTIVIEW, DenoiserConfig, DenoiserState, ReferenceNet

logger = logging.getLogger(__name__)

MAGIC = b'MVTXCKPT'
FORMAT_VERSION = 1

_DTYPES = {
    0: (torch.float32, np.dtype('<f4')),
    1: (torch.float64, np.dtype('<f8')),
    2: (torch.int64, np.dtype('<i8')),
    3: (torch.int32, np.dtype('<i4')),
    4: (torch.bool, np.dtype('?')),
    5: (torch.uint8, np.dtype('u1')),
}
_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


def save_checkpoint(path: str, tensors: Dict[str, torch.Tensor], metadata: Dict) -> str:
    meta = json.dumps(metadata, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<II', FORMAT_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack('<I', len(tensors)))
        for name in sorted(tensors):
            t = tensors[name].detach().cpu().contiguous()
            if t.dtype not in _CODES:
                raise ValueError(f"Unsupported tensor dtype for {name}: {t.dtype}")
            code = _CODES[t.dtype]
            raw = t.numpy().astype(_DTYPES[code][1], copy=False).tobytes()
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<BB', code, t.dim()))
            f.write(struct.pack(f'<{t.dim()}I', *t.shape))
            f.write(struct.pack('<Q', len(raw)))
            f.write(raw)
    return path


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    data = f.read(size)
    if len(data) != size:
        raise ValueError("Checkpoint is truncated")
    return struct.unpack(fmt, data)


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], Dict]:
    try:
        f = open(path, 'rb')
    except FileNotFoundError:
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, meta_len = _read(f, '<II')
        if version != FORMAT_VERSION:
            raise ValueError(f"Unsupported checkpoint version: {version}")
        metadata = json.loads(f.read(meta_len).decode('utf-8'))
        (count,) = _read(f, '<I')
        tensors = {}
        for _ in range(count):
            (name_len,) = _read(f, '<H')
            name = f.read(name_len).decode('utf-8')
            code, ndim = _read(f, '<BB')
            if code not in _DTYPES:
                raise ValueError(f"Unknown dtype code {code} for {name}")
            shape = _read(f, f'<{ndim}I') if ndim else ()
            (nbytes,) = _read(f, '<Q')
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise ValueError("Checkpoint is truncated")
            arr = np.frombuffer(raw, dtype=_DTYPES[code][1]).reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
    return tensors, metadata


def save_state(state: DenoiserState, path: str, config_hash: str = '') -> str:
    """Model, reference network and optimizer moments in one file."""
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    if state.reference_net is not None:
        tensors.update({f"reference.{k}": v for k, v in state.reference_net.state_dict().items()})
    optim = state.optimizer.state_dict()
    for idx, slots in optim['state'].items():
        for key, value in slots.items():
            tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value)
    groups = [{k: v for k, v in g.items() if k != 'params'} for g in optim['param_groups']]
    metadata = {
        'config_hash': config_hash,
        'step': state.step,
        'phase': state.phase,
        'phase_start': state.phase_start,
        'seed': state.seed,
        'learning_rate': state.learning_rate,
        'weight_decay': state.weight_decay,
        'warmup_steps': state.warmup_steps,
        'denoiser': state.config.to_dict(),
        'param_groups': json.loads(json.dumps(groups, default=str)),
    }
    save_checkpoint(path, tensors, metadata)
    logger.info("Checkpoint saved at step %d to %s", state.step, path)
    return path


def load_state(path: str) -> Tuple[DenoiserState, Dict]:
    tensors, meta = load_checkpoint(path)
    config = DenoiserConfig(**meta['denoiser'])
    state = DenoiserState(config, seed=meta['seed'], learning_rate=meta['learning_rate'],
                          weight_decay=meta['weight_decay'], warmup_steps=meta['warmup_steps'])
    state.model.load_state_dict({k[len('model.'):]: v for k, v in tensors.items() if k.startswith('model.')})
    state.step = meta['step']
    if meta['phase'] == MULTIVIEW:
        state.model.freeze_self_attention()
        state.reference_net = ReferenceNet(state.model)
        state.reference_net.load_state_dict(
            {k[len('reference.'):]: v for k, v in tensors.items() if k.startswith('reference.')}
        )
        state.phase = MULTIVIEW
        state.phase_start = meta['phase_start']
        state.optimizer = state._make_optimizer()

    optim = state.optimizer.state_dict()
    slots: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        if name.startswith('optim.'):
            _, idx, key = name.split('.', 2)
            slots.setdefault(int(idx), {})[key] = value
    optim['state'] = slots
    for group, saved in zip(optim['param_groups'], meta['param_groups']):
        for key in ('lr', 'weight_decay', 'eps', 'amsgrad', 'maximize'):
            if key in saved:
                group[key] = saved[key]
    state.optimizer.load_state_dict(optim)
    return state, meta
