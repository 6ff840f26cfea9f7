"""
Dense-array kernel shared by the rest of the package.
Tensors are float32 torch tensors; NaN or Inf in an exposed result is an error.
"""
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import torch
import torch.nn.functional as F


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ', '.join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"


def check_finite(t: torch.Tensor, what: str = 'tensor') -> torch.Tensor:
    """Raise NumericalError if `t` holds NaN or Inf, otherwise return it."""
    if not torch.isfinite(t).all():
        bad = int((~torch.isfinite(t)).sum())
        raise NumericalError(f"Non-finite values in {what}", {'count': bad, 'shape': tuple(t.shape)})
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of an M×K and a K×N grid."""
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError(f"matmul expects 2-D grids, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"Inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(rows: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """
    Numerically stabilized softmax along `dim`.

    The row maximum is subtracted before exponentiation, so adding a constant
    to a row leaves the result unchanged.
    """
    check_finite(rows, 'softmax input')
    shifted = rows - rows.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


@dataclass
class RngState:
    """
    Seeded random stream.

    Backed by torch's CPU generator (Mersenne Twister MT19937; normals via
    Box-Muller), which yields the same stream on every platform for a given
    seed. Child streams are derived by hashing, see `spawn`.
    """
    seed: int
    generator: torch.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self.generator is None:
            self.generator = torch.Generator(device='cpu')
            self.generator.manual_seed(self.seed)


def seeded_rng(seed: int) -> RngState:
    return RngState(seed=int(seed))


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & 0x7FFF_FFFF_FFFF_FFFF


def spawn(rng: RngState, name: str) -> RngState:
    """Named sub-stream; independent of how much of the parent has been consumed."""
    return seeded_rng(derive_seed(rng.seed, name))


def gaussian(rng: RngState, shape: Sequence[int]) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=rng.generator, dtype=torch.float32)


def uniform(rng: RngState, shape: Sequence[int] = ()) -> torch.Tensor:
    return torch.rand(tuple(shape), generator=rng.generator, dtype=torch.float32)


def randint(rng: RngState, high: int, shape: Sequence[int] = ()) -> torch.Tensor:
    return torch.randint(0, high, tuple(shape), generator=rng.generator)


def resize(image: torch.Tensor, size: int, mode: str = 'nearest') -> torch.Tensor:
    """
    Resize a (..., C, H, W) image to size×size.

    'nearest' picks the top-left sample of each block so that repeated
    power-of-two reductions compose exactly.
    """
    if mode == 'nearest':
        h, w = image.shape[-2:]
        if h % size or w % size:
            raise ValueError(f"Nearest resize needs divisible sizes: {h}x{w} -> {size}")
        return image[..., ::h // size, ::w // size].contiguous()
    if mode == 'bilinear':
        lead = image.shape[:-3]
        flat = image.reshape(-1, *image.shape[-3:])
        out = F.interpolate(flat, size=(size, size), mode='bilinear', align_corners=False)
        return out.reshape(*lead, *out.shape[-3:])
    raise ValueError(f"Unknown resize mode: {mode}")
