"""
Decoupled parallel attention block.

Three branches share the block input: self attention (SA) over each view's own
tokens, multi-view attention (MVA) over the tokens of all views with 3D rotary
phases on queries and keys, and reference attention (RefA) whose keys and
values come from reference features. Outputs are added:

    z + SA(z) + lambda_ref * RefA(z, ref) + lambda_mv * MVA(views)

Latent grids are (batch, views, channels, height, width); an unbatched
(views, channels, height, width) grid is accepted everywhere.
"""
import logging
import math
from typing import Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from mvtex.numerics import softmax
from mvtex.rope3d import RopeConfig, apply_rotary, rotation_angles

logger = logging.getLogger(__name__)

Scale = Union[float, torch.Tensor]


class AttentionBranch(nn.Module):
    """Multi-head attention with bias-free Q/K/V/O projections and parameter-free pre-norm."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{channels} channels cannot be split into {heads} heads")
        self.channels = channels
        self.heads = heads
        self.head_dim = channels // heads
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, tokens: torch.Tensor, context: Optional[torch.Tensor] = None,
                q_angles: Optional[torch.Tensor] = None,
                k_angles: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        tokens (B, N, C) attend to context (B, M, C), or to themselves.
        Angles (B, N|M, head_dim/2) rotate queries and keys after projection.
        """
        if tokens.shape[-1] != self.channels:
            raise ValueError(f"Expected {self.channels} channels, got {tokens.shape[-1]}")
        x = F.layer_norm(tokens, (self.channels,))
        ctx = x if context is None else F.layer_norm(context, (self.channels,))
        if ctx.shape[0] != x.shape[0] or ctx.shape[-1] != self.channels:
            raise ValueError(f"Context {tuple(ctx.shape)} incompatible with tokens {tuple(x.shape)}")

        q = self._split(self.to_q(x))
        k = self._split(self.to_k(ctx))
        v = self._split(self.to_v(ctx))
        if q_angles is not None:
            q = apply_rotary(q, q_angles[:, None])
        if k_angles is not None:
            k = apply_rotary(k, k_angles[:, None])

        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        out = softmax(scores) @ v
        b, _, n, _ = out.shape
        return self.to_out(out.transpose(1, 2).reshape(b, n, self.channels))


class AttentionBlockWeights(nn.Module):
    """
    Weights of one parallel block.

    SA is frozen by `freeze_self_attention`; the optimizer only ever sees
    parameters with requires_grad set.
    """

    def __init__(self, channels: int, heads: int, lambda_ref: float = 1.0, lambda_mv: float = 1.0,
                 rope_base: float = 10000.0):
        super().__init__()
        if channels % (heads * 6):
            raise ValueError(f"channels ({channels}) must be divisible by heads*6 ({heads * 6})")
        if lambda_ref < 0 or lambda_mv < 0:
            raise ValueError("Branch scales must be non-negative")
        self.channels = channels
        self.heads = heads
        self.lambda_ref = float(lambda_ref)
        self.lambda_mv = float(lambda_mv)
        self.rope = RopeConfig(channels // heads, rope_base)
        self.sa = AttentionBranch(channels, heads)
        self.mva = AttentionBranch(channels, heads)
        self.ref = AttentionBranch(channels, heads)

    def freeze_self_attention(self):
        for p in self.sa.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def seed_cross_branches(self):
        """Copy the SA projections into MVA and RefA and zero their output maps; the block output is unchanged."""
        for branch in (self.mva, self.ref):
            for name in ('to_q', 'to_k', 'to_v'):
                getattr(branch, name).weight.copy_(getattr(self.sa, name).weight)
            branch.to_out.weight.zero_()

    @property
    def self_attention_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.sa.parameters())

    def __repr__(self):
        return f'<AttentionBlockWeights c={self.channels} heads={self.heads}>'


def _batched(z: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if z.dim() == 4:
        return z.unsqueeze(0), True
    if z.dim() == 5:
        return z, False
    raise ValueError(f"Latent grid must be (B, V, C, H, W) or (V, C, H, W), got {tuple(z.shape)}")


def _tokens(z: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., H*W, C)."""
    return z.flatten(-2).transpose(-1, -2)


def _untokens(t: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return t.transpose(-1, -2).unflatten(-1, (h, w))


def _branch_attention(branch: AttentionBranch, z: torch.Tensor) -> torch.Tensor:
    zb, squeeze = _batched(z)
    b, v, c, h, w = zb.shape
    out = branch(_tokens(zb.reshape(b * v, c, h, w)))
    out = _untokens(out, h, w).reshape(b, v, c, h, w)
    return out.squeeze(0) if squeeze else out


def self_attention(z: torch.Tensor, w: AttentionBlockWeights) -> torch.Tensor:
    """Attention over each view's own tokens with the SA weights."""
    return _branch_attention(w.sa, z)


def multi_view_attention(views: torch.Tensor, phases: Optional[torch.Tensor], w: AttentionBlockWeights,
                         cfg: Optional[RopeConfig] = None, branch: Optional[AttentionBranch] = None) -> torch.Tensor:
    """
    Joint attention over the tokens of every view.

    `phases` is (B, V, H, W, 3) (or unbatched) at this level's resolution;
    None means no rotation.
    """
    cfg = cfg or w.rope
    branch = branch or w.mva
    zb, squeeze = _batched(views)
    b, v, c, h, w_ = zb.shape
    tokens = zb.permute(0, 1, 3, 4, 2).reshape(b, v * h * w_, c)
    angles = None
    if phases is not None:
        pb = phases.unsqueeze(0) if phases.dim() == 4 else phases
        if tuple(pb.shape[1:4]) != (v, h, w_):
            raise ValueError(f"Phases {tuple(phases.shape)} do not match views {tuple(views.shape)}")
        angles = rotation_angles(pb.expand(b, -1, -1, -1, -1), cfg).reshape(b, v * h * w_, cfg.dim // 2)
    out = branch(tokens, q_angles=angles, k_angles=angles)
    out = out.reshape(b, v, h, w_, c).permute(0, 1, 4, 2, 3)
    return out.squeeze(0) if squeeze else out


def reference_attention(z: torch.Tensor, ref_feats: torch.Tensor, w: AttentionBlockWeights,
                        branch: Optional[AttentionBranch] = None) -> torch.Tensor:
    """
    Queries from each view of `z`, keys and values from `ref_feats`.

    `ref_feats` is (B, C, Hr, Wr) or (B, Vr, C, Hr, Wr); for unbatched `z`
    it may also be (C, Hr, Wr) or (Vr, C, Hr, Wr).
    """
    branch = branch or w.ref
    zb, squeeze = _batched(z)
    b, v, c, h, w_ = zb.shape
    ref = ref_feats
    if squeeze and ref.dim() in (3, 4):
        ref = ref.unsqueeze(0)
    if ref.dim() == 4:
        ref = ref.unsqueeze(1)
    if ref.dim() != 5 or ref.shape[0] != b or ref.shape[2] != c:
        raise ValueError(f"Reference features {tuple(ref_feats.shape)} incompatible with {tuple(z.shape)}")
    context = _tokens(ref).reshape(b, -1, c)
    context = context.repeat_interleave(v, dim=0)
    out = branch(_tokens(zb.reshape(b * v, c, h, w_)), context)
    out = _untokens(out, h, w_).reshape(b, v, c, h, w_)
    return out.squeeze(0) if squeeze else out


def _is_zero(scale: Scale) -> bool:
    return not isinstance(scale, torch.Tensor) and float(scale) == 0.0


def _per_sample(scale: Scale, like: torch.Tensor) -> Scale:
    if isinstance(scale, torch.Tensor) and scale.dim() == 1:
        return scale.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))
    return scale


def parallel_block(views: torch.Tensor, phases: Optional[torch.Tensor], ref_feats: Optional[torch.Tensor],
                   w: AttentionBlockWeights, cfg: Optional[RopeConfig] = None,
                   lambda_ref: Optional[Scale] = None, lambda_mv: Optional[Scale] = None) -> torch.Tensor:
    """
    z + SA(z) + lambda_ref * RefA(z) + lambda_mv * MVA(views).

    A branch whose scale is the plain number 0 (or whose reference features
    are None) is not evaluated. Tensor scales of shape (B,) weight each
    sample separately.
    """
    lambda_ref = w.lambda_ref if lambda_ref is None else lambda_ref
    lambda_mv = w.lambda_mv if lambda_mv is None else lambda_mv
    zb, squeeze = _batched(views)

    out = zb + self_attention(zb, w)
    if ref_feats is not None and not _is_zero(lambda_ref):
        ref = ref_feats.unsqueeze(0) if squeeze and ref_feats.dim() in (3, 4) else ref_feats
        out = out + _per_sample(lambda_ref, zb) * reference_attention(zb, ref, w)
    if not _is_zero(lambda_mv):
        pb = phases.unsqueeze(0) if (phases is not None and squeeze) else phases
        out = out + _per_sample(lambda_mv, zb) * multi_view_attention(zb, pb, w, cfg)
    return out.squeeze(0) if squeeze else out
