"""
Small multi-view denoiser, noise schedule, training recipe and DDIM sampler.

Images live in pixel space scaled to [-1, 1]. Geometry conditions are
concatenated to the noisy input as 7 channels (ccm, normal, mask); a dropped
condition is all zeros. Each resolution level carries one parallel
attention block.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from mvtex.attention import AttentionBlockWeights, Scale, parallel_block, self_attention
from mvtex.guidance import GuidanceBundle, GuidanceConfig, compose
from mvtex.numerics import (
    NumericalError, RngState, check_finite, derive_seed, gaussian, randint, spawn, uniform,
)

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
COND_CHANNELS = 7
OUTPUT_INIT_SCALE = 0.1


@dataclass
class NoiseSchedule:
    steps: int
    betas: torch.Tensor        # float64
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> 'NoiseSchedule':
        if steps < 1:
            raise ValueError(f"Schedule needs at least one step, got {steps}")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ValueError(f"Betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}")
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        alphas = 1.0 - betas
        return cls(steps, betas, alphas, torch.cumprod(alphas, dim=0))

    def check_step(self, t: torch.Tensor):
        if int(t.min()) < 0 or int(t.max()) >= self.steps:
            raise ValueError(f"Timestep out of range [0, {self.steps}): {t.tolist()}")


def _per_sample_coef(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = values[t].to(like.dtype)
    return coef.view(-1, *([1] * (like.dim() - 1))) if coef.dim() else coef


def add_noise(clean: torch.Tensor, t: Union[int, torch.Tensor], schedule: NoiseSchedule,
              rng: RngState) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Forward process: sqrt(a_bar) * clean + sqrt(1 - a_bar) * eps.
    `t` is an int or a (B,) tensor matching the leading axis of `clean`.
    """
    t = torch.as_tensor(t, dtype=torch.int64)
    schedule.check_step(t)
    eps = gaussian(rng, clean.shape).to(clean.dtype)
    a_bar = _per_sample_coef(schedule.alpha_bars, t, clean)
    noisy = torch.sqrt(a_bar) * clean + torch.sqrt(1.0 - a_bar) * eps
    return noisy, eps


def timestep_table(steps: int, dim: int) -> torch.Tensor:
    """Sinusoidal embedding for every integer timestep, (steps, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.arange(steps, dtype=torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).float()


def _groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class ConvBlock(nn.Module):
    """Residual GroupNorm -> SiLU -> 3x3 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(F.silu(self.norm(x)))


@dataclass
class DenoiserConfig:
    resolution: int = 32
    widths: Tuple[int, ...] = (48, 96)
    heads: Tuple[int, ...] = (2, 4)
    time_dim: int = 64
    schedule_steps: int = 100
    lambda_ref: float = 1.0
    lambda_mv: float = 1.0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.heads = tuple(int(h) for h in self.heads)
        if not self.widths or len(self.widths) != len(self.heads):
            raise ValueError(f"widths {self.widths} and heads {self.heads} must be non-empty and equal length")
        if self.resolution % (2 ** len(self.widths)):
            raise ValueError(f"Resolution {self.resolution} is not divisible by 2^{len(self.widths)}")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")

    @property
    def level_resolutions(self) -> List[int]:
        return [self.resolution // 2 ** (l + 1) for l in range(len(self.widths))]

    @classmethod
    def from_run_config(cls, config) -> 'DenoiserConfig':
        return cls(
            resolution=config.resolution,
            widths=tuple(config.widths),
            heads=tuple(config.heads),
            time_dim=config.time_dim,
            schedule_steps=config.schedule_steps,
            lambda_ref=config.lambda_ref,
            lambda_mv=config.lambda_mv,
        )

    def to_dict(self) -> dict:
        return {
            'resolution': self.resolution,
            'widths': list(self.widths),
            'heads': list(self.heads),
            'time_dim': self.time_dim,
            'schedule_steps': self.schedule_steps,
            'lambda_ref': self.lambda_ref,
            'lambda_mv': self.lambda_mv,
        }


class MultiViewDenoiser(nn.Module):
    """
    stem -> [down, conv, parallel block] per level -> [upsample, concat skip, conv] -> out.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = list(config.widths)
        chans = [widths[0]] + widths
        hidden = config.time_dim * 2

        self.register_buffer('time_table', timestep_table(config.schedule_steps, config.time_dim))
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden),
        )
        self.stem = nn.Conv2d(IMAGE_CHANNELS + COND_CHANNELS, chans[0], 3, padding=1)
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[l], chans[l + 1], 3, stride=2, padding=1) for l in range(len(widths))
        )
        self.time_proj = nn.ModuleList(nn.Linear(hidden, w) for w in widths)
        self.convs = nn.ModuleList(ConvBlock(w) for w in widths)
        self.blocks = nn.ModuleList(
            AttentionBlockWeights(w, h, config.lambda_ref, config.lambda_mv)
            for w, h in zip(widths, config.heads)
        )
        self.ups = nn.ModuleList(
            nn.Conv2d(chans[l + 1] + chans[l], chans[l], 3, padding=1) for l in range(len(widths))
        )
        self.out = nn.Conv2d(chans[0], IMAGE_CHANNELS, 3, padding=1)
        with torch.no_grad():
            self.out.weight.mul_(OUTPUT_INIT_SCALE)
            self.out.bias.zero_()

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(self.time_table[t].to(self.stem.weight.dtype))

    def encode_level(self, level: int, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.downs[level](h)) + self.time_proj[level](temb)[:, :, None, None]
        return self.convs[level](h)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None,
                ref_feats: Optional[Sequence[Optional[torch.Tensor]]] = None,
                phases: Optional[Sequence[Optional[torch.Tensor]]] = None,
                lambda_ref: Optional[Scale] = None, lambda_mv: Optional[Scale] = None) -> torch.Tensor:
        """
        x: (B, V, 3, H, W); t: (B,); cond: (B, V, 7, H, W) or None;
        ref_feats: per level (B, C_l, H_l, W_l) or None; phases: per level (B, V, H_l, W_l, 3) or None.
        """
        if x.dim() != 5 or x.shape[2] != IMAGE_CHANNELS:
            raise ValueError(f"Expected (B, V, 3, H, W) input, got {tuple(x.shape)}")
        b, v, _, res, _ = x.shape
        if res != self.config.resolution:
            raise ValueError(f"Input resolution {res} does not match model resolution {self.config.resolution}")
        if cond is None:
            cond = torch.zeros((b, v, COND_CHANNELS, res, res), dtype=x.dtype)
        elif cond.shape != (b, v, COND_CHANNELS, res, res):
            raise ValueError(f"Condition shape {tuple(cond.shape)} does not match input {tuple(x.shape)}")
        levels = len(self.blocks)
        ref_feats = list(ref_feats) if ref_feats is not None else [None] * levels
        phases = list(phases) if phases is not None else [None] * levels

        temb = self.time_embedding(t).repeat_interleave(v, dim=0)
        h = self.stem(torch.cat([x, cond], dim=2).reshape(b * v, -1, res, res))
        skips = [h]
        for level in range(levels):
            h = self.encode_level(level, h, temb)
            _, c, hl, wl = h.shape
            hv = parallel_block(h.view(b, v, c, hl, wl), phases[level], ref_feats[level], self.blocks[level],
                                lambda_ref=lambda_ref, lambda_mv=lambda_mv)
            h = hv.reshape(b * v, c, hl, wl)
            skips.append(h)
        for level in reversed(range(levels)):
            h = F.interpolate(h, scale_factor=2, mode='nearest')
            h = F.silu(self.ups[level](torch.cat([h, skips[level]], dim=1)))
        return self.out(h).view(b, v, IMAGE_CHANNELS, res, res)

    def freeze_self_attention(self):
        for block in self.blocks:
            block.freeze_self_attention()

    def seed_cross_branches(self):
        for block in self.blocks:
            block.seed_cross_branches()

    def self_attention_parameters(self) -> Dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters() if '.sa.' in name}


class ReferenceNet(nn.Module):
    """
    Frozen snapshot of the denoiser's encoder path.

    Runs on the clean reference view at t = 0 without geometry; the features
    entering each level's attention block become that level's reference
    keys and values.
    """

    def __init__(self, denoiser: MultiViewDenoiser):
        super().__init__()
        self.config = denoiser.config
        self.register_buffer('time_table', denoiser.time_table.clone())
        self.time_mlp = copy.deepcopy(denoiser.time_mlp)
        self.stem = copy.deepcopy(denoiser.stem)
        self.downs = copy.deepcopy(denoiser.downs)
        self.time_proj = copy.deepcopy(denoiser.time_proj)
        self.convs = copy.deepcopy(denoiser.convs)
        self.blocks = copy.deepcopy(denoiser.blocks)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        """image: (B, 3, H, W) in [-1, 1] -> per level (B, C_l, H_l, W_l)."""
        b, _, res, _ = image.shape
        t = torch.zeros(b, dtype=torch.int64)
        temb = self.time_mlp(self.time_table[t].to(self.stem.weight.dtype))
        cond = torch.zeros((b, COND_CHANNELS, res, res), dtype=image.dtype)
        h = self.stem(torch.cat([image, cond], dim=1))
        feats = []
        for level in range(len(self.blocks)):
            h = F.silu(self.downs[level](h)) + self.time_proj[level](temb)[:, :, None, None]
            h = self.convs[level](h)
            feats.append(h.clone())
            h = h + self_attention(h.unsqueeze(1), self.blocks[level]).squeeze(1)
        return feats


@dataclass
class TrainingBatch:
    clean: torch.Tensor              # (B, V, 3, H, W) in [-1, 1]
    cond: torch.Tensor               # (B, V, 7, H, W)
    phases: List[torch.Tensor]       # per level (B, V, H_l, W_l, 3)
    reference: torch.Tensor          # (B, 3, H, W)

    @property
    def size(self) -> int:
        return int(self.clean.shape[0])


@dataclass
class StepResult:
    step: int
    phase: str
    loss: float
    lr: float
    geo_dropped: int
    ref_dropped: int
    mva_dropped: int
    batch_size: int

    def to_row(self) -> dict:
        return dict(self.__dict__)


PRETRAIN = 'pretrain'
MULTIVIEW = 'multiview'


class DenoiserState:
    """Model, frozen reference network, optimizer and step counter."""

    def __init__(self, config: DenoiserConfig, seed: int = 0, learning_rate: float = 1e-3,
                 weight_decay: float = 0.01, warmup_steps: int = 50):
        self.config = config
        self.seed = seed
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, 'init'))
            self.model = MultiViewDenoiser(config)
        self.reference_net: Optional[ReferenceNet] = None
        self.phase = PRETRAIN
        self.phase_start = 0
        self.step = 0
        self.optimizer = self._make_optimizer()

    def _make_optimizer(self) -> torch.optim.AdamW:
        params = [p for p in self.model.parameters() if p.requires_grad]
        return torch.optim.AdamW(params, lr=self.learning_rate, weight_decay=self.weight_decay)

    def begin_multiview_phase(self):
        """
        Freeze SA, start MVA and RefA from the pretrained SA projections with
        silent outputs, snapshot the reference network and restart the optimizer.
        """
        self.model.freeze_self_attention()
        self.model.seed_cross_branches()
        self.reference_net = ReferenceNet(self.model)
        self.phase = MULTIVIEW
        self.phase_start = self.step
        self.optimizer = self._make_optimizer()
        logger.info("Self attention frozen at step %d; reference network snapshotted", self.step)

    def lr_at(self, step: int) -> float:
        """Linear warm-up restarting at each phase boundary."""
        if self.warmup_steps <= 0:
            return self.learning_rate
        into_phase = step - self.phase_start
        return self.learning_rate * min(1.0, (into_phase + 1) / self.warmup_steps)

    def reference_features(self, reference: torch.Tensor) -> Optional[List[torch.Tensor]]:
        if self.reference_net is None:
            return None
        return self.reference_net(reference)


def predict_noise(state: DenoiserState, z_t: torch.Tensor, t: Union[int, torch.Tensor],
                  cond: Optional[torch.Tensor], ref_feats: Optional[Sequence[torch.Tensor]],
                  phases: Optional[Sequence[torch.Tensor]], lambda_mv: Optional[Scale] = None) -> torch.Tensor:
    """
    eps prediction for a (B, V, 3, H, W) or unbatched (V, 3, H, W) noisy grid.
    Unbatched inputs take unbatched cond (V, 7, H, W), ref feats (C_l, H_l, W_l)
    and phases (V, H_l, W_l, 3).
    """
    squeeze = z_t.dim() == 4
    if squeeze:
        z_t = z_t.unsqueeze(0)
        cond = cond.unsqueeze(0) if cond is not None else None
        ref_feats = [f.unsqueeze(0) for f in ref_feats] if ref_feats is not None else None
        phases = [p.unsqueeze(0) for p in phases] if phases is not None else None
    t = torch.as_tensor(t, dtype=torch.int64).expand(z_t.shape[0])
    out = state.model(z_t, t, cond, ref_feats, phases, lambda_mv=lambda_mv)
    return out.squeeze(0) if squeeze else out


def train_step(state: DenoiserState, batch: TrainingBatch, schedule: NoiseSchedule, rng: RngState,
               dropout_probs: Tuple[float, float, float] = (0.1, 0.1, 0.1)) -> StepResult:
    """
    One optimizer step on the eps-prediction MSE.

    Geometry, reference and MVA are dropped per sample with independent
    probabilities. In the pretraining phase reference and MVA are always off.
    """
    if batch.size == 0:
        raise ValueError("Training batch is empty")
    p_geo, p_ref, p_mva = dropout_probs
    b = batch.size
    t = randint(spawn(rng, 'timesteps'), schedule.steps, (b,))
    noisy, eps = add_noise(batch.clean, t, schedule, spawn(rng, 'noise'))
    u = uniform(spawn(rng, 'dropout'), (b, 3))
    geo_drop = u[:, 0] < p_geo
    ref_drop = u[:, 1] < p_ref
    mva_drop = u[:, 2] < p_mva

    cond = batch.cond * (~geo_drop).to(batch.cond.dtype).view(b, 1, 1, 1, 1)
    if state.phase == PRETRAIN:
        ref_drop = torch.ones(b, dtype=torch.bool)
        mva_drop = torch.ones(b, dtype=torch.bool)
        ref_feats = None
        lambda_mv: Scale = 0.0
    else:
        keep_ref = (~ref_drop).to(batch.clean.dtype).view(b, 1, 1, 1)
        ref_feats = [f * keep_ref for f in state.reference_features(batch.reference)]
        lambda_mv = state.config.lambda_mv * (~mva_drop).to(batch.clean.dtype)

    lr = state.lr_at(state.step)
    for group in state.optimizer.param_groups:
        group['lr'] = lr

    state.model.train()
    pred = state.model(noisy, t, cond, ref_feats, batch.phases, lambda_mv=lambda_mv)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise NumericalError("Non-finite training loss", {
            'step': state.step,
            'timesteps': t.tolist(),
            'geo_dropped': geo_drop.tolist(),
            'ref_dropped': ref_drop.tolist(),
            'mva_dropped': mva_drop.tolist(),
        })
    state.optimizer.zero_grad(set_to_none=False)
    loss.backward()
    state.optimizer.step()

    result = StepResult(
        step=state.step, phase=state.phase, loss=float(loss.detach()), lr=lr,
        geo_dropped=int(geo_drop.sum()), ref_dropped=int(ref_drop.sum()), mva_dropped=int(mva_drop.sum()),
        batch_size=b,
    )
    state.step += 1
    return result


BatchSource = Callable[[RngState, int], TrainingBatch]


def train(state: DenoiserState, next_batch: BatchSource, schedule: NoiseSchedule, train_rng: RngState,
          total_steps: int, pretrain_steps: int, dropout_probs: Tuple[float, float, float],
          on_step: Optional[Callable[[StepResult], None]] = None,
          on_checkpoint: Optional[Callable[[DenoiserState], None]] = None,
          checkpoint_every: int = 0) -> List[StepResult]:
    """
    Run the two-phase recipe from `state.step` up to `total_steps`.

    Step n draws everything from the named stream `step-n`, so a resumed run
    reproduces an uninterrupted one.
    """
    results = []
    while state.step < total_steps:
        if state.phase == PRETRAIN and state.step >= pretrain_steps:
            logger.info("Pretraining finished after %d steps", state.step)
            state.begin_multiview_phase()
        step_rng = spawn(train_rng, f"step-{state.step}")
        batch = next_batch(spawn(step_rng, 'batch'), state.step)
        result = train_step(state, batch, schedule, step_rng, dropout_probs)
        logger.debug("step %d %s loss=%.5f", result.step, result.phase, result.loss)
        results.append(result)
        if on_step is not None:
            on_step(result)
        if on_checkpoint is not None and checkpoint_every and state.step % checkpoint_every == 0:
            on_checkpoint(state)
    return results


def ddim_timesteps(schedule: NoiseSchedule, steps: int) -> List[int]:
    """Descending, de-duplicated timesteps from T-1 to 0."""
    if steps < 1:
        raise ValueError(f"Sampling needs at least one step, got {steps}")
    grid = torch.linspace(schedule.steps - 1, 0, min(steps, schedule.steps), dtype=torch.float64)
    out = []
    for t in torch.round(grid).to(torch.int64).tolist():
        if not out or out[-1] != t:
            out.append(t)
    return out


@dataclass
class SampleResult:
    images: torch.Tensor                    # (V, H, W, 3) in [0, 1]
    bundles: Optional[torch.Tensor] = None  # (steps, 3, V, 3, H, W)
    degenerate_steps: int = 0


@torch.no_grad()
def sample(state: DenoiserState, cond: torch.Tensor, reference: Optional[torch.Tensor],
           phases: Optional[Sequence[torch.Tensor]], schedule: NoiseSchedule,
           guidance: Optional[GuidanceConfig], steps: int, rng: RngState, eta: float = 0.0,
           lambda_mv: Optional[Scale] = None, dump_bundles: bool = False) -> SampleResult:
    """
    DDIM sampling of V views.

    cond: (V, 7, H, W); reference: (3, H, W) in [-1, 1] or None; phases per level (V, H_l, W_l, 3).
    With `guidance` None only the unconditional estimate is used; otherwise
    three passes per step feed the guidance composition.
    """
    v = cond.shape[0]
    if not 1 <= v <= 12:
        raise ValueError(f"Sampling supports 1 to 12 views, got {v}")
    state.model.eval()
    res = state.config.resolution
    ref_feats = None
    if reference is not None:
        if state.reference_net is None:
            logger.warning("Reference image ignored: the model has no reference network before the multi-view phase")
        else:
            ref_feats = [f[0] for f in state.reference_net(reference.unsqueeze(0))]

    x = gaussian(rng, (v, IMAGE_CHANNELS, res, res))
    timesteps = ddim_timesteps(schedule, steps)
    dumps = []
    degenerate_steps = 0
    x0 = x
    for i, t in enumerate(timesteps):
        eps_uncond = predict_noise(state, x, t, None, None, phases, lambda_mv)
        if guidance is None:
            eps = eps_uncond
        else:
            eps_geo = predict_noise(state, x, t, cond, None, phases, lambda_mv)
            eps_full = predict_noise(state, x, t, cond, ref_feats, phases, lambda_mv)
            bundle = GuidanceBundle(eps_uncond, eps_geo, eps_full)
            guided = compose(bundle, guidance)
            degenerate_steps += int(guided.degenerate)
            eps = guided.eps
            if dump_bundles:
                dumps.append(bundle.stacked())
        check_finite(eps, f'guided noise at t={t}')

        a_t = float(schedule.alpha_bars[t])
        a_prev = float(schedule.alpha_bars[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.0
        x0 = ((x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)).clamp(-1.0, 1.0)
        sigma = eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(max(0.0, 1.0 - a_t / a_prev))
        direction = math.sqrt(max(0.0, 1.0 - a_prev - sigma ** 2)) * eps
        x = math.sqrt(a_prev) * x0 + direction
        if sigma > 0:
            x = x + sigma * gaussian(rng, x.shape)

    images = ((x0 + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1).contiguous()
    bundles = torch.stack(dumps) if dump_bundles and dumps else None
    logger.info("Sampled %d views in %d steps", v, len(timesteps))
    return SampleResult(images=images, bundles=bundles, degenerate_steps=degenerate_steps)


def gradient_check(model: MultiViewDenoiser, batch_inputs: dict, target: torch.Tensor, rng: RngState,
                   n_weights: int = 100, h: float = 1e-6) -> float:
    """
    Max relative error between autograd and central finite differences on
    `n_weights` randomly chosen trainable scalars. Runs in float64 on a copy.
    """
    model = copy.deepcopy(model).double()
    inputs = {k: (v.double() if isinstance(v, torch.Tensor) and v.is_floating_point() else v)
              for k, v in batch_inputs.items()}
    if inputs.get('ref_feats') is not None:
        inputs['ref_feats'] = [f.double() for f in inputs['ref_feats']]
    target = target.double()

    def loss_fn():
        return F.mse_loss(model(**inputs), target)

    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    # Branches switched off by the inputs get no gradient and are not sampled
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)

    picks = torch.multinomial(sizes / sizes.sum(), n_weights, replacement=True, generator=rng.generator)
    worst = 0.0
    with torch.no_grad():
        for pi in picks.tolist():
            p = params[pi]
            flat = p.view(-1)
            j = int(randint(rng, flat.numel()))
            analytic = float(p.grad.view(-1)[j])
            original = float(flat[j])
            flat[j] = original + h
            plus = float(loss_fn())
            flat[j] = original - h
            minus = float(loss_fn())
            flat[j] = original
            numeric = (plus - minus) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst
