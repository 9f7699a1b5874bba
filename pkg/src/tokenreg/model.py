"""The registration network.

Layout of one forward pass::

    moving, fixed --dual encoder--> F_m^1..4, F_f^1..4     (C, 2C, 4C, 8C channels)
    concat(F_m^4, F_f^4) -> tokens (16C wide, one per 1/8-grid voxel)
    adapter0 -> (+ position embedding) -> stack1 -> inner adapter -> stack2 -> y
    per cascade step, per stage S_i (i = 1 coarsest .. 4 full resolution):
        adapter_i(y) -> voxel shuffle -> F_t at the S_i grid
        fuse(F_m, F_f, up(previous stage), F_t [, field, warped image] [, previous step])
        field head (S_2..S_4) -> stage field, composed coarse-to-fine

Stacks follow the LLaMA-2 layer recipe (pre-RMSNorm, rotary multi-head
attention, SwiGLU) with deterministically seeded weights that stay frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from tokenreg import diffops as D
from tokenreg.volume import VolumeGeometry
from tokenreg.warp import compose_tensor, upscale_tensor, warp_tensor

LEVELS = 4
BOTTLENECK_MODES = ("frozen_seeded", "trainable", "standard_attention")


class ConfigError(ValueError):
    pass


def find_multiple(n: int, k: int) -> int:
    return n if n % k == 0 else n + k - n % k


@dataclass(frozen=True)
class ModelConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    base_channels: int = 8
    d_model: int = 256
    heads: int = 4
    stack_depth: int = 2
    inner_multiple: int = 2
    causal_mask: bool = True
    use_pos_embed: bool = True
    bottleneck_mode: str = "frozen_seeded"
    cascade_steps: int = 3
    bottleneck_seed: int = 0
    deep_supervision: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("base_channels", "d_model", "heads", "stack_depth", "inner_multiple"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % (2 * self.heads):
            raise ConfigError(f"d_model={self.d_model} must be divisible by 2*heads={2 * self.heads}")
        if self.bottleneck_mode not in BOTTLENECK_MODES:
            raise ConfigError(f"bottleneck_mode must be one of {BOTTLENECK_MODES}")
        if self.cascade_steps < 1:
            raise ConfigError("cascade_steps must be >= 1")
        try:
            VolumeGeometry(self.dims).check_divisible(2 ** (LEVELS - 1))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def ffn_hidden(self) -> int:
        return find_multiple(int(8 * self.d_model / 3), 64)

    @property
    def token_grid(self) -> tuple[int, int, int]:
        nx, ny, nz = self.dims
        return (nz // 8, ny // 8, nx // 8)

    @property
    def token_count(self) -> int:
        return math.prod(self.token_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def adapter_width(i: int, c: int) -> int:
    """Output width of the stage-``i`` adapter: ``2^(2(i+1)) * C``."""
    return 2 ** (2 * (i + 1)) * c


def stage_channels(i: int, c: int) -> int:
    """Channels of the reconstructed stage-``i`` feature map: ``2^(5-i) * C``."""
    return 2 ** (5 - i) * c


# ---------------------------------------------------------------------------
# layers


# variance-preserving gain for leaky ReLU(0.2)
LEAKY_GAIN = math.sqrt(2.0 / (1 + 0.2**2))


def _uniform(shape, fan_in: int, gen: torch.Generator, gain: float = 1.0) -> torch.Tensor:
    bound = gain * math.sqrt(3.0 / fan_in)
    return (torch.rand(shape, generator=gen) * 2 - 1) * bound


class Linear(nn.Module):
    def __init__(self, cin: int, cout: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(_uniform((cout, cin), cin, gen))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return D.linear(x, self.weight, self.bias)


class ConvBlock(nn.Module):
    """3x3x3 convolution followed by leaky ReLU (slope 0.2)."""

    def __init__(self, cin: int, cout: int, gen: torch.Generator, stride: int = 1):
        super().__init__()
        fan_in = cin * 27
        self.stride = stride
        self.weight = nn.Parameter(_uniform((cout, cin, 3, 3, 3), fan_in, gen, LEAKY_GAIN))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return D.leaky_relu(D.conv3d(x, self.weight, self.bias, stride=self.stride), 0.2)


class FieldHead(nn.Module):
    """3x3x3 convolution to a 3-channel displacement, zero-initialised."""

    def __init__(self, cin: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(3, cin, 3, 3, 3))
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x):
        return D.conv3d(x, self.weight, self.bias)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int, gen: torch.Generator):
        super().__init__()
        fan_in = cin  # one tap per output voxel at stride 2
        self.weight = nn.Parameter(_uniform((cin, cout, 2, 2, 2), fan_in, gen))
        self.bias = nn.Parameter(torch.zeros(cout))

    def forward(self, x):
        return D.transposed_conv3d(x, self.weight, self.bias)


class EncoderStream(nn.Module):
    def __init__(self, c: int, gen: torch.Generator):
        super().__init__()
        widths = [c * 2**k for k in range(LEVELS)]
        blocks = []
        cin = 1
        for level, cout in enumerate(widths):
            stride = 1 if level == 0 else 2
            blocks.append(nn.Sequential(ConvBlock(cin, cout, gen, stride), ConvBlock(cout, cout, gen)))
            cin = cout
        self.levels = nn.ModuleList(blocks)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for block in self.levels:
            x = block(x)
            feats.append(x)
        return feats


class DualEncoder(nn.Module):
    """Two encoder streams with independent weights."""

    def __init__(self, c: int, gen: torch.Generator):
        super().__init__()
        self.moving = EncoderStream(c, gen)
        self.fixed = EncoderStream(c, gen)

    def forward(self, moving, fixed) -> "EncoderPyramid":
        return EncoderPyramid(self.moving(moving), self.fixed(fixed))


@dataclass
class EncoderPyramid:
    moving: list[torch.Tensor]
    fixed: list[torch.Tensor]


# ---------------------------------------------------------------------------
# transformer bottleneck


def _frozen_normal(shape, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen) / math.sqrt(fan_in)


class LlamaLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d, h = cfg.d_model, cfg.ffn_hidden
        self.heads = cfg.heads
        self.causal = cfg.causal_mask
        self.attn_norm = nn.Parameter(torch.ones(d))
        self.wq = nn.Parameter(_frozen_normal((d, d), d, gen))
        self.wk = nn.Parameter(_frozen_normal((d, d), d, gen))
        self.wv = nn.Parameter(_frozen_normal((d, d), d, gen))
        self.wo = nn.Parameter(_frozen_normal((d, d), d, gen))
        self.ffn_norm = nn.Parameter(torch.ones(d))
        self.w1 = nn.Parameter(_frozen_normal((h, d), d, gen))
        self.w3 = nn.Parameter(_frozen_normal((h, d), d, gen))
        self.w2 = nn.Parameter(_frozen_normal((d, h), h, gen))

    def attention(self, x):
        b, t, d = x.shape
        hd = d // self.heads

        def heads(w):
            return D.linear(x, w).reshape(b, t, self.heads, hd).transpose(1, 2)

        pos = torch.arange(t)
        q = D.rotary_embed(heads(self.wq), pos)
        k = D.rotary_embed(heads(self.wk), pos)
        v = heads(self.wv)
        scores = D.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd)
        if self.causal:
            scores = scores + causal_bias(t, scores.dtype)
        out = D.matmul(D.softmax(scores, -1), v)
        return D.linear(out.transpose(1, 2).reshape(b, t, d), self.wo)

    def forward(self, x):
        x = x + self.attention(D.rms_norm(x, self.attn_norm))
        hidden = D.rms_norm(x, self.ffn_norm)
        gated = D.silu(D.linear(hidden, self.w1)) * D.linear(hidden, self.w3)
        return x + D.linear(gated, self.w2)


def causal_bias(t: int, dtype) -> torch.Tensor:
    return torch.full((t, t), float("-inf"), dtype=dtype).triu(1)


class LlamaStack(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(LlamaLayer(cfg, gen) for _ in range(cfg.stack_depth))
        self.norm = nn.Parameter(torch.ones(cfg.d_model))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return D.rms_norm(x, self.norm)


def layer_norm(x, weight, bias):
    centred = x - x.mean(-1, keepdim=True)
    return D.rms_norm(centred, weight) + bias


class StandardLayer(nn.Module):
    """Plain pre-LayerNorm transformer layer: softmax attention and a GELU MLP."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.heads = cfg.heads
        self.norm1_w = nn.Parameter(torch.ones(d))
        self.norm1_b = nn.Parameter(torch.zeros(d))
        self.qkv = Linear(d, 3 * d, gen)
        self.proj = Linear(d, d, gen)
        self.norm2_w = nn.Parameter(torch.ones(d))
        self.norm2_b = nn.Parameter(torch.zeros(d))
        self.fc1 = Linear(d, 4 * d, gen)
        self.fc2 = Linear(4 * d, d, gen)

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(layer_norm(x, self.norm1_w, self.norm1_b))
        q, k, v = qkv.reshape(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = D.softmax(D.matmul(q, k.transpose(-1, -2)) / math.sqrt(hd), -1)
        x = x + self.proj(D.matmul(attn, v).transpose(1, 2).reshape(b, t, d))
        return x + self.fc2(D.gelu(self.fc1(layer_norm(x, self.norm2_w, self.norm2_b))))


class StandardStack(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(StandardLayer(cfg, gen) for _ in range(cfg.stack_depth))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Bridge(nn.Module):
    """Trainable pieces around the stacks: adapter0, inner adapter, position embedding."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        c, d = cfg.base_channels, cfg.d_model
        self.adapter0 = nn.Sequential(Linear(16 * c, d // 2, gen), Linear(d // 2, d, gen))
        self.inner = nn.Sequential(
            Linear(d, cfg.inner_multiple * d, gen), nn.SiLU(), Linear(cfg.inner_multiple * d, d, gen)
        )
        self.pos_embed = nn.Parameter(0.02 * torch.randn(cfg.token_count, d, generator=gen))


class Bottleneck(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.bridge = Bridge(cfg, gen)
        stack_gen = torch.Generator().manual_seed(cfg.bottleneck_seed)
        stack_cls = StandardStack if cfg.bottleneck_mode == "standard_attention" else LlamaStack
        self.stack1 = stack_cls(cfg, stack_gen)
        self.stack2 = stack_cls(cfg, stack_gen)

    def forward(self, pyramid: EncoderPyramid) -> torch.Tensor:
        deep = D.concat([pyramid.moving[-1], pyramid.fixed[-1]], axis=1)
        b, ch = deep.shape[:2]
        tokens = deep.reshape(b, ch, -1).transpose(1, 2)
        if tokens.shape[1] != self.cfg.token_count:
            raise D.ShapeError(
                f"{tokens.shape[1]} tokens do not match the position embedding ({self.cfg.token_count})"
            )
        x = self.bridge.adapter0(tokens)
        if self.cfg.use_pos_embed:
            x = x + self.bridge.pos_embed
        x = self.stack1(x)
        x = self.bridge.inner(x)
        return self.stack2(x)


# ---------------------------------------------------------------------------
# decoder


def voxel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """``(N, C*r^3, D, H, W) -> (N, C, D*r, H*r, W*r)``; channel groups are ``(c, rz, ry, rx)``."""
    if r == 1:
        return x
    n, ch, d, h, w = x.shape
    if ch % r**3:
        raise D.ShapeError(f"voxel_shuffle: {ch} channels not divisible by {r ** 3}")
    c = ch // r**3
    x = x.reshape(n, c, r, r, r, d, h, w).permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(n, c, d * r, h * r, w * r)


def reconstruct_stage_features(y: torch.Tensor, i: int, adapter: Linear, token_grid) -> torch.Tensor:
    """Project tokens with ``adapter`` and reshuffle them onto the stage-``i`` grid."""
    if i not in (1, 2, 3, 4):
        raise ValueError(f"stage index must be in 1..4, got {i}")
    proj = adapter(y)
    b, t, ch = proj.shape
    grid = proj.transpose(1, 2).reshape(b, ch, *token_grid)
    return voxel_shuffle(grid, 2 ** (i - 1))


@dataclass
class StepOutput:
    field: torch.Tensor
    fused: list[torch.Tensor]
    stage_fields: list[torch.Tensor] = field(default_factory=list)
    # running total (including earlier cascade steps) at each of S_2..S_4
    stage_totals: list[torch.Tensor] = field(default_factory=list)


class StepDecoder(nn.Module):
    """One cascade step: per-stage adapters and the four decoder stages."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator, receives_previous: bool):
        super().__init__()
        c, d = cfg.base_channels, cfg.d_model
        self.cfg = cfg
        self.receives_previous = receives_previous
        self.adapters = nn.ModuleList(Linear(d, adapter_width(i, c), gen) for i in range(1, 5))
        for i, a in enumerate(self.adapters, 1):
            if a.out_features != adapter_width(i, c):
                raise ConfigError(f"adapter_{i} width {a.out_features} != {adapter_width(i, c)}")

        fuse, heads, ups = [], [], []
        for i in range(1, 5):
            width = c * 2 ** (4 - i)  # 8C, 4C, 2C, C
            cin = 2 * width + stage_channels(i, c)
            if i > 1:
                cin += width  # upsampled features from the coarser stage
            if i > 2:
                cin += 4  # incoming field and warped moving image
            if receives_previous:
                cin += width
            fuse.append(ConvBlock(cin, width, gen))
            heads.append(FieldHead(width) if i > 1 else nn.Identity())
            ups.append(Upsample(width, width // 2, gen) if i < 4 else nn.Identity())
        self.fuse = nn.ModuleList(fuse)
        self.heads = nn.ModuleList(heads)
        self.ups = nn.ModuleList(ups)

    def forward(self, pyramid, y, moving_levels, base_levels=None, previous=None) -> StepOutput:
        grid = self.cfg.token_grid
        fused_all, stage_fields, stage_totals = [], [], []
        up = None
        local = None  # running composed field produced by this step
        for i in range(1, 5):
            level = 4 - i  # encoder index: S_1 uses the deepest features
            parts = []
            if i > 2:
                local = upscale_tensor(local)
                total = local if base_levels is None else compose_tensor(base_levels[level], local)
                parts += [total, warp_tensor(moving_levels[level], total)]
            parts += [pyramid.moving[level], pyramid.fixed[level]]
            if up is not None:
                parts.append(up)
            parts.append(reconstruct_stage_features(y, i, self.adapters[i - 1], grid))
            if self.receives_previous:
                parts.append(previous[i - 1])
            fused = self.fuse[i - 1](D.concat(parts, axis=1))
            fused_all.append(fused)
            if i > 1:
                psi = self.heads[i - 1](fused)
                stage_fields.append(psi)
                local = psi if local is None else compose_tensor(local, psi)
                stage_totals.append(local if base_levels is None else compose_tensor(base_levels[level], local))
            if i < 4:
                up = self.ups[i - 1](fused)
        return StepOutput(local, fused_all, stage_fields, stage_totals)


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardResult:
    field: torch.Tensor
    step_fields: list[torch.Tensor]
    totals: list[torch.Tensor]
    pyramid: EncoderPyramid | None = None
    tokens: torch.Tensor | None = None
    steps: list[StepOutput] = field(default_factory=list)


class RegModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.encoder = DualEncoder(cfg.base_channels, gen)
        self.bottleneck = Bottleneck(cfg, gen)
        self.decoders = nn.ModuleList(StepDecoder(cfg, gen, k > 0) for k in range(cfg.cascade_steps))
        # cascade steps whose decoders have been trained; persisted in checkpoints
        self.trained_steps: list[int] = []
        if cfg.bottleneck_mode == "frozen_seeded":
            for p in self.stack_parameters():
                p.requires_grad_(False)

    def stack_parameters(self):
        yield from self.bottleneck.stack1.parameters()
        yield from self.bottleneck.stack2.parameters()

    def moving_levels(self, moving: torch.Tensor) -> list[torch.Tensor]:
        return image_pyramid(moving)

    def _check_input(self, moving, fixed):
        if moving.shape != fixed.shape:
            raise D.ShapeError(f"moving {tuple(moving.shape)} and fixed {tuple(fixed.shape)} differ")
        nz, ny, nx = moving.shape[2:]
        if (nx, ny, nz) != self.cfg.dims:
            raise D.ShapeError(f"input dims {(nx, ny, nz)} do not match model dims {self.cfg.dims}")

    def encode_pair(self, moving, fixed) -> EncoderPyramid:
        self._check_input(moving, fixed)
        return self.encoder(moving, fixed)

    def forward_cascaded(self, moving, fixed, steps: int | None = None, grad_from_step: int = 1) -> ForwardResult:
        """Run cascade steps ``1..steps``; the returned field composes all of them.

        Steps before ``grad_from_step`` (and the shared encoder and bottleneck
        when ``grad_from_step > 1``) run without recording a graph.
        """
        steps = self.cfg.cascade_steps if steps is None else steps
        if not 1 <= steps <= len(self.decoders):
            raise ValueError(f"requested {steps} cascade steps, model has {len(self.decoders)}")
        self._check_input(moving, fixed)
        moving, fixed = standardize(moving), standardize(fixed)
        with torch.set_grad_enabled(torch.is_grad_enabled() and grad_from_step <= 1):
            pyramid = self.encoder(moving, fixed)
            y = self.bottleneck(pyramid)
        levels = self.moving_levels(moving)

        total = None
        base_levels = None
        previous = None
        step_fields, totals, outputs = [], [], []
        for k in range(1, steps + 1):
            with torch.set_grad_enabled(torch.is_grad_enabled() and k >= grad_from_step):
                out = self.decoders[k - 1](pyramid, y, levels, base_levels, previous)
                total = out.field if total is None else compose_tensor(total, out.field)
            step_fields.append(out.field)
            totals.append(total)
            outputs.append(out)
            previous = out.fused
            if k < steps:
                base_levels = field_pyramid(total)
        return ForwardResult(total, step_fields, totals, pyramid, y, outputs)

    def forward_single(self, moving, fixed) -> ForwardResult:
        return self.forward_cascaded(moving, fixed, steps=1)

    def forward(self, moving, fixed, steps: int | None = None) -> torch.Tensor:
        return self.forward_cascaded(moving, fixed, steps).field


def standardize(image: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-image zero mean, unit variance (network input only; losses use raw intensities)."""
    dims = tuple(range(1, image.dim()))
    mean = image.mean(dim=dims, keepdim=True)
    std = image.std(dim=dims, keepdim=True, unbiased=False)
    return (image - mean) / (std + eps)


def image_pyramid(image: torch.Tensor) -> list[torch.Tensor]:
    """Image resampled to every encoder level (centre-aligned trilinear)."""
    levels = [image]
    for k in range(1, LEVELS):
        target = [s // 2**k for s in image.shape[2:]]
        levels.append(F.interpolate(image, size=target, mode="trilinear", align_corners=False))
    return levels


def field_pyramid(disp: torch.Tensor) -> list[torch.Tensor]:
    """A full-resolution field expressed on every encoder level (values rescaled to level voxels)."""
    levels = [disp]
    for k in range(1, LEVELS):
        target = [s // 2**k for s in disp.shape[2:]]
        levels.append(F.interpolate(disp, size=target, mode="trilinear", align_corners=False) / 2**k)
    return levels


# ---------------------------------------------------------------------------
# parameter partitions


def phase_step(phase: str, n: int) -> int | None:
    """Cascade step trained by ``phase``; ``None`` for joint."""
    if phase == "single":
        return 1
    if phase.startswith("cascade_step_"):
        try:
            k = int(phase.removeprefix("cascade_step_"))
        except ValueError:
            raise ValueError(f"unknown phase {phase!r}") from None
        if not 1 <= k <= n:
            raise ValueError(f"phase {phase!r} outside 1..{n} cascade steps")
        return k
    if phase == "joint":
        return None
    raise ValueError(f"unknown phase {phase!r}")


def parameter_groups(model: RegModel, phase: str) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Partition named parameters into ``trainable`` and ``frozen`` for ``phase``.

    ``single`` and ``cascade_step_1`` train the encoder, bridge and step-1
    decoder; ``cascade_step_k`` (k > 1) trains only the step-k decoder;
    ``joint`` trains the bridge and every decoder. Seeded stacks are frozen
    in every phase; in the trainable bottleneck modes they train with the
    encoder.
    """
    step = phase_step(phase, len(model.decoders))
    frozen_stacks = model.cfg.bottleneck_mode == "frozen_seeded"

    def trainable(name: str) -> bool:
        if name.startswith(("bottleneck.stack1.", "bottleneck.stack2.")):
            return not frozen_stacks and step == 1
        if name.startswith("encoder."):
            return step == 1
        if name.startswith("bottleneck.bridge."):
            return step in (1, None)
        if name.startswith("decoders."):
            k = int(name.split(".")[1]) + 1
            return step is None or k == step
        raise ValueError(f"unclassified parameter {name}")

    groups = {"trainable": [], "frozen": []}
    for name, p in model.named_parameters():
        groups["trainable" if trainable(name) else "frozen"].append((name, p))
    return groups


def apply_phase(model: RegModel, phase: str) -> list[nn.Parameter]:
    """Set ``requires_grad`` per :func:`parameter_groups`; return the trainable parameters."""
    groups = parameter_groups(model, phase)
    for _, p in groups["frozen"]:
        p.requires_grad_(False)
        p.grad = None
    for _, p in groups["trainable"]:
        p.requires_grad_(True)
    return [p for _, p in groups["trainable"]]


def params_hash(named_params) -> str:
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def stack_hash(model: RegModel) -> str:
    return params_hash(
        (n, p) for n, p in model.named_parameters() if n.startswith(("bottleneck.stack1.", "bottleneck.stack2."))
    )


def prefix_hash(model: RegModel, prefix: str) -> str:
    return params_hash((n, p) for n, p in model.named_parameters() if n.startswith(prefix))


def shape_walk(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Declared feature shapes ``(channels, nz, ny, nx)`` for every stage, without running the model."""
    c = cfg.base_channels
    nx, ny, nz = cfg.dims
    shapes = {}
    for level in range(LEVELS):
        s = 2**level
        spatial = (nz // s, ny // s, nx // s)
        shapes[f"encoder.level{level + 1}"] = (c * 2**level,) + spatial
    shapes["tokens"] = (cfg.token_count, cfg.d_model)
    for i in range(1, 5):
        s = 2 ** (4 - i)
        spatial = (nz // s, ny // s, nx // s)
        shapes[f"S{i}.F_t"] = (stage_channels(i, c),) + spatial
        shapes[f"S{i}.fused"] = (c * 2 ** (4 - i),) + spatial
        if i > 1:
            shapes[f"S{i}.field"] = (3,) + spatial
    return shapes
