"""Per-sequence ViT image encoder with frozen weights and LoRA on query/value projections."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ValidationError

LORA_TARGETS = ("query", "value")


def lora_linear(x, W0, A, B, bias=None, scale=1.0):
    """``W0 x + scale * B A x`` for row-vector batches ``x[..., d_in]``."""
    if W0.shape[1] != x.shape[-1] or A.shape[1] != x.shape[-1]:
        raise ValidationError(f"input dim {x.shape[-1]} does not match W0 {tuple(W0.shape)} / A {tuple(A.shape)}")
    if B.shape[0] != W0.shape[0] or B.shape[1] != A.shape[0]:
        raise ValidationError(f"B {tuple(B.shape)} incompatible with W0 {tuple(W0.shape)} and A {tuple(A.shape)}")
    out = x @ W0.T
    if bias is not None:
        out = out + bias
    if A.shape[0]:
        out = out + scale * ((x @ A.T) @ B.T)
    return out


class LoRALinear(nn.Module):
    """Linear layer with a frozen weight and an optional trainable low-rank update.

    ``A`` starts from N(0, 0.01^2) and ``B`` from zeros, so the layer equals its
    frozen counterpart until ``B`` is trained. ``scale`` interpolates the update.
    """

    def __init__(self, d_in, d_out, rank=0, generator=None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(d_out), requires_grad=False)
        self.rank = rank
        self.scale = 1.0
        self.lora_A = nn.Parameter(torch.randn(rank, d_in, generator=generator) * 0.01)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, x):
        return lora_linear(x, self.weight, self.lora_A, self.lora_B, self.bias, self.scale)


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 1
    lora_rank: int = 5
    lora_targets: tuple = LORA_TARGETS
    pretrained_source: str | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.lora_rank < 0:
            raise ConfigurationError("lora_rank must be non-negative")
        if self.lora_rank > self.embed_dim:
            raise ConfigurationError("lora_rank cannot exceed embed_dim")
        unknown = set(self.lora_targets) - {"query", "key", "value", "output"}
        if unknown:
            raise ConfigurationError(f"unknown LoRA targets {sorted(unknown)}")
        self.lora_targets = tuple(self.lora_targets)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_pos_embed(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine position table of shape ``[grid, grid, dim]``."""
    if dim % 4:
        raise ConfigurationError("embed_dim must be divisible by 4 for 2D sin-cos positions")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(grid, dtype=torch.float64)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    parts = []
    for axis in (xx, yy):
        ang = axis[..., None] * omega
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1).float()


class Attention(nn.Module):
    def __init__(self, dim, heads, rank, targets, generator):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5

        def proj(name):
            return LoRALinear(dim, dim, rank if name in targets else 0, generator)

        self.query = proj("query")
        self.key = proj("key")
        self.value = proj("value")
        self.output = proj("output")

    def forward(self, x):
        n, t, d = x.shape
        h = self.heads

        def split(z):
            return z.view(n, t, h, d // h).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, d)
        return self.output(out)


class Block(nn.Module):
    def __init__(self, cfg: EncoderConfig, generator):
        super().__init__()
        d = cfg.embed_dim
        hidden = int(d * cfg.mlp_ratio)
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, cfg.num_heads, cfg.lora_rank, cfg.lora_targets, generator)
        self.norm2 = nn.LayerNorm(d)
        self.fc1 = LoRALinear(d, hidden)
        self.fc2 = LoRALinear(hidden, d)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class ImageEncoder(nn.Module):
    """ViT backbone shared by all sequences; each sequence is encoded on its own."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or EncoderConfig()
        lora_gen = torch.Generator().manual_seed(cfg.init_seed + 1)
        d, g = cfg.embed_dim, cfg.grid_size
        self.patch_embed = nn.Conv2d(cfg.in_chans, d, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(sincos_pos_embed(g, d)[None], requires_grad=False)
        self.blocks = nn.ModuleList([Block(cfg, lora_gen) for _ in range(cfg.depth)])
        self.neck = nn.LayerNorm(d)
        self._init_backbone(torch.Generator().manual_seed(cfg.init_seed))
        for name, p in self.named_parameters():
            p.requires_grad_(_is_lora(name))
        if cfg.pretrained_source:
            load_backbone(self, cfg.pretrained_source)

    @torch.no_grad()
    def _init_backbone(self, gen):
        for name, p in self.named_parameters():
            if _is_lora(name) or name == "pos_embed":
                continue
            if name.endswith("bias"):
                p.zero_()
            elif "norm" in name or name.startswith("neck"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.02)

    def lora_parameters(self):
        return [p for name, p in self.named_parameters() if _is_lora(name) and p.numel()]

    def frozen_parameters(self):
        return [p for name, p in self.named_parameters() if not _is_lora(name)]

    def set_lora_scale(self, scale: float) -> None:
        for m in self.modules():
            if isinstance(m, LoRALinear):
                m.scale = scale

    def forward(self, images):
        """Encode ``[N, H, W]`` or ``[N, C, H, W]`` images to ``[N, d, g, g]`` grids."""
        if images.dim() == 3:
            images = images[:, None]
        cfg = self.config
        if images.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValidationError(
                f"encoder expects {cfg.image_size}x{cfg.image_size} inputs, got {tuple(images.shape[-2:])}"
            )
        if images.shape[1] != cfg.in_chans:
            if images.shape[1] != 1:
                raise ValidationError(f"expected {cfg.in_chans} input channels, got {images.shape[1]}")
            images = images.expand(-1, cfg.in_chans, -1, -1)
        x = self.patch_embed(images)
        n, d, g, _ = x.shape
        x = x.permute(0, 2, 3, 1) + self.pos_embed
        x = x.reshape(n, g * g, d)
        for block in self.blocks:
            x = block(x)
        x = self.neck(x)
        return x.transpose(1, 2).reshape(n, d, g, g)


def _is_lora(name: str) -> bool:
    return "lora_" in name


def trainable_parameters(encoder: ImageEncoder) -> list[nn.Parameter]:
    return [p for p in encoder.parameters() if p.requires_grad and p.numel()]


def lora_parameter_count(config: EncoderConfig) -> int:
    d, r = config.embed_dim, config.lora_rank
    return config.depth * len(config.lora_targets) * (r * d + d * r)


def weight_manifest(encoder: ImageEncoder) -> dict[str, tuple[int, ...]]:
    """Key-to-shape table of the frozen backbone (what a weight file must provide)."""
    return {name: tuple(p.shape) for name, p in encoder.named_parameters() if not _is_lora(name)}


def interpolate_pos_embed(pos: torch.Tensor, grid: int) -> torch.Tensor:
    """Bilinearly resample a ``[1, g, g, d]`` position table to ``grid``."""
    if pos.shape[1] == grid:
        return pos
    t = pos.permute(0, 3, 1, 2)
    t = F.interpolate(t, size=(grid, grid), mode="bilinear", align_corners=False)
    return t.permute(0, 2, 3, 1)


def load_backbone(encoder: ImageEncoder, source) -> None:
    """Load frozen backbone weights from a state-dict file or mapping."""
    state = torch.load(source, map_location="cpu", weights_only=True) if isinstance(source, (str, Path)) else source
    manifest = weight_manifest(encoder)
    missing = sorted(set(manifest) - set(state))
    if missing:
        raise ValidationError(f"backbone weights missing keys: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    params = dict(encoder.named_parameters())
    with torch.no_grad():
        for key, shape in manifest.items():
            value = state[key]
            if key == "pos_embed":
                value = interpolate_pos_embed(value, encoder.config.grid_size)
            if tuple(value.shape) != shape:
                raise ValidationError(f"{key}: expected shape {shape}, got {tuple(value.shape)}")
            params[key].copy_(value)


def lora_state_dict(encoder: ImageEncoder) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in encoder.state_dict().items() if _is_lora(k)}


def save_lora(encoder: ImageEncoder, path) -> None:
    torch.save(lora_state_dict(encoder), path)


def load_lora(encoder: ImageEncoder, source) -> None:
    state = torch.load(source, map_location="cpu", weights_only=True) if isinstance(source, (str, Path)) else source
    expected = lora_state_dict(encoder)
    if set(state) != set(expected):
        raise ValidationError("LoRA checkpoint keys do not match the encoder")
    encoder.load_state_dict(state, strict=False)
