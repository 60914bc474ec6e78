"""Prompt encoder and the two-stage hierarchical mask decoder (class-balanced
noise injection and probability-gated mask cross-attention)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ValidationError

DEFAULT_MAX_VARIANCE = 0.1


# ------------------------------------------------------------------ prompts


def sinusoidal_encoding(coords, dim: int):
    """Encode normalised ``[..., 2]`` coordinates in [0, 1] as ``[..., dim]`` features."""
    if dim % 4:
        raise ValidationError("prompt embedding dim must be divisible by 4")
    quarter = dim // 4
    freqs = math.pi * (2.0 ** torch.linspace(0, 6, quarter, dtype=coords.dtype, device=coords.device))
    parts = []
    for axis in range(2):
        ang = coords[..., axis : axis + 1] * freqs
        parts += [torch.sin(ang), torch.cos(ang)]
    return torch.cat(parts, dim=-1)


class PromptEncoder(nn.Module):
    """Point and box-corner tokens: positional encoding plus a learned type embedding."""

    POINT, CORNER_MIN, CORNER_MAX = 0, 1, 2

    def __init__(self, dim: int, image_size: int = 224):
        super().__init__()
        self.dim = dim
        self.image_size = image_size
        self.type_embed = nn.Embedding(3, dim)
        self.no_prompt = nn.Parameter(torch.zeros(1, dim))
        nn.init.normal_(self.type_embed.weight, std=0.02)

    def normalize(self, coords):
        return (coords + 0.5) / self.image_size

    def encode_coords(self, coords):
        return sinusoidal_encoding(self.normalize(coords), self.dim)

    def dense_positional(self, grid: int):
        """Positional encoding at the centre of each grid cell, ``[g*g, dim]``."""
        cell = self.image_size / grid
        centres = (torch.arange(grid, dtype=torch.float32) + 0.5) * cell - 0.5
        xx, yy = torch.meshgrid(centres, centres, indexing="ij")
        return self.encode_coords(torch.stack([xx, yy], dim=-1).reshape(-1, 2))

    def forward(self, prompts):
        """``prompts``: ``[N, 6]`` rows of (x, y, x_min, y_min, x_max, y_max); ``None`` for no prompt.

        Returns ``[N, 3, dim]`` tokens (point, min corner, max corner) or
        ``[N, 1, dim]`` no-prompt tokens.
        """
        if prompts is None:
            return None
        prompts = torch.as_tensor(prompts, dtype=torch.float32, device=self.type_embed.weight.device)
        if prompts.dim() == 1:
            prompts = prompts[None]
        if prompts.shape[-1] != 6:
            raise ValidationError("prompt rows must be (x, y, x_min, y_min, x_max, y_max)")
        if (prompts < 0).any() or (prompts > self.image_size - 1).any():
            raise ValidationError("prompt coordinates outside the image")
        pts = prompts.view(-1, 3, 2)
        tokens = self.encode_coords(pts)
        return tokens + self.type_embed.weight[None]

    def empty(self, n: int):
        return self.no_prompt[None].expand(n, -1, -1)


def encode_prompts(prompt_set, encoder: PromptEncoder):
    return encoder(torch.as_tensor(prompt_set.as_array())[None])[0]


# ----------------------------------------------------- class-balanced noise


@dataclass
class VarianceTable:
    var: np.ndarray
    class_counts: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.var)

    def to_json(self) -> dict:
        return {
            "classes": {
                str(i): {"count": int(c), "var": float(v)} for i, (c, v) in enumerate(zip(self.class_counts, self.var))
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "VarianceTable":
        ids = sorted(payload["classes"], key=int)
        return cls(
            np.array([payload["classes"][i]["var"] for i in ids], dtype=np.float64),
            np.array([payload["classes"][i]["count"] for i in ids], dtype=np.int64),
            list(payload.get("warnings", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "VarianceTable":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_variance_table(train_masks, n_classes: int = 2, max_variance: float = DEFAULT_MAX_VARIANCE) -> VarianceTable:
    """``var(i) = kappa * total / count(i)`` with ``kappa`` such that the largest entry is ``max_variance``."""
    arrays = [np.asarray(getattr(m, "pixels", m)) for m in train_masks]
    if not arrays:
        raise ValidationError("variance table needs at least one training mask")
    counts = np.zeros(n_classes, dtype=np.int64)
    for a in arrays:
        counts += np.bincount(a.astype(np.int64).ravel(), minlength=n_classes)[:n_classes]
    notes = []
    present = counts > 0
    var = np.full(n_classes, max_variance, dtype=np.float64)
    if present.any():
        # kappa * total / count(i), with kappa cancelled so the rarest class lands exactly on max_variance.
        rarest = counts[present].min()
        var[present] = max_variance * rarest / counts[present]
    for i in np.flatnonzero(~present):
        msg = f"class {i} has no training pixels; variance set to {max_variance}"
        notes.append(msg)
        warnings.warn(msg, stacklevel=2)
    return VarianceTable(var, counts, notes)


def cmattn_perturb(X, gt, table, training: bool, generator=None):
    """Add ``N(0, var(gt))`` noise to token features ``X[..., T, d]`` during training.

    ``gt`` holds integer class ids ``[..., T]``. The input is returned untouched
    when ``training`` is false.
    """
    if not training:
        return X
    var = table.var if isinstance(table, VarianceTable) else np.asarray(table)
    gt = torch.as_tensor(gt, device=X.device).long()
    if gt.shape != X.shape[:-1]:
        raise ValidationError(f"labels {tuple(gt.shape)} not aligned with features {tuple(X.shape)}")
    if gt.numel() and (gt.min() < 0 or gt.max() >= len(var)):
        raise ValidationError("class id outside the variance table")
    std = torch.as_tensor(np.sqrt(var), dtype=X.dtype, device=X.device)[gt]
    noise = torch.randn(X.shape, generator=generator, dtype=X.dtype, device=X.device)
    return X + noise * std[..., None]


# -------------------------------------------------------- gated attention


def gated_attention(Q, K, V, M, scale=None):
    """``(M * softmax(Q K^T * scale)) V`` with ``M[..., n_k]`` gating the key axis."""
    scale = 1.0 / math.sqrt(Q.shape[-1]) if scale is None else scale
    weights = torch.softmax((Q @ K.transpose(-2, -1)) * scale, dim=-1)
    return (weights * M[..., None, :]) @ V


def lmca(X, M, K, Q, V, scale=None):
    """Residual mask-gated cross-attention; ``M`` must lie in [0, 1] and is used as is."""
    if (M < 0).any() or (M > 1).any():
        raise ValidationError("gate probabilities must lie in [0, 1]")
    return gated_attention(Q, K, V, M, scale) + X


class MultiHeadAttention(nn.Module):
    """Attention with an internal (possibly downsampled) width and optional key gate."""

    def __init__(self, dim, heads, inner=None):
        super().__init__()
        inner = inner or dim
        self.heads = heads
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim, bias=False)

    def _split(self, x):
        n, t, _ = x.shape
        return x.view(n, t, self.heads, -1).transpose(1, 2)

    def forward(self, q, k, v, gate=None):
        Q, K, V = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        if gate is None:
            gate = torch.ones(K.shape[0], 1, K.shape[2], dtype=K.dtype, device=K.device)
        else:
            gate = gate[:, None, :]
        out = gated_attention(Q, K, V, gate)
        n, h, t, dh = out.shape
        return self.out(out.transpose(1, 2).reshape(n, t, h * dh))


class TwoWayBlock(nn.Module):
    """Token self-attention, token-to-image cross-attention (optionally gated),
    MLP, then image-to-token cross-attention."""

    def __init__(self, dim, heads, mlp_dim, downsample=2):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = MultiHeadAttention(dim, heads, dim // downsample)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = MultiHeadAttention(dim, heads, dim // downsample)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, token_pe, image, image_pe, gate=None):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        # With a gate this is the residual probability-gated cross-attention.
        tokens = self.norm2(tokens + self.token_to_image(tokens + token_pe, image + image_pe, image, gate))
        tokens = self.norm3(tokens + self.mlp(tokens))
        image = self.norm4(image + self.image_to_token(image + image_pe, tokens + token_pe, tokens))
        return tokens, image


class MaskHead(nn.Module):
    """Upscale image tokens 4x and dot them with a hypernetwork projection of the mask token."""

    def __init__(self, dim):
        super().__init__()
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, 2, stride=2),
            nn.GroupNorm(1, dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, 2, stride=2),
            nn.GELU(),
        )
        self.hyper = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim // 8))

    def forward(self, mask_token, image, grid):
        n, _, d = image.shape
        up = self.upscale(image.transpose(1, 2).reshape(n, d, grid, grid))
        w = self.hyper(mask_token)
        return torch.einsum("nc,nchw->nhw", w, up)


@dataclass(frozen=True)
class SegmentationOutput:
    """Probability maps for one sequence; ``final_mask`` averages the two stages."""

    prior_mask: np.ndarray
    refined_mask: np.ndarray

    @property
    def final_mask(self) -> np.ndarray:
        return (self.prior_mask + self.refined_mask) / 2


@dataclass
class DecoderOutput:
    prior_logits: torch.Tensor
    refined_logits: torch.Tensor

    @property
    def prior_mask(self):
        return torch.sigmoid(self.prior_logits)

    @property
    def refined_mask(self):
        return torch.sigmoid(self.refined_logits)

    @property
    def final_mask(self):
        return (self.prior_mask + self.refined_mask) / 2


def downsample_labels(gt, grid: int):
    """Majority label per grid cell for ``[N, H, W]`` binary masks -> ``[N, g*g]``."""
    frac = F.adaptive_avg_pool2d(gt.float()[:, None], grid)[:, 0]
    return (frac >= 0.5).long().flatten(1)


class HierarchicalMaskDecoder(nn.Module):
    """Stage 1 decodes a prior mask; stage 2 perturbs the image tokens with
    class-balanced noise (training only) and decodes a refined mask with
    cross-attention gated by the stage-1 probabilities."""

    def __init__(self, dim, grid, image_size=224, depth=2, heads=4, mlp_dim=None, use_cmattn=True, use_lmca=True):
        super().__init__()
        mlp_dim = mlp_dim or 4 * dim
        self.grid = grid
        self.image_size = image_size
        self.use_cmattn = use_cmattn
        self.use_lmca = use_lmca
        self.mask_tokens = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.no_mask = nn.Parameter(torch.zeros(dim))
        self.stage1 = nn.ModuleList([TwoWayBlock(dim, heads, mlp_dim) for _ in range(depth)])
        self.stage2 = nn.ModuleList([TwoWayBlock(dim, heads, mlp_dim) for _ in range(depth)])
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.head1 = MaskHead(dim)
        self.head2 = MaskHead(dim)

    def _to_full(self, logits):
        return F.interpolate(logits[:, None], size=(self.image_size,) * 2, mode="bilinear", align_corners=False)[:, 0]

    def forward(self, image, image_pe, prompt_tokens, gt=None, table=None, training=False, generator=None):
        """``image``: ``[N, d, g, g]``; ``prompt_tokens``: ``[N, P, d]``; ``gt``: ``[N, H, W]`` (training)."""
        n, d, g, _ = image.shape
        img = image.flatten(2).transpose(1, 2) + self.no_mask
        pe = image_pe[None].expand(n, -1, -1)

        def run(stage, token, image_tokens, gate=None):
            tokens = torch.cat([token[None, None].expand(n, 1, d), prompt_tokens], dim=1)
            token_pe = torch.zeros_like(tokens)
            token_pe[:, 1:] = prompt_tokens
            for block in stage:
                tokens, image_tokens = block(tokens, token_pe, image_tokens, pe, gate)
            return tokens, image_tokens

        tokens1, img1 = run(self.stage1, self.mask_tokens[0], img)
        prior_logits = self._to_full(self.head1(tokens1[:, 0], img1, g))

        img2 = self.norm1(img1)
        if self.use_cmattn and training and table is not None and gt is not None:
            img2 = cmattn_perturb(img2, downsample_labels(gt, g), table, True, generator)
        gate = None
        if self.use_lmca:
            gate = F.adaptive_avg_pool2d(torch.sigmoid(prior_logits)[:, None], g).flatten(1)
        # Residual path keeps the initial image embedding next to the perturbed features.
        tokens2, img2 = run(self.stage2, self.mask_tokens[1], img + img2, gate)
        refined_logits = self._to_full(self.head2(self.norm2(tokens2[:, 0]), img2, g))
        return DecoderOutput(prior_logits, refined_logits)
