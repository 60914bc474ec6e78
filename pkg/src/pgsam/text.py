"""Expert-report prompting: frozen text embedding, adapter, coarse-mask decoder,
spatial prior and point/box extraction."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import read_channels, write_channels
from .exceptions import ConfigurationError, ProviderError, ValidationError

_TOKEN_RE = re.compile(r"[a-z]+|\d+(?:\.\d+)?")


class TextProvider:
    """Frozen text encoder interface. Subclasses set ``provider_id`` and ``dim``."""

    provider_id = "abstract"
    dim = 0

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_batch(self, texts) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if texts else np.zeros((0, self.dim), np.float32)


class HashTextProvider(TextProvider):
    """Bag of hashed tokens: each lower-cased word or number maps to a fixed
    Gaussian vector seeded by its BLAKE2 digest; the text embedding is the
    normalised sum. Deterministic and parameter-free."""

    def __init__(self, dim: int = 256, salt: str = "pgsam"):
        self.dim = dim
        self.salt = salt
        self.provider_id = f"hash-bag-v1:{dim}:{salt}"

    @staticmethod
    def tokenize(text: str) -> list[str]:
        return _TOKEN_RE.findall(text.lower())

    @lru_cache(maxsize=4096)
    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.salt}:{token}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec = rng.standard_normal(self.dim).astype(np.float32)
        vec.flags.writeable = False
        return vec

    def embed(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("text must be a non-empty string")
        tokens = self.tokenize(text)
        if not tokens:
            raise ValidationError(f"no tokens in text {text!r}")
        total = np.sum([self.token_vector(t) for t in tokens], axis=0)
        return (total / np.sqrt(len(tokens))).astype(np.float32)


class TransformersTextProvider(TextProvider):
    """Mean-pooled last hidden state of a Hugging Face text model (e.g. a
    MedCLIP/BioClinicalBERT checkpoint). Weights are loaded lazily and frozen."""

    def __init__(self, model_name_or_path: str, local_files_only: bool = True, max_length: int = 77):
        self.model_name_or_path = model_name_or_path
        self.local_files_only = local_files_only
        self.max_length = max_length
        self.provider_id = f"transformers:{model_name_or_path}"
        self._model = None
        self._tokenizer = None

    def _load(self):
        if self._model is not None:
            return
        try:
            from transformers import AutoModel, AutoTokenizer

            self._tokenizer = AutoTokenizer.from_pretrained(
                self.model_name_or_path, local_files_only=self.local_files_only
            )
            model = AutoModel.from_pretrained(self.model_name_or_path, local_files_only=self.local_files_only)
        except Exception as exc:  # noqa: BLE001 - any loader failure means the provider is unusable
            raise ProviderError(f"text provider {self.model_name_or_path!r} unavailable: {exc}") from exc
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self.dim = int(model.config.hidden_size)

    def embed(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("text must be a non-empty string")
        self._load()
        enc = self._tokenizer(text, return_tensors="pt", truncation=True, max_length=self.max_length)
        with torch.no_grad():
            hidden = self._model(**enc).last_hidden_state
        mask = enc["attention_mask"][..., None].float()
        return ((hidden * mask).sum(1) / mask.sum(1))[0].numpy().astype(np.float32)


def make_provider(spec: str) -> TextProvider:
    """``"hash"``, ``"hash:<dim>"`` or ``"transformers:<model>"``."""
    kind, _, arg = spec.partition(":")
    if kind == "hash":
        return HashTextProvider(int(arg) if arg else 256)
    if kind == "transformers" and arg:
        return TransformersTextProvider(arg)
    raise ConfigurationError(f"unknown text provider {spec!r}")


def embed_text(text: str, provider: TextProvider) -> np.ndarray:
    return provider.embed(text)


class TextAdapter(nn.Module):
    """Bottleneck adapter ``e + up(gelu(down(e)))``; ``up`` starts at zero."""

    def __init__(self, dim: int, bottleneck: int = 32):
        super().__init__()
        if not 0 < bottleneck < dim:
            raise ConfigurationError(f"bottleneck {bottleneck} must be in (0, {dim})")
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def bottleneck(self, e):
        return F.gelu(self.down(e))

    def forward(self, e):
        return e + self.up(self.bottleneck(e))


def upsample_factors(grid: int, image_size: int) -> list[int]:
    """Prime factorisation of ``image_size / grid``, largest factor last."""
    if image_size % grid:
        raise ConfigurationError(f"image size {image_size} is not a multiple of grid {grid}")
    n, factors, p = image_size // grid, [], 2
    while n > 1:
        while n % p == 0:
            factors.append(p)
            n //= p
        p += 1
    return sorted(factors)


class CoarseMaskDecoder(nn.Module):
    """Text-modulated transposed-conv decoder from the fused grid to a full-size mask.

    The text vector yields a per-channel scale and shift (``x * (1 + gamma) + beta``);
    each upsampling stage is a ``ConvTranspose2d`` with kernel = stride = one prime
    factor of ``image_size / grid``.
    """

    def __init__(self, dim: int, text_dim: int, grid: int, image_size: int = 224, min_channels: int = 8):
        super().__init__()
        self.film_scale = nn.Linear(text_dim, dim)
        self.film_shift = nn.Linear(text_dim, dim)
        for lin in (self.film_scale, self.film_shift):
            nn.init.normal_(lin.weight, std=0.02)
            nn.init.zeros_(lin.bias)
        self.factors = upsample_factors(grid, image_size)
        layers = []
        ch = dim
        for f in self.factors:
            out = max(ch // 2, min_channels)
            layers += [nn.ConvTranspose2d(ch, out, f, stride=f), nn.GroupNorm(1, out), nn.GELU()]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 1))
        self.upsample = nn.Sequential(*layers)

    def modulate(self, x_f, text):
        if text is None:
            return x_f
        gamma = self.film_scale(text)[..., None, None]
        beta = self.film_shift(text)[..., None, None]
        return x_f * (1 + gamma) + beta

    def forward(self, x_f, text=None):
        """Return coarse-mask logits ``[N, image_size, image_size]``."""
        return self.upsample(self.modulate(x_f, text))[:, 0]


# ------------------------------------------------------------- spatial prior


@dataclass
class SpatialPriorMask:
    weights: np.ndarray
    support_count: int

    @property
    def fallback(self) -> bool:
        return self.support_count == 0

    def save(self, path) -> None:
        path = Path(path)
        write_channels(path, self.weights[None])
        path.with_suffix(".json").write_text(json.dumps({"support_count": self.support_count}))

    @classmethod
    def load(cls, path) -> "SpatialPriorMask":
        path = Path(path)
        weights = read_channels(path)[0]
        meta_path = path.with_suffix(".json")
        support = json.loads(meta_path.read_text())["support_count"] if meta_path.exists() else 0
        return cls(weights, support)


def build_spatial_prior(train_masks, image_size: int | None = None) -> SpatialPriorMask:
    """Per-pixel lesion frequency over ``train_masks``, max-normalised to [0, 1].

    No masks (or no lesion pixels at all) gives a uniform prior of ones with
    ``support_count == 0``.
    """
    arrays = [np.asarray(getattr(m, "pixels", m)) for m in train_masks]
    if not arrays:
        size = image_size or 224
        return SpatialPriorMask(np.ones((size, size), np.float32), 0)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValidationError(f"masks differ in shape: {sorted(shapes)}")
    freq = np.mean([(a > 0) for a in arrays], axis=0)
    peak = freq.max()
    if peak == 0:
        return SpatialPriorMask(np.ones_like(freq, dtype=np.float32), 0)
    return SpatialPriorMask((freq / peak).astype(np.float32), len(arrays))


def apply_prior(coarse, prior):
    weights = prior.weights if isinstance(prior, SpatialPriorMask) else prior
    if isinstance(coarse, torch.Tensor):
        weights = torch.as_tensor(weights, dtype=coarse.dtype, device=coarse.device)
    if tuple(coarse.shape[-2:]) != tuple(weights.shape[-2:]):
        raise ValidationError("coarse mask and prior differ in shape")
    return coarse * weights


# ------------------------------------------------------------- prompt geometry


@dataclass(frozen=True)
class PromptSet:
    """Point ``(x, y)`` and box ``(x_min, y_min, x_max, y_max)`` in pixel indices.

    ``x`` indexes the first array axis (rows) and ``y`` the second (columns).
    """

    point: tuple[float, float]
    bbox: tuple[float, float, float, float]
    fallback_used: bool = False

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if x0 > x1 or y0 > y1:
            raise ValidationError(f"unordered bbox {self.bbox}")

    def as_array(self) -> np.ndarray:
        return np.array([*self.point, *self.bbox], dtype=np.float64)


def _support_prompts(support: np.ndarray, fallback: bool) -> PromptSet:
    xs, ys = np.nonzero(support)
    return PromptSet(
        (float(xs.mean()), float(ys.mean())),
        (float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())),
        fallback,
    )


def extract_prompts(constrained, threshold: float = 0.5, prior=None) -> PromptSet:
    """Point and box from the pixels of ``constrained`` at or above ``threshold``.

    An empty support falls back to the prior's argmax region (the whole image
    when no prior is given) and flags ``fallback_used``.
    """
    if not 0.0 < threshold < 1.0:
        raise ValidationError("threshold must lie in (0, 1)")
    probs = constrained.detach().cpu().numpy() if isinstance(constrained, torch.Tensor) else np.asarray(constrained)
    support = probs >= threshold
    if support.any():
        return _support_prompts(support, False)
    if prior is None:
        region = np.ones_like(probs, dtype=bool)
    else:
        weights = prior.weights if isinstance(prior, SpatialPriorMask) else np.asarray(prior)
        region = weights == weights.max()
    return _support_prompts(region, True)
