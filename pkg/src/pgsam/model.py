"""The full network: per-sequence LoRA encoder, cross-sequence module, text
prompt generator and hierarchical decoder wired together."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .decoder import DecoderOutput, HierarchicalMaskDecoder, PromptEncoder
from .encoder import EncoderConfig, ImageEncoder
from .fusion import CrossSequenceModule
from .text import CoarseMaskDecoder, PromptSet, TextAdapter, apply_prior, extract_prompts


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_sequences: int = 4
    decoder_depth: int = 2
    decoder_heads: int = 4
    text_dim: int = 256
    adapter_bottleneck: int = 32
    use_cam: bool = True
    use_tpm: bool = True
    use_cmattn: bool = True
    use_lmca: bool = True
    fusion_heads: int = 1
    fusion_value_mode: str = "standard"
    prompt_threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    prior_logits: torch.Tensor
    refined_logits: torch.Tensor
    coarse_logits: torch.Tensor | None = None
    prompts: list = field(default_factory=list)

    @property
    def prior_mask(self):
        return torch.sigmoid(self.prior_logits)

    @property
    def refined_mask(self):
        return torch.sigmoid(self.refined_logits)

    @property
    def final_mask(self):
        return (self.prior_mask + self.refined_mask) / 2


class PGSAMNet(nn.Module):
    """Text-prompted multi-sequence segmenter.

    Toggles: ``use_cam`` removes the fusion/cross-attention module (the prompt
    generator then sees the plain mean of the sequence grids); ``use_tpm``
    removes the text pathway entirely and the decoder runs with a learned
    no-prompt token.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        enc = cfg.encoder
        d, g = enc.embed_dim, enc.grid_size
        self.encoder = ImageEncoder(enc)
        self.cross_sequence = (
            CrossSequenceModule(cfg.n_sequences, d, g, cfg.fusion_heads, cfg.fusion_value_mode) if cfg.use_cam else None
        )
        if cfg.use_tpm:
            self.text_adapter = TextAdapter(cfg.text_dim, cfg.adapter_bottleneck)
            self.text_decoder = CoarseMaskDecoder(d, cfg.text_dim, g, enc.image_size)
        else:
            self.text_adapter = None
            self.text_decoder = None
        self.prompt_encoder = PromptEncoder(d, enc.image_size)
        self.mask_decoder = HierarchicalMaskDecoder(
            d,
            g,
            enc.image_size,
            cfg.decoder_depth,
            cfg.decoder_heads,
            use_cmattn=cfg.use_cmattn,
            use_lmca=cfg.use_lmca,
        )
        self.register_buffer("image_pe", self.prompt_encoder.dense_positional(g), persistent=False)

    def trainable_state_dict(self) -> dict:
        names = {n for n, p in self.named_parameters() if p.requires_grad}
        return {k: v.detach().clone() for k, v in self.state_dict().items() if k in names}

    def encode(self, images):
        n, c, h, w = images.shape
        emb = self.encoder(images.reshape(n * c, 1, h, w))
        return emb.view(n, c, *emb.shape[1:])

    def generate_prompts(self, coarse_logits, prior):
        probs = torch.sigmoid(coarse_logits.detach())
        if prior is not None:
            probs = apply_prior(probs, prior)
        return [extract_prompts(p, self.config.prompt_threshold, prior) for p in probs]

    def forward(self, images, text_emb=None, prior=None, gt=None, table=None, training=False, generator=None):
        """``images``: ``[N, c, H, W]``; ``text_emb``: ``[N, text_dim]`` or None.

        ``prior`` is the spatial prior (array or :class:`SpatialPriorMask`);
        ``gt``/``table`` feed the class-balanced noise during training.
        """
        n, c = images.shape[:2]
        emb = self.encode(images)
        if self.cross_sequence is not None:
            fused, seqs = self.cross_sequence(emb)
        else:
            fused, seqs = (emb.mean(dim=1) if self.text_decoder is not None else None), emb

        coarse_logits, prompts = None, []
        if self.text_decoder is not None:
            text = self.text_adapter(text_emb) if text_emb is not None else None
            coarse_logits = self.text_decoder(fused, text)
            prompts = self.generate_prompts(coarse_logits, prior)
            rows = torch.as_tensor(np.stack([p.as_array() for p in prompts]), dtype=images.dtype)
            prompt_tokens = self.prompt_encoder(rows)
        else:
            prompt_tokens = self.prompt_encoder.empty(n)

        d, g = seqs.shape[2], seqs.shape[3]
        prompt_tokens = prompt_tokens.repeat_interleave(c, dim=0)
        gt_rep = gt.repeat_interleave(c, dim=0) if gt is not None else None
        out: DecoderOutput = self.mask_decoder(
            seqs.reshape(n * c, d, g, g), self.image_pe, prompt_tokens, gt_rep, table, training, generator
        )
        hw = out.prior_logits.shape[-2:]
        return ForwardOutput(
            out.prior_logits.view(n, c, *hw),
            out.refined_logits.view(n, c, *hw),
            coarse_logits,
            prompts,
        )


__all__ = ["ModelConfig", "PGSAMNet", "ForwardOutput", "PromptSet"]
