"""Cross-sequence fusion: convolutional merge of per-sequence embeddings and
cross-sequence attention that corrects each sequence with the fused features."""

from __future__ import annotations

import math

import torch
from torch import nn

from .exceptions import ValidationError


def attention_weights(q, k, scale):
    logits = (q @ k.transpose(-2, -1)) * scale
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    return torch.softmax(logits, dim=-1)


def cross_sequence_attention(x_f, x_i, Wq, Wk, Wv, d_k=None, value_mode="standard"):
    """Correction ``softmax(x_f Wq (x_i Wk)^T / sqrt(d_k)) V`` for token matrices.

    ``x_f`` and ``x_i`` are ``[..., n_tokens, d]``. With ``value_mode="standard"``
    the values are ``x_i Wv``; with ``"literal"`` ``Wv`` is itself the
    ``[n_tokens, d_v]`` value matrix.
    """
    if x_f.shape != x_i.shape:
        raise ValidationError(f"fused and sequence tokens differ in shape: {tuple(x_f.shape)} vs {tuple(x_i.shape)}")
    q = x_f @ Wq
    k = x_i @ Wk
    d_k = q.shape[-1] if d_k is None else d_k
    attn = attention_weights(q, k, 1.0 / math.sqrt(d_k))
    if value_mode == "standard":
        v = x_i @ Wv
    elif value_mode == "literal":
        v = Wv
    else:
        raise ValidationError(f"unknown value_mode {value_mode!r}")
    return attn @ v, attn


def refine_sequence(x_i, correction):
    return x_i + correction


class SequenceFusion(nn.Module):
    """Concatenate ``c`` embedding grids on channels and merge them back to ``d``.

    The 1x1 merge conv starts as a channel-wise mean over sequences, followed by
    a zero-initialised 3x3 residual conv.
    """

    def __init__(self, n_sequences, dim):
        super().__init__()
        self.n_sequences = n_sequences
        self.merge = nn.Conv2d(n_sequences * dim, dim, 1)
        self.mix = nn.Conv2d(dim, dim, 3, padding=1)
        with torch.no_grad():
            eye = torch.eye(dim)[:, :, None, None] / n_sequences
            self.merge.weight.copy_(eye.repeat(1, n_sequences, 1, 1))
            self.merge.bias.zero_()
            self.mix.weight.zero_()
            self.mix.bias.zero_()

    def forward(self, embeddings):
        """``embeddings``: ``[N, c, d, g, g]`` tensor or list of ``[N, d, g, g]``."""
        if isinstance(embeddings, (list, tuple)):
            shapes = {tuple(e.shape) for e in embeddings}
            if len(shapes) != 1:
                raise ValidationError(f"sequence embeddings have heterogeneous shapes {sorted(shapes)}")
            embeddings = torch.stack(list(embeddings), dim=1)
        n, c, d, g, _ = embeddings.shape
        if c != self.n_sequences:
            raise ValidationError(f"expected {self.n_sequences} sequences, got {c}")
        fused = self.merge(embeddings.reshape(n, c * d, g, g))
        return fused + self.mix(fused)


class CrossSequenceAttention(nn.Module):
    """Single- or multi-head cross attention: queries from the fused grid,
    keys (and values, by default) from one sequence's grid."""

    def __init__(self, dim, n_tokens=None, heads=1, value_mode="standard"):
        super().__init__()
        if dim % heads:
            raise ValidationError("dim must be divisible by heads")
        self.heads = heads
        self.value_mode = value_mode
        self.Wq = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.Wk = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        if value_mode == "literal":
            if n_tokens is None:
                raise ValidationError("literal value mode needs the token count")
            self.Wv = nn.Parameter(torch.zeros(n_tokens, dim))
        else:
            # Zero values make the residual correction start at the identity.
            self.Wv = nn.Parameter(torch.zeros(dim, dim))

    def forward(self, fused, seq):
        """``fused``/``seq``: ``[N, d, g, g]``; returns the correction in the same layout."""
        n, d, g, _ = seq.shape
        xf = fused.flatten(2).transpose(1, 2)
        xi = seq.flatten(2).transpose(1, 2)
        h = self.heads
        if h == 1:
            out, _ = cross_sequence_attention(xf, xi, self.Wq, self.Wk, self.Wv, value_mode=self.value_mode)
        else:
            dh = d // h

            def heads(z):
                return z.view(n, -1, h, dh).transpose(1, 2)

            q, k = heads(xf @ self.Wq), heads(xi @ self.Wk)
            v = heads(xi @ self.Wv) if self.value_mode == "standard" else self.Wv.view(-1, h, dh).transpose(0, 1)
            attn = attention_weights(q, k, 1.0 / math.sqrt(dh))
            out = (attn @ v).transpose(1, 2).reshape(n, -1, d)
        return out.transpose(1, 2).reshape(n, d, g, g)


class CrossSequenceModule(nn.Module):
    """Fuse the sequence grids, then add a cross-attention correction to each one."""

    def __init__(self, n_sequences, dim, grid, heads=1, value_mode="standard"):
        super().__init__()
        self.fusion = SequenceFusion(n_sequences, dim)
        self.attention = CrossSequenceAttention(dim, grid * grid, heads, value_mode)

    def forward(self, embeddings):
        """``[N, c, d, g, g]`` -> (fused ``[N, d, g, g]``, refined ``[N, c, d, g, g]``)."""
        fused = self.fusion(embeddings)
        n, c, d, g, _ = embeddings.shape
        seqs = embeddings.reshape(n * c, d, g, g)
        fused_rep = fused[:, None].expand(n, c, d, g, g).reshape(n * c, d, g, g)
        refined = refine_sequence(seqs, self.attention(fused_rep, seqs))
        return fused, refined.reshape(n, c, d, g, g)
