"""Snippet prediction: pyramid multimodal transformer and temporal attention pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class PMTConfig:
    depth: int = 6
    heads: int = 4
    model_dim: int = 512
    dropout: float = 0.2
    self_attention: bool = True
    cross_attention: bool = True
    ffn: bool = True
    shift: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def windows(self) -> list[int]:
        return [2 ** l for l in range(1, self.depth + 1)]


@dataclass
class SnippetFeatures:
    audio: torch.Tensor  # [B, T, d]
    visual: torch.Tensor  # [B, T, d]


@dataclass
class SnippetPredictions:
    p_audio: torch.Tensor  # [B, T, C] snippet probabilities
    p_visual: torch.Tensor
    w_audio: torch.Tensor  # [B, T, C] softmax over T per class
    w_visual: torch.Tensor
    video_audio: torch.Tensor  # [B, C]
    video_visual: torch.Tensor
    logits_audio: torch.Tensor  # [B, T, C] attention logits before the softmax
    logits_visual: torch.Tensor

    def snippet(self, modality: str) -> torch.Tensor:
        return self.p_audio if modality == "audio" else self.p_visual

    def video(self, modality: str) -> torch.Tensor:
        return self.video_audio if modality == "audio" else self.video_visual


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax that ignores ``~mask`` entries; rows with no valid entry become all-zero."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    logits, mask = torch.broadcast_tensors(logits, mask)
    logits = logits.masked_fill(~mask, float("-inf"))
    any_valid = mask.any(dim=dim, keepdim=True)
    logits = logits.masked_fill(~any_valid, 0.0)
    return torch.softmax(logits, dim=dim) * any_valid


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a key-padding mask.

    Queries whose keys are all masked produce a zero output.
    """

    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        assert dim % heads == 0
        self.dim, self.heads = dim, heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        N, L, _ = x.shape
        return x.view(N, L, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, query, context, key_mask=None, return_weights=False):
        # query: [N, Lq, d], context: [N, Lk, d], key_mask: [N, Lk] (True = valid)
        N, Lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))
        any_valid = None
        if key_mask is not None:
            any_valid = key_mask.any(-1)
            if bool(key_mask.all()):
                key_mask = any_valid = None
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])  # [N, h, Lq, Lk]
        attn = masked_softmax(scores, None if key_mask is None else key_mask[:, None, None, :])
        out = self.out_proj((attn @ v).transpose(1, 2).reshape(N, Lq, self.dim))
        if any_valid is not None and not bool(any_valid.all()):
            # nothing to attend to -> contributes nothing
            out = out * any_valid[:, None, None]
        out = self.dropout(out)
        return (out, attn) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class MultimodalAttention(nn.Module):
    """Two self-attention and two cross-modal attention units over aligned windows.

    a' = Norm(a + Self(a) + Cross(a <- v)), followed by a residual feedforward.
    The visual stream is symmetric.
    """

    def __init__(self, dim, heads, dropout=0.0, self_attention=True, cross_attention=True,
                 ffn=True):
        super().__init__()
        self.use_self, self.use_cross = self_attention, cross_attention
        self.self_a = MultiHeadAttention(dim, heads)
        self.self_v = MultiHeadAttention(dim, heads)
        self.cross_a = MultiHeadAttention(dim, heads)  # query audio, attend visual
        self.cross_v = MultiHeadAttention(dim, heads)
        self.dropout = nn.Dropout(dropout)  # on the summed attention output
        self.norm_a = nn.LayerNorm(dim)
        self.norm_v = nn.LayerNorm(dim)
        if ffn:
            self.ffn_a, self.ffn_v = FeedForward(dim, 2 * dim), FeedForward(dim, 2 * dim)
            self.ffn_norm_a, self.ffn_norm_v = nn.LayerNorm(dim), nn.LayerNorm(dim)
        else:
            self.ffn_a = self.ffn_v = None

    def forward(self, a, v, mask=None):
        # a, v: [N, w, d]; mask: [N, w]
        if not (torch.isfinite(a).all() and torch.isfinite(v).all()):
            raise FloatingPointError("non-finite values entering multimodal attention")
        upd_a = upd_v = None
        if self.use_self:
            upd_a, upd_v = self.self_a(a, a, mask), self.self_v(v, v, mask)
        if self.use_cross:
            ca, cv = self.cross_a(a, v, mask), self.cross_v(v, a, mask)
            upd_a = ca if upd_a is None else upd_a + ca
            upd_v = cv if upd_v is None else upd_v + cv
        if upd_a is not None:
            a, v = a + self.dropout(upd_a), v + self.dropout(upd_v)
        a, v = self.norm_a(a), self.norm_v(v)
        if self.ffn_a is not None:
            a = self.ffn_norm_a(a + self.ffn_a(a))
            v = self.ffn_norm_v(v + self.ffn_v(v))
        return a, v


def _roll(seq, shift):
    if isinstance(seq, torch.Tensor):
        return torch.roll(seq, shifts=shift, dims=-2)
    return np.roll(seq, shift, axis=-2)


def snippet_shift(seq, window: int):
    """Move the first ``window // 2`` snippets to the end of the sequence (time axis -2)."""
    if window < 2 or window % 2:
        raise ValueError(f"window must be even and >= 2, got {window}")
    return _roll(seq, -(window // 2))


def inverse_snippet_shift(seq, window: int):
    if window < 2 or window % 2:
        raise ValueError(f"window must be even and >= 2, got {window}")
    return _roll(seq, window // 2)


def window_partition(seq: torch.Tensor, window: int):
    """Split [..., T, d] into [..., ceil(T/w), w, d] plus a [ceil(T/w), w] validity mask."""
    if window < 1:
        raise ValueError("window must be >= 1")
    T = seq.shape[-2]
    n = -(-T // window)
    pad = n * window - T
    if pad:
        seq = F.pad(seq, (0, 0, 0, pad))
    windows = seq.reshape(*seq.shape[:-2], n, window, seq.shape[-1])
    mask = (torch.arange(n * window, device=seq.device) < T).reshape(n, window)
    return windows, mask


def window_merge(windows: torch.Tensor, length: int) -> torch.Tensor:
    seq = windows.reshape(*windows.shape[:-3], -1, windows.shape[-1])
    return seq[..., :length, :]


def windowed_attention(module: MultimodalAttention, a, v, window: int):
    """Run ``module`` independently inside each window of [B, T, d] sequences."""
    B, T, d = a.shape
    wa, mask = window_partition(a, window)
    wv, _ = window_partition(v, window)
    n = wa.shape[1]
    flat_mask = None if bool(mask.all()) else mask.expand(B, n, window).reshape(B * n, window)
    oa, ov = module(wa.reshape(B * n, window, d), wv.reshape(B * n, window, d), flat_mask)
    return window_merge(oa.view(B, n, window, d), T), window_merge(ov.view(B, n, window, d), T)


class PMTLayer(nn.Module):
    def __init__(self, level: int, config: PMTConfig):
        super().__init__()
        if level < 1:
            raise ValueError("layer index starts at 1")
        self.window = 2 ** level
        self.shift = config.shift
        kw = dict(dropout=config.dropout, self_attention=config.self_attention,
                  cross_attention=config.cross_attention, ffn=config.ffn)
        self.attn1 = MultimodalAttention(config.model_dim, config.heads, **kw)
        self.attn2 = MultimodalAttention(config.model_dim, config.heads, **kw)

    def forward(self, a, v):
        w = self.window
        a, v = windowed_attention(self.attn1, a, v, w)
        if self.shift:
            a, v = snippet_shift(a, w), snippet_shift(v, w)
        a, v = windowed_attention(self.attn2, a, v, w)
        if self.shift:
            a, v = inverse_snippet_shift(a, w), inverse_snippet_shift(v, w)
        return a, v


class PyramidMultimodalTransformer(nn.Module):
    def __init__(self, config: PMTConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(PMTLayer(l, config) for l in range(1, config.depth + 1))

    @property
    def windows(self):
        return [layer.window for layer in self.layers]

    def forward(self, feats: SnippetFeatures) -> SnippetFeatures:
        a, v = feats.audio, feats.visual
        for layer in self.layers:
            a, v = layer(a, v)
        return SnippetFeatures(a, v)


class InputProjection(nn.Module):
    """Per-modality affine maps from extractor dims to the shared model dim."""

    def __init__(self, audio_dim, visual_dim, model_dim):
        super().__init__()
        self.audio = nn.Linear(audio_dim, model_dim)
        self.visual = nn.Linear(visual_dim, model_dim)

    def forward(self, raw_audio, raw_visual) -> SnippetFeatures:
        if raw_audio.shape[-1] != self.audio.in_features:
            raise ValueError(f"audio dim {raw_audio.shape[-1]} != {self.audio.in_features}")
        if raw_visual.shape[-1] != self.visual.in_features:
            raise ValueError(f"visual dim {raw_visual.shape[-1]} != {self.visual.in_features}")
        return SnippetFeatures(self.audio(raw_audio), self.visual(raw_visual))


def project_inputs(raw_audio, raw_visual, params: InputProjection) -> SnippetFeatures:
    return params(raw_audio, raw_visual)


class TAP(nn.Module):
    """Temporal attention pooling; both modalities share the two projections."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.classifier = nn.Linear(dim, num_classes)
        self.attention = nn.Linear(dim, num_classes)

    def pool(self, x):
        # x: [B, T, d] -> p_t [B, T, C], w_t [B, T, C], p [B, C], logits [B, T, C]
        p_t = torch.sigmoid(self.classifier(x))
        logits = self.attention(x)
        w_t = torch.softmax(logits, dim=-2)
        return p_t, w_t, (w_t * p_t).sum(dim=-2), logits

    def forward(self, feats: SnippetFeatures) -> SnippetPredictions:
        pa, wa, va, la = self.pool(feats.audio)
        pv, wv, vv, lv = self.pool(feats.visual)
        return SnippetPredictions(pa, pv, wa, wv, va, vv, la, lv)


def tap(feats: SnippetFeatures, params: TAP) -> SnippetPredictions:
    return params(feats)
