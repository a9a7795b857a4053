"""Event interaction (training only): event-level attention, snippet reweighting, event scores."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .eventgraph import EventSet, stack_modalities
from .pmt import TAP, MultiHeadAttention, SnippetFeatures, SnippetPredictions


class EventInteraction(nn.Module):
    """e' = Norm(e + SelfAttn(events of m) + CrossAttn(events of m <- events of the other)).

    The self-attention unit is shared by both modalities, as is the cross unit.
    """

    def __init__(self, dim, heads=4, dropout=0.0, self_attention=True, cross_attention=True):
        super().__init__()
        self.use_self, self.use_cross = self_attention, cross_attention
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.norm = nn.LayerNorm(dim)

    def forward(self, events: EventSet) -> EventSet:
        if not bool(events.mask.any()):
            return events
        e, mask = events.features, events.mask  # [B, 2, C, d], [B, 2, C]
        B, M, C, d = e.shape
        q = e.reshape(B * M, C, d)
        res = q
        if self.use_self:
            res = res + self.self_attn(q, q, mask.reshape(B * M, C))
        if self.use_cross:
            other = e.flip(1).reshape(B * M, C, d)
            res = res + self.cross_attn(q, other, mask.flip(1).reshape(B * M, C))
        out = self.norm(res).view(B, M, C, d)
        out = torch.where(mask[..., None], out, e)
        return EventSet(out, mask, events.weights)


def interact_events(events: EventSet, params: EventInteraction) -> EventSet:
    return params(events)


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Cosine similarity along the last axis; zero vectors give 0."""
    denom = (a.norm(dim=-1) * b.norm(dim=-1)).clamp(min=eps)
    return (a * b).sum(-1) / denom


@dataclass
class Reweighted:
    video_audio: torch.Tensor  # [B, C]
    video_visual: torch.Tensor
    weights: torch.Tensor  # [B, 2, C, T]; meaningful where an event was extracted


def reweight_snippets(events: EventSet, feats: SnippetFeatures,
                      preds: SnippetPredictions) -> Reweighted:
    """Re-pool snippet probabilities with softmax(cos(event, snippet)) weights over all T."""
    h = stack_modalities(feats.audio, feats.visual)  # [B, 2, T, d]
    sim = cosine(events.features.unsqueeze(-2), h.unsqueeze(-3))  # [B, 2, C, T]
    w = torch.softmax(sim, dim=-1)
    p_t = stack_modalities(preds.p_audio, preds.p_visual).transpose(-1, -2)  # [B, 2, C, T]
    pooled = (w * p_t).sum(-1)
    previous = stack_modalities(preds.video_audio, preds.video_visual)
    video = torch.where(events.mask, pooled, previous)
    return Reweighted(video[:, 0], video[:, 1], w)


def event_predictions(events: EventSet, tap: TAP) -> torch.Tensor:
    """p_hat[b, m, i] = sigmoid(classifier(event_i))[i], using the phase-2 classifier itself."""
    logits = tap.classifier(events.features)  # [B, 2, C, C]
    return torch.sigmoid(torch.diagonal(logits, dim1=-2, dim2=-1))
