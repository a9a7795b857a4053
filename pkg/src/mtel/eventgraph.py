"""Event extraction: category-aware snippet graphs, shared GAT refinement, aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import MODALITIES
from .pmt import TAP, SnippetFeatures, SnippetPredictions, masked_softmax


@dataclass
class EventGraph:
    modality: str
    category: int
    adjacency: np.ndarray  # [T, T] bool
    members: np.ndarray  # snippet indices with confidence > tau

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class EventFeature:
    modality: str
    category: int
    feature: torch.Tensor  # [d]
    members: list[int]
    weights: torch.Tensor  # [len(members)]


@dataclass
class EventSet:
    """Batched events: one slot per (modality, category); ``mask`` marks extracted ones."""

    features: torch.Tensor  # [B, 2, C, d]
    mask: torch.Tensor  # [B, 2, C] bool
    weights: torch.Tensor  # [B, 2, C, T] aggregation weights, zero outside members

    def counts(self) -> torch.Tensor:
        return self.mask.sum(-1)  # [B, 2] -> (n_a, n_v)

    def categories(self, modality: str, index: int = 0) -> list[int]:
        m = MODALITIES.index(modality)
        return torch.nonzero(self.mask[index, m]).flatten().tolist()

    def as_list(self, index: int = 0) -> list[EventFeature]:
        out = []
        for m, name in enumerate(MODALITIES):
            for c in self.categories(name, index):
                w = self.weights[index, m, c]
                members = torch.nonzero(w > 0).flatten().tolist()
                out.append(EventFeature(name, c, self.features[index, m, c], members, w[members]))
        return out


def stack_modalities(a, v) -> torch.Tensor:
    return torch.stack([a, v], dim=1)


def member_mask(conf: torch.Tensor, tau: float) -> torch.Tensor:
    return conf > tau


def event_adjacency(members: torch.Tensor) -> torch.Tensor:
    """Adjacency [..., T, T] from a member mask [..., T].

    Temporal chain and self-loops are always present; members are fully
    connected to each other.
    """
    T = members.shape[-1]
    idx = torch.arange(T, device=members.device)
    band = (idx[:, None] - idx[None, :]).abs() <= 1
    return band | (members[..., :, None] & members[..., None, :])


def build_event_graph(snippet_preds, modality: str, category: int, tau: float = 0.5,
                      index: int = 0) -> EventGraph:
    """``snippet_preds`` is a SnippetPredictions batch or a [T, C] array for ``modality``."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if isinstance(snippet_preds, SnippetPredictions):
        conf = snippet_preds.snippet(modality)[index, :, category].detach()
    else:
        conf = torch.as_tensor(np.asarray(snippet_preds))[:, category]
    members = member_mask(conf, tau)
    adj = event_adjacency(members)
    return EventGraph(modality, category, adj.cpu().numpy(),
                      torch.nonzero(members).flatten().cpu().numpy())


def format_event_graph(graph: EventGraph) -> str:
    """Plain-text dump of one graph: header, member list, then one adjacency row per node."""
    lines = [f"# graph modality={graph.modality} category={graph.category} "
             f"nodes={graph.num_nodes}",
             "members " + " ".join(str(int(i)) for i in graph.members)]
    for row in graph.adjacency:
        lines.append("".join("1" if x else "0" for x in row))
    return "\n".join(lines) + "\n"


class GATLayer(nn.Module):
    """Graph attention with residual output ``h + sum_j alpha_ij W h_j``."""

    def __init__(self, dim, heads=1, dropout=0.0, negative_slope=0.2):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.W = nn.Linear(dim, dim, bias=False)
        self.attn_src = nn.Parameter(torch.empty(heads, dim // heads))
        self.attn_dst = nn.Parameter(torch.empty(heads, dim // heads))
        nn.init.xavier_uniform_(self.attn_src)
        nn.init.xavier_uniform_(self.attn_dst)
        self.negative_slope = negative_slope
        self.dropout = nn.Dropout(dropout)

    def attention(self, h, adj):
        """Per-graph attention [..., G, H, T, T] and projected nodes [..., H, T, hd]."""
        *lead, T, d = h.shape
        H = self.heads
        Wh = self.W(h).view(*lead, T, H, d // H).transpose(-2, -3)  # [..., H, T, hd]
        s_src = (Wh * self.attn_src[:, None, :]).sum(-1)  # [..., H, T]
        s_dst = (Wh * self.attn_dst[:, None, :]).sum(-1)
        e = F.leaky_relu(s_src[..., :, None] + s_dst[..., None, :], self.negative_slope)
        alpha = masked_softmax(e.unsqueeze(-4), adj.unsqueeze(-3))
        return self.dropout(alpha), Wh

    def aggregate(self, h, alpha, Wh):
        # alpha: [..., H, T, T] (any leading graph dims already reduced or kept)
        msg = alpha @ Wh
        msg = msg.transpose(-2, -3)
        return h + msg.reshape(*msg.shape[:-2], -1)

    def forward(self, h, adj, return_attention=False):
        """h: [..., T, d]; adj: [..., G, T, T] with G graphs over the same nodes.

        Returns [..., G, T, d] (and attention [..., G, H, T, T]).
        """
        alpha, Wh = self.attention(h, adj)
        out = self.aggregate(h.unsqueeze(-3), alpha, Wh.unsqueeze(-4))
        return (out, alpha) if return_attention else out


def gat_forward(node_feats, adjacency, layer: GATLayer):
    """Single graph: node_feats [T, d], adjacency [T, T] -> [T, d]."""
    adjacency = torch.as_tensor(np.asarray(adjacency) if not torch.is_tensor(adjacency)
                                else adjacency, dtype=torch.bool)
    if not bool(adjacency.diagonal().all()):
        raise ValueError("every node needs a self-loop")
    return layer(node_feats, adjacency.unsqueeze(0)).squeeze(-3)


class GraphRefiner(nn.Module):
    """Stack of GAT layers whose single weight set is shared by every graph."""

    def __init__(self, dim, depth=2, heads=1, dropout=0.0):
        super().__init__()
        self.layers = nn.ModuleList(GATLayer(dim, heads, dropout) for _ in range(depth))

    def forward(self, h, members):
        """h: [B, 2, T, d]; members: [B, 2, C, T] bool -> refined [B, 2, T, d]."""
        adj = event_adjacency(members).to(h.dtype)  # [B, 2, C, T, T]
        active = members.any(-1)  # [B, 2, C]
        count = active.sum(-1)  # [B, 2]
        weight = active.to(h.dtype) / count.clamp(min=1).unsqueeze(-1).to(h.dtype)
        keep = (count > 0)[..., None, None]
        for layer in self.layers:
            h = torch.where(keep, self._mean_branch(layer, h, adj, weight), h)
        return h

    @staticmethod
    def _mean_branch(layer: GATLayer, h, adj, weight):
        """mean_c(h + A_c W h) == h + (mean_c A_c) W h.

        Raw edge scores do not depend on the category, so one exponential per
        node pair is normalized per graph with two batched contractions
        instead of a softmax over every [C, T, T] slice.
        """
        *lead, T, d = h.shape
        H = layer.heads
        Wh = layer.W(h).view(*lead, T, H, d // H).transpose(-2, -3)  # [B, 2, H, T, hd]
        s_src = (Wh * layer.attn_src[:, None, :]).sum(-1)
        s_dst = (Wh * layer.attn_dst[:, None, :]).sum(-1)
        e = F.leaky_relu(s_src[..., :, None] + s_dst[..., None, :], layer.negative_slope)
        ex = torch.exp(e - e.amax(-1, keepdim=True))  # [B, 2, H, T, T]
        denom = torch.einsum("bmcij,bmhij->bmchi", adj, ex)  # per-graph row sums
        coef = torch.einsum("bmcij,bmchi->bmhij", adj, weight[..., None, None] / denom)
        mean_alpha = layer.dropout(ex * coef)
        return layer.aggregate(h, mean_alpha, Wh)


def refine_snippets(feats: SnippetFeatures, snippet_preds: SnippetPredictions,
                    refiner: GraphRefiner, tau: float = 0.5) -> SnippetFeatures:
    members = stack_modalities(snippet_preds.p_audio, snippet_preds.p_visual).transpose(-1, -2)
    out = refiner(stack_modalities(feats.audio, feats.visual), member_mask(members, tau))
    return SnippetFeatures(out[:, 0], out[:, 1])


def extract_events(refined: SnippetFeatures, snippet_preds: SnippetPredictions, tap: TAP,
                   tau: float = 0.5) -> EventSet:
    """Aggregate each (modality, category) member set into one event feature.

    Weights are a softmax of ``tap``'s attention logits restricted to the members.
    """
    h = stack_modalities(refined.audio, refined.visual)  # [B, 2, T, d]
    conf = stack_modalities(snippet_preds.p_audio, snippet_preds.p_visual)  # [B, 2, T, C]
    members = member_mask(conf, tau).transpose(-1, -2)  # [B, 2, C, T]
    logits = tap.attention(h).transpose(-1, -2)  # [B, 2, C, T]
    weights = masked_softmax(logits, members)
    return EventSet(weights @ h, members.any(-1), weights)
