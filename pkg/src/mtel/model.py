"""The three-phase event-centric network."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .eventgraph import EventSet, GraphRefiner, extract_events, refine_snippets
from .interaction import EventInteraction, Reweighted, event_predictions, reweight_snippets
from .pmt import (TAP, InputProjection, PMTConfig, PyramidMultimodalTransformer,
                  SnippetFeatures, SnippetPredictions)


@dataclass
class ModelConfig:
    audio_dim: int = 128
    visual_dim: int = 512
    num_classes: int = 35
    pmt: PMTConfig = field(default_factory=PMTConfig)
    graph_depth: int = 2
    graph_heads: int = 1
    graph_dropout: float = 0.0
    interaction_heads: int = 4
    interaction_dropout: float = 0.0
    event_self_attention: bool = True
    event_cross_attention: bool = True
    tau: float = 0.5
    phases: int = 3  # 1: snippet prediction only, 2: + event extraction, 3: + event interaction

    def __post_init__(self):
        if isinstance(self.pmt, dict):
            self.pmt = PMTConfig(**self.pmt)
        if self.phases not in (1, 2, 3):
            raise ValueError("phases must be 1, 2 or 3")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    phase1: SnippetPredictions
    phase2: SnippetPredictions | None = None
    refined: SnippetFeatures | None = None
    events: EventSet | None = None
    interacted: EventSet | None = None
    reweighted: Reweighted | None = None
    event_probs: torch.Tensor | None = None  # [B, 2, C]


PHASE_PREFIXES = {
    1: ("proj.", "pmt.", "tap1."),
    2: ("refiner.", "tap2."),
    3: ("interaction.",),
}


class EventCentricModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.pmt.model_dim
        C = config.num_classes
        self.proj = InputProjection(config.audio_dim, config.visual_dim, d)
        self.pmt = PyramidMultimodalTransformer(config.pmt)
        self.tap1 = TAP(d, C)
        if config.phases >= 2:
            self.refiner = GraphRefiner(d, config.graph_depth, config.graph_heads,
                                        config.graph_dropout)
            self.tap2 = TAP(d, C)
        if config.phases >= 3:
            self.interaction = EventInteraction(d, config.interaction_heads,
                                                config.interaction_dropout,
                                                config.event_self_attention,
                                                config.event_cross_attention)

    def snippet_phase(self, audio, visual):
        feats = self.pmt(self.proj(audio, visual))
        return feats, self.tap1(feats)

    def extraction_phase(self, feats, preds1):
        refined = refine_snippets(feats, preds1, self.refiner, self.config.tau)
        return refined, self.tap2(refined)

    def forward(self, audio, visual) -> ModelOutput:
        feats, preds1 = self.snippet_phase(audio, visual)
        out = ModelOutput(preds1)
        if self.config.phases < 2:
            return out
        out.refined, out.phase2 = self.extraction_phase(feats, preds1)
        if self.config.phases < 3:
            return out
        out.events = extract_events(out.refined, preds1, self.tap2, self.config.tau)
        out.interacted = self.interaction(out.events)
        out.reweighted = reweight_snippets(out.interacted, out.refined, out.phase2)
        out.event_probs = event_predictions(out.interacted, self.tap2)
        return out

    @torch.no_grad()
    def predict(self, audio, visual) -> SnippetPredictions:
        """Inference path: phases 1-2 only; phase 3 never runs here."""
        feats, preds1 = self.snippet_phase(audio, visual)
        if self.config.phases < 2:
            return preds1
        return self.extraction_phase(feats, preds1)[1]

    def param_groups(self) -> dict[int, list[nn.Parameter]]:
        groups: dict[int, list[nn.Parameter]] = {1: [], 2: [], 3: []}
        for name, p in self.named_parameters():
            phase = next(k for k, prefixes in PHASE_PREFIXES.items() if name.startswith(prefixes))
            groups[phase].append(p)
        return {k: v for k, v in groups.items() if v}
