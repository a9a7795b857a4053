"""Losses, learning-rate schedule and the joint training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_weights, restore_optimizer, save_checkpoint
from .datamodel import SplitData
from .model import EventCentricModel, ModelConfig, ModelOutput

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
LOG_FIELDS = ("epoch", "L_1", "L_2", "L_3", "L_e", "L_total", "lr_phase1", "lr_phase2", "lr_phase3")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component {component} = {value}")
        self.component = component


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-4
    lr_phase3: float = 2e-4
    lr_step: int = 10
    lr_gamma: float = 0.1
    event_loss_weight: float = 0.3
    grid_len: int = 200
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def from_mapping(cls, mapping) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**{k: (float if known[k] == "float" else int)(v) for k, v in mapping.items()})

    def base_lrs(self) -> dict[int, float]:
        return {1: self.lr_phase1, 2: self.lr_phase2, 3: self.lr_phase3}


@dataclass
class LossBreakdown:
    L_1: float
    L_2: float
    L_3: float
    L_ea: float
    L_ev: float
    L_e: float
    L_total: float

    def as_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# losses

def bce(p: torch.Tensor, y: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Elementwise binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def phase_loss(p_audio, p_visual, y_audio, y_visual) -> torch.Tensor:
    """BCE(p^a, y^a) + BCE(p^v, y^v), each averaged over classes and batch."""
    return bce(p_audio, y_audio).mean() + bce(p_visual, y_visual).mean()


def event_loss(p_hat: torch.Tensor, y_audio, y_visual, mask: torch.Tensor):
    """(L_ea, L_ev) from per-event predictions [B, 2, C] and the extraction mask.

    Each modality's term is the mean BCE over that video's extracted events
    (zero when none were extracted), then averaged over the batch.
    """
    y = torch.stack([y_audio, y_visual], dim=1)
    per_event = bce(p_hat, y) * mask
    n = mask.sum(-1)  # [B, 2]
    per_video = per_event.sum(-1) / n.clamp(min=1)
    terms = per_video.mean(0)
    return terms[0], terms[1]


def total_loss(L_1, L_2, L_3, L_e, alpha: float = 0.3):
    return L_1 + L_2 + L_3 + alpha * L_e


def compute_losses(out: ModelOutput, y_audio, y_visual, alpha: float = 0.3):
    """Total loss tensor and its breakdown for whatever phases ``out`` contains."""
    zero = y_audio.new_zeros(())
    L_1 = phase_loss(out.phase1.video_audio, out.phase1.video_visual, y_audio, y_visual)
    L_2 = L_3 = L_ea = L_ev = zero
    if out.phase2 is not None:
        L_2 = phase_loss(out.phase2.video_audio, out.phase2.video_visual, y_audio, y_visual)
    if out.reweighted is not None:
        L_3 = phase_loss(out.reweighted.video_audio, out.reweighted.video_visual, y_audio, y_visual)
        L_ea, L_ev = event_loss(out.event_probs, y_audio, y_visual, out.interacted.mask)
    L_e = L_ea + L_ev
    total = total_loss(L_1, L_2, L_3, L_e, alpha)
    parts = {"L_1": L_1, "L_2": L_2, "L_3": L_3, "L_ea": L_ea, "L_ev": L_ev, "L_e": L_e,
             "L_total": total}
    values = {k: float(v.detach()) for k, v in parts.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    return total, LossBreakdown(**values)


def lr_at(epoch: int, base_lr: float, config: TrainConfig | None = None) -> float:
    config = config or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * config.lr_gamma ** (epoch // config.lr_step)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    model: EventCentricModel
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def make_optimizer(model: EventCentricModel, config: TrainConfig) -> torch.optim.Adam:
    lrs = config.base_lrs()
    groups = [{"params": ps, "lr": lrs[phase], "phase": phase}
              for phase, ps in model.param_groups().items()]
    return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)


def format_log_line(record: dict) -> str:
    return ", ".join(f"{k}={record[k]:.8g}" if k != "epoch" else f"epoch={record[k]}"
                     for k in LOG_FIELDS)


def parse_log_line(line: str) -> dict:
    out = {}
    for item in line.strip().split(", "):
        k, v = item.split("=", 1)
        out[k] = int(v) if k == "epoch" else float(v)
    return out


def train(data: SplitData, config: TrainConfig, model_config: ModelConfig,
          out_dir=None, resume=None, checkpoint_every: int = 1) -> TrainResult:
    """Jointly train all configured phases on video-level labels only.

    Writes ``epoch_log.txt`` and ``checkpoint_eNNN.safetensors`` files into
    ``out_dir`` when given. ``resume`` is a checkpoint path whose epoch
    counter, weights and Adam moments are restored.
    """
    torch.manual_seed(config.seed)
    model = EventCentricModel(model_config)
    optimizer = make_optimizer(model, config)
    start_epoch = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        load_weights(model, ckpt.state_dict)
        restore_optimizer(optimizer, model, ckpt)
        start_epoch = ckpt.epoch + 1
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)

    audio = torch.from_numpy(data.audio)
    visual = torch.from_numpy(data.visual)
    y_a = torch.from_numpy(data.labels_audio)
    y_v = torch.from_numpy(data.labels_visual)
    alpha = config.event_loss_weight
    for epoch in range(start_epoch, config.epochs):
        lrs = {}
        for group in optimizer.param_groups:
            group["lr"] = lr_at(epoch, config.base_lrs()[group["phase"]], config)
            lrs[group["phase"]] = group["lr"]
        # reseeding per epoch keeps resumed runs on the same random stream
        torch.manual_seed(config.seed * 100_003 + epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(data))
        model.train()
        sums = dict.fromkeys(("L_1", "L_2", "L_3", "L_ea", "L_ev", "L_e", "L_total"), 0.0)
        n_batches = 0
        for i in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[i:i + config.batch_size])
            out = model(audio[idx], visual[idx])
            loss, parts = compute_losses(out, y_a[idx], y_v[idx], alpha)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for k, v in parts.as_dict().items():
                sums[k] += v
            n_batches += 1
        record = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}}
        for phase in (1, 2, 3):
            record[f"lr_phase{phase}"] = lrs.get(phase, 0.0)
        result.history.append(record)
        log.info(format_log_line(record))
        if out_dir is not None:
            with open(out_dir / "epoch_log.txt", "a", encoding="utf-8") as f:
                f.write(format_log_line(record) + "\n")
            if (epoch + 1) % checkpoint_every == 0 or epoch + 1 == config.epochs:
                path = save_checkpoint(out_dir / f"checkpoint_e{epoch:03d}.safetensors", model,
                                       epoch, config.seed, asdict(config), optimizer)
                result.checkpoints.append(path)
    return result
