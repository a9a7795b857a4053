"""Checkpoint container: named float32 tensors plus a string metadata block.

Backed by the safetensors layout (JSON header, little-endian raw tensor data),
with model config, epoch and seed echoed into the metadata.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from .model import EventCentricModel, ModelConfig

FORMAT = "mtel-checkpoint-1"
_OPTIM = "optim/"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state_dict: dict[str, torch.Tensor]
    epoch: int
    seed: int
    train_config: dict
    optimizer_state: dict[str, dict[str, torch.Tensor]]
    optimizer_step: int

    def build_model(self, strict: bool = True) -> EventCentricModel:
        model = EventCentricModel(self.model_config)
        load_weights(model, self.state_dict, strict=strict)
        return model


def load_weights(model: EventCentricModel, state_dict, strict=True):
    """Load matching tensors; with ``strict=False`` extra phase-3 weights are ignored."""
    own = model.state_dict()
    if strict:
        model.load_state_dict(state_dict)
        return
    model.load_state_dict({k: v for k, v in state_dict.items() if k in own}, strict=False)
    missing = [k for k in own if k not in state_dict]
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {missing[:5]}")


def save_checkpoint(path, model: EventCentricModel, epoch: int, seed: int,
                    train_config: dict | None = None, optimizer=None) -> Path:
    tensors = {k: v.detach().to(torch.float32).contiguous().clone()
               for k, v in model.state_dict().items()}
    step = 0
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    tensors[f"{_OPTIM}{names[id(p)]}/{key}"] = st[key].detach().float().contiguous().clone()
            if "step" in st:
                step = int(st["step"])
    meta = {
        "format": FORMAT,
        "model_config": json.dumps(model.config.to_dict(), sort_keys=True),
        "train_config": json.dumps(train_config or {}, sort_keys=True),
        "epoch": str(epoch),
        "seed": str(seed),
        "optimizer_step": str(step),
    }
    path = Path(path)
    save_file(tensors, str(path), metadata=meta)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        with safe_open(str(path), framework="pt") as f:
            meta = f.metadata() or {}
            tensors = {k: f.get_tensor(k) for k in f.keys()}
    except SafetensorError as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a model checkpoint")
    weights = {k: v for k, v in tensors.items() if not k.startswith(_OPTIM)}
    optim: dict[str, dict[str, torch.Tensor]] = {}
    for k, v in tensors.items():
        if k.startswith(_OPTIM):
            name, key = k[len(_OPTIM):].rsplit("/", 1)
            optim.setdefault(name, {})[key] = v
    return Checkpoint(
        model_config=ModelConfig(**json.loads(meta["model_config"])),
        state_dict=weights,
        epoch=int(meta["epoch"]),
        seed=int(meta["seed"]),
        train_config=json.loads(meta.get("train_config", "{}")),
        optimizer_state=optim,
        optimizer_step=int(meta.get("optimizer_step", 0)),
    )


def restore_optimizer(optimizer, model: EventCentricModel, ckpt: Checkpoint) -> None:
    if not ckpt.optimizer_state:
        return
    for name, p in model.named_parameters():
        st = ckpt.optimizer_state.get(name)
        if st is None:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ckpt.optimizer_step)),
            "exp_avg": st["exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": st["exp_avg_sq"].to(p.dtype).clone(),
        }
