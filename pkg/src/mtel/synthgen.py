"""Synthetic long-form audio-visual datasets with planted modality-aware events.

Every snippet feature is the sum of the prototype vectors of the categories
active at that second, plus isotropic Gaussian noise.  Because the planted
timeline is known exactly, ground truth at both granularities is exact.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datamodel import (MODALITIES, DatasetManifest, EventAnnotation, ManifestEntry,
                        write_event_annotations, write_features, write_video_labels)

log = logging.getLogger(__name__)

_SPLIT_OFFSET = {"train": 0, "val": 1_000_000, "test": 2_000_000}
_PROTOTYPE_STREAM = 7_919


@dataclass
class GeneratorConfig:
    num_train: int = 200
    num_val: int = 50
    num_test: int = 50
    num_classes: int = 35
    min_duration: int = 60
    max_duration: int = 400
    # distinct categories per video ~ 1 + Poisson(mean - 1), clipped to [1, C]
    mean_categories: float = 3.15
    # extra instances per category ~ Poisson(extra_instances)
    extra_instances: float = 0.5
    min_event_sec: float = 2.0
    max_event_sec: float = 60.0
    cross_modal_corr: float = 0.5
    max_jitter_sec: int = 5
    audio_dim: int = 128
    visual_dim: int = 512
    noise_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.min_duration < 30:
            raise ValueError("min_duration must be >= 30 seconds")
        if self.max_duration < self.min_duration:
            raise ValueError("max_duration must be >= min_duration")
        if not 0.0 <= self.cross_modal_corr <= 1.0:
            raise ValueError("cross_modal_corr must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.mean_categories < 1:
            raise ValueError("mean_categories must be >= 1")
        if self.extra_instances < 0:
            raise ValueError("extra_instances must be non-negative")
        if not 0 < self.min_event_sec <= self.max_event_sec:
            raise ValueError("event duration range must be positive and ordered")
        if self.max_jitter_sec < 1:
            raise ValueError("max_jitter_sec must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.audio_dim < 1 or self.visual_dim < 1:
            raise ValueError("feature dims must be positive")
        for name in ("num_train", "num_val", "num_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_mapping(cls, mapping) -> "GeneratorConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ValueError(f"unknown generator keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                kwargs[f.name] = (float if f.type == "float" else int)(mapping[f.name])
        return cls(**kwargs)

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}


@dataclass
class Timeline:
    duration: int
    # modality -> list of (category, start_sec, end_sec), merged per category
    events: dict[str, list[tuple[int, int, int]]] = field(
        default_factory=lambda: {m: [] for m in MODALITIES})

    def categories(self, modality: str | None = None) -> set[int]:
        mods = MODALITIES if modality is None else (modality,)
        return {c for m in mods for c, _, _ in self.events[m]}


def category_names(num_classes: int) -> list[str]:
    return [f"event_{i:02d}" for i in range(num_classes)]


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _merge_events(spans):
    out: list[tuple[int, int, int]] = []
    by_cat: dict[int, list[tuple[int, int]]] = {}
    for c, s, e in spans:
        by_cat.setdefault(c, []).append((s, e))
    for c in sorted(by_cat):
        cur = None
        for s, e in sorted(by_cat[c]):
            if cur is not None and s <= cur[1]:
                cur[1] = max(cur[1], e)
            else:
                if cur is not None:
                    out.append((c, cur[0], cur[1]))
                cur = [s, e]
        out.append((c, cur[0], cur[1]))
    return out


def _jitter(rng, start: int, end: int, T: int, max_jitter: int) -> tuple[int, int]:
    """Shift one or both boundaries so the copy overlaps but is never identical."""
    length = end - start
    bound = max(1, min(max_jitter, length - 1)) if length > 1 else 1
    for _ in range(64):
        s = start + int(rng.integers(-bound, bound + 1))
        e = end + int(rng.integers(-bound, bound + 1))
        s, e = max(0, s), min(T, e)
        if e - s >= 1 and (s, e) != (start, end) and s < end and e > start:
            return s, e
    # deterministic fallback: trim or extend by one second
    if end < T:
        return start, end + 1
    if start > 0:
        return start - 1, end
    return start, end - 1 if length > 1 else end


def sample_timeline(config: GeneratorConfig, video_index: int) -> Timeline:
    rng = _rng(config.seed, video_index)
    T = int(rng.integers(config.min_duration, config.max_duration + 1))
    C = config.num_classes
    k = 1 + int(rng.poisson(config.mean_categories - 1.0))
    k = min(max(k, 1), C)
    cats = rng.choice(C, size=k, replace=False)
    lo, hi = math.log(config.min_event_sec), math.log(min(config.max_event_sec, T))
    planted: dict[str, list[tuple[int, int, int]]] = {m: [] for m in MODALITIES}
    for c in sorted(int(x) for x in cats):
        for _ in range(1 + int(rng.poisson(config.extra_instances))):
            length = int(round(math.exp(rng.uniform(lo, max(lo, hi)))))
            length = min(max(length, 1), T)
            start = int(rng.integers(0, T - length + 1))
            end = start + length
            if rng.random() < config.cross_modal_corr:
                first = MODALITIES[int(rng.integers(2))]
                other = MODALITIES[1 - MODALITIES.index(first)]
                planted[first].append((c, start, end))
                planted[other].append((c, *_jitter(rng, start, end, T, config.max_jitter_sec)))
            else:
                planted[MODALITIES[int(rng.integers(2))]].append((c, start, end))
    return Timeline(T, {m: _merge_events(planted[m]) for m in MODALITIES})


def draw_prototypes(config: GeneratorConfig) -> dict[str, np.ndarray]:
    """One fixed random unit vector per (modality, category)."""
    rng = _rng(config.seed, _PROTOTYPE_STREAM)
    out = {}
    for m, dim in (("audio", config.audio_dim), ("visual", config.visual_dim)):
        p = rng.standard_normal((config.num_classes, dim))
        out[m] = p / np.linalg.norm(p, axis=1, keepdims=True)
    return out


def activity(timeline: Timeline, modality: str, num_classes: int) -> np.ndarray:
    """[T, C] boolean: category active during second t."""
    act = np.zeros((timeline.duration, num_classes), bool)
    for c, s, e in timeline.events[modality]:
        act[s:e, c] = True
    return act


def render_features(timeline: Timeline, prototypes: dict[str, np.ndarray],
                    config: GeneratorConfig, video_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(config.seed, video_index, 1)
    out = []
    for m in MODALITIES:
        proto = prototypes[m]
        act = activity(timeline, m, proto.shape[0]).astype(np.float64)
        feats = act @ proto
        if config.noise_std > 0:
            feats = feats + rng.normal(0.0, config.noise_std, feats.shape)
        out.append(feats.astype(np.float32))
    return out[0], out[1]


def timeline_annotations(video_id: str, timeline: Timeline) -> list[EventAnnotation]:
    return [EventAnnotation(video_id, m, c, float(s), float(e))
            for m in MODALITIES for c, s, e in timeline.events[m]]


def generate_dataset(config: GeneratorConfig, root) -> dict[str, DatasetManifest]:
    """Write train/val/test splits under ``root``.

    Layout: ``<root>/<split>/{manifest.json, features/*.bin, labels_video.csv,
    labels_event.csv}``; the train split carries no event-level file.
    """
    root = Path(root)
    names = category_names(config.num_classes)
    prototypes = draw_prototypes(config)
    manifests = {}
    for split, n in config.split_sizes().items():
        split_dir = root / split
        try:
            (split_dir / "features").mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {split_dir}: {exc}") from exc
        entries, video_rows, events = [], [], []
        for i in range(n):
            index = _SPLIT_OFFSET[split] + i
            video_id = f"{split}_{i:05d}"
            timeline = sample_timeline(config, index)
            audio, visual = render_features(timeline, prototypes, config, index)
            rel = f"features/{video_id}.bin"
            write_features(split_dir / rel, audio, visual)
            entries.append(ManifestEntry(video_id, rel, timeline.duration))
            for m in MODALITIES:
                video_rows.append((video_id, m, [names[c] for c in sorted(timeline.categories(m))]))
            events.extend(timeline_annotations(video_id, timeline))
        manifest = DatasetManifest(split, names, entries)
        manifest.save(split_dir / "manifest.json")
        write_video_labels(split_dir / "labels_video.csv", video_rows)
        if split != "train":
            write_event_annotations(split_dir / "labels_event.csv", events, names)
        manifests[split] = manifest
        log.info("wrote %d %s videos to %s", n, split, split_dir)
    return manifests


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
