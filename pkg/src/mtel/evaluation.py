"""Segment decoding and the snippet-mAP / event-F1 metric suite."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .datamodel import DataError, SplitData

VIEWS = ("audio", "visual", "av")
METRIC_KEYS = ("f1_audio", "f1_visual", "f1_av", "f1_avg",
               "map_audio", "map_visual", "map_av", "map_avg")


@dataclass(frozen=True)
class EventSegment:
    modality: str  # "audio", "visual" or "av"
    category: int
    start: int  # half-open, grid units
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad segment [{self.start}, {self.end})")


@dataclass
class MetricsReport:
    f1_audio: float
    f1_visual: float
    f1_av: float
    f1_avg: float
    map_audio: float
    map_visual: float
    map_av: float
    map_avg: float

    @classmethod
    def from_views(cls, f1: Mapping[str, float], maps: Mapping[str, float]) -> "MetricsReport":
        return cls(f1["audio"], f1["visual"], f1["av"], float(np.mean([f1[v] for v in VIEWS])),
                   maps["audio"], maps["visual"], maps["av"],
                   float(np.mean([maps[v] for v in VIEWS])))

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k):.4f}\n" for k in METRIC_KEYS)

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = dict(line.split("=", 1) for line in text.split() if "=" in line)
        if set(vals) != set(METRIC_KEYS):
            raise ValueError(f"report keys {sorted(vals)} differ from {sorted(METRIC_KEYS)}")
        return cls(**{k: float(vals[k]) for k in METRIC_KEYS})

    def table(self) -> str:
        rows = [("F1 (event)", self.f1_audio, self.f1_visual, self.f1_av, self.f1_avg),
                ("mAP (snippet)", self.map_audio, self.map_visual, self.map_av, self.map_avg)]
        out = [f"{'':<14}{'Audio':>9}{'Visual':>9}{'AV':>9}{'Avg.':>9}"]
        for name, *vals in rows:
            out.append(f"{name:<14}" + "".join(f"{100 * v:>9.2f}" for v in vals))
        return "\n".join(out) + "\n"


def av_snippet_predictions(p_audio, p_visual):
    return p_audio * p_visual


# ---------------------------------------------------------------------------
# decoding

def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True in a 1-D boolean array as half-open intervals."""
    m = np.concatenate([[False], np.asarray(mask, bool), [False]])
    edges = np.flatnonzero(m[1:] != m[:-1])
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def snippets_to_segments(p: np.ndarray, threshold: float = 0.5,
                         modality: str = "audio") -> list[EventSegment]:
    """Concatenate consecutive snippets whose score exceeds ``threshold`` into segments."""
    p = np.asarray(p)
    out = []
    for c in range(p.shape[1]):
        out.extend(EventSegment(modality, c, s, e) for s, e in runs(p[:, c] > threshold))
    return out


# ---------------------------------------------------------------------------
# event-level F1

def segment_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def match_segments(pred: Sequence[tuple[int, int]], gt: Sequence[tuple[int, int]],
                   iou_threshold: float = 0.5) -> int:
    """Greedy one-to-one matching in descending IoU order; returns the true-positive count."""
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            iou = segment_iou(p, g)
            if iou >= iou_threshold:
                pairs.append((-iou, i, j))
    pairs.sort()
    used_p, used_g = set(), set()
    for _, i, j in pairs:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
    return len(used_p)


def _group(segments: Sequence[EventSegment]) -> dict[tuple[str, int], list[tuple[int, int]]]:
    out: dict[tuple[str, int], list[tuple[int, int]]] = {}
    for s in segments:
        out.setdefault((s.modality, s.category), []).append((s.start, s.end))
    return out


def f1_counts(pred: Mapping[str, Sequence[EventSegment]], gt: Mapping[str, Sequence[EventSegment]],
              view: str, iou_threshold: float = 0.5) -> tuple[int, int, int]:
    """(TP, FP, FN) summed over every video and category of ``view``."""
    tp = fp = fn = 0
    for vid in sorted(set(pred) | set(gt)):
        pg = {k: v for k, v in _group(pred.get(vid, [])).items() if k[0] == view}
        gg = {k: v for k, v in _group(gt.get(vid, [])).items() if k[0] == view}
        for key in set(pg) | set(gg):
            p, g = pg.get(key, []), gg.get(key, [])
            n = match_segments(p, g, iou_threshold)
            tp += n
            fp += len(p) - n
            fn += len(g) - n
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    # nothing to find and nothing claimed
    return 1.0 if denom == 0 else 2 * tp / denom


def event_f1(pred: Mapping[str, Sequence[EventSegment]], gt: Mapping[str, Sequence[EventSegment]],
             iou_threshold: float = 0.5, views: Sequence[str] = VIEWS) -> dict[str, float]:
    return {v: f1_from_counts(*f1_counts(pred, gt, v, iou_threshold)) for v in views}


# ---------------------------------------------------------------------------
# snippet-level mAP

def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP = sum_k (R_k - R_{k-1}) P_k over distinct score thresholds (ties form one step)."""
    scores = np.asarray(scores, np.float64).ravel()
    labels = np.asarray(labels).ravel() > 0
    npos = int(labels.sum())
    if npos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / npos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mAP over classes with at least one positive; [..., C] inputs pooled over the rest."""
    C = scores.shape[-1]
    s = scores.reshape(-1, C)
    y = labels.reshape(-1, C)
    aps = [average_precision(s[:, c], y[:, c]) for c in range(C) if y[:, c].any()]
    return float(np.mean(aps)) if aps else 0.0


def snippet_map(scores: Mapping[str, np.ndarray], gt: Mapping[str, np.ndarray],
                views: Sequence[str] = VIEWS) -> dict[str, float]:
    return {v: mean_average_precision(scores[v], gt[v]) for v in views}


# ---------------------------------------------------------------------------
# full suite

def view_scores(p_audio: np.ndarray, p_visual: np.ndarray) -> dict[str, np.ndarray]:
    return {"audio": p_audio, "visual": p_visual, "av": av_snippet_predictions(p_audio, p_visual)}


def view_ground_truth(gt_audio: np.ndarray, gt_visual: np.ndarray) -> dict[str, np.ndarray]:
    a, v = gt_audio > 0.5, gt_visual > 0.5
    return {"audio": a.astype(np.float32), "visual": v.astype(np.float32),
            "av": (a & v).astype(np.float32)}


def decode_views(views: Mapping[str, np.ndarray], video_ids: Sequence[str],
                 threshold: float = 0.5) -> dict[str, list[EventSegment]]:
    """{video_id: segments of all views} from per-view [N, T, C] score arrays."""
    out: dict[str, list[EventSegment]] = {vid: [] for vid in video_ids}
    for view, arr in views.items():
        for i, vid in enumerate(video_ids):
            out[vid].extend(snippets_to_segments(arr[i], threshold, view))
    return out


def compute_metrics(p_audio: np.ndarray, p_visual: np.ndarray, gt_audio: np.ndarray,
                    gt_visual: np.ndarray, threshold: float = 0.5,
                    iou_threshold: float = 0.5) -> MetricsReport:
    """All eight sub-metrics from [N, T, C] scores and binary ground-truth grids."""
    scores = view_scores(np.asarray(p_audio, np.float64), np.asarray(p_visual, np.float64))
    gt = view_ground_truth(np.asarray(gt_audio), np.asarray(gt_visual))
    ids = [str(i) for i in range(scores["audio"].shape[0])]
    pred_segs = decode_views(scores, ids, threshold)
    gt_segs = decode_views(gt, ids, 0.5)
    return MetricsReport.from_views(event_f1(pred_segs, gt_segs, iou_threshold),
                                    snippet_map(scores, gt))


@torch.no_grad()
def predict_split(model, data: SplitData, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Snippet probabilities [N, G, C] per modality from the inference path (phases 1-2)."""
    was_training = model.training
    model.eval()
    pa, pv = [], []
    try:
        for i in range(0, len(data), batch_size):
            a = torch.from_numpy(data.audio[i:i + batch_size])
            v = torch.from_numpy(data.visual[i:i + batch_size])
            preds = model.predict(a, v)
            pa.append(preds.p_audio.numpy())
            pv.append(preds.p_visual.numpy())
    finally:
        model.train(was_training)
    C = len(data.category_names)
    if not pa:
        empty = np.zeros((0, data.grid_len, C), np.float32)
        return empty, empty
    return np.concatenate(pa), np.concatenate(pv)


def evaluate(model, data: SplitData, threshold: float = 0.5, iou_threshold: float = 0.5,
             oracle: bool = False) -> MetricsReport:
    """Metric suite on a split with event annotations.

    ``model`` may be a model or a checkpoint path. With ``oracle=True`` the
    ground-truth grids are scored in place of model predictions.
    """
    if not data.has_events:
        raise DataError(f"split {data.split!r} has no event-level annotations")
    grids = data.label_grids()
    if oracle:
        p_audio, p_visual = grids["audio"], grids["visual"]
    else:
        if not isinstance(model, torch.nn.Module):
            from .checkpoint import load_checkpoint
            model = load_checkpoint(model).build_model(strict=False)
        p_audio, p_visual = predict_split(model, data)
    return compute_metrics(p_audio, p_visual, grids["audio"], grids["visual"],
                           threshold, iou_threshold)
