"""Domain types, on-disk formats and temporal resampling.

Feature files hold one video each::

    offset 0   magic  b"MTEL0001"
    offset 8   uint32 T            (audio snippet count)
    offset 12  uint32 D_audio
    offset 16  uint32 D_visual
    offset 20  uint32 T_visual     (0 means "same as T")
    offset 24  8 reserved zero bytes
    offset 32  float32 audio  [T, D_audio]   little-endian, row-major
               float32 visual [T_visual, D_visual]
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"MTEL0001"
HEADER = struct.Struct("<8sIIII8s")
MODALITIES = ("audio", "visual")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Base class for dataset loading failures."""


class FormatError(DataError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: malformed feature file at byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset


class SchemaError(DataError):
    pass


class EmptyVideoError(DataError):
    pass


@dataclass
class VideoSample:
    video_id: str
    audio_feats: np.ndarray  # [T, D_a]
    visual_feats: np.ndarray  # [T, D_v]
    duration_sec: int
    labels_audio: np.ndarray  # [C] in {0, 1}
    labels_visual: np.ndarray

    def __post_init__(self):
        if self.audio_feats.shape[0] != self.visual_feats.shape[0]:
            raise DataError(f"{self.video_id}: audio/visual lengths differ")
        if self.audio_feats.shape[0] != self.duration_sec:
            raise DataError(f"{self.video_id}: duration does not match feature length")
        if self.duration_sec < 1:
            raise EmptyVideoError(f"{self.video_id}: video has no snippets")
        if not (np.isfinite(self.audio_feats).all() and np.isfinite(self.visual_feats).all()):
            raise DataError(f"{self.video_id}: non-finite feature values")

    @property
    def num_classes(self) -> int:
        return len(self.labels_audio)


@dataclass(frozen=True)
class EventAnnotation:
    video_id: str
    modality: str
    category: int
    start_sec: float
    end_sec: float

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise SchemaError(f"unknown modality {self.modality!r}")
        if not 0 <= self.start_sec < self.end_sec:
            raise DataError(
                f"{self.video_id}: bad interval [{self.start_sec}, {self.end_sec})")


@dataclass
class ManifestEntry:
    video_id: str
    feature_path: str
    duration: int


@dataclass
class DatasetManifest:
    split: str
    category_names: list[str]
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory the manifest was read from

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate video_id in manifest")

    @property
    def num_classes(self) -> int:
        return len(self.category_names)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.feature_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def save(self, path) -> None:
        doc = {
            "split": self.split,
            "category_names": self.category_names,
            "entries": [
                {"video_id": e.video_id, "feature_path": e.feature_path, "duration": e.duration}
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            entries = [ManifestEntry(str(e["video_id"]), str(e["feature_path"]), int(e["duration"]))
                       for e in doc["entries"]]
            manifest = cls(doc["split"], list(doc["category_names"]), entries, root=path.parent)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}: invalid manifest ({exc})") from exc
        for e in manifest.entries:
            if not manifest.resolve(e).is_file():
                raise SchemaError(f"{path}: feature file missing for {e.video_id}")
        return manifest


# ---------------------------------------------------------------------------
# feature files

def write_features(path, audio: np.ndarray, visual: np.ndarray) -> None:
    audio = np.ascontiguousarray(audio, dtype="<f4")
    visual = np.ascontiguousarray(visual, dtype="<f4")
    if audio.ndim != 2 or visual.ndim != 2:
        raise ValueError("feature arrays must be 2-D")
    t_visual = 0 if visual.shape[0] == audio.shape[0] else visual.shape[0]
    header = HEADER.pack(MAGIC, audio.shape[0], audio.shape[1], visual.shape[1], t_visual, bytes(8))
    with open(path, "wb") as f:
        f.write(header)
        f.write(audio.tobytes())
        f.write(visual.tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    """Read (audio, visual) float32 matrices; lengths may differ."""
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise FormatError(path, len(buf), f"truncated header ({len(buf)} < {HEADER.size} bytes)")
    magic, t_audio, d_audio, d_visual, t_visual, reserved = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(path, 0, f"bad magic {magic!r}")
    if reserved != bytes(8):
        raise FormatError(path, 24, "reserved bytes are not zero")
    if t_visual == 0:
        t_visual = t_audio
    if d_audio == 0 or d_visual == 0:
        raise FormatError(path, 12, "zero feature dimension")
    n_audio = t_audio * d_audio * 4
    n_visual = t_visual * d_visual * 4
    expected = HEADER.size + n_audio + n_visual
    if len(buf) != expected:
        offset = min(len(buf), expected)
        raise FormatError(path, offset, f"payload size {len(buf)} != expected {expected}")
    audio = np.frombuffer(buf, "<f4", t_audio * d_audio, HEADER.size).reshape(t_audio, d_audio)
    visual = np.frombuffer(buf, "<f4", t_visual * d_visual, HEADER.size + n_audio)
    visual = visual.reshape(t_visual, d_visual)
    for name, arr, base in (("audio", audio, HEADER.size), ("visual", visual, HEADER.size + n_audio)):
        bad = np.flatnonzero(~np.isfinite(arr.ravel()))
        if bad.size:
            raise FormatError(path, base + 4 * int(bad[0]), f"non-finite {name} value")
    return audio.astype(np.float32), visual.astype(np.float32)


# ---------------------------------------------------------------------------
# label tables

def write_video_labels(path, rows: Iterable[tuple[str, str, Sequence[str]]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "modality", "labels"])
        for video_id, modality, names in rows:
            w.writerow([video_id, modality, ";".join(names)])


def read_video_labels(path, category_names: Sequence[str]) -> dict[str, dict[str, np.ndarray]]:
    """Parse the video-level label table into {video_id: {modality: y}}."""
    index = {name: i for i, name in enumerate(category_names)}
    table: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["video_id", "modality", "labels"]:
            raise SchemaError(f"{path}: expected header video_id,modality,labels")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise SchemaError(f"{path}:{lineno}: too few columns")
            video_id, modality = row[0].strip(), row[1].strip()
            if modality not in MODALITIES:
                raise SchemaError(f"{path}:{lineno}: unknown modality {modality!r}")
            # an unquoted row like "vid7,audio,speech,guitar" spills labels across columns
            names = [n.strip() for cell in row[2:] for n in cell.split(";") if n.strip()]
            y = table.setdefault(video_id, {m: np.zeros(len(category_names), np.float32)
                                            for m in MODALITIES})[modality]
            for name in names:
                if name not in index:
                    raise SchemaError(f"{path}:{lineno}: unknown category {name!r}")
                y[index[name]] = 1.0
    return table


def write_event_annotations(path, annotations: Iterable[EventAnnotation],
                            category_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "modality", "category", "start_sec", "end_sec"])
        for a in annotations:
            w.writerow([a.video_id, a.modality, category_names[a.category],
                        _fmt_sec(a.start_sec), _fmt_sec(a.end_sec)])


def _fmt_sec(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def read_event_annotations(path, category_names: Sequence[str]) -> dict[str, list[EventAnnotation]]:
    """Parse the event-level table. ``category`` may be a name or an integer index."""
    index = {name: i for i, name in enumerate(category_names)}
    out: dict[str, list[EventAnnotation]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        need = {"video_id", "modality", "category", "start_sec", "end_sec"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise SchemaError(f"{path}: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            cat = row["category"].strip()
            if cat in index:
                c = index[cat]
            elif cat.isdigit() and int(cat) < len(category_names):
                c = int(cat)
            else:
                raise SchemaError(f"{path}:{lineno}: unknown category {cat!r}")
            try:
                ann = EventAnnotation(row["video_id"].strip(), row["modality"].strip(), c,
                                      float(row["start_sec"]), float(row["end_sec"]))
            except ValueError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(ann.video_id, []).append(ann)
    return out


# ---------------------------------------------------------------------------
# loading

def load_video_sample(entry: ManifestEntry, label_table: dict, num_classes: int,
                      root=None) -> VideoSample:
    path = Path(entry.feature_path)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    audio, visual = read_features(path)
    T = min(audio.shape[0], visual.shape[0])
    if T == 0:
        raise EmptyVideoError(f"{entry.video_id}: feature file has zero snippets")
    labels = label_table.get(entry.video_id, {})
    zeros = np.zeros(num_classes, np.float32)
    return VideoSample(
        video_id=entry.video_id,
        audio_feats=audio[:T],
        visual_feats=visual[:T],
        duration_sec=T,
        labels_audio=labels.get("audio", zeros).copy(),
        labels_visual=labels.get("visual", zeros).copy(),
    )


# ---------------------------------------------------------------------------
# resampling

def resample_sequence(feats: np.ndarray, target_len: int) -> np.ndarray:
    """Linearly interpolate ``feats`` [T, D] onto ``target_len`` evenly spaced points."""
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    feats = np.asarray(feats)
    T = feats.shape[0]
    if T < 1:
        raise ValueError("cannot resample an empty sequence")
    if T == target_len:
        return feats.copy()
    pos = np.linspace(0.0, T - 1, target_len)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    out = feats[lo] * (1.0 - frac) + feats[hi] * frac
    return out.astype(feats.dtype, copy=False)


def _merge(intervals):
    merged: list[list[float]] = []
    for s, e in sorted(intervals):
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        else:
            merged.append([s, e])
    return merged


def resample_labels_to_grid(annotations: Sequence[EventAnnotation], t_native: float,
                            t_grid: int, num_classes: int) -> dict[str, np.ndarray]:
    """Rasterize event annotations onto a ``t_grid``-cell timeline.

    A cell is positive for a class when the class's (merged) intervals cover
    more than half of it. Returns {modality: [t_grid, C] float32 in {0, 1}}.
    """
    out = {m: np.zeros((t_grid, num_classes), np.float32) for m in MODALITIES}
    groups: dict[tuple[str, int], list[tuple[float, float]]] = {}
    for a in annotations:
        if a.start_sec < 0 or a.end_sec > t_native:
            raise DataError(f"{a.video_id}: annotation [{a.start_sec}, {a.end_sec}) "
                            f"outside [0, {t_native}]")
        if not 0 <= a.category < num_classes:
            raise SchemaError(f"{a.video_id}: category {a.category} out of range")
        groups.setdefault((a.modality, a.category), []).append((a.start_sec, a.end_sec))
    cell = t_native / t_grid
    lo = np.arange(t_grid) * cell
    hi = lo + cell
    for (modality, c), spans in groups.items():
        cover = np.zeros(t_grid)
        for s, e in _merge(spans):
            cover += np.clip(np.minimum(hi, e) - np.maximum(lo, s), 0.0, None)
        out[modality][:, c] = cover > cell / 2
    return out


# ---------------------------------------------------------------------------
# whole splits

@dataclass
class SplitData:
    """A split resampled onto a common grid, ready for batching."""

    split: str
    category_names: list[str]
    video_ids: list[str]
    durations: np.ndarray  # [N] native snippet counts
    audio: np.ndarray  # [N, G, D_a] float32
    visual: np.ndarray  # [N, G, D_v]
    labels_audio: np.ndarray  # [N, C]
    labels_visual: np.ndarray
    annotations: dict[str, list[EventAnnotation]] | None = None

    def __len__(self) -> int:
        return len(self.video_ids)

    @property
    def grid_len(self) -> int:
        return self.audio.shape[1]

    @property
    def has_events(self) -> bool:
        return self.annotations is not None

    def label_grids(self) -> dict[str, np.ndarray]:
        """Ground-truth snippet labels on the model grid: {modality: [N, G, C]}."""
        if self.annotations is None:
            raise DataError(f"split {self.split!r} has no event-level annotations")
        C, G = len(self.category_names), self.grid_len
        out = {m: np.zeros((len(self), G, C), np.float32) for m in MODALITIES}
        for i, vid in enumerate(self.video_ids):
            grids = resample_labels_to_grid(self.annotations.get(vid, []),
                                            float(self.durations[i]), G, C)
            for m in MODALITIES:
                out[m][i] = grids[m]
        return out


def load_split(split_dir, grid_len: int = 200) -> SplitData:
    split_dir = Path(split_dir)
    manifest_path = split_dir / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    names = manifest.category_names
    labels = read_video_labels(split_dir / "labels_video.csv", names)
    event_path = split_dir / "labels_event.csv"
    annotations = read_event_annotations(event_path, names) if event_path.is_file() else None
    ids, durations, audio, visual, ya, yv = [], [], [], [], [], []
    for entry in manifest.entries:
        sample = load_video_sample(entry, labels, len(names), root=split_dir)
        ids.append(sample.video_id)
        durations.append(sample.duration_sec)
        audio.append(resample_sequence(sample.audio_feats, grid_len))
        visual.append(resample_sequence(sample.visual_feats, grid_len))
        ya.append(sample.labels_audio)
        yv.append(sample.labels_visual)
    C = len(names)
    return SplitData(
        split=manifest.split, category_names=names, video_ids=ids,
        durations=np.asarray(durations, np.int64),
        audio=np.stack(audio) if audio else np.zeros((0, grid_len, 0), np.float32),
        visual=np.stack(visual) if visual else np.zeros((0, grid_len, 0), np.float32),
        labels_audio=np.stack(ya) if ya else np.zeros((0, C), np.float32),
        labels_visual=np.stack(yv) if yv else np.zeros((0, C), np.float32),
        annotations=annotations,
    )
