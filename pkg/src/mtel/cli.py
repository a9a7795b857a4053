"""Command-line entry point: ``mtel {gen-data,train,eval,predict}``."""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datamodel import MODALITIES, DataError, load_split
from .evaluation import evaluate, predict_split, snippets_to_segments
from .pmt import PMTConfig
from .synthgen import GeneratorConfig, generate_dataset

log = logging.getLogger("mtel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NONFINITE, EXIT_NO_EVENTS = 0, 2, 3, 4, 5

_MODEL_KEYS = {
    "model_dim": int, "depth": int, "heads": int, "dropout": float,
    "self_attention": bool, "cross_attention": bool, "ffn": bool, "shift": bool,
    "graph_depth": int, "graph_heads": int, "graph_dropout": float,
    "interaction_heads": int, "interaction_dropout": float,
    "event_self_attention": bool, "event_cross_attention": bool,
    "tau": float, "phases": int,
}
_PMT_KEYS = {f.name for f in fields(PMTConfig)} - {"model_dim"}


class ConfigError(ValueError):
    pass


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass
class RunConfig:
    generator: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig.from_mapping(self.generator)

    def train_config(self):
        from .training import TrainConfig
        return TrainConfig.from_mapping(self.train)

    def model_config(self, audio_dim: int, visual_dim: int, num_classes: int):
        from .model import ModelConfig
        m = {k: _MODEL_KEYS[k](v) if _MODEL_KEYS[k] is not bool else _parse_bool(v)
             for k, v in self.model.items()}
        pmt = {k: m.pop(k) for k in list(m) if k in _PMT_KEYS}
        pmt["model_dim"] = m.pop("model_dim", 512)
        return ModelConfig(audio_dim=audio_dim, visual_dim=visual_dim, num_classes=num_classes,
                           pmt=PMTConfig(**pmt), **m)

    def validate(self) -> None:
        unknown = set(self.model) - set(_MODEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        try:
            self.generator_config()
            self.train_config()
            self.model_config(1, 1, 1)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.paths) - {"data_dir", "out"}
        if unknown:
            raise ConfigError(f"unknown paths keys: {sorted(unknown)}")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section in ("generator", "model", "train", "paths"):
            cp[section] = {k: str(v) for k, v in sorted(getattr(self, section).items())}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read the INI config, apply ``section.key`` overrides, validate everything."""
    cfg = RunConfig()
    if path is not None:
        cp = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in cp.sections():
            if not hasattr(cfg, section) or section.startswith("_"):
                raise ConfigError(f"unknown config section [{section}]")
            getattr(cfg, section).update(cp[section])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key or section not in ("generator", "model", "train", "paths"):
            raise ConfigError(f"bad override {dotted!r}")
        getattr(cfg, section)[key] = value
    cfg.validate()
    return cfg


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["generator.seed"] = str(args.seed)
        out["train.seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        out["train.epochs"] = str(args.epochs)
    if args.out is not None:
        out["paths.out"] = args.out
    if getattr(args, "data", None) is not None:
        out["paths.data_dir"] = args.data
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig) -> int:
    gen = cfg.generator_config()
    root = Path(cfg.paths.get("out") or cfg.paths.get("data_dir") or "data")
    try:
        root.mkdir(parents=True, exist_ok=True)
        generate_dataset(gen, root)
        (root / "effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"dataset written to {root}")
    return EXIT_OK


def _data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.get("data_dir", "data"))


def _load(cfg: RunConfig, split: str, grid_len: int):
    split_dir = _data_dir(cfg) / split
    if not (split_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"dataset split not found: {split_dir}")
    return load_split(split_dir, grid_len)


def cmd_train(cfg: RunConfig, resume=None) -> int:
    from .training import NonFiniteLossError, train
    tcfg = cfg.train_config()
    try:
        data = _load(cfg, "train", tcfg.grid_len)
    except (FileNotFoundError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if resume is not None:
        run_dir = Path(resume).parent
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.paths.get("out") or "runs") / f"{stamp}_seed{tcfg.seed}"
    mcfg = cfg.model_config(data.audio.shape[-1], data.visual.shape[-1], len(data.category_names))
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "effective_config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = train(data, tcfg, mcfg, out_dir=run_dir, resume=resume)
    except NonFiniteLossError as exc:
        print(f"error: {exc} (component {exc.component})", file=sys.stderr)
        return EXIT_NONFINITE
    last = result.checkpoints[-1] if result.checkpoints else None
    print(f"run directory: {run_dir}")
    if last is not None:
        print(f"final checkpoint: {last}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint, split: str, oracle: bool = False) -> int:
    tcfg = cfg.train_config()
    try:
        data = _load(cfg, split, tcfg.grid_len)
    except (FileNotFoundError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not data.has_events:
        print(f"error: split {split!r} has no event-level annotations", file=sys.stderr)
        return EXIT_NO_EVENTS
    if checkpoint is None and not oracle:
        print("error: --checkpoint is required unless --oracle is given", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = evaluate(checkpoint, data, oracle=oracle)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot use checkpoint {checkpoint}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(report.table(), end="")
    out = Path(cfg.paths.get("out") or (Path(checkpoint).parent if checkpoint else "."))
    out.mkdir(parents=True, exist_ok=True)
    (out / f"metrics_{split}.txt").write_text(report.to_text(), encoding="utf-8")
    return EXIT_OK


def write_predictions(out_dir: Path, data, p_audio, p_visual, threshold=0.5) -> None:
    names = data.category_names
    with open(out_dir / "snippet_scores.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "modality", "snippet", *names])
        for i, vid in enumerate(data.video_ids):
            for m, arr in zip(MODALITIES, (p_audio, p_visual)):
                for t, row in enumerate(arr[i]):
                    w.writerow([vid, m, t, *(f"{x:.6f}" for x in row)])
    with open(out_dir / "segments.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["video_id", "modality", "category", "start_sec", "end_sec"])
        for i, vid in enumerate(data.video_ids):
            scale = float(data.durations[i]) / data.grid_len
            for m, arr in zip(MODALITIES, (p_audio, p_visual)):
                for seg in snippets_to_segments(arr[i], threshold, m):
                    w.writerow([vid, m, names[seg.category], repr(seg.start * scale),
                                repr(seg.end * scale)])


def dump_graphs(out_dir: Path, model, data, tau: float) -> None:
    import torch
    from .eventgraph import build_event_graph, format_event_graph
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for i, vid in enumerate(data.video_ids):
            a = torch.from_numpy(data.audio[i:i + 1])
            v = torch.from_numpy(data.visual[i:i + 1])
            _, preds = model.snippet_phase(a, v)
            with open(out_dir / f"{vid}.txt", "w", encoding="utf-8") as f:
                for m in MODALITIES:
                    for c in range(len(data.category_names)):
                        f.write(format_event_graph(build_event_graph(preds, m, c, tau)))


def cmd_predict(cfg: RunConfig, checkpoint, split: str, graphs_dir=None) -> int:
    from .checkpoint import load_checkpoint
    tcfg = cfg.train_config()
    try:
        data = _load(cfg, split, tcfg.grid_len)
    except (FileNotFoundError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        model = load_checkpoint(checkpoint).build_model(strict=False)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot use checkpoint {checkpoint}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    p_audio, p_visual = predict_split(model, data)
    out = Path(cfg.paths.get("out") or Path(checkpoint).parent / f"predictions_{split}")
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out, data, p_audio, p_visual)
    if graphs_dir is not None:
        dump_graphs(Path(graphs_dir), model, data, model.config.tau)
    print(f"predictions written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset root (overrides paths.data_dir)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train the three-phase model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="compute the metric suite")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--oracle", action="store_true", help="score ground truth (debug)")
    p = sub.add_parser("predict", parents=[common], help="export snippet scores and segments")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dump-graphs", metavar="DIR", help="write phase-1 event graphs as text")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_run_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "train":
        return cmd_train(cfg, args.resume)
    if args.command == "eval":
        return cmd_eval(cfg, args.checkpoint, args.split, args.oracle)
    return cmd_predict(cfg, args.checkpoint, args.split, args.dump_graphs)


if __name__ == "__main__":
    sys.exit(main())
