import csv
import os

import pytest

import mtel.training
from mtel.cli import load_run_config, main
from mtel.datamodel import load_split, read_event_annotations
from mtel.evaluation import METRIC_KEYS, MetricsReport, predict_split, snippets_to_segments
from mtel.checkpoint import load_checkpoint

TINY = """\
[generator]
num_train = 6
num_val = 0
num_test = 3
num_classes = 3
min_duration = 30
max_duration = 40
audio_dim = 6
visual_dim = 5
noise_std = 0.3
seed = 1

[model]
model_dim = 8
depth = 2
heads = 2

[train]
batch_size = 4
epochs = 2
grid_len = 32
"""


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "runs"),
                 "--epochs", "1"]) == 0
    run_dir, = (root / "runs").iterdir()
    return cfg, data, run_dir


def test_config_overrides_and_validation(cfg_file):
    cfg = load_run_config(cfg_file, {"train.seed": "7", "model.tau": "0.4"})
    assert cfg.train_config().seed == 7
    assert cfg.model_config(6, 5, 3).tau == 0.4
    assert cfg.model_config(6, 5, 3).pmt.model_dim == 8


def test_bad_config_exit_2(tmp_path, cfg_file, capsys):
    assert main(["gen-data", "--config", str(cfg_file), "--set", "model.widht=3"]) == 2
    assert "widht" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[nonsense]\nx = 1\n")
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.ini")]) == 2
    assert main(["gen-data", "--config", str(cfg_file), "--set", "generator.min_duration=5"]) == 2


def test_gen_data_seed_override_and_unwritable(tmp_path, cfg_file):
    out = tmp_path / "d"
    assert main(["gen-data", "--config", str(cfg_file), "--seed", "7", "--out", str(out)]) == 0
    assert "seed = 7" in (out / "effective_config.ini").read_text()
    assert (out / "test" / "labels_event.csv").is_file()
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(blocker / "sub")]) == 2


def test_gen_data_byte_identical(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        if rel.name != "effective_config.ini":  # echoes its own output path
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    snapshot = {rel: (tmp_path / "a" / rel).read_bytes() for rel in files}
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 0
    assert snapshot == {rel: (tmp_path / "a" / rel).read_bytes() for rel in files}


def test_train_missing_data_exit_3(tmp_path, cfg_file):
    assert main(["train", "--config", str(cfg_file), "--data", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "runs")]) == 3


def test_train_run_dir_and_resume(trained):
    cfg, data, run_dir = trained
    assert run_dir.name.endswith("_seed0")
    assert (run_dir / "effective_config.ini").is_file()
    ckpt = run_dir / "checkpoint_e000.safetensors"
    assert load_checkpoint(ckpt).epoch == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--resume", str(ckpt)]) == 0
    epochs = [line.split(",")[0] for line in (run_dir / "epoch_log.txt").read_text().splitlines()]
    assert epochs == ["epoch=0", "epoch=1"]
    assert load_checkpoint(run_dir / "checkpoint_e001.safetensors").epoch == 1


def test_nonfinite_exit_4(trained, tmp_path, monkeypatch, capsys):
    cfg, data, _ = trained

    def explode(*args, **kwargs):
        raise mtel.training.NonFiniteLossError("L_3", float("nan"))

    monkeypatch.setattr(mtel.training, "compute_losses", explode)
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path)]) == 4
    assert "L_3" in capsys.readouterr().err


def test_eval_oracle_and_report(trained, tmp_path, capsys):
    cfg, data, run_dir = trained
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--oracle",
                 "--out", str(tmp_path)]) == 0
    text = (tmp_path / "metrics_test.txt").read_text()
    assert [l.split("=")[0] for l in text.splitlines()] == list(METRIC_KEYS)
    assert all(l.endswith("=1.0000") for l in text.splitlines())
    ckpt = run_dir / "checkpoint_e000.safetensors"
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(ckpt),
                 "--out", str(tmp_path / "m")]) == 0
    rep = MetricsReport.from_text((tmp_path / "m" / "metrics_test.txt").read_text())
    assert 0.0 <= rep.map_avg <= 1.0
    assert "mAP (snippet)" in capsys.readouterr().out
    assert main(["eval", "--config", str(cfg), "--data", str(data), "--checkpoint", str(ckpt),
                 "--split", "train"]) == 5
    assert main(["eval", "--config", str(cfg), "--data", str(data),
                 "--checkpoint", str(tmp_path / "nope.safetensors")]) == 2


def test_predict_outputs(trained, tmp_path):
    cfg, data, run_dir = trained
    ckpt = run_dir / "checkpoint_e000.safetensors"
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    for out in (out1, out2):
        assert main(["predict", "--config", str(cfg), "--data", str(data), "--checkpoint", str(ckpt),
                     "--out", str(out), "--dump-graphs", str(out / "graphs")]) == 0
    for name in ("snippet_scores.csv", "segments.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    split = load_split(data / "test", grid_len=32)
    parsed = read_event_annotations(out1 / "segments.csv", split.category_names)
    model = load_checkpoint(ckpt).build_model(strict=False)
    p_a, p_v = predict_split(model, split)
    for i, vid in enumerate(split.video_ids):
        scale = split.durations[i] / 32
        expect = sorted((s.modality, s.category, s.start * scale, s.end * scale)
                        for arr, m in ((p_a, "audio"), (p_v, "visual"))
                        for s in snippets_to_segments(arr[i], 0.5, m))
        got = sorted((a.modality, a.category, a.start_sec, a.end_sec) for a in parsed.get(vid, []))
        assert got == pytest.approx(expect)
    with open(out1 / "snippet_scores.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0][:3] == ["video_id", "modality", "snippet"]
    assert len(rows) == 1 + 2 * 32 * len(split)
    dumps = sorted(os.listdir(out1 / "graphs"))
    assert dumps == sorted(f"{v}.txt" for v in split.video_ids)
    first = (out1 / "graphs" / dumps[0]).read_text()
    assert first.count("# graph") == 2 * 3


def test_no_input_mutation(trained, tmp_path):
    cfg, data, run_dir = trained
    before = {p: p.read_bytes() for p in data.rglob("*") if p.is_file()}
    main(["eval", "--config", str(cfg), "--data", str(data), "--oracle", "--out", str(tmp_path)])
    main(["predict", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "p"),
          "--checkpoint", str(run_dir / "checkpoint_e000.safetensors")])
    after = {p: p.read_bytes() for p in data.rglob("*") if p.is_file()}
    assert before == after
