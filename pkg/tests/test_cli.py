import json
import subprocess
import sys

import numpy as np
import pytest

from trn import cli
from trn import dataio as dio
from trn import evaluate as ev
from trn import training as tr
from trn.model import FusionVariant, TrnConfig, TrnParams


def run(argv):
    return cli.main(argv)


def tiny_ckpt(tmp_path, **kw):
    base = dict(
        fusion_variant=FusionVariant.TWO_STREAM,
        appearance_dim=3,
        motion_dim=2,
        pose_dim=None,
        hidden_size=4,
        decoder_steps=2,
        num_actions=2,
    )
    base.update(kw)
    cfg = TrnConfig(**base)
    params = TrnParams.init(cfg, np.random.default_rng(0))
    path = str(tmp_path / "model.trnc")
    tr.save_checkpoint(path, params)
    return path, cfg


def tiny_features(tmp_path, cfg, t=5, seed=1):
    rng = np.random.default_rng(seed)
    paths = {}
    for name in ("appearance", "motion"):
        dim = getattr(cfg, f"{name}_dim")
        p = str(tmp_path / f"{name}.trnf")
        dio.write_features(p, rng.normal(size=(t, dim)))
        paths[name] = p
    return paths


def synth_args(out_dir, **kw):
    base = dict(
        num_classes=2,
        appearance_dim=5,
        motion_dim=4,
        num_videos=4,
        video_len=12,
        train_fraction=0.5,
        seed=3,
    )
    base.update(kw)
    argv = ["synth", "--out", str(out_dir)]
    for k, v in base.items():
        argv += ["--" + k.replace("_", "-"), str(v)]
    return argv


# ---------------------------------------------------------------------------
# parser behavior


def test_help_exits_zero_and_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["train", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "--learning-rate" in out
    assert "0.0005" in out
    assert "--decoder-steps" in out


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--bogus-flag", "3"])
    assert exc.value.code == 1


def test_missing_subcommand_exits_1():
    with pytest.raises(SystemExit) as exc:
        run([])
    assert exc.value.code == 1


def test_train_echoes_hyperparameter_defaults(caplog):
    with caplog.at_level("INFO", logger="trn.cli"):
        rc = run(["train"])  # no manifest: fails after the echo
    assert rc == 1
    text = caplog.text
    assert "learning_rate = 0.0005" in text
    assert "weight_decay = 0.0005" in text
    assert "batch_size = 2" in text
    assert "seq_len = 64" in text
    assert "decoder_steps = 8" in text


def test_log_level_env_silences_echo(monkeypatch, caplog):
    # the env var sets the logger level itself, so the info echo is
    # filtered before any handler (including caplog's) sees it
    monkeypatch.setenv("TRN_LOG_LEVEL", "WARNING")
    rc = run(["train"])
    assert rc == 1
    assert "learning_rate" not in caplog.text


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_dataset(tmp_path, capsys):
    rc = run(synth_args(tmp_path / "data"))
    assert rc == 0
    manifest_path = capsys.readouterr().out.strip()
    manifest = dio.load_manifest(manifest_path)
    assert len(manifest.videos) == 4
    cmap = dio.read_class_map(manifest.resolve(manifest.class_map))
    assert len(cmap.names) == 3  # background + 2


def test_synth_three_classes_gives_four_map_entries(tmp_path, capsys):
    rc = run(synth_args(tmp_path / "data", num_classes=3))
    assert rc == 0
    manifest = dio.load_manifest(capsys.readouterr().out.strip())
    cmap = dio.read_class_map(manifest.resolve(manifest.class_map))
    assert len(cmap.names) == 4


def test_synth_same_seed_identical_bytes(tmp_path, capsys):
    run(synth_args(tmp_path / "a"))
    run(synth_args(tmp_path / "b"))
    capsys.readouterr()
    a_files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    b_files = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert a_files == b_files and a_files
    for rel in a_files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_synth_spec_file_with_flag_override(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_videos": 6, "video_len": 10, "seed": 1}))
    rc = run(["synth", "--spec", str(spec), "--out", str(tmp_path / "d"), "--num-videos", "4"])
    assert rc == 0
    manifest = dio.load_manifest(capsys.readouterr().out.strip())
    assert len(manifest.videos) == 4  # flag beats file
    assert manifest.videos[0].num_chunks == 10  # file beats default


def test_config_file_unknown_key_rejected(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_videos": 4, "frobnicate": 1}))
    rc = run(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")])
    assert rc == 1


def test_config_file_malformed_json(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text("{not json")
    rc = run(["synth", "--spec", str(spec), "--out", str(tmp_path / "d")])
    assert rc == 1


# ---------------------------------------------------------------------------
# train


def train_argv(manifest, ckpt, **kw):
    base = dict(epochs=1, hidden_size=8, seq_len=6, eval_every=0, decoder_steps=2)
    base.update(kw)
    argv = ["train", "--manifest", str(manifest), "--out", str(ckpt)]
    for k, v in base.items():
        argv += ["--" + k.replace("_", "-"), str(v)]
    return argv


@pytest.fixture()
def dataset(tmp_path, capsys):
    rc = run(synth_args(tmp_path / "data"))
    assert rc == 0
    return capsys.readouterr().out.strip()


def test_train_writes_loadable_checkpoint(dataset, tmp_path, capsys):
    ckpt = tmp_path / "m.trnc"
    metrics = tmp_path / "metrics.json"
    rc = run(train_argv(dataset, ckpt) + ["--metrics-out", str(metrics)])
    assert rc == 0
    params, adam, meta = tr.load_checkpoint(str(ckpt))
    assert adam is None
    assert meta["epochs"] == 1
    assert meta["final_loss"] > 0
    rows = json.loads(metrics.read_text())
    assert len(rows) == 1 and rows[0]["epoch"] == 1
    assert "final loss" in capsys.readouterr().out


def test_train_seed_reproducible_bytes(dataset, tmp_path):
    a, b = tmp_path / "a.trnc", tmp_path / "b.trnc"
    assert run(train_argv(dataset, a, seed=7)) == 0
    assert run(train_argv(dataset, b, seed=7)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_train_config_file_precedence(dataset, tmp_path, caplog):
    cfgfile = tmp_path / "train.json"
    cfgfile.write_text(json.dumps({"epochs": 3, "hidden_size": 8, "seq_len": 6,
                                   "eval_every": 0, "decoder_steps": 2}))
    ckpt = tmp_path / "m.trnc"
    with caplog.at_level("INFO", logger="trn.cli"):
        rc = run(["train", "--manifest", dataset, "--out", str(ckpt),
                  "--config", str(cfgfile), "--epochs", "1"])
    assert rc == 0
    assert "config epochs = 1" in caplog.text  # flag wins
    assert "config hidden_size = 8" in caplog.text  # file wins
    _, _, meta = tr.load_checkpoint(str(ckpt))
    assert meta["epochs"] == 1


def test_train_heldout_metric_reported(dataset, tmp_path):
    ckpt = tmp_path / "m.trnc"
    rc = run(train_argv(dataset, ckpt, eval_every=1))
    assert rc == 0
    _, _, meta = tr.load_checkpoint(str(ckpt))
    assert 0.0 <= meta["heldout_map"] <= 1.0


def test_train_missing_manifest_exits_2(tmp_path):
    rc = run(["train", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "m")])
    assert rc == 2


def test_train_fused_variant_uses_pose_stream(dataset, tmp_path):
    ckpt = tmp_path / "m.trnc"
    rc = run(train_argv(dataset, ckpt, variant="fused_two_stream"))
    assert rc == 0
    params, _, _ = tr.load_checkpoint(str(ckpt))
    assert params.config.fusion_variant is FusionVariant.FUSED_TWO_STREAM
    assert params.config.pose_dim == 134  # dim read from the manifest


def test_train_missing_stream_exits_1(dataset, tmp_path):
    rc = run(train_argv(dataset, tmp_path / "m.trnc", variant="one_stream",
                        one_stream="flow"))
    assert rc == 1  # no stream of that name in the manifest


# ---------------------------------------------------------------------------
# stream / infer


def test_stream_dump_structure(tmp_path, capsys):
    ckpt, cfg = tiny_ckpt(tmp_path)
    feats = tiny_features(tmp_path, cfg, t=5)
    out = tmp_path / "dump.jsonl"
    rc = run(["stream", "--ckpt", ckpt, "--out", str(out),
              "--features", f"appearance={feats['appearance']}", f"motion={feats['motion']}"])
    assert rc == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    header, records = lines[0], lines[1:]
    assert header["type"] == "config"
    assert header["decoder_steps"] == 2
    assert len(records) == 5  # chunk count equals feature file T
    for rec in records:
        assert len(rec["anticipated"]) == 2
        assert len(rec["present"]) == cfg.num_actions + 1
        assert abs(sum(rec["present"]) - 1.0) < 1e-9


def test_stream_equals_infer_batch(tmp_path, capsys):
    ckpt, cfg = tiny_ckpt(tmp_path)
    feats = tiny_features(tmp_path, cfg, t=7)
    features_argv = ["--features", f"appearance={feats['appearance']}", f"motion={feats['motion']}"]
    a, b = tmp_path / "stream.jsonl", tmp_path / "batch.jsonl"
    assert run(["stream", "--ckpt", ckpt, "--out", str(a)] + features_argv) == 0
    assert run(["infer", "--batch", "--ckpt", ckpt, "--out", str(b)] + features_argv) == 0
    assert a.read_bytes() == b.read_bytes()


def test_stream_from_manifest_split(dataset, tmp_path):
    manifest = dio.load_manifest(dataset)
    first = manifest.videos[0]
    cfg = TrnConfig(
        fusion_variant=FusionVariant.TWO_STREAM,
        appearance_dim=first.streams["appearance"].dim,
        motion_dim=first.streams["motion"].dim,
        pose_dim=None,
        hidden_size=4,
        decoder_steps=2,
        num_actions=2,
    )
    params = TrnParams.init(cfg, np.random.default_rng(0))
    ckpt = str(tmp_path / "m.trnc")
    tr.save_checkpoint(ckpt, params)
    out = tmp_path / "dump.jsonl"
    rc = run(["stream", "--ckpt", ckpt, "--manifest", dataset, "--split", "test",
              "--out", str(out)])
    assert rc == 0
    dump = ev.read_prediction_dump(str(out))
    assert set(dump.videos) == {v.video_id for v in manifest.split("test")}


def test_stream_mismatched_lengths_exits_1(tmp_path):
    ckpt, cfg = tiny_ckpt(tmp_path)
    rng = np.random.default_rng(0)
    a, m = str(tmp_path / "a.trnf"), str(tmp_path / "m.trnf")
    dio.write_features(a, rng.normal(size=(5, 3)))
    dio.write_features(m, rng.normal(size=(4, 2)))
    rc = run(["stream", "--ckpt", ckpt, "--out", str(tmp_path / "d.jsonl"),
              "--features", f"appearance={a}", f"motion={m}"])
    assert rc == 1


def test_stream_corrupt_features_exits_2(tmp_path):
    ckpt, cfg = tiny_ckpt(tmp_path)
    bad = tmp_path / "bad.trnf"
    bad.write_bytes(b"NOPE" + b"\x00" * 32)
    rc = run(["stream", "--ckpt", ckpt, "--out", str(tmp_path / "d.jsonl"),
              "--features", f"appearance={bad}", f"motion={bad}"])
    assert rc == 2


def test_stream_missing_ckpt_exits_2(tmp_path):
    rc = run(["stream", "--ckpt", str(tmp_path / "nope.trnc"),
              "--out", str(tmp_path / "d.jsonl"), "--features", "appearance=x"])
    assert rc == 2


def test_infer_without_input_exits_1(tmp_path):
    ckpt, _ = tiny_ckpt(tmp_path)
    rc = run(["infer", "--ckpt", ckpt, "--out", str(tmp_path / "d.jsonl")])
    assert rc == 1


# ---------------------------------------------------------------------------
# eval


def test_eval_perfect_dump_scores_100(dataset, tmp_path, capsys):
    manifest = dio.load_manifest(dataset)
    cmap = dio.read_class_map(manifest.resolve(manifest.class_map))
    classes = cmap.num_actions + 1
    steps = 2
    videos = manifest.split("test")
    dump = ev.PredictionDump(
        chunk_size=videos[0].chunk_size, fps=videos[0].fps, decoder_steps=steps, classes=classes
    )
    eye = np.eye(classes)
    for video in videos:
        labels, _ = dio.load_video_labels(manifest, video, cmap)
        t_len = len(labels)
        present = eye[labels]
        anticipated = np.zeros((t_len, steps, classes))
        for t in range(t_len):
            for i in range(1, steps + 1):
                anticipated[t, i - 1] = eye[labels[min(t + i, t_len - 1)]]
        dump.videos[video.video_id] = ev.VideoPredictions(
            present=present, anticipated=anticipated
        )
    dump_path = tmp_path / "perfect.jsonl"
    ev.write_prediction_dump(str(dump_path), dump)
    annotations = manifest.resolve(videos[0].annotations)
    rc = run(["eval", "--dump", str(dump_path), "--gt", annotations,
              "--classmap", manifest.resolve(manifest.class_map)])
    assert rc == 0
    table = capsys.readouterr().out
    cells = table.strip().splitlines()[-1].split()[2:]
    assert cells and all(c == "100.00" for c in cells)


def test_eval_missing_dump_exits_2(tmp_path):
    rc = run(["eval", "--dump", str(tmp_path / "nope.jsonl"), "--gt", "x", "--classmap", "y"])
    assert rc == 2


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes(capsys):
    rc = run(["gradcheck"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "max relative error" in out
    assert "PASS" in out


def test_gradcheck_other_variants_pass(capsys):
    assert run(["gradcheck", "--variant", "fused_two_stream", "--seq-len", "2"]) == 0
    assert run(["gradcheck", "--variant", "one_stream", "--one-stream", "motion",
                "--seq-len", "2"]) == 0
    capsys.readouterr()


def test_gradcheck_corrupted_gradient_fails(monkeypatch, capsys):
    monkeypatch.setenv("TRN_GRADCHECK_CORRUPT", "0.01")
    rc = run(["gradcheck"])
    assert rc == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_bad_variant_exits_1(capsys):
    rc = run(["gradcheck", "--variant", "three_stream"])
    assert rc == 1


def test_module_entrypoint(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "trn.cli", "gradcheck", "--hidden-size", "2", "--seq-len", "2"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout
