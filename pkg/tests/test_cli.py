"""Command-line behavior: config parsing, result emission, exit codes."""

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from ibnlab import cli
from ibnlab.cli import (
    SourceHandle,
    UsageError,
    emit_results,
    main,
    parse_config,
    resolve_source,
    run_configs,
    _sig6,
)
from ibnlab.data import ImbalanceSpec, encode_idx_images, encode_idx_labels
from ibnlab.layers import build_fc_model, save_model
from ibnlab.presets import Preset, PresetRow, SweepSpec
from ibnlab.train import RESULT_COLUMNS, ExperimentConfig


# ---------------------------------------------------------------------------
# fixtures

@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    """A small on-disk IDX corpus: digits 3 and 8, distinguishable blobs."""
    rng = np.random.default_rng(7)
    per_class = 1700
    images, labels = [], []
    for digit, corner in ((3, (4, 4)), (8, (16, 16))):
        img = rng.integers(0, 60, size=(per_class, 28, 28), dtype=np.uint8)
        r, c = corner
        img[:, r : r + 8, c : c + 8] += rng.integers(
            120, 190, size=(per_class, 8, 8), dtype=np.uint8
        )
        images.append(img)
        labels.append(np.full(per_class, digit, dtype=np.uint8))
    order = rng.permutation(2 * per_class)
    images = np.concatenate(images)[order]
    labels = np.concatenate(labels)[order]
    out = tmp_path_factory.mktemp("corpus")
    (out / "train-images-idx3-ubyte").write_bytes(encode_idx_images(images))
    (out / "train-labels-idx1-ubyte").write_bytes(encode_idx_labels(labels))
    return out


def micro_config(label="micro-bn", **overrides) -> ExperimentConfig:
    imbalance = ImbalanceSpec([8], [3], 40, 0.1, test_per_class=10)
    base = dict(label=label, imbalance=imbalance, epochs=2, batch_size=16)
    base.update(overrides)
    return ExperimentConfig(**base)


def micro_preset() -> Preset:
    bn = micro_config("micro-bn")
    return Preset(
        name="micro",
        description="two-row test preset",
        rows=(
            PresetRow(bn, reference={3: 0.5}, expected_best=True),
            PresetRow(replace(bn, label="micro-nobn", final_bn=False)),
        ),
        default_repeats=1,
    )


@pytest.fixture()
def micro_yaml(tmp_path) -> Path:
    cfg = {
        "label": "micro-bn",
        "epochs": 2,
        "batch_size": 16,
        "imbalance": {
            "majority_classes": [8],
            "minority_classes": [3],
            "majority_train_count": 40,
            "ratio": 0.1,
            "test_per_class": 10,
        },
    }
    path = tmp_path / "micro.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


# ---------------------------------------------------------------------------
# config parsing

def test_parse_config_reads_nested_imbalance(micro_yaml):
    cfg = parse_config(micro_yaml)
    assert cfg == micro_config()


def test_parse_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("label: x\nlerning_rate: 0.1\n")
    with pytest.raises(UsageError, match="lerning_rate"):
        parse_config(path)


def test_parse_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(UsageError, match="mapping"):
        parse_config(path)


def test_parse_config_missing_file():
    with pytest.raises(UsageError, match="not found"):
        parse_config("/nonexistent/config.yaml")


# ---------------------------------------------------------------------------
# source resolution

def test_resolve_source_prefers_explicit_dir(corpus_dir):
    handle = resolve_source(str(corpus_dir))
    assert handle.images_path.parent == corpus_dir
    data = handle.load()
    assert data.images.shape[-2:] == (28, 28)
    assert handle.load() is data  # cached


def test_resolve_source_missing_files_is_usage_error(tmp_path):
    with pytest.raises(UsageError, match="train-images"):
        resolve_source(str(tmp_path))


def test_resolve_source_env_var(corpus_dir, monkeypatch):
    monkeypatch.setenv(cli.ENV_MNIST_DIR, str(corpus_dir))
    handle = resolve_source(None)
    assert handle.images_path.parent == corpus_dir


def test_resolve_source_falls_back_to_synthetic(corpus_dir, tmp_path, monkeypatch):
    cache = tmp_path / "cache"

    def fake_ensure(directory, **kwargs):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
            (directory / name).write_bytes((corpus_dir / name).read_bytes())
        return directory

    monkeypatch.delenv(cli.ENV_MNIST_DIR, raising=False)
    monkeypatch.setenv(cli.ENV_CACHE_DIR, str(cache))
    monkeypatch.setattr(cli, "ensure_dataset", fake_ensure)
    handle = resolve_source(None)
    assert "synthetic" in handle.note
    assert handle.images_path.parent == cache


# ---------------------------------------------------------------------------
# running and emission

def test_run_configs_orders_by_config_then_seed(corpus_dir):
    handle = resolve_source(str(corpus_dir))
    configs = [micro_config("micro-bn"), micro_config("micro-nobn", final_bn=False)]
    results = run_configs(configs, handle, repeats=2)
    assert [r.config.label for r in results] == ["micro-bn", "micro-nobn"]
    for result in results:
        assert [run.seed for run in result.runs] == [0, 1]


def test_run_configs_worker_pool_matches_serial(corpus_dir):
    handle = resolve_source(str(corpus_dir))
    configs = [micro_config()]
    serial = run_configs(configs, handle, repeats=2, workers=1)
    pooled = run_configs(configs, handle, repeats=2, workers=2)
    for a, b in zip(serial[0].runs, pooled[0].runs):
        assert a.run_id == b.run_id
        assert a.test.f1.tolist() == b.test.f1.tolist()


def test_sig6_rounds_floats_only():
    assert _sig6(0.123456789) == 0.123457
    assert _sig6(1.0) == 1.0
    assert _sig6(3) == 3
    assert _sig6("label") == "label"


def test_emit_results_layout_and_mirroring(corpus_dir, tmp_path):
    handle = resolve_source(str(corpus_dir))
    results = run_configs([micro_config()], handle, repeats=2)
    csv_path = emit_results(results, tmp_path / "out")
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == RESULT_COLUMNS
    assert len(rows) == 2 * 2  # two runs x two classes
    payload = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert len(payload["runs"]) == 2
    assert payload["summaries"][0]["num_runs"] == 2
    mirrored = [row for run in payload["runs"] for row in run["rows"]]
    for got, expected in zip(rows, mirrored):
        for key, value in expected.items():
            parsed = type(value)(got[key]) if not isinstance(value, bool) else got[key]
            if isinstance(value, bool):
                assert got[key] == str(value)
            else:
                assert parsed == value, key
    dumps = sorted((tmp_path / "out" / "confidence").glob("*.csv"))
    assert len(dumps) == 2


def test_emitted_floats_use_six_significant_digits(corpus_dir, tmp_path):
    handle = resolve_source(str(corpus_dir))
    results = run_configs([micro_config()], handle, repeats=1)
    csv_path = emit_results(results, tmp_path / "out")
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("precision", "recall", "f1", "ece", "brier"):
            text = row[key].lstrip("-").replace(".", "").lstrip("0")
            mantissa = text.split("e")[0] if "e" in text else text
            assert len(mantissa) <= 6, (key, row[key])


# ---------------------------------------------------------------------------
# commands end to end

def test_train_command_writes_results_and_echoes_config(
    corpus_dir, micro_yaml, tmp_path, capsys
):
    out = tmp_path / "run"
    code = main(
        ["train", "--config", str(micro_yaml), "--mnist-dir", str(corpus_dir),
         "--out", str(out)]
    )
    assert code == 0
    captured = capsys.readouterr()
    assert "resolved configuration:" in captured.out
    assert "micro-bn" in captured.out
    assert (out / "results.csv").exists()
    echoed = yaml.safe_load((out / "config.yaml").read_text())
    assert parse_config(out / "config.yaml") == micro_config()
    assert echoed["epochs"] == 2


def test_train_command_round_trip_is_idempotent(
    corpus_dir, micro_yaml, tmp_path
):
    first = tmp_path / "a"
    main(["train", "--config", str(micro_yaml), "--mnist-dir", str(corpus_dir),
          "--out", str(first)])
    second = tmp_path / "b"
    code = main(["train", "--config", str(first / "config.yaml"),
                 "--mnist-dir", str(corpus_dir), "--out", str(second)])
    assert code == 0
    assert (first / "results.csv").read_bytes() == (second / "results.csv").read_bytes()


def test_train_save_model_writes_loadable_checkpoint(
    corpus_dir, micro_yaml, tmp_path
):
    out = tmp_path / "run"
    code = main(["train", "--config", str(micro_yaml), "--mnist-dir",
                 str(corpus_dir), "--out", str(out), "--save-model"])
    assert code == 0
    ckpts = list(out.glob("*.ckpt"))
    assert len(ckpts) == 1
    from ibnlab.layers import load_model

    model = load_model(ckpts[0])
    assert model.spec["arch"] == "fc"


def test_reproduce_micro_preset_prints_comparison(
    corpus_dir, tmp_path, monkeypatch, capsys
):
    monkeypatch.setattr(cli, "get_preset", lambda name: micro_preset())
    out = tmp_path / "rep"
    code = main(["reproduce", "micro", "--mnist-dir", str(corpus_dir),
                 "--out", str(out)])
    assert code == 0
    captured = capsys.readouterr()
    assert "micro-bn" in captured.out
    assert "0.50" in captured.out  # the reference column
    assert "*" in captured.out  # expected-best marker
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2  # two configs x one run x two classes


def test_sweep_command_emits_plot_table(corpus_dir, tmp_path, monkeypatch):
    tiny = Preset(
        name="ratio-sweep",
        description="tiny",
        sweep=SweepSpec(base=micro_config("sw"), axis="imbalance_ratio",
                        values=(0.1, 0.2), repeats=1),
        default_repeats=1,
    )
    monkeypatch.setattr(cli, "get_preset", lambda name: tiny)
    out = tmp_path / "sweep"
    code = main(["sweep", "--axis", "ratio", "--values", "0.1,0.2",
                 "--repeats", "1", "--mnist-dir", str(corpus_dir),
                 "--out", str(out)])
    assert code == 0
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["axis_value", "variant", "class", "f1_mean", "f1_std"]
    assert len(rows) == 2 * 2 * 2  # values x variants x classes
    assert [row["axis_value"] for row in rows[:4]] == ["0.1"] * 4
    assert {row["variant"] for row in rows} == {"final_bn", "no_final_bn"}
    for row in rows:
        assert 0.0 <= float(row["f1_mean"]) <= 1.0


def test_strip_bn_command_reports_both_variants(corpus_dir, tmp_path, capsys):
    model = build_fc_model(num_classes=2, final_bn=True, seed=3)
    ckpt = tmp_path / "model.ckpt"
    save_model(model, ckpt)
    code = main(["strip-bn", "--checkpoint", str(ckpt),
                 "--mnist-dir", str(corpus_dir)])
    assert code == 0
    captured = capsys.readouterr()
    assert "kept-bn" in captured.out
    assert "stripped-bn" in captured.out


def test_strip_bn_without_final_bn_is_usage_error(corpus_dir, tmp_path, capsys):
    model = build_fc_model(num_classes=2, final_bn=False)
    ckpt = tmp_path / "plain.ckpt"
    save_model(model, ckpt)
    code = main(["strip-bn", "--checkpoint", str(ckpt),
                 "--mnist-dir", str(corpus_dir)])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_calibration_command_dumps_confidence(corpus_dir, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "get_preset", lambda name: micro_preset())
    dump = tmp_path / "conf" / "records.csv"
    code = main(["calibration", "--mnist-dir", str(corpus_dir),
                 "--out", str(tmp_path / "cal"), "--repeats", "1",
                 "--dump", str(dump)])
    assert code == 0
    assert dump.exists()
    assert dump.with_name("records-nobn.csv").exists()


# ---------------------------------------------------------------------------
# exit codes

def test_unknown_preset_exits_2(capsys):
    assert main(["reproduce", "fc-table9"]) == 2
    err = capsys.readouterr().err
    assert "error:" in err and "fc-table7" in err


def test_bad_axis_exits_2(capsys):
    assert main(["sweep", "--axis", "width", "--values", "1,2"]) == 2


def test_bad_values_exit_2(capsys):
    assert main(["sweep", "--axis", "ratio", "--values", "0.1,abc"]) == 2
    assert main(["sweep", "--axis", "ratio", "--values", "0.2,0.1"]) == 2


def test_missing_config_exits_2(capsys):
    assert main(["train", "--config", "/nonexistent.yaml"]) == 2


def test_missing_checkpoint_exits_2(capsys):
    assert main(["strip-bn", "--checkpoint", "/nonexistent.ckpt"]) == 2


def test_corpus_too_small_exits_2(micro_yaml, tmp_path, capsys):
    rng = np.random.default_rng(0)
    small = tmp_path / "small"
    small.mkdir()
    images = rng.integers(0, 255, size=(30, 28, 28), dtype=np.uint8)
    labels = np.array([3, 8] * 15, dtype=np.uint8)
    (small / "train-images-idx3-ubyte").write_bytes(encode_idx_images(images))
    (small / "train-labels-idx1-ubyte").write_bytes(encode_idx_labels(labels))
    code = main(["train", "--config", str(micro_yaml), "--mnist-dir", str(small),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "error:" in capsys.readouterr().err
