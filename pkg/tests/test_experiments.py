"""Experiment orchestration checks: strict config parsing, canonical
hashing, IDX ingestion, curve emission, manifest writing, reproducibility
of a short run, and the command-line front end."""

import gzip
import json
import struct

import numpy as np
import pytest

import pmm.experiments as experiments
from pmm import __version__
from pmm.cli import main
from pmm.errors import ConfigError, ImageFormatError, PresetError
from pmm.experiments import (
    ExperimentConfig,
    config_from_dict,
    config_from_json,
    config_hash,
    config_to_json,
    emit_curves,
    ingest_images,
    list_presets,
    load_bundled_digits,
    preset_config,
    run_experiment,
)

EXPECTED_PRESETS = [
    "fig1_spin",
    "fig2_aho",
    "fig3_trotter",
    "s_trotter_dm",
    "s_lmg_energies",
    "s_lmg_observables",
    "s_lmg_complex",
    "fig4_mnist",
    "s_tn_counts",
]


# --- config parsing and hashing ---------------------------------------------


def test_list_presets_names_and_order():
    assert list_presets() == EXPECTED_PRESETS


def test_preset_config_roundtrips_through_json():
    config = preset_config("fig2_aho")
    back = config_from_json(config_to_json(config))
    assert back == config
    assert config_hash(back) == config_hash(config)


def test_preset_config_overrides():
    config = preset_config("fig1_spin", seeds=[7], out_dir="elsewhere")
    assert config.seeds == (7,)
    assert config.out_dir == "elsewhere"


def test_preset_config_unknown_name():
    with pytest.raises(PresetError):
        preset_config("fig9_nope")


def test_preset_config_empty_seeds():
    with pytest.raises(ConfigError):
        preset_config("fig1_spin", seeds=[])


def test_config_rejects_unknown_top_level_key():
    raw = preset_config("fig1_spin").as_dict()
    raw["extra"] = 1
    with pytest.raises(ConfigError, match="unknown config fields"):
        config_from_dict(raw)


def test_config_rejects_missing_key():
    raw = preset_config("fig1_spin").as_dict()
    del raw["loss"]
    with pytest.raises(ConfigError, match="missing config fields"):
        config_from_dict(raw)


def test_config_rejects_wrong_schema_version():
    raw = preset_config("fig1_spin").as_dict()
    raw["schema_version"] = 99
    with pytest.raises(ConfigError, match="schema version"):
        config_from_dict(raw)


def test_config_rejects_unknown_preset():
    raw = preset_config("fig1_spin").as_dict()
    raw["preset"] = "fig9_nope"
    with pytest.raises(PresetError):
        config_from_dict(raw)


def test_config_rejects_empty_or_non_list_seeds():
    raw = preset_config("fig1_spin").as_dict()
    raw["seeds"] = []
    with pytest.raises(ConfigError, match="seeds"):
        config_from_dict(raw)
    raw["seeds"] = 3
    with pytest.raises(ConfigError, match="seeds"):
        config_from_dict(raw)


def test_config_rejects_unknown_section_field():
    raw = preset_config("fig1_spin").as_dict()
    raw["optimizer"]["momentum"] = 0.9
    with pytest.raises(ConfigError, match="unknown optimizer fields"):
        config_from_dict(raw)


def test_config_rejects_non_object_section():
    raw = preset_config("fig1_spin").as_dict()
    raw["model"] = "affine"
    with pytest.raises(ConfigError, match="model must be an object"):
        config_from_dict(raw)


def test_config_rejects_invalid_json_text():
    with pytest.raises(ConfigError, match="not valid JSON"):
        config_from_json("{nope")


def test_config_hash_is_order_independent_and_value_sensitive():
    config = preset_config("fig2_aho")
    raw = config.as_dict()
    reordered = {key: raw[key] for key in reversed(list(raw))}
    assert config_hash(config_from_dict(reordered)) == config_hash(config)
    changed = preset_config("fig2_aho", seeds=[5])
    assert config_hash(changed) != config_hash(config)


# --- IDX ingestion ----------------------------------------------------------


def write_idx_pair(directory, count=12, rows=4, cols=5, gz=False):
    """Synthetic IDX image/label files; label i equals image index i."""
    pixels = (np.arange(count * rows * cols) % 256).astype(np.uint8)
    image_bytes = struct.pack(">IIII", 0x803, count, rows, cols) + pixels.tobytes()
    label_bytes = struct.pack(">II", 0x801, count) + bytes(range(count))
    suffix = ".gz" if gz else ""
    img_path = directory / f"train-images-idx3-ubyte{suffix}"
    lbl_path = directory / f"train-labels-idx1-ubyte{suffix}"
    opener = gzip.open if gz else open
    with opener(img_path, "wb") as fh:
        fh.write(image_bytes)
    with opener(lbl_path, "wb") as fh:
        fh.write(label_bytes)
    return img_path, pixels.reshape(count, rows, cols)


def test_ingest_images_subsamples_and_scales(tmp_path):
    img_path, pixels = write_idx_pair(tmp_path)
    data = ingest_images(str(img_path), limit=8, seed=0)
    assert data.inputs.shape == (8, 4, 5)
    assert data.labels.shape == (8,)
    # labels were built to equal the source index, so each drawn image must
    # match its original pixel block scaled into [0, 1]
    for image, label in zip(data.inputs, data.labels):
        assert np.allclose(image, pixels[label] / 255.0)
    again = ingest_images(str(img_path), limit=8, seed=0)
    assert np.array_equal(data.labels, again.labels)
    other = ingest_images(str(img_path), limit=8, seed=1)
    assert not np.array_equal(data.labels, other.labels)


def test_ingest_images_reads_gzip(tmp_path):
    img_path, pixels = write_idx_pair(tmp_path, gz=True)
    data = ingest_images(str(img_path), limit=12, seed=0)
    assert data.inputs.shape == (12, 4, 5)
    assert np.allclose(data.inputs[data.labels == 3][0], pixels[3] / 255.0)


def test_ingest_images_bad_magic(tmp_path):
    path = tmp_path / "bad-images-idx3-ubyte"
    path.write_bytes(struct.pack(">IIII", 0x12345678, 1, 2, 2) + bytes(4))
    with pytest.raises(ImageFormatError, match="magic"):
        ingest_images(str(path), limit=1, seed=0)


def test_ingest_images_truncated_payload(tmp_path):
    path = tmp_path / "cut-images-idx3-ubyte"
    path.write_bytes(struct.pack(">IIII", 0x803, 4, 3, 3) + bytes(10))
    with pytest.raises(ImageFormatError, match="truncated"):
        ingest_images(str(path), limit=1, seed=0)


def test_ingest_images_label_count_mismatch(tmp_path):
    img_path, _ = write_idx_pair(tmp_path, count=12)
    lbl_path = tmp_path / "train-labels-idx1-ubyte"
    lbl_path.write_bytes(struct.pack(">II", 0x801, 5) + bytes(5))
    with pytest.raises(ImageFormatError, match="mismatch"):
        ingest_images(str(img_path), limit=4, seed=0)


def test_ingest_images_limit_beyond_file(tmp_path):
    img_path, _ = write_idx_pair(tmp_path, count=12)
    with pytest.raises(ImageFormatError, match="12"):
        ingest_images(str(img_path), limit=13, seed=0)


def test_ingest_images_missing_files(tmp_path):
    with pytest.raises(ImageFormatError, match="not found"):
        ingest_images(str(tmp_path / "none-images-idx3-ubyte"), limit=1, seed=0)
    img_path, _ = write_idx_pair(tmp_path)
    (tmp_path / "train-labels-idx1-ubyte").unlink()
    with pytest.raises(ImageFormatError, match="label file"):
        ingest_images(str(img_path), limit=1, seed=0)


def test_ingest_images_underivable_label_name(tmp_path):
    path = tmp_path / "plain.bin"
    pixels = bytes(range(16))
    path.write_bytes(struct.pack(">IIII", 0x803, 4, 2, 2) + pixels)
    with pytest.raises(ImageFormatError, match="labels filename"):
        ingest_images(str(path), limit=2, seed=0)


def test_load_bundled_digits():
    images, labels = load_bundled_digits()
    assert images.shape == (1797, 8, 8)
    assert labels.shape == (1797,)
    assert images.min() >= 0.0 and images.max() == 1.0
    assert set(np.unique(labels)) == set(range(10))


# --- curve emission ---------------------------------------------------------


def test_emit_curves_roundtrip_and_determinism(tmp_path):
    x = np.linspace(0, 1, 7)
    series = {"truth": x**2, "fit": x**2 + 1e-3}
    path = emit_curves("curves", x, series, str(tmp_path), x_name="c")
    back = np.genfromtxt(path, delimiter=",", names=True)
    assert list(back.dtype.names) == ["c", "truth", "fit"]
    assert np.allclose(back["truth"], x**2)
    first = open(path, "rb").read()
    emit_curves("curves", x, series, str(tmp_path), x_name="c")
    assert open(path, "rb").read() == first


def test_emit_curves_validation(tmp_path):
    x = np.linspace(0, 1, 5)
    with pytest.raises(ValueError, match="shape"):
        emit_curves("bad", x, {"y": np.zeros(4)}, str(tmp_path))
    with pytest.raises(ValueError, match="empty"):
        emit_curves("bad", x, {}, str(tmp_path))


# --- run_experiment ---------------------------------------------------------


def test_tn_counts_run_writes_manifest(tmp_path):
    config = preset_config("s_tn_counts", out_dir=str(tmp_path / "run"))
    manifest = run_experiment(config)
    assert manifest.preset == "s_tn_counts"
    assert manifest.config_hash == config_hash(config)
    assert manifest.code_version == __version__
    assert manifest.best_seed == 0
    assert manifest.failed_stage is None
    row = manifest.per_seed_metrics[0]
    assert row["stored_param_count"] == 9224
    assert row["expanded_param_count"] == 28232
    stored = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert stored["config_hash"] == manifest.config_hash
    for artifact in manifest.artifacts:
        assert (tmp_path / "run" / artifact).exists() or \
            artifact.startswith(str(tmp_path))


def test_run_experiment_records_failure_stage(tmp_path, monkeypatch):
    def boom(config, out):
        raise RuntimeError("driver exploded")

    monkeypatch.setitem(experiments._DRIVERS, "s_tn_counts", boom)
    config = preset_config("s_tn_counts", out_dir=str(tmp_path / "run"))
    with pytest.raises(RuntimeError, match="driver exploded"):
        run_experiment(config)
    stored = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert stored["failed_stage"] == "run"
    assert "driver exploded" in stored["error"]
    assert stored["best_seed"] is None


def test_run_experiment_unvalidated_preset_fails_cleanly(tmp_path):
    config = ExperimentConfig(
        preset="fig9_nope", seeds=(0,), out_dir=str(tmp_path / "run"),
        oracle={}, model={}, loss={}, optimizer={},
    )
    with pytest.raises(PresetError):
        run_experiment(config)
    stored = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert stored["failed_stage"] == "run"


def short_fig1_config(out_dir):
    raw = preset_config("fig1_spin", seeds=[0], out_dir=out_dir).as_dict()
    raw["optimizer"]["stages"] = [[3e-2, 50]]
    return config_from_dict(raw)


def test_short_run_reproduces_curves_byte_for_byte(tmp_path):
    first = run_experiment(short_fig1_config(str(tmp_path / "a")))
    second = run_experiment(short_fig1_config(str(tmp_path / "b")))
    assert first.per_seed_metrics == second.per_seed_metrics
    for name in ("fig1_curves.csv", "fig1_ec.csv", "fig1_history.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


# --- command line -----------------------------------------------------------


def test_cli_list(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out == EXPECTED_PRESETS


def test_cli_run_requires_exactly_one_source(tmp_path, capsys):
    assert main(["run"]) == 2
    config_path = tmp_path / "config.json"
    config_path.write_text(config_to_json(preset_config("s_tn_counts")))
    assert main(["run", "--config", str(config_path),
                 "--preset", "s_tn_counts"]) == 2


def test_cli_run_unknown_preset(capsys):
    assert main(["run", "--preset", "fig9_nope"]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_run_preset_and_inspect(tmp_path, capsys):
    out_dir = tmp_path / "run"
    assert main(["run", "--preset", "s_tn_counts", "--out", str(out_dir)]) == 0
    text = capsys.readouterr().out
    assert "preset:      s_tn_counts" in text
    assert "stored_param_count: 9224" in text
    assert (out_dir / "manifest.json").exists()

    assert main(["inspect", str(out_dir)]) == 0
    text = capsys.readouterr().out
    assert "s_tn_counts" in text
    assert " * seed 0:" in text


def test_cli_run_config_with_overrides(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(config_to_json(preset_config("s_tn_counts")))
    out_dir = tmp_path / "override"
    assert main(["run", "--config", str(config_path),
                 "--seed", "3", "--out", str(out_dir)]) == 0
    stored = json.loads((out_dir / "manifest.json").read_text())
    assert stored["best_seed"] == 3
    config = json.loads((out_dir / "config.json").read_text())
    assert config["seeds"] == [3]
    assert config["out_dir"] == str(out_dir)


def test_cli_inspect_missing_path(tmp_path, capsys):
    assert main(["inspect", str(tmp_path / "absent")]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_inspect_reports_failure(tmp_path, capsys, monkeypatch):
    def boom(config, out):
        raise RuntimeError("driver exploded")

    monkeypatch.setitem(experiments._DRIVERS, "s_tn_counts", boom)
    config = preset_config("s_tn_counts", out_dir=str(tmp_path / "run"))
    with pytest.raises(RuntimeError):
        run_experiment(config)
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "run")]) == 0
    assert "FAILED at stage: run" in capsys.readouterr().out
