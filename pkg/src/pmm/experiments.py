"""Declarative experiment configs, ingestion, orchestration, and emission.

Each preset captures one figure or table from the studied problems as a
deterministic desk-scale run: the config carries every choice (oracle
settings, model shape, loss, staged optimizer protocol, seeds), the manifest
records a hash of that config next to per-seed metrics and artifact paths.
Re-running a config reproduces the metric CSVs byte for byte.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import struct
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from ._version import __version__ as code_version
from .baselines import (
    branch_extrapolate,
    ec_build,
    ec_energy,
    knn_error,
    pca_fit,
    pca_transform,
    report_to_csv,
    spline_eval,
    spline_fit,
)
from .errors import ConfigError, ImageFormatError, PresetError
from .models import (
    OutputSelector,
    affine_eval_complex,
    affine_outputs,
    observable_expectation,
    save_model,
    tn_affine_outputs,
    unitary_product_energies,
)
from .oracles import (
    LMG_SITES,
    lmg_complex_energies,
    make_dataset,
    noninteracting_spin_components,
)
from .rng import substream
from .training import (
    Dataset,
    LossSpec,
    OptimizerConfig,
    history_to_csv,
    init_model,
    kl_embedding_loss,
    train,
)

log = logging.getLogger("pmm.experiments")

SCHEMA_VERSION = 1

# Keys allowed in each config section; unknown keys are rejected outright.
_TOP_KEYS = {"schema_version", "preset", "seeds", "out_dir", "oracle",
             "model", "loss", "optimizer"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Full declarative description of one experiment run."""

    preset: str
    seeds: tuple[int, ...]
    out_dir: str
    oracle: dict
    model: dict
    loss: dict
    optimizer: dict
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "preset": self.preset,
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "oracle": dict(self.oracle),
            "model": dict(self.model),
            "loss": dict(self.loss),
            "optimizer": dict(self.optimizer),
        }


@dataclass
class RunManifest:
    """Receipt for one run: config hash, metrics, chosen seed, artifacts."""

    preset: str
    config_hash: str
    code_version: str
    per_seed_metrics: list
    best_seed: int | None
    wall_clock_seconds: float
    artifacts: list
    failed_stage: str | None = None
    error: str | None = None
    schema_version: int = SCHEMA_VERSION

    def as_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "preset": self.preset,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "per_seed_metrics": self.per_seed_metrics,
            "best_seed": self.best_seed,
            "wall_clock_seconds": self.wall_clock_seconds,
            "artifacts": self.artifacts,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }


def canonical_json(obj) -> str:
    """Deterministic serialization used for hashing and storage."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config.as_dict()).encode("utf-8")).hexdigest()


def config_to_json(config: ExperimentConfig) -> str:
    return canonical_json(config.as_dict())


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    missing = _TOP_KEYS - set(raw)
    if missing:
        raise ConfigError(f"missing config fields: {sorted(missing)}")
    if raw["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"schema version {raw['schema_version']} unsupported "
            f"(expected {SCHEMA_VERSION})"
        )
    if raw["preset"] not in list_presets():
        raise PresetError(f"unknown experiment preset {raw['preset']!r}")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a nonempty list")
    reference = preset_config(raw["preset"]).as_dict()
    for section in ("oracle", "model", "loss", "optimizer"):
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section} must be an object")
        bad = set(raw[section]) - set(reference[section])
        if bad:
            raise ConfigError(f"unknown {section} fields: {sorted(bad)}")
    return ExperimentConfig(
        preset=raw["preset"],
        seeds=tuple(int(s) for s in seeds),
        out_dir=str(raw["out_dir"]),
        oracle=dict(raw["oracle"]),
        model=dict(raw["model"]),
        loss=dict(raw["loss"]),
        optimizer=dict(raw["optimizer"]),
    )


def config_from_json(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())


# --- preset catalog -------------------------------------------------------

# Staged Adam protocols found by calibration; stages are (step size, epochs).
# The quartic-well targets span [-1226, 1.1], so the ladder starts with step
# sizes large enough to move matrix entries of scale 1e5.
_AHO_STAGES = [[1000.0, 3000], [100.0, 3000], [10.0, 3000], [1.0, 3000],
               [0.1, 2000], [0.01, 2000], [1e-3, 2000]]
_LMG_STAGES = [[10.0, 2500], [3.0, 2500], [1.0, 2500], [0.3, 2500],
               [0.1, 2500], [0.03, 2500], [0.01, 2500], [3e-3, 2500],
               [1e-3, 2500]]
_TROTTER_STAGES = [[0.1, 2000], [0.03, 2000], [0.01, 2000], [3e-3, 2000],
                   [1e-3, 2000], [3e-4, 2000], [1e-4, 2000], [3e-5, 2000]]
_OBS_STAGES = [[0.03, 2000], [0.01, 2000], [3e-3, 2000], [1e-3, 2000],
               [3e-4, 2000], [1e-4, 2000]]

_PRESETS: dict[str, dict] = {
    "fig1_spin": {
        "oracle": {"n_sites": 10, "ec_sites": 10, "ec_snapshots": 5},
        "model": {"family": "affine", "dim": 2, "n_features": 1,
                  "mode": "complex-hermitian", "init_scale": 0.1},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": [[3e-2, 4000], [3e-3, 3000], [3e-4, 3000],
                                 [3e-5, 3000], [3e-6, 3000]],
                      "batch_size": None, "patience": 300},
        "seeds": list(range(10)),
    },
    "fig2_aho": {
        "oracle": {"n_max": 100},
        "model": {"family": "affine", "dim": 5, "n_features": 1,
                  "mode": "complex-hermitian", "init_scale": 0.1},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": _AHO_STAGES, "batch_size": None},
        "seeds": list(range(10)),
    },
    "fig3_trotter": {
        "oracle": {"n_sites": 8, "b": 1.0, "j1": 1.0, "j2": 0.5,
                   "r_seed": 0, "window": [0.15, 0.18], "n_levels": 3},
        "model": {"family": "unitary_product", "dim": 10, "n_factors": 5,
                  "init_scale": 0.1},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": _TROTTER_STAGES, "batch_size": None},
        "seeds": list(range(10)),
    },
    "s_trotter_dm": {
        "oracle": {"n_sites": 8, "b": 1.0, "j": 1.0, "dm": 0.5,
                   "r_seed": 0, "window": [0.10, 0.18], "n_levels": 3},
        "model": {"family": "unitary_product", "dim": 5, "n_factors": 5,
                  "init_scale": 0.1},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": _TROTTER_STAGES[:7], "batch_size": None},
        "seeds": list(range(10)),
    },
    "s_lmg_energies": {
        "oracle": {"n_sites": LMG_SITES, "n_levels": 5},
        "model": {"family": "affine", "dim": 15, "n_features": 1,
                  "mode": "complex-hermitian", "init_scale": 1.0},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": _LMG_STAGES, "batch_size": None},
        "seeds": list(range(10)),
    },
    "s_lmg_observables": {
        "oracle": {"n_sites": LMG_SITES, "n_levels": 5},
        "model": {"family": "affine", "dim": 15, "n_features": 1,
                  "mode": "complex-hermitian", "init_scale": 1.0,
                  "observable_init_scale": 0.1},
        "loss": {"kind": "observable_mse"},
        "optimizer": {"stages": _LMG_STAGES, "observable_stages": _OBS_STAGES,
                      "batch_size": None},
        "seeds": list(range(10)),
    },
    "s_lmg_complex": {
        "oracle": {"n_sites": LMG_SITES, "n_levels": 5,
                   "re_grid": [0.0, 1.0, 81], "im_grid": [-0.25, 0.25, 41]},
        "model": {"family": "affine", "dim": 15, "n_features": 1,
                  "mode": "complex-hermitian", "init_scale": 1.0},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": _LMG_STAGES, "batch_size": None},
        "seeds": list(range(10)),
    },
    "fig4_mnist": {
        "oracle": {"source": "bundled", "train_limit": 1000,
                   "test_limit": 797, "data_seed": 0},
        "model": {"family": "tensor_network", "rows": 8, "cols": 8, "dim": 8,
                  "feature_bond": 6, "internal_bond": 12,
                  "entry_mode": "real-symmetric", "init_scale": 0.1},
        "loss": {"kind": "kl_embedding", "perplexity": 30.0},
        "optimizer": {"stages": [[3e-3, 400]], "batch_size": 250,
                      "patience": 100},
        "seeds": [0],
    },
    "s_tn_counts": {
        "oracle": {},
        "model": {"family": "tensor_network", "rows": 28, "cols": 28,
                  "dim": 8, "feature_bond": 6, "internal_bond": 12,
                  "entry_mode": "real-symmetric", "init_scale": 0.1},
        "loss": {"kind": "eigen_mse"},
        "optimizer": {"stages": [], "batch_size": None},
        "seeds": [0],
    },
}


def list_presets() -> list[str]:
    """Names of the bundled experiment presets, stable order."""
    return list(_PRESETS)


def preset_config(name: str, seeds=None, out_dir: str | None = None) -> ExperimentConfig:
    """Default config for a preset, optionally overriding seeds/output dir."""
    if name not in _PRESETS:
        raise PresetError(f"unknown experiment preset {name!r}")
    entry = _PRESETS[name]
    chosen = tuple(int(s) for s in (seeds if seeds is not None else entry["seeds"]))
    if not chosen:
        raise ConfigError("seeds must be a nonempty list")
    return ExperimentConfig(
        preset=name,
        seeds=chosen,
        out_dir=out_dir if out_dir is not None else f"runs/{name}",
        oracle=json.loads(canonical_json(entry["oracle"])),
        model=json.loads(canonical_json(entry["model"])),
        loss=json.loads(canonical_json(entry["loss"])),
        optimizer=json.loads(canonical_json(entry["optimizer"])),
    )


# --- image ingestion ------------------------------------------------------

def _idx_open(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_images(path: str) -> np.ndarray:
    with _idx_open(path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ImageFormatError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != 0x00000803:
            raise ImageFormatError(f"{path}: bad image magic 0x{magic:08x}")
        body = fh.read(count * rows * cols)
    if len(body) != count * rows * cols:
        raise ImageFormatError(f"{path}: truncated image payload")
    data = np.frombuffer(body, dtype=np.uint8)
    return data.reshape(count, rows, cols).astype(np.float64) / 255.0


def _read_idx_labels(path: str) -> np.ndarray:
    with _idx_open(path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ImageFormatError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", header)
        if magic != 0x00000801:
            raise ImageFormatError(f"{path}: bad label magic 0x{magic:08x}")
        body = fh.read(count)
    if len(body) != count:
        raise ImageFormatError(f"{path}: truncated label payload")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def _labels_path_for(path: str) -> str:
    # only the basename is rewritten; directory names may contain "images"
    directory, base = os.path.split(path)
    renamed = base.replace("images", "labels").replace("idx3", "idx1")
    if renamed == base:
        raise ImageFormatError(
            f"cannot derive a labels filename from {path!r}; expected the "
            "standard images/labels + idx3/idx1 naming"
        )
    return os.path.join(directory, renamed)


def ingest_images(path: str, limit: int, seed: int) -> Dataset:
    """Load an IDX image file (optionally .gz), subsample, attach labels.

    Pixels are scaled to [0,1]; `limit` examples are drawn without
    replacement using the data-subsample substream of `seed`. The matching
    label file is located by the standard naming convention.
    """
    if not os.path.exists(path):
        raise ImageFormatError(f"image file not found: {path}")
    images = _read_idx_images(path)
    labels_path = _labels_path_for(path)
    if not os.path.exists(labels_path):
        raise ImageFormatError(f"label file not found: {labels_path}")
    labels = _read_idx_labels(labels_path)
    if labels.shape[0] != images.shape[0]:
        raise ImageFormatError(
            f"image/label count mismatch: {images.shape[0]} vs {labels.shape[0]}"
        )
    if limit > images.shape[0]:
        raise ImageFormatError(
            f"requested {limit} examples, file holds {images.shape[0]}"
        )
    pick = substream(seed, "data-subsample").choice(
        images.shape[0], size=limit, replace=False
    )
    pick = np.sort(pick)
    return Dataset(inputs=images[pick], labels=labels[pick], split="train")


def load_bundled_digits() -> tuple[np.ndarray, np.ndarray]:
    """The 8x8 handwritten-digit corpus shipped inside the package.

    Returns (images scaled to [0,1] with shape (1797, 8, 8), labels)."""
    path = os.path.join(os.path.dirname(__file__), "data", "digits8x8.npz")
    with np.load(path) as store:
        images = store["images"].astype(np.float64)
        labels = store["labels"].astype(np.int64)
    return images / images.max(), labels


def _embedding_splits(oracle: dict) -> tuple[Dataset, Dataset]:
    source = oracle.get("source", "bundled")
    train_limit = int(oracle["train_limit"])
    test_limit = int(oracle["test_limit"])
    data_seed = int(oracle.get("data_seed", 0))
    if source == "bundled":
        images, labels = load_bundled_digits()
        total = images.shape[0]
        if train_limit + test_limit > total:
            raise ConfigError(
                f"bundled corpus holds {total} images; "
                f"{train_limit}+{test_limit} requested"
            )
        order = substream(data_seed, "data-subsample").permutation(total)
        tr_idx = order[:train_limit]
        te_idx = order[train_limit : train_limit + test_limit]
        tr = Dataset(inputs=images[tr_idx], labels=labels[tr_idx], split="train")
        te = Dataset(inputs=images[te_idx], labels=labels[te_idx], split="test")
        return tr, te
    tr = ingest_images(source, train_limit + test_limit, data_seed)
    return (
        Dataset(inputs=tr.inputs[:train_limit], labels=tr.labels[:train_limit],
                split="train"),
        Dataset(inputs=tr.inputs[train_limit:], labels=tr.labels[train_limit:],
                split="test"),
    )


# --- emission -------------------------------------------------------------

def emit_curves(name: str, x: np.ndarray, series: dict, out_dir: str,
                x_name: str = "x") -> str:
    """Write one x column plus one column per series; returns the path."""
    x = np.asarray(x, dtype=np.float64)
    columns = [x]
    header = [x_name]
    for key, values in series.items():
        values = np.asarray(values, dtype=np.float64)
        if values.shape != x.shape:
            raise ValueError(
                f"series {key!r} has shape {values.shape}, x has {x.shape}"
            )
        columns.append(values)
        header.append(key)
    if len(columns) == 1:
        raise ValueError("series map is empty")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{name}.csv")
    body = np.column_stack(columns)
    np.savetxt(path, body, delimiter=",", header=",".join(header),
               comments="", fmt="%.17g")
    return path


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- training helpers -----------------------------------------------------

def _staged_train(model, tr, val, loss_spec, optimizer: dict, seed: int):
    """Run the staged step-size protocol; returns (model, history)."""
    history = []
    batch = optimizer.get("batch_size")
    for step_size, epochs in optimizer["stages"]:
        patience = optimizer.get("patience") or epochs
        opt = OptimizerConfig(
            step_size=float(step_size),
            max_epochs=int(epochs),
            batch_size=batch,
            patience=int(patience),
            seed=seed,
        )
        model, h = train(model, tr, val, loss_spec, opt)
        history.extend(h)
    return model, history


def _init_from_config(model_cfg: dict, seed: int):
    family = model_cfg["family"]
    scale = float(model_cfg.get("init_scale", 0.1))
    if family == "affine":
        return init_model(
            "affine",
            (int(model_cfg["dim"]), int(model_cfg["n_features"])),
            seed=seed,
            scale=scale,
            mode=model_cfg.get("mode", "complex-hermitian"),
            selector=OutputSelector.lowest_k(int(model_cfg["n_levels"])),
        )
    if family == "unitary_product":
        return init_model(
            "unitary_product",
            (int(model_cfg["dim"]), int(model_cfg["n_factors"])),
            seed=seed,
            scale=scale,
            n_levels=int(model_cfg["n_levels"]),
        )
    if family == "tensor_network":
        return init_model(
            "tensor_network",
            (int(model_cfg["rows"]), int(model_cfg["cols"]),
             int(model_cfg["dim"]), int(model_cfg["feature_bond"]),
             int(model_cfg["internal_bond"])),
            seed=seed,
            scale=scale,
            entry_mode=model_cfg.get("entry_mode", "real-symmetric"),
        )
    raise ConfigError(f"unknown model family {family!r}")


# --- per-preset drivers ---------------------------------------------------

def _run_fig1(config: ExperimentConfig, out: str):
    oracle = config.oracle
    n = int(oracle["n_sites"])
    splits = make_dataset("fig1_spin")
    tr, val, test = splits["train"], splits["validation"], splits["test"]
    model_cfg = dict(config.model)
    model_cfg["n_levels"] = 2

    per_seed = []
    models = {}
    for seed in config.seeds:
        model = _init_from_config(model_cfg, seed)
        model, hist = _staged_train(model, tr, val, LossSpec("eigen_mse"),
                                    config.optimizer, seed)
        preds = np.array([affine_outputs(model, row) for row in val.inputs])
        e0_err = float(np.abs(preds[:, 0] - val.targets[:, 0]).max())
        per_seed.append({"seed": seed, "max_e0_err": e0_err,
                         "final_val_loss": float(hist[-1][2]) if hist else None})
        models[seed] = (model, hist)

    best = min(per_seed, key=lambda m: m["max_e0_err"])["seed"]
    model, hist = models[best]

    # EC baseline: ground-state snapshots of the full chain at the training
    # points, evaluated on the extrapolation half c in [0, 1].
    h0, h1 = noninteracting_spin_components(int(oracle["ec_sites"]))
    snap_c = tr.inputs.ravel()[: int(oracle["ec_snapshots"])]
    ec = ec_build(h0, h1, snap_c)
    pos_c = test.inputs.ravel()
    ec_pred = np.array([ec_energy(ec, c) for c in pos_c])
    exact_pos = test.targets[:, 0]
    ec_err = float(np.abs(ec_pred - exact_pos).max())

    full_c = val.inputs.ravel()
    pmm_full = np.array([affine_outputs(model, row)[0] for row in val.inputs])
    pmm_pos = np.array([affine_outputs(model, np.array([c]))[0] for c in pos_c])
    pmm_pos_err = float(np.abs(pmm_pos - exact_pos).max())

    artifacts = [
        emit_curves("fig1_curves", full_c, {
            "e0_exact": val.targets[:, 0],
            "e0_pmm": pmm_full,
        }, out, x_name="c"),
        emit_curves("fig1_ec", pos_c, {
            "e0_exact": exact_pos,
            "e0_pmm": pmm_pos,
            "e0_ec": ec_pred,
        }, out, x_name="c"),
    ]
    ckpt = os.path.join(out, "fig1_model.json")
    save_model(model, ckpt)
    artifacts.append(ckpt)
    hist_path = os.path.join(out, "fig1_history.csv")
    history_to_csv(hist, hist_path)
    artifacts.append(hist_path)

    summary = {"ec_max_err_pos": ec_err, "pmm_max_err_pos": pmm_pos_err,
               "ec_strictly_worse": bool(ec_err > pmm_pos_err)}
    for row in per_seed:
        if row["seed"] == best:
            row.update(summary)
    return per_seed, best, artifacts


def _run_fig2(config: ExperimentConfig, out: str):
    splits = make_dataset("fig2_aho")
    tr, val = splits["train"], splits["validation"]
    model_cfg = dict(config.model)
    model_cfg["n_levels"] = 2

    spline_preds = np.column_stack([
        spline_eval(spline_fit(tr.inputs.ravel(), tr.targets[:, k]),
                    val.inputs.ravel())
        for k in range(2)
    ])
    spline_err = float(np.abs(spline_preds - val.targets).max())

    per_seed = []
    models = {}
    for seed in config.seeds:
        model = _init_from_config(model_cfg, seed)
        model, hist = _staged_train(model, tr, val, LossSpec("eigen_mse"),
                                    config.optimizer, seed)
        preds = np.array([affine_outputs(model, row) for row in val.inputs])
        err = float(np.abs(preds - val.targets).max())
        ordering = bool(np.all(preds[:, 0] <= preds[:, 1] + 1e-12))
        per_seed.append({"seed": seed, "pmm_max_abs_err": err,
                         "spline_max_abs_err": spline_err,
                         "ordering_ok": ordering,
                         "final_val_loss": float(hist[-1][2]) if hist else None})
        models[seed] = (model, hist, preds)

    best = min(per_seed, key=lambda m: m["pmm_max_abs_err"])["seed"]
    model, hist, preds = models[best]
    artifacts = [
        emit_curves("fig2_curves", val.inputs.ravel(), {
            "e0_exact": val.targets[:, 0], "e1_exact": val.targets[:, 1],
            "e0_pmm": preds[:, 0], "e1_pmm": preds[:, 1],
            "e0_spline": spline_preds[:, 0], "e1_spline": spline_preds[:, 1],
        }, out, x_name="g"),
    ]
    ckpt = os.path.join(out, "fig2_model.json")
    save_model(model, ckpt)
    artifacts.append(ckpt)
    hist_path = os.path.join(out, "fig2_history.csv")
    history_to_csv(hist, hist_path)
    artifacts.append(hist_path)
    return per_seed, best, artifacts


def _run_trotter(config: ExperimentConfig, out: str, preset: str):
    dataset_key = "fig3_trotter" if preset == "fig3_trotter" else "s_trotter_dm"
    oracle = config.oracle
    splits = make_dataset(dataset_key, seed=int(oracle["r_seed"]))
    tr, val, test = splits["train"], splits["validation"], splits["test"]
    exact0 = test.targets[0]
    n_levels = int(oracle["n_levels"])

    poly0 = branch_extrapolate(tr.inputs.ravel(), tr.targets, at=0.0)
    poly_rel = np.abs((poly0 - exact0) / exact0)

    model_cfg = dict(config.model)
    model_cfg["n_levels"] = n_levels

    per_seed = []
    models = {}
    for seed in config.seeds:
        model = _init_from_config(model_cfg, seed)
        model, hist = _staged_train(model, tr, val, LossSpec("eigen_mse"),
                                    config.optimizer, seed)
        pmm0 = unitary_product_energies(model, 0.0)
        rel = np.abs((pmm0 - exact0) / exact0)
        row = {"seed": seed,
               "final_val_loss": float(hist[-1][2]) if hist else None,
               "pmm_mean_rel_err": float(rel.mean()),
               "poly_mean_rel_err": float(poly_rel.mean()),
               "improvement_factor": float(poly_rel.mean() / rel.mean())}
        for k in range(n_levels):
            row[f"pmm_rel_err_{k}"] = float(rel[k])
            row[f"poly_rel_err_{k}"] = float(poly_rel[k])
        per_seed.append(row)
        models[seed] = (model, hist)

    best = min(per_seed, key=lambda m: m["pmm_mean_rel_err"])["seed"]
    model, hist = models[best]

    # dense curves across the full window, including the withheld dt=0 region
    lo = float(tr.inputs.ravel().max())
    grid = np.linspace(-lo, lo, 121)
    pmm_curves = np.array([unitary_product_energies(model, dt) for dt in grid])
    gaps = np.diff(pmm_curves, axis=1)
    min_gap = float(gaps.min())
    poly_curves = np.column_stack([
        branch_extrapolate(tr.inputs.ravel(), tr.targets, at=float(dt))
        for dt in grid
    ]).T
    poly_gap = np.diff(poly_curves, axis=1)
    poly_crossing = bool((poly_gap <= 0).any())
    for row in per_seed:
        if row["seed"] == best:
            row.update({"pmm_min_gap": min_gap,
                        "poly_crossing": poly_crossing})

    series = {}
    for k in range(n_levels):
        series[f"e{k}_pmm"] = pmm_curves[:, k]
        series[f"e{k}_poly"] = poly_curves[:, k]
    artifacts = [
        emit_curves(f"{preset}_curves", grid, series, out, x_name="dt"),
    ]
    rep_path = os.path.join(out, f"{preset}_dt0_report.csv")
    report_to_csv(rep_path, np.arange(n_levels), exact0,
                  unitary_product_energies(model, 0.0))
    artifacts.append(rep_path)
    ckpt = os.path.join(out, f"{preset}_model.json")
    save_model(model, ckpt)
    artifacts.append(ckpt)
    hist_path = os.path.join(out, f"{preset}_history.csv")
    history_to_csv(hist, hist_path)
    artifacts.append(hist_path)
    return per_seed, best, artifacts


def _train_lmg_host(config: ExperimentConfig, seed: int):
    splits = make_dataset("s_lmg_energies")
    tr, val = splits["train"], splits["validation"]
    model_cfg = dict(config.model)
    model_cfg["n_levels"] = int(config.oracle["n_levels"])
    model = _init_from_config(model_cfg, seed)
    model, hist = _staged_train(model, tr, val, LossSpec("eigen_mse"),
                                config.optimizer, seed)
    return model, hist, splits


def _run_lmg_energies(config: ExperimentConfig, out: str):
    per_seed = []
    models = {}
    for seed in config.seeds:
        model, hist, splits = _train_lmg_host(config, seed)
        val = splits["validation"]
        preds = np.array([affine_outputs(model, row) for row in val.inputs])
        rel = np.abs((preds - val.targets)
                     / np.maximum(np.abs(val.targets), 1e-12))
        per_seed.append({"seed": seed, "max_rel_err": float(rel.max()),
                         "final_val_loss": float(hist[-1][2]) if hist else None})
        models[seed] = (model, hist, splits, preds)

    best = min(per_seed, key=lambda m: m["max_rel_err"])["seed"]
    model, hist, splits, preds = models[best]
    val = splits["validation"]
    series = {}
    for k in range(preds.shape[1]):
        series[f"e{k}_exact"] = val.targets[:, k]
        series[f"e{k}_pmm"] = preds[:, k]
    artifacts = [
        emit_curves("s_lmg_energies_curves", val.inputs.ravel(), series, out,
                    x_name="c"),
    ]
    ckpt = os.path.join(out, "s_lmg_energies_model.json")
    save_model(model, ckpt)
    artifacts.append(ckpt)
    hist_path = os.path.join(out, "s_lmg_energies_history.csv")
    history_to_csv(hist, hist_path)
    artifacts.append(hist_path)
    return per_seed, best, artifacts


def _run_lmg_observables(config: ExperimentConfig, out: str):
    obs_optimizer = {"stages": config.optimizer["observable_stages"],
                     "batch_size": None}
    obs_scale = float(config.model.get("observable_init_scale", 0.1))
    per_seed = []
    artifacts_by_seed = {}
    for seed in config.seeds:
        host, _, _ = _train_lmg_host(config, seed)
        row = {"seed": seed}
        artifacts = []
        for short, key, window in (
            ("sx2", "s_lmg_obs_sx2", (0.4, 0.6)),
            ("sz", "s_lmg_obs_sz", (0.4, 0.55)),
        ):
            osp = make_dataset(key)
            otr, oval, otest = osp["train"], osp["validation"], osp["test"]
            obs = init_model("observable", (host.dim,), seed=seed,
                             scale=obs_scale)
            loss = LossSpec("observable_mse", host=host)
            obs, ohist = _staged_train(obs, otr, oval, loss, obs_optimizer,
                                       seed)
            cgrid = otest.inputs.ravel()
            inside = (cgrid > window[0]) & (cgrid < window[1])
            truth = otest.targets[:, 0]
            pmm = np.array([
                observable_expectation(host, obs, np.array([c])) for c in cgrid
            ])
            sp = spline_fit(otr.inputs.ravel(), otr.targets[:, 0])
            sp_pred = spline_eval(sp, cgrid)
            row[f"{short}_pmm_window_err"] = float(
                np.abs(pmm[inside] - truth[inside]).max())
            row[f"{short}_spline_window_err"] = float(
                np.abs(sp_pred[inside] - truth[inside]).max())
            row[f"{short}_final_train_loss"] = float(ohist[-1][1])
            artifacts.append(emit_curves(
                f"s_lmg_observables_{short}", cgrid, {
                    "exact": truth, "pmm": pmm, "spline": sp_pred,
                }, out, x_name="c"))
            ckpt = os.path.join(out, f"s_lmg_observables_{short}_model.json")
            save_model(obs, ckpt)
            artifacts.append(ckpt)
        row["window_err_sum"] = row["sx2_pmm_window_err"] + row["sz_pmm_window_err"]
        per_seed.append(row)
        artifacts_by_seed[seed] = artifacts

    best = min(per_seed, key=lambda m: m["window_err_sum"])["seed"]
    return per_seed, best, artifacts_by_seed[best]


def _connected_region(good: np.ndarray, axis_row: int) -> int:
    """Cells of the good-mask component touching the real-axis row, by BFS."""
    seen = np.zeros_like(good)
    queue = deque()
    for b in range(good.shape[1]):
        if good[axis_row, b]:
            seen[axis_row, b] = True
            queue.append((axis_row, b))
    while queue:
        a, b = queue.popleft()
        for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            na, nb = a + da, b + db
            if (0 <= na < good.shape[0] and 0 <= nb < good.shape[1]
                    and good[na, nb] and not seen[na, nb]):
                seen[na, nb] = True
                queue.append((na, nb))
    return int(seen.sum())


def _run_lmg_complex(config: ExperimentConfig, out: str):
    oracle = config.oracle
    re_lo, re_hi, re_n = oracle["re_grid"]
    im_lo, im_hi, im_n = oracle["im_grid"]
    re = np.linspace(float(re_lo), float(re_hi), int(re_n))
    im = np.linspace(float(im_lo), float(im_hi), int(im_n))
    n_sites = int(oracle["n_sites"])

    exact = np.empty((im.size, re.size), dtype=np.complex128)
    for a, y in enumerate(im):
        for b, x in enumerate(re):
            exact[a, b] = lmg_complex_energies(n_sites, complex(x, y))[0]

    per_seed = []
    models = {}
    for seed in config.seeds:
        host, hist, _ = _train_lmg_host(config, seed)
        pred = np.empty_like(exact)
        for a, y in enumerate(im):
            for b, x in enumerate(re):
                pred[a, b] = affine_eval_complex(host, np.array([complex(x, y)]))[0]
        rel = np.abs(pred - exact) / np.maximum(np.abs(exact), 1e-12)
        good = rel < 1e-3
        axis_row = int(np.argmin(np.abs(im)))
        connected = _connected_region(good, axis_row)
        per_seed.append({
            "seed": seed,
            "cells_below_1e3": int(good.sum()),
            "connected_region_cells": connected,
            "axis_cells": int(good[axis_row].sum()),
            "final_val_loss": float(hist[-1][2]) if hist else None,
        })
        models[seed] = (host, pred, rel)

    best = max(per_seed, key=lambda m: m["connected_region_cells"])["seed"]
    host, pred, rel = models[best]

    # long-format surface table; row-major over (im, re)
    re_col = np.tile(re, im.size)
    im_col = np.repeat(im, re.size)
    path = emit_curves("s_lmg_complex_surface", re_col, {
        "im_c": im_col,
        "abs_e0": np.abs(pred).ravel(),
        "arg_e0": np.angle(pred).ravel(),
        "rel_err": rel.ravel(),
    }, out, x_name="re_c")
    artifacts = [path]
    ckpt = os.path.join(out, "s_lmg_complex_model.json")
    save_model(host, ckpt)
    artifacts.append(ckpt)
    return per_seed, best, artifacts


def _run_embedding(config: ExperimentConfig, out: str):
    tr, te = _embedding_splits(config.oracle)
    perplexity = float(config.loss.get("perplexity", 30.0))
    model_cfg = dict(config.model)

    per_seed = []
    models = {}
    for seed in config.seeds:
        model = _init_from_config(model_cfg, seed)
        kl_init = kl_embedding_loss(model, tr.inputs, perplexity)[0]
        loss = LossSpec("kl_embedding", perplexity=perplexity)
        model, hist = _staged_train(model, tr, tr, loss, config.optimizer,
                                    seed)
        kl_final = kl_embedding_loss(model, tr.inputs, perplexity)[0]

        train_emb = np.array([tn_affine_outputs(model, x) for x in tr.inputs])
        test_emb = np.array([tn_affine_outputs(model, x) for x in te.inputs])
        knn = knn_error(test_emb, te.labels, k=1,
                        reference=train_emb, reference_labels=tr.labels)
        per_seed.append({
            "seed": seed,
            "kl_init": float(kl_init),
            "kl_final": float(kl_final),
            "kl_drop": float(1.0 - kl_final / kl_init),
            "knn_err_percent": float(knn),
        })
        models[seed] = (model, hist, train_emb, test_emb)

    best = min(per_seed, key=lambda m: m["knn_err_percent"])["seed"]
    model, hist, train_emb, test_emb = models[best]

    # PCA comparator on the same subset
    pca = pca_fit(tr.inputs, 2)
    pca_train = pca_transform(pca, tr.inputs)
    pca_test = pca_transform(pca, te.inputs)
    pca_knn = knn_error(pca_test, te.labels, k=1,
                        reference=pca_train, reference_labels=tr.labels)
    for row in per_seed:
        if row["seed"] == best:
            row["pca_knn_err_percent"] = float(pca_knn)

    os.makedirs(out, exist_ok=True)
    emb_path = os.path.join(out, "fig4_embedding.csv")
    body = np.column_stack([test_emb, te.labels.astype(np.float64)])
    np.savetxt(emb_path, body, delimiter=",", header="y1,y2,label",
               comments="", fmt="%.17g")
    artifacts = [emb_path]
    ckpt = os.path.join(out, "fig4_model.json")
    save_model(model, ckpt)
    artifacts.append(ckpt)
    hist_path = os.path.join(out, "fig4_history.csv")
    history_to_csv(hist, hist_path)
    artifacts.append(hist_path)
    return per_seed, best, artifacts


def _run_tn_counts(config: ExperimentConfig, out: str):
    model = _init_from_config(config.model, int(config.seeds[0]))
    row = {
        "seed": int(config.seeds[0]),
        "stored_param_count": int(model.stored_param_count),
        "expanded_param_count": int(model.expanded_param_count),
    }
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "s_tn_counts.json")
    _write_json(path, row)
    return [row], int(config.seeds[0]), [path]


_DRIVERS = {
    "fig1_spin": _run_fig1,
    "fig2_aho": _run_fig2,
    "s_lmg_energies": _run_lmg_energies,
    "s_lmg_observables": _run_lmg_observables,
    "s_lmg_complex": _run_lmg_complex,
    "fig4_mnist": _run_embedding,
    "s_tn_counts": _run_tn_counts,
}


def run_experiment(config: ExperimentConfig) -> RunManifest:
    """Execute one configured experiment; write artifacts and the manifest.

    Any failure is recorded in the manifest (failing stage + message) before
    the exception propagates.
    """
    digest = config_hash(config)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    started = time.time()
    stage = "setup"
    try:
        stage = "config"
        config_path = os.path.join(out, "config.json")
        with open(config_path, "w", encoding="utf-8") as fh:
            fh.write(config_to_json(config))
            fh.write("\n")
        stage = "run"
        if config.preset in _DRIVERS:
            per_seed, best, artifacts = _DRIVERS[config.preset](config, out)
        elif config.preset in ("fig3_trotter", "s_trotter_dm"):
            per_seed, best, artifacts = _run_trotter(config, out, config.preset)
        else:
            raise PresetError(f"unknown experiment preset {config.preset!r}")
        stage = "manifest"
        manifest = RunManifest(
            preset=config.preset,
            config_hash=digest,
            code_version=code_version,
            per_seed_metrics=per_seed,
            best_seed=best,
            wall_clock_seconds=time.time() - started,
            artifacts=sorted(artifacts + [config_path]),
        )
        _write_json(os.path.join(out, "manifest.json"), manifest.as_dict())
        return manifest
    except Exception as exc:
        manifest = RunManifest(
            preset=config.preset,
            config_hash=digest,
            code_version=code_version,
            per_seed_metrics=[],
            best_seed=None,
            wall_clock_seconds=time.time() - started,
            artifacts=[],
            failed_stage=stage,
            error=f"{type(exc).__name__}: {exc}",
        )
        try:
            _write_json(os.path.join(out, "manifest.json"), manifest.as_dict())
        except OSError:
            log.error("could not write failure manifest for %s", config.preset)
        raise


__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "RunManifest",
    "canonical_json",
    "config_hash",
    "config_to_json",
    "config_from_dict",
    "config_from_json",
    "load_config",
    "list_presets",
    "preset_config",
    "ingest_images",
    "load_bundled_digits",
    "emit_curves",
    "run_experiment",
]
