"""The transfer-learning protocol over a run directory.

Layout of a run directory::

    config.ini                               frozen resolved configuration
    data/<label>_<split>_{inputs,outputs}.cnot
    pretrain/checkpoint/  pretrain/history.csv  pretrain/result.json
    transfer/<target>/<strategy>/seed<k>/...  transfer/<target>/<strategy>/result.json
    sweep/<target>/n<nt>/<strategy>/result.json  sweep/<target>/sweep.csv
    mmd.csv
    report/table1.csv  report/table2.csv  report/fig4.png  report/contours_<equation>.png

CSV files carry no timestamps, so replaying the frozen config reproduces them
byte for byte; timestamps live in the JSON result files only.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import adapters as ad
from .cno import CnoConfig, Model, cno_init, load_checkpoint, predict, save_checkpoint
from .config import STRATEGY_NAMES, ConfigError, ExperimentConfig, render_config
from .fields import relative_l1
from .metrics import dataset_mmd, embed_fields, median_bandwidth, test_error
from .solvers.datasets import Dataset, derive_seed, generate_dataset, load_dataset
from .training import ExperimentResult, TrainConfig, _now, run_repeats, train

log = logging.getLogger(__name__)

TRANSFER_STRATEGIES = STRATEGY_NAMES


class DataError(RuntimeError):
    """Missing or inconsistent datasets, checkpoints or results."""


# --- run directory ---------------------------------------------------------


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def freeze_config(cfg: ExperimentConfig) -> Path:
    """Write ``config.ini`` into the run directory, refusing a conflicting one."""
    root = run_dir(cfg)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create output directory {root}: {err}") from None
    path = root / "config.ini"
    text = render_config(cfg)
    if path.exists() and path.read_text("utf-8") != text:
        raise ConfigError(f"{path} holds a different configuration; use a fresh --out directory")
    try:
        path.write_text(text, "utf-8")
    except OSError as err:
        raise DataError(f"cannot write {path}: {err}") from None
    return path


def data_dir(cfg: ExperimentConfig) -> Path:
    return run_dir(cfg) / "data"


def _write_json(path: Path, data: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", "utf-8")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing {path}")
    return json.loads(path.read_text("utf-8"))


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _num(x: float | None) -> str:
    return "" if x is None else repr(float(x))


# --- generate --------------------------------------------------------------


def dataset_master_seed(cfg: ExperimentConfig, label: str) -> int:
    return derive_seed(cfg.seed, f"data:{label}", 0)


def cmd_generate(cfg: ExperimentConfig) -> dict[str, Any]:
    freeze_config(cfg)
    written = {}
    for spec in [cfg.source, *[cfg.targets[k] for k in sorted(cfg.targets)]]:
        paths = generate_dataset(
            cfg.equation,
            spec.params,
            spec.split_sizes,
            dataset_master_seed(cfg, spec.label),
            cfg.resolution,
            data_dir(cfg),
            spec.label,
            dt=spec.dt,
            auto_dt=spec.auto_dt,
        )
        written[spec.label] = paths
    return written


def load_split(cfg: ExperimentConfig, label: str, split: str) -> Dataset:
    try:
        data = load_dataset(data_dir(cfg), label, split)
    except FileNotFoundError as err:
        raise DataError(f"{err}; run the 'generate' command first") from None
    if data.resolution != cfg.resolution:
        raise DataError(f"dataset {label}/{split} has resolution {data.resolution}, config says {cfg.resolution}")
    return data


# --- pretrain --------------------------------------------------------------


def fitted_model_config(cfg: ExperimentConfig, train_set: Dataset) -> CnoConfig:
    """Model config with normalization fitted to ``train_set`` and the native grid pinned."""
    x, y = np.asarray(train_set.inputs, np.float64), np.asarray(train_set.outputs, np.float64)
    return replace(
        cfg.model,
        native_resolution=cfg.model.native_resolution or train_set.resolution,
        in_shift=float(x.mean()),
        in_scale=float(x.std()) or 1.0,
        out_shift=float(y.mean()),
        out_scale=float(y.std()) or 1.0,
    )


def mean_field_error(train_set: Dataset, test_set: Dataset) -> float:
    """Error of predicting the training-set mean output field for every test sample."""
    mean = np.mean(np.asarray(train_set.outputs, np.float64), axis=0)
    return float(np.mean(relative_l1(np.broadcast_to(mean, test_set.outputs.shape), test_set.outputs)))


def pretrain_dir(cfg: ExperimentConfig) -> Path:
    return run_dir(cfg) / "pretrain"


def cmd_pretrain(cfg: ExperimentConfig) -> dict[str, Any]:
    freeze_config(cfg)
    tr, va, te = (load_split(cfg, "source", s) for s in ("train", "val", "test"))
    model_cfg = fitted_model_config(cfg, tr)
    model = Model(model_cfg, cno_init(model_cfg, cfg.pretrain.seed))
    out = pretrain_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(model, tr, va, cfg.pretrain, csv_path=out / "history.csv")
    if out.joinpath("checkpoint").exists():
        shutil.rmtree(out / "checkpoint")
    save_checkpoint(model, out / "checkpoint", {"best_epoch": history.best_epoch})
    result = {
        "source_test_error": test_error(model, te.inputs, te.outputs),
        "mean_field_error": mean_field_error(tr, te),
        "best_epoch": history.best_epoch,
        "seconds": history.seconds,
        "seed": cfg.pretrain.seed,
        "checkpoint": str(out / "checkpoint"),
    }
    _write_json(out / "result.json", result)
    return result


def load_source(cfg: ExperimentConfig) -> Model:
    path = pretrain_dir(cfg) / "checkpoint"
    try:
        model, _ = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"no source checkpoint at {path}; run the 'pretrain' command first") from None
    return model


# --- transfer --------------------------------------------------------------


def target_pool_order(cfg: ExperimentConfig, label: str, pool_size: int) -> np.ndarray:
    """Seed-shuffled order of the target training pool; subsets are its prefixes."""
    return np.random.default_rng(derive_seed(cfg.seed, f"pool:{label}", 0)).permutation(pool_size)


def target_subset(cfg: ExperimentConfig, label: str, n: int) -> Dataset:
    pool = load_split(cfg, label, "train")
    if n > len(pool):
        raise ConfigError(f"n_t = {n} exceeds the target training pool of {len(pool)} samples")
    return pool.subset(target_pool_order(cfg, label, len(pool))[:n])


def build_model(cfg: ExperimentConfig, strategy: str, source: Model | None, train_set: Dataset, seed: int):
    if strategy == "supervised":
        model_cfg = fitted_model_config(cfg, train_set)
        return Model(model_cfg, cno_init(model_cfg, seed))
    assert source is not None
    if strategy == "finetune":
        return ad.finetune_model(source, cfg.finetune)
    if strategy == "lora":
        return ad.attach_lora(source, cfg.lora_rank, cfg.adapter_roles, seed=seed)
    if strategy == "nlt":
        return ad.attach_nlt(source, cfg.adapter_roles)
    raise ConfigError(f"unknown strategy {strategy!r}")


def save_trained(model, directory: Path, source: Model | None) -> str:
    if directory.exists():
        shutil.rmtree(directory)
    if isinstance(model, ad.AdaptedModel):
        ad.save_adapter(model, directory, source.store.with_trainable(False).fingerprint() if source else None)
    else:
        save_checkpoint(model, directory)
    return str(directory)


def load_trained(directory: Path, source: Model):
    if (directory / ad.ADAPTER_MANIFEST).exists():
        return ad.load_adapter(directory, source)
    return load_checkpoint(directory)[0]


def run_strategy(cfg: ExperimentConfig, strategy: str, label: str, n_target: int, out: Path, train_cfg: TrainConfig | None = None) -> ExperimentResult:
    """Train and test ``strategy`` on ``n_target`` samples of target ``label``."""
    if strategy not in TRANSFER_STRATEGIES:
        raise ConfigError(f"strategy must be one of {TRANSFER_STRATEGIES}")
    train_cfg = train_cfg or cfg.transfer
    te = load_split(cfg, label, "test")
    source = None if strategy == "supervised" else load_source(cfg)
    if strategy == "no_transfer":
        err = test_error(source, te.inputs, te.outputs)
        stamp = _now()
        return ExperimentResult(strategy, [cfg.seed], [err], started=stamp, finished=stamp, checkpoints=[str(pretrain_dir(cfg) / "checkpoint")])
    tr = target_subset(cfg, label, n_target)
    va = load_split(cfg, label, "val")
    checkpoints: list[str] = []
    initial: list[float] = []

    def task(seed: int) -> float:
        model = build_model(cfg, strategy, source, tr, seed)
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        model, history = train(model, tr, va, train_cfg.with_seed(seed), csv_path=seed_dir / "history.csv")
        initial.append(history.initial_val_error)
        checkpoints.append(save_trained(model, seed_dir / "model", source))
        return test_error(model, te.inputs, te.outputs)

    result = run_repeats(task, train_cfg, strategy)
    result.checkpoints = checkpoints
    result.extra["initial_val_error"] = initial
    return result


def _pair_mmd(cfg: ExperimentConfig, label: str) -> float:
    return dataset_mmd(load_split(cfg, "source", "train"), load_split(cfg, label, "train"), cfg.mmd)


def transfer_dir(cfg: ExperimentConfig, label: str, strategy: str) -> Path:
    return run_dir(cfg) / "transfer" / label / strategy


def cmd_transfer(cfg: ExperimentConfig, strategy: str | None = None, label: str | None = None) -> ExperimentResult:
    freeze_config(cfg)
    strategy = strategy or cfg.strategy
    label = label or cfg.transfer_target
    if label not in cfg.targets:
        raise ConfigError(f"unknown target {label!r}")
    out = transfer_dir(cfg, label, strategy)
    out.mkdir(parents=True, exist_ok=True)
    result = run_strategy(cfg, strategy, label, cfg.n_target, out)
    result.mmd = _pair_mmd(cfg, label)
    result.extra.update(target=label, n_target=cfg.n_target if strategy != "no_transfer" else 0)
    _write_json(out / "result.json", result.to_dict())
    return result


def load_result(cfg: ExperimentConfig, label: str, strategy: str) -> ExperimentResult | None:
    path = transfer_dir(cfg, label, strategy) / "result.json"
    return ExperimentResult.from_dict(_read_json(path)) if path.exists() else None


# --- sweep -----------------------------------------------------------------

SWEEP_STRATEGIES = ("nlt", "supervised")


def sweep_dir(cfg: ExperimentConfig, label: str) -> Path:
    return run_dir(cfg) / "sweep" / label


def cmd_sweep_nt(cfg: ExperimentConfig, sizes=None, label: str | None = None) -> Path:
    freeze_config(cfg)
    label = label or cfg.transfer_target
    sizes = tuple(sizes or cfg.sweep_sizes)
    pool = load_split(cfg, label, "train")
    if max(sizes) > len(pool):
        raise ConfigError(f"sweep size {max(sizes)} exceeds the target training pool of {len(pool)} samples")
    load_source(cfg)
    rows = []
    for n in sizes:
        row: list[Any] = [n]
        for strategy in SWEEP_STRATEGIES:
            out = sweep_dir(cfg, label) / f"n{n}" / strategy
            out.mkdir(parents=True, exist_ok=True)
            result = run_strategy(cfg, strategy, label, n, out)
            result.extra.update(target=label, n_target=n)
            _write_json(out / "result.json", result.to_dict())
            row += [_num(result.mean), _num(result.std)]
        rows.append(row)
    path = sweep_dir(cfg, label) / "sweep.csv"
    header = ["n_t"] + [f"{s}_{stat}" for s in SWEEP_STRATEGIES for stat in ("mean", "std")]
    _write_csv(path, header, rows)
    return path


def read_sweep(path: Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# --- mmd -------------------------------------------------------------------


def cmd_mmd(cfg: ExperimentConfig) -> Path:
    freeze_config(cfg)
    source = load_split(cfg, "source", "train")
    src_embed = embed_fields(source.outputs if cfg.mmd.representation == "outputs" else source.inputs, cfg.mmd)
    rows = []
    for label in sorted(cfg.targets):
        target = load_split(cfg, label, "train")
        value = dataset_mmd(source, target, cfg.mmd)
        tgt_embed = embed_fields(target.outputs if cfg.mmd.representation == "outputs" else target.inputs, cfg.mmd)
        sigma = cfg.mmd.sigma if cfg.mmd.sigma is not None else median_bandwidth(src_embed, tgt_embed)
        rows.append([
            "source", label, cfg.targets[label].describe(), _num(value), _num(sigma),
            "median" if cfg.mmd.sigma is None else "fixed", cfg.mmd.representation, cfg.mmd.embed_resolution,
            len(source), len(target),
        ])
    path = run_dir(cfg) / "mmd.csv"
    header = ["source", "target", "target_params", "mmd", "sigma", "bandwidth_rule", "representation", "embed_resolution", "n_source", "n_target"]
    _write_csv(path, header, rows)
    return path


def read_mmd(cfg: ExperimentConfig) -> dict[str, float]:
    path = run_dir(cfg) / "mmd.csv"
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["target"]: float(row["mmd"]) for row in csv.DictReader(fh)}


# --- report ----------------------------------------------------------------


def rank_marks(values: dict[str, float | None]) -> dict[str, str]:
    """``best`` and ``second`` flags for the two smallest values; ``missing`` for gaps."""
    present = sorted((v, k) for k, v in values.items() if v is not None)
    marks = {k: ("missing" if v is None else "") for k, v in values.items()}
    for (_, k), flag in zip(present, ("best", "second")):
        marks[k] = flag
    return marks


def table1_rows(cfg: ExperimentConfig):
    pre = _read_json(pretrain_dir(cfg) / "result.json")
    header = ["equation", "source", "source_test_error"]
    row: list[Any] = [cfg.equation.value, cfg.source.describe(), _num(pre["source_test_error"])]
    for label in sorted(cfg.targets):
        result = load_result(cfg, label, "no_transfer")
        header += [f"{label}_params", f"{label}_no_transfer_error"]
        row += [cfg.targets[label].describe(), "missing" if result is None else _num(result.mean)]
    return header, [row]


def table2_rows(cfg: ExperimentConfig):
    labels = sorted(cfg.targets)
    mmd_values = read_mmd(cfg)
    header = ["row"] + [f"{label}_{col}" for label in labels for col in ("mean", "std", "mark")]
    rows = [["MMD"] + [c for label in labels for c in (_num(mmd_values.get(label)), "", "" if label in mmd_values else "missing")]]
    results = {label: {s: load_result(cfg, label, s) for s in STRATEGY_NAMES} for label in labels}
    marks = {label: rank_marks({s: (r.mean if r else None) for s, r in results[label].items()}) for label in labels}
    for strategy in STRATEGY_NAMES:
        row = [strategy]
        for label in labels:
            r = results[label][strategy]
            row += [_num(r.mean) if r else "", _num(r.std) if r else "", marks[label][strategy]]
        rows.append(row)
    return header, rows


def _figure_modules():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_sweep(path_csv: Path, path_png: Path, title: str):
    plt = _figure_modules()
    rows = read_sweep(path_csv)
    n = [r["n_t"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.4), dpi=100)
    for strategy, marker in zip(SWEEP_STRATEGIES, ("o", "s")):
        ax.errorbar(n, [r[f"{strategy}_mean"] for r in rows], yerr=[r[f"{strategy}_std"] for r in rows], marker=marker, capsize=3, label=strategy)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("target training samples")
    ax.set_ylabel("relative L1 test error (%)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path_png, metadata={"Software": None})
    plt.close(fig)


CONTOUR_COLUMNS = ("input", "truth", "no_transfer", "supervised", "finetune", "lora", "nlt")


def contour_panels(cfg: ExperimentConfig, label: str, n_samples: int = 3) -> tuple[np.ndarray, dict[str, np.ndarray | None]]:
    te = load_split(cfg, label, "test")
    x, y = te.inputs[:n_samples], te.outputs[:n_samples]
    source = load_source(cfg)
    panels: dict[str, np.ndarray | None] = {"input": np.asarray(x), "truth": np.asarray(y), "no_transfer": predict(source, x)}
    for strategy in ("supervised", "finetune", "lora", "nlt"):
        result = load_result(cfg, label, strategy)
        panels[strategy] = predict(load_trained(Path(result.checkpoints[0]), source), x) if result and result.checkpoints else None
    return y, panels


def plot_contours(panels: dict[str, np.ndarray | None], path_png: Path, title: str):
    plt = _figure_modules()
    n_rows = len(panels["truth"])
    fig, axes = plt.subplots(n_rows, len(CONTOUR_COLUMNS), figsize=(2.0 * len(CONTOUR_COLUMNS), 2.0 * n_rows), dpi=80, squeeze=False)
    for i in range(n_rows):
        # outputs share one color scale per row; the input keeps its own
        stack = [panels[c][i] for c in CONTOUR_COLUMNS[1:] if panels[c] is not None]
        lo, hi = float(np.min(stack)), float(np.max(stack))
        if hi <= lo:
            lo, hi = lo - 1e-12, hi + 1e-12
        for j, col in enumerate(CONTOUR_COLUMNS):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(col, fontsize=9)
            if panels[col] is None:
                ax.text(0.5, 0.5, "missing", ha="center", va="center", transform=ax.transAxes)
                continue
            field = panels[col][i]
            levels = np.linspace(*(field.min(), field.max()) if col == "input" else (lo, hi), 21)
            if levels[-1] <= levels[0]:
                levels = np.linspace(levels[0] - 1e-12, levels[0] + 1e-12, 21)
            ax.contourf(field, levels=levels, cmap="viridis")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path_png, metadata={"Software": None})
    plt.close(fig)


def cmd_report(cfg: ExperimentConfig) -> dict[str, Path]:
    root = run_dir(cfg)
    if not (pretrain_dir(cfg) / "result.json").exists():
        raise DataError(f"no results in {root}; run 'pretrain' and 'transfer' first")
    # build everything in memory first so a failure leaves no partial report
    t1 = table1_rows(cfg)
    t2 = table2_rows(cfg)
    label = cfg.transfer_target
    sweep_csv = sweep_dir(cfg, label) / "sweep.csv"
    _, panels = contour_panels(cfg, label)
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    written = {"table1": out / "table1.csv", "table2": out / "table2.csv"}
    _write_csv(written["table1"], *t1)
    _write_csv(written["table2"], *t2)
    if sweep_csv.exists():
        written["fig4"] = out / "fig4.png"
        plot_sweep(sweep_csv, written["fig4"], f"{cfg.equation.value}: {cfg.source.describe()} -> {cfg.targets[label].describe()}")
    written["contours"] = out / f"contours_{cfg.equation.value}.png"
    plot_contours(panels, written["contours"], f"{cfg.equation.value} target {label}")
    return written


__all__ = [
    "DataError",
    "cmd_generate",
    "cmd_mmd",
    "cmd_pretrain",
    "cmd_report",
    "cmd_sweep_nt",
    "cmd_transfer",
    "freeze_config",
    "load_split",
    "rank_marks",
    "run_strategy",
    "target_subset",
]
