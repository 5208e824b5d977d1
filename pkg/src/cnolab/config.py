"""Experiment configuration: an INI document with a fixed schema.

Sections::

    [experiment]   equation, resolution, seed, output_dir, strategy,
                   transfer_target, n_target
    [source]       K | nu (+ mode_cutoff, amplitude_std), split_sizes, dt, auto_dt
    [target.X]     same keys as [source]; one section per shifted dataset
    [model]        CnoConfig fields (normalization is fitted at pretraining)
    [pretrain]     TrainConfig fields (seed defaults to the master seed)
    [transfer]     TrainConfig fields (seed defaults to the master seed)
    [adapters]     lora_rank, n_tail_blocks, roles
    [mmd]          sigma, representation, embed_resolution
    [sweep]        sizes

Unknown sections and keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adapters import FinetuneSpec
from .cno import ROLES, CnoConfig
from .metrics import MmdConfig
from .solvers.equations import Equation
from .training import TrainConfig

STRATEGY_NAMES = ("no_transfer", "supervised", "finetune", "lora", "nlt")
NORMALIZATION_KEYS = ("in_shift", "in_scale", "out_shift", "out_scale")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    label: str
    params: dict[str, Any]
    split_sizes: tuple[int, int, int]
    dt: float | None = None
    auto_dt: bool = True

    def describe(self) -> str:
        return ", ".join(f"{k}={v}" for k, v in sorted(self.params.items()))


@dataclass(frozen=True)
class ExperimentConfig:
    equation: Equation
    resolution: int
    seed: int
    output_dir: str
    source: DataSpec
    targets: dict[str, DataSpec]
    model: CnoConfig
    pretrain: TrainConfig
    transfer: TrainConfig
    strategy: str = "nlt"
    transfer_target: str = ""
    n_target: int = 16
    lora_rank: int = 4
    finetune: FinetuneSpec = FinetuneSpec()
    adapter_roles: tuple[str, ...] = ROLES
    mmd: MmdConfig = MmdConfig()
    sweep_sizes: tuple[int, ...] = (16, 32, 64, 128, 256)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def target(self) -> DataSpec:
        return self.targets[self.transfer_target]


# --- parsing helpers -------------------------------------------------------


def _int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def _float(value: str, key: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def _bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _optional(value: str) -> bool:
    return value.strip().lower() in ("", "none")


def _int_list(value: str, key: str) -> tuple[int, ...]:
    items = [v for v in value.replace(",", " ").split() if v]
    if not items:
        raise ConfigError(f"{key}: empty list")
    return tuple(_int(v, key) for v in items)


def _check_keys(section: str, keys, allowed):
    unknown = sorted(set(keys) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {unknown}")


def _data_spec(label: str, section, equation: Equation, where: str) -> DataSpec:
    if equation is Equation.NS:
        allowed_params = {"nu": _float, "mode_cutoff": _int, "amplitude_std": _float}
        required = "nu"
    else:
        allowed_params = {"K": _int}
        required = "K"
    keys = {k for k in section}
    # configparser lower-cases keys; K is spelled k on disk
    canonical = {k.lower(): k for k in allowed_params}
    _check_keys(where, keys, set(canonical) | {"split_sizes", "dt", "auto_dt"})
    if required.lower() not in keys:
        raise ConfigError(f"[{where}]: missing {required}")
    params = {canonical[k]: allowed_params[canonical[k]](section[k], f"{where}.{k}") for k in keys if k in canonical}
    sizes = _int_list(section.get("split_sizes", "512, 128, 128"), f"{where}.split_sizes")
    if len(sizes) != 3 or min(sizes) < 1:
        raise ConfigError(f"[{where}] split_sizes must be three positive integers")
    dt = None if _optional(section.get("dt", "")) else _float(section["dt"], f"{where}.dt")
    auto_dt = _bool(section.get("auto_dt", "true"), f"{where}.auto_dt")
    return DataSpec(label, params, sizes, dt, auto_dt)


def _train_config(section, where: str, defaults: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"betas"}
    _check_keys(where, section.keys(), fields | {"beta1", "beta2"})
    values: dict[str, Any] = dict(defaults)
    for key in section:
        raw = section[key]
        if key in ("epochs", "batch_size", "decay_every", "repeats", "seed"):
            values[key] = _int(raw, f"{where}.{key}")
        elif key == "select_best":
            values[key] = _bool(raw, f"{where}.{key}")
        elif key == "grad_clip":
            values[key] = None if _optional(raw) else _float(raw, f"{where}.{key}")
        elif key not in ("beta1", "beta2"):
            values[key] = _float(raw, f"{where}.{key}")
    b1 = _float(section.get("beta1", "0.9"), f"{where}.beta1")
    b2 = _float(section.get("beta2", "0.999"), f"{where}.beta2")
    try:
        return TrainConfig(betas=(b1, b2), **values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{where}]: {err}") from None


def _model_config(section) -> CnoConfig:
    names = {f.name: f for f in dataclasses.fields(CnoConfig)}
    allowed = set(names) - set(NORMALIZATION_KEYS)
    _check_keys("model", section.keys(), allowed)
    values: dict[str, Any] = {}
    for key in section:
        raw = section[key]
        if key == "leaky_slope":
            values[key] = _float(raw, f"model.{key}")
        elif key == "native_resolution":
            values[key] = None if _optional(raw) else _int(raw, f"model.{key}")
        else:
            values[key] = _int(raw, f"model.{key}")
    try:
        return CnoConfig(**values)
    except ValueError as err:
        raise ConfigError(f"[model]: {err}") from None


def _has(parser, section: str, key: str) -> bool:
    return parser.has_section(section) and key in parser[section]


SECTIONS = ("experiment", "source", "model", "pretrain", "transfer", "adapters", "mmd", "sweep")


def parse_config(text: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for section in parser.sections():
        if section not in SECTIONS and not section.startswith("target."):
            raise ConfigError(f"unknown section [{section}]")
    for required in ("experiment", "source"):
        if not parser.has_section(required):
            raise ConfigError(f"missing section [{required}]")
    exp = parser["experiment"]
    _check_keys("experiment", exp.keys(), {"equation", "resolution", "seed", "output_dir", "strategy", "transfer_target", "n_target"})
    try:
        equation = Equation(exp.get("equation", "").strip().lower())
    except ValueError:
        raise ConfigError(f"[experiment] equation must be one of {[e.value for e in Equation]}") from None
    resolution = int(overrides.get("resolution", _int(exp.get("resolution", "64"), "experiment.resolution")))
    if resolution < 8 or resolution % 2:
        raise ConfigError("resolution must be an even integer >= 8")
    seed = int(overrides.get("seed", _int(exp.get("seed", "0"), "experiment.seed")))
    output_dir = str(overrides.get("output_dir", exp.get("output_dir", "runs/experiment")))
    strategy = exp.get("strategy", "nlt").strip()
    if strategy not in STRATEGY_NAMES:
        raise ConfigError(f"strategy must be one of {STRATEGY_NAMES}")

    source = _data_spec("source", parser["source"], equation, "source")
    targets = {
        name.split(".", 1)[1]: _data_spec(name.split(".", 1)[1], parser[name], equation, name)
        for name in parser.sections()
        if name.startswith("target.")
    }
    if not targets:
        raise ConfigError("at least one [target.<label>] section is required")
    transfer_target = exp.get("transfer_target", sorted(targets)[-1]).strip()
    if transfer_target not in targets:
        raise ConfigError(f"transfer_target {transfer_target!r} has no [target.{transfer_target}] section")

    model = _model_config(parser["model"] if parser.has_section("model") else {})
    pretrain = _train_config(parser["pretrain"] if parser.has_section("pretrain") else {}, "pretrain", {"epochs": 400, "batch_size": 32})
    transfer = _train_config(parser["transfer"] if parser.has_section("transfer") else {}, "transfer", {"epochs": 500, "batch_size": 16})

    adapters = parser["adapters"] if parser.has_section("adapters") else {}
    _check_keys("adapters", adapters.keys(), {"lora_rank", "n_tail_blocks", "roles"})
    roles = tuple(r for r in adapters.get("roles", " ".join(ROLES)).replace(",", " ").split() if r)
    if set(roles) - set(ROLES) or not roles:
        raise ConfigError(f"[adapters] roles must be drawn from {ROLES}")
    finetune = FinetuneSpec(_int(adapters.get("n_tail_blocks", "2"), "adapters.n_tail_blocks"))
    try:
        finetune.validate(model)
    except ValueError as err:
        raise ConfigError(f"[adapters] {err}") from None
    lora_rank = _int(adapters.get("lora_rank", "4"), "adapters.lora_rank")
    if lora_rank < 1:
        raise ConfigError("[adapters] lora_rank must be >= 1")

    mmd_section = parser["mmd"] if parser.has_section("mmd") else {}
    _check_keys("mmd", mmd_section.keys(), {"sigma", "representation", "embed_resolution"})
    sigma_raw = mmd_section.get("sigma", "median")
    try:
        mmd = MmdConfig(
            sigma=None if sigma_raw.strip().lower() in ("median", "", "none") else _float(sigma_raw, "mmd.sigma"),
            representation=mmd_section.get("representation", "outputs").strip(),
            embed_resolution=_int(mmd_section.get("embed_resolution", "32"), "mmd.embed_resolution"),
        )
    except ValueError as err:
        raise ConfigError(f"[mmd] {err}") from None

    sweep = parser["sweep"] if parser.has_section("sweep") else {}
    _check_keys("sweep", sweep.keys(), {"sizes"})
    sizes = _int_list(sweep.get("sizes", "16, 32, 64, 128, 256"), "sweep.sizes")
    n_target = _int(exp.get("n_target", "16"), "experiment.n_target")
    if n_target < 1 or min(sizes) < 1:
        raise ConfigError("target sample counts must be positive")

    return ExperimentConfig(
        equation=equation,
        resolution=resolution,
        seed=seed,
        output_dir=output_dir,
        source=source,
        targets=targets,
        model=model,
        # a stage without its own seed follows the master seed
        pretrain=pretrain if _has(parser, "pretrain", "seed") else pretrain.with_seed(seed),
        transfer=transfer if _has(parser, "transfer", "seed") else transfer.with_seed(seed),
        strategy=strategy,
        transfer_target=transfer_target,
        n_target=n_target,
        lora_rank=lora_rank,
        finetune=finetune,
        adapter_roles=roles,
        mmd=mmd,
        sweep_sizes=sizes,
    )


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text("utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config {path} is not UTF-8 text") from None
    return parse_config(text, overrides)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _train_items(cfg: TrainConfig, master_seed: int) -> dict[str, Any]:
    items = dataclasses.asdict(cfg)
    if items["seed"] == master_seed:
        items.pop("seed")
    b1, b2 = items.pop("betas")
    items.update(beta1=b1, beta2=b2)
    return items


def render_config(cfg: ExperimentConfig) -> str:
    """Fully resolved config text; parsing it yields an equal configuration."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep K upper-case on disk
    parser["experiment"] = {
        "equation": cfg.equation.value,
        "resolution": _fmt(cfg.resolution),
        "seed": _fmt(cfg.seed),
        "output_dir": cfg.output_dir,
        "strategy": cfg.strategy,
        "transfer_target": cfg.transfer_target,
        "n_target": _fmt(cfg.n_target),
    }

    def data_items(spec: DataSpec):
        items = {k: _fmt(v) for k, v in sorted(spec.params.items())}
        items.update(split_sizes=_fmt(spec.split_sizes), dt=_fmt(spec.dt), auto_dt=_fmt(spec.auto_dt))
        return items

    parser["source"] = data_items(cfg.source)
    for label in sorted(cfg.targets):
        parser[f"target.{label}"] = data_items(cfg.targets[label])
    model = {k: _fmt(v) for k, v in cfg.model.to_dict().items() if k not in NORMALIZATION_KEYS}
    parser["model"] = model
    parser["pretrain"] = {k: _fmt(v) for k, v in _train_items(cfg.pretrain, cfg.seed).items()}
    parser["transfer"] = {k: _fmt(v) for k, v in _train_items(cfg.transfer, cfg.seed).items()}
    parser["adapters"] = {
        "lora_rank": _fmt(cfg.lora_rank),
        "n_tail_blocks": _fmt(cfg.finetune.n_tail_blocks),
        "roles": _fmt(cfg.adapter_roles),
    }
    parser["mmd"] = {
        "sigma": "median" if cfg.mmd.sigma is None else _fmt(cfg.mmd.sigma),
        "representation": cfg.mmd.representation,
        "embed_resolution": _fmt(cfg.mmd.embed_resolution),
    }
    parser["sweep"] = {"sizes": _fmt(cfg.sweep_sizes)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
