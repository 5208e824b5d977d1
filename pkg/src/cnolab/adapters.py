"""Transfer strategies over a frozen source model.

* decoder-tail fine-tuning: unfreeze the last decoder blocks and the projection;
* LoRA: per kernel slice ``c`` (``c`` runs over ``C_out * C_in`` channel pairs)
  add the scalar ``(B A)[c]`` to every tap of the ``h x w`` slice;
* NLT: per kernel slice apply ``f[c] * W[c] + b[c]``.

Adapted models expose the same methods as :class:`cnolab.cno.Model`, so the
training loop and :func:`cnolab.cno.loss_and_gradients` treat them alike.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .cno import ROLES, CnoConfig, Model, ParameterStore, cno_forward, conv_layout
from .fields import load_tensor, save_tensor

STRATEGIES = ("lora", "nlt")
ADAPTER_MANIFEST = "adapter.json"


@dataclass(frozen=True)
class FinetuneSpec:
    n_tail_blocks: int = 2

    def validate(self, config: CnoConfig):
        if not 0 <= self.n_tail_blocks <= config.levels:
            raise ValueError(f"n_tail_blocks must lie in [0, {config.levels}], got {self.n_tail_blocks}")


def finetune_layers(config: CnoConfig, spec: FinetuneSpec) -> list[str]:
    """Convolutions unfrozen by ``spec``: decoder blocks 0..n-1 (0 is nearest the output) and the projection."""
    spec.validate(config)
    if spec.n_tail_blocks == 0:
        return []
    blocks = {f"dec{b}." for b in range(spec.n_tail_blocks)}
    return [name for name in conv_layout(config) if name == "proj" or name[: name.find(".") + 1] in blocks]


def apply_finetune_mask(source: ParameterStore, spec: FinetuneSpec, config: CnoConfig) -> ParameterStore:
    layers = set(finetune_layers(config, spec))
    flags = {name: name.rsplit(".", 1)[0] in layers for name in source}
    return source.with_trainable(flags)


def finetune_model(source: Model, spec: FinetuneSpec) -> Model:
    return Model(source.config, apply_finetune_mask(source.store, spec, source.config))


def select_layers(config: CnoConfig, roles: Sequence[str] | None = None) -> list[str]:
    roles = tuple(ROLES if roles is None else roles)
    bad = set(roles) - set(ROLES)
    if bad:
        raise ValueError(f"unknown roles {sorted(bad)}")
    layers = [name for name, (_, _, role) in conv_layout(config).items() if role in roles]
    if not layers:
        raise ValueError(f"layer filter {roles} selects no convolution")
    return layers


@dataclass
class AdaptedModel:
    """A frozen source store plus per-layer adapter tensors.

    ``adapters`` maps ``"<layer>.lora_B"``/``"<layer>.lora_A"`` or
    ``"<layer>.nlt_f"``/``"<layer>.nlt_b"`` to tensors; all of them train.
    """

    config: CnoConfig
    source: ParameterStore
    strategy: str
    layers: list[str]
    adapters: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    rank: int | None = None
    roles: tuple[str, ...] = ROLES

    def trainable(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.adapters)

    def decay_flags(self) -> dict[str, bool]:
        # NLT factors and offsets are not shrunk towards zero: f = 0 would erase the kernel
        return {k: self.strategy == "lora" for k in self.adapters}

    def assign(self, values: Mapping[str, torch.Tensor]):
        for k, v in values.items():
            if k not in self.adapters:
                raise KeyError(f"{k!r} is not an adapter tensor")
            self.adapters[k] = v.detach().clone()

    def effective_kernel(self, layer: str, adapters: Mapping[str, torch.Tensor] | None = None) -> torch.Tensor:
        adapters = self.adapters if adapters is None else adapters
        w = self.source[f"{layer}.weight"]
        c_out, c_in = w.shape[:2]
        if self.strategy == "lora":
            delta = (adapters[f"{layer}.lora_B"] @ adapters[f"{layer}.lora_A"]).reshape(c_out, c_in, 1, 1)
            return w + delta
        f = adapters[f"{layer}.nlt_f"].reshape(c_out, c_in, 1, 1)
        b = adapters[f"{layer}.nlt_b"].reshape(c_out, c_in, 1, 1)
        return f * w + b

    def effective_params(self, overrides: Mapping[str, torch.Tensor] | None = None):
        adapters = OrderedDict(self.adapters)
        if overrides:
            adapters.update(overrides)
        params = self.source.tensors()
        for layer in self.layers:
            params[f"{layer}.weight"] = self.effective_kernel(layer, adapters)
        return params

    def forward(self, batch: torch.Tensor, overrides=None) -> torch.Tensor:
        return cno_forward(self.effective_params(overrides), batch, self.config)

    def frozen_names(self) -> list[str]:
        return list(self.source)

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.source.entries.values())).tensor.dtype

    def clone(self) -> "AdaptedModel":
        return AdaptedModel(
            self.config,
            self.source.clone(),
            self.strategy,
            list(self.layers),
            OrderedDict((k, v.detach().clone()) for k, v in self.adapters.items()),
            self.rank,
            self.roles,
        )


def _frozen(source: Model) -> ParameterStore:
    return source.store.with_trainable(False)


def attach_lora(source: Model, rank: int = 4, roles: Sequence[str] | None = None, seed: int = 0) -> AdaptedModel:
    """Freeze ``source`` and add ``B`` (zeros, ``C x r``) and ``A`` (standard normal, ``r x 1``) per layer."""
    if rank < 1:
        raise ValueError("LoRA rank must be >= 1")
    layers = select_layers(source.config, roles)
    store = _frozen(source)
    gen = torch.Generator().manual_seed(int(seed))
    adapters: OrderedDict[str, torch.Tensor] = OrderedDict()
    for layer in layers:
        w = store[f"{layer}.weight"]
        c = w.shape[0] * w.shape[1]
        adapters[f"{layer}.lora_B"] = torch.zeros(c, rank, dtype=w.dtype)
        adapters[f"{layer}.lora_A"] = torch.randn(rank, 1, generator=gen, dtype=torch.float64).to(w.dtype)
    return AdaptedModel(source.config, store, "lora", layers, adapters, rank, tuple(roles or ROLES))


def attach_nlt(source: Model, roles: Sequence[str] | None = None) -> AdaptedModel:
    """Freeze ``source`` and add a domain factor ``f = 1`` and domain bias ``b = 0`` per kernel slice."""
    layers = select_layers(source.config, roles)
    store = _frozen(source)
    adapters: OrderedDict[str, torch.Tensor] = OrderedDict()
    for layer in layers:
        w = store[f"{layer}.weight"]
        c = w.shape[0] * w.shape[1]
        adapters[f"{layer}.nlt_f"] = torch.ones(c, dtype=w.dtype)
        adapters[f"{layer}.nlt_b"] = torch.zeros(c, dtype=w.dtype)
    return AdaptedModel(source.config, store, "nlt", layers, adapters, None, tuple(roles or ROLES))


def adapter_param_count(model: AdaptedModel) -> int:
    return sum(t.numel() for t in model.adapters.values())


def merge_adapter(adapted: AdaptedModel) -> ParameterStore:
    """Materialize the effective kernels into a plain, fully trainable store."""
    with torch.no_grad():
        params = adapted.effective_params()
    store = ParameterStore()
    roles = adapted.source.roles()
    for name, tensor in params.items():
        store.add(name, tensor.detach().clone(), roles[name], True)
    return store


def merged_model(adapted: AdaptedModel) -> Model:
    return Model(adapted.config, merge_adapter(adapted))


def save_adapter(adapted: AdaptedModel, directory: str | Path, source_hash: str | None = None) -> Path:
    """Adapter tensors plus a manifest pointing at the source by fingerprint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, tensor in adapted.adapters.items():
        save_tensor(directory / f"{name}.cnot", tensor.detach().cpu().numpy(), {"name": name})
    manifest = {
        "strategy": adapted.strategy,
        "rank": adapted.rank,
        "roles": list(adapted.roles),
        "layers": adapted.layers,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in adapted.adapters.items()],
        "source_hash": source_hash or adapted.source.fingerprint(),
    }
    path = directory / ADAPTER_MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", "utf-8")
    return path


def load_adapter(directory: str | Path, source: Model) -> AdaptedModel:
    directory = Path(directory)
    manifest = json.loads((directory / ADAPTER_MANIFEST).read_text("utf-8"))
    store = _frozen(source)
    if store.fingerprint() != manifest["source_hash"]:
        raise ValueError("adapter was trained against a different source checkpoint")
    adapters: OrderedDict[str, torch.Tensor] = OrderedDict()
    for item in manifest["tensors"]:
        data, _ = load_tensor(directory / f"{item['name']}.cnot")
        adapters[item["name"]] = torch.from_numpy(np.array(data)).to(source.dtype)
    return AdaptedModel(
        source.config, store, manifest["strategy"], manifest["layers"], adapters, manifest["rank"], tuple(manifest["roles"])
    )


__all__ = [
    "AdaptedModel",
    "FinetuneSpec",
    "adapter_param_count",
    "apply_finetune_mask",
    "attach_lora",
    "attach_nlt",
    "finetune_layers",
    "finetune_model",
    "load_adapter",
    "merge_adapter",
    "merged_model",
    "save_adapter",
    "select_layers",
]
