"""Convolutional neural operator.

A U-Net of circular convolutions whose nonlinearities are applied on a
Fourier-oversampled grid and whose resolution changes are exact spectral
resampling, so the network maps band-limited fields to band-limited fields.

The network is written functionally: :func:`cno_forward` takes a mapping from
parameter names to tensors. That keeps adapters (which rewrite kernels) and the
plain model on one code path.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .fields import load_tensor, relative_l1, save_tensor

ROLES = ("lifting", "encoder", "bottleneck", "decoder", "projection")


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class CnoConfig:
    levels: int = 3
    lifting_channels: int = 32
    channel_multiplier: int = 2
    kernel_size: int = 3
    res_blocks_per_level: int = 2
    bottleneck_res_blocks: int = 4
    leaky_slope: float = 0.01
    activation_oversampling: int = 2
    in_channels: int = 1
    out_channels: int = 1
    # inputs at other resolutions are resampled to this one and back
    native_resolution: int | None = None
    # affine normalization fixed at pretraining: x -> (x - in_shift) / in_scale
    in_shift: float = 0.0
    in_scale: float = 1.0
    out_shift: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be a positive odd integer")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.activation_oversampling < 1:
            raise ValueError("activation_oversampling must be >= 1")
        if self.in_scale <= 0 or self.out_scale <= 0:
            raise ValueError("normalization scales must be positive")

    def channels(self, level: int) -> int:
        return self.lifting_channels * self.channel_multiplier**level

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CnoConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown CNO config keys: {sorted(unknown)}")
        return cls(**data)


# --- parameter store -------------------------------------------------------


@dataclass
class Entry:
    tensor: torch.Tensor
    trainable: bool
    role: str


@dataclass
class ParameterStore:
    """Ordered ``name -> Entry`` map with per-entry trainable flags and role tags."""

    entries: "OrderedDict[str, Entry]" = field(default_factory=OrderedDict)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name].tensor

    def add(self, name: str, tensor: torch.Tensor, role: str, trainable: bool = True):
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.entries[name] = Entry(tensor, trainable, role)

    def tensors(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, e.tensor) for k, e in self.entries.items())

    def trainable_names(self) -> list[str]:
        return [k for k, e in self.entries.items() if e.trainable]

    def roles(self) -> dict[str, str]:
        return {k: e.role for k, e in self.entries.items()}

    def clone(self) -> "ParameterStore":
        return ParameterStore(
            OrderedDict((k, Entry(e.tensor.detach().clone(), e.trainable, e.role)) for k, e in self.entries.items())
        )

    def with_trainable(self, flags: Mapping[str, bool] | bool) -> "ParameterStore":
        """Copy sharing tensor values, with trainable flags replaced."""
        out = self.clone()
        for k, e in out.entries.items():
            e.trainable = bool(flags) if isinstance(flags, bool) else bool(flags.get(k, False))
        return out

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        out = self.clone()
        for e in out.entries.values():
            e.tensor = e.tensor.to(dtype)
        return out

    def fingerprint(self, names=None) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in names if names is not None else self.entries:
            h.update(k.encode())
            h.update(self.entries[k].tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def count_params(store: ParameterStore, trainable_only: bool = False) -> int:
    return sum(e.tensor.numel() for e in store.entries.values() if e.trainable or not trainable_only)


# --- layout ----------------------------------------------------------------


def conv_layout(config: CnoConfig) -> "OrderedDict[str, tuple[int, int, str]]":
    """Every convolution as ``name -> (c_out, c_in, role)``, in forward order."""
    layers: OrderedDict[str, tuple[int, int, str]] = OrderedDict()
    c0 = config.channels(0)
    layers["lift"] = (c0, config.in_channels, "lifting")
    for lvl in range(config.levels):
        c = config.channels(lvl)
        for r in range(config.res_blocks_per_level):
            layers[f"enc{lvl}.res{r}.conv1"] = (c, c, "encoder")
            layers[f"enc{lvl}.res{r}.conv2"] = (c, c, "encoder")
        layers[f"enc{lvl}.down"] = (config.channels(lvl + 1), c, "encoder")
    cb = config.channels(config.levels)
    for r in range(config.bottleneck_res_blocks):
        layers[f"bottleneck.res{r}.conv1"] = (cb, cb, "bottleneck")
        layers[f"bottleneck.res{r}.conv2"] = (cb, cb, "bottleneck")
    for lvl in reversed(range(config.levels)):
        c = config.channels(lvl)
        layers[f"dec{lvl}.fuse"] = (c, config.channels(lvl + 1) + c, "decoder")
        for r in range(config.res_blocks_per_level):
            layers[f"dec{lvl}.res{r}.conv1"] = (c, c, "decoder")
            layers[f"dec{lvl}.res{r}.conv2"] = (c, c, "decoder")
    layers["proj"] = (config.out_channels, c0, "projection")
    return layers


def decoder_block_layers(config: CnoConfig, block: int) -> list[str]:
    """Convolutions of decoder block ``block``, counted from the output end (0 = last)."""
    return [name for name in conv_layout(config) if name.startswith(f"dec{block}.")]


def cno_init(config: CnoConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParameterStore:
    """Uniform fan-in initialization, ``|w| <= sqrt(6 / fan_in)``; zero biases.

    Second convolutions of residual branches are drawn at a reduced scale so the
    stacked identity shortcuts do not inflate activations at initialization.
    """
    gen = torch.Generator().manual_seed(int(seed))
    k = config.kernel_size
    layers = conv_layout(config)
    n_res = sum(1 for name in layers if name.endswith("conv2"))
    store = ParameterStore()
    for name, (c_out, c_in, role) in layers.items():
        fan_in = c_in * k * k
        bound = math.sqrt(6.0 / fan_in)
        if name.endswith("conv2"):
            bound /= math.sqrt(max(n_res, 1))
        w = (torch.rand((c_out, c_in, k, k), generator=gen, dtype=torch.float64) * 2 - 1) * bound
        store.add(f"{name}.weight", w.to(dtype), role)
        store.add(f"{name}.bias", torch.zeros(c_out, dtype=dtype), role)
    return store


# --- spectral resampling ---------------------------------------------------


def _resample_spectrum(x: torch.Tensor, n: int, nyquist_weight: float) -> torch.Tensor:
    """Zero-pad or truncate the 2D spectrum of real ``x`` to ``n x n``.

    The unmatched Nyquist bin is copied to both +-h with ``nyquist_weight`` on
    upsampling, and the +-h pair is summed and weighted on downsampling.
    Standard resampling uses 1/2 up and 1 down; the adjoint swaps them.
    """
    s = x.shape[-1]
    X = torch.fft.rfft2(x)
    if n > s:
        h = s // 2
        # the rfft axis is zero-padded by irfft2 itself
        X = X.clone() if nyquist_weight != 1.0 else X
        if nyquist_weight != 1.0:
            X[..., h] *= nyquist_weight
        nyq = X[..., h : h + 1, :] * nyquist_weight
        pad = X.new_zeros(X.shape[:-2] + (n - s - 1, X.shape[-1]))
        Y = torch.cat([X[..., :h, :], nyq, pad, nyq, X[..., h + 1 :, :]], dim=-2)
    else:
        h = n // 2
        X = X[..., : h + 1]
        nyq = nyquist_weight * (X[..., h : h + 1, :] + X[..., s - h : s - h + 1, :])
        Y = torch.cat([X[..., :h, :], nyq, X[..., s - h + 1 :, :]], dim=-2)
        neg = (-torch.arange(n)) % n
        Y[..., :, h] = nyquist_weight * (Y[..., :, h] + torch.conj(Y[..., neg, h]))
    return torch.fft.irfft2(Y, s=(n, n)) * (n / s) ** 2


class _SpectralResample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, n):
        ctx.s = x.shape[-1]
        up = n > ctx.s
        ctx.adjoint_weight = 0.5 if up else 1.0
        return _resample_spectrum(x, n, 0.5 if up else 1.0)

    @staticmethod
    def backward(ctx, grad):
        n = grad.shape[-1]
        return _resample_spectrum(grad, ctx.s, ctx.adjoint_weight) * (n / ctx.s) ** 2, None


def spectral_resample(x: torch.Tensor, n: int) -> torch.Tensor:
    """Torch twin of :func:`cnolab.fields.fourier_resample` with an exact adjoint."""
    if n == x.shape[-1]:
        return x
    return _SpectralResample.apply(x, n)


def alias_free_activation(x: torch.Tensor, slope: float, oversampling: int) -> torch.Tensor:
    """Leaky rectifier evaluated on an ``oversampling``-times finer grid."""
    if oversampling == 1:
        return F.leaky_relu(x, slope)
    s = x.shape[-1]
    up = spectral_resample(x, s * oversampling)
    return spectral_resample(F.leaky_relu(up, slope), s)


# --- forward ---------------------------------------------------------------


def conv(x: torch.Tensor, params: Mapping[str, torch.Tensor], name: str) -> torch.Tensor:
    w = params[f"{name}.weight"]
    p = w.shape[-1] // 2
    if p:
        x = F.pad(x, (p, p, p, p), mode="circular")
    return F.conv2d(x, w, params[f"{name}.bias"])


def _res_block(h, params, name, config):
    act = alias_free_activation(conv(h, params, f"{name}.conv1"), config.leaky_slope, config.activation_oversampling)
    return h + conv(act, params, f"{name}.conv2")


def _as_tensors(params) -> Mapping[str, torch.Tensor]:
    return params.tensors() if isinstance(params, ParameterStore) else params


def cno_forward(params, batch: torch.Tensor, config: CnoConfig) -> torch.Tensor:
    """Map a batch of fields ``(B, s, s)`` to predictions of the same shape."""
    params = _as_tensors(params)
    squeeze = batch.dim() == 2
    x = batch[None] if squeeze else batch
    s = x.shape[-1]
    native = config.native_resolution or s
    # the coarsest grid must itself be even for spectral resampling
    if native % (2 ** (config.levels + 1)):
        raise ValueError(f"resolution {native} is not divisible by 2^{config.levels + 1}")
    if s % 2 or x.shape[-2] != s:
        raise ValueError(f"expected square even-resolution fields, got {tuple(x.shape[-2:])}")
    x = spectral_resample(x, native)
    h = ((x - config.in_shift) / config.in_scale)[:, None]
    h = conv(h, params, "lift")
    skips = []
    for lvl in range(config.levels):
        for r in range(config.res_blocks_per_level):
            h = _res_block(h, params, f"enc{lvl}.res{r}", config)
        skips.append(h)
        h = alias_free_activation(conv(h, params, f"enc{lvl}.down"), config.leaky_slope, config.activation_oversampling)
        h = spectral_resample(h, h.shape[-1] // 2)
    for r in range(config.bottleneck_res_blocks):
        h = _res_block(h, params, f"bottleneck.res{r}", config)
    for lvl in reversed(range(config.levels)):
        h = spectral_resample(h, h.shape[-1] * 2)
        h = conv(torch.cat([h, skips[lvl]], dim=1), params, f"dec{lvl}.fuse")
        for r in range(config.res_blocks_per_level):
            h = _res_block(h, params, f"dec{lvl}.res{r}", config)
        h = alias_free_activation(h, config.leaky_slope, config.activation_oversampling)
    y = conv(h, params, "proj")[:, 0] * config.out_scale + config.out_shift
    y = spectral_resample(y, s)
    return y[0] if squeeze else y


def relative_l1_torch(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Per-sample relative L1 in percent (differentiable)."""
    return 100.0 * (pred - truth).abs().sum(dim=(-2, -1)) / truth.abs().sum(dim=(-2, -1))


def loss_and_gradients(model, batch_in: torch.Tensor, batch_out: torch.Tensor):
    """Mean per-sample relative L1 and its gradient for every trainable tensor.

    ``model`` is a :class:`Model` or an adapted model from
    :mod:`cnolab.adapters`.
    """
    trainable = model.trainable()
    leaves = {k: t.detach().requires_grad_(True) for k, t in trainable.items()}
    pred = model.forward(batch_in, overrides=leaves)
    per_sample = relative_l1_torch(pred, batch_out)
    bad = ~torch.isfinite(per_sample)
    if bad.any():
        idx = int(torch.nonzero(bad)[0])
        raise NumericError(f"non-finite loss for sample {idx}")
    loss = per_sample.mean()
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True) if leaves else ()
    out = OrderedDict()
    for (k, leaf), g in zip(leaves.items(), grads):
        out[k] = torch.zeros_like(leaf) if g is None else g
    return float(loss.detach()), out


# --- model wrappers --------------------------------------------------------


@dataclass
class Model:
    """A plain CNO: config plus parameter store."""

    config: CnoConfig
    store: ParameterStore

    def trainable(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, self.store[k]) for k in self.store.trainable_names())

    def decay_flags(self) -> dict[str, bool]:
        return {k: k.endswith(".weight") for k in self.store.trainable_names()}

    def assign(self, values: Mapping[str, torch.Tensor]):
        for k, v in values.items():
            self.store.entries[k].tensor = v.detach().clone()

    def effective_params(self, overrides: Mapping[str, torch.Tensor] | None = None):
        params = self.store.tensors()
        if overrides:
            params.update(overrides)
        return params

    def forward(self, batch: torch.Tensor, overrides=None) -> torch.Tensor:
        return cno_forward(self.effective_params(overrides), batch, self.config)

    def frozen_names(self) -> list[str]:
        return [k for k, e in self.store.entries.items() if not e.trainable]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.store.entries.values())).tensor.dtype

    def clone(self) -> "Model":
        return Model(self.config, self.store.clone())


def predict(model, inputs, batch_size: int = 32) -> np.ndarray:
    """Evaluate ``model`` on a numpy batch without gradients."""
    dtype = model.dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(inputs), batch_size):
            x = torch.as_tensor(np.asarray(inputs[i : i + batch_size]), dtype=dtype)
            outs.append(model.forward(x).numpy())
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(np.shape(inputs)[1:]))


def evaluate(model, inputs, outputs, batch_size: int = 32) -> float:
    """Mean per-sample relative L1 (percent) of ``model`` on a dataset."""
    if len(inputs) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(relative_l1(predict(model, inputs, batch_size), np.asarray(outputs, dtype=np.float64))))


# --- checkpoints -----------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(model: Model, directory: str | Path, extra: Mapping | None = None) -> Path:
    """One tensor container per parameter plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, e in model.store.entries.items():
        save_tensor(directory / f"{name}.cnot", e.tensor.detach().cpu().numpy(), {"name": name, "role": e.role})
        entries.append({"name": name, "shape": list(e.tensor.shape), "role": e.role, "trainable": e.trainable})
    manifest = {"config": model.config.to_dict(), "entries": entries, **(dict(extra) if extra else {})}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", "utf-8")
    return path


def load_checkpoint(directory: str | Path, dtype: torch.dtype = torch.float32) -> tuple[Model, dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text("utf-8"))
    store = ParameterStore()
    for item in manifest["entries"]:
        data, _ = load_tensor(directory / f"{item['name']}.cnot")
        if list(data.shape) != item["shape"]:
            raise ValueError(f"shape mismatch for {item['name']}")
        store.add(item["name"], torch.from_numpy(np.array(data)).to(dtype), item["role"], item["trainable"])
    return Model(CnoConfig.from_dict(manifest["config"]), store), manifest
