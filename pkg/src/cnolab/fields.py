"""Periodic grid fields, band-limited resampling, the relative L1 metric and
the on-disk tensor container.

Fields are plain numpy arrays whose last two axes are an ``s x s`` sample of a
function on the periodic unit square (row = y index, column = x index, nodes at
``i/s``). Leading axes are batch axes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CNOT"
VERSION = 1
DTYPE_FLOAT32 = 1
META_SUFFIX = ".meta"


class TensorFormatError(ValueError):
    """Raised when a tensor container on disk is malformed."""


class DegenerateReferenceError(ValueError):
    """Raised when a relative error is requested against an all-zero reference."""


def grid(s: int) -> np.ndarray:
    """Grid coordinates ``i/s`` for ``i = 0..s-1``."""
    return np.arange(s) / s


def check_field(values: np.ndarray, name: str = "field") -> np.ndarray:
    values = np.asarray(values)
    if values.ndim < 2 or values.shape[-1] != values.shape[-2]:
        raise ValueError(f"{name} must have square trailing axes, got shape {values.shape}")
    s = values.shape[-1]
    if s < 4 or s % 2:
        raise ValueError(f"{name} resolution must be even and >= 4, got {s}")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} contains non-finite values")
    return values


def _resample_axis(coeffs: np.ndarray, n: int, axis: int) -> np.ndarray:
    s = coeffs.shape[axis]
    if n == s:
        return coeffs
    coeffs = np.moveaxis(coeffs, axis, -1)
    out = np.zeros(coeffs.shape[:-1] + (n,), dtype=coeffs.dtype)
    if n > s:
        h = s // 2
        out[..., :h] = coeffs[..., :h]
        out[..., n - h + 1 :] = coeffs[..., h + 1 :]
        # unmatched Nyquist mode is split between +h and -h
        out[..., h] = 0.5 * coeffs[..., h]
        out[..., n - h] = 0.5 * coeffs[..., h]
    else:
        h = n // 2
        out[..., :h] = coeffs[..., :h]
        out[..., h + 1 :] = coeffs[..., s - h + 1 :]
        # +h and -h both alias onto the new Nyquist bin
        out[..., h] = coeffs[..., h] + coeffs[..., s - h]
    return np.moveaxis(out, -1, axis)


def fourier_resample(values: np.ndarray, new_resolution: int) -> np.ndarray:
    """Resample periodic fields to ``new_resolution`` by zero-padding or truncating
    their discrete Fourier series.

    Function values are preserved: a field that is band-limited below both
    Nyquist frequencies is sampled exactly on the new grid, and
    ``fourier_resample(fourier_resample(f, 2 * s), s) == f`` up to roundoff.
    """
    values = check_field(values)
    if new_resolution < 4 or new_resolution % 2:
        raise ValueError(f"new_resolution must be even and >= 4, got {new_resolution}")
    s = values.shape[-1]
    if new_resolution == s:
        return np.array(values, dtype=np.float64)
    coeffs = np.fft.fft2(values.astype(np.float64))
    coeffs = _resample_axis(coeffs, new_resolution, -1)
    coeffs = _resample_axis(coeffs, new_resolution, -2)
    out = np.fft.ifft2(coeffs) * (new_resolution / s) ** 2
    scale = max(np.max(np.abs(out.real)), np.finfo(float).tiny)
    if np.max(np.abs(out.imag)) > 1e-10 * scale:
        raise AssertionError("Fourier resampling produced a non-real field")
    return out.real


def relative_l1(pred: np.ndarray, truth: np.ndarray) -> np.ndarray | float:
    """Per-sample relative L1 error in percent, ``100 * sum|p - t| / sum|t|``.

    Reduces over the last two axes only, so a batch gives one value per sample.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    denom = np.abs(truth).sum(axis=(-2, -1))
    if np.any(denom == 0):
        raise DegenerateReferenceError("reference field is identically zero")
    err = 100.0 * np.abs(pred - truth).sum(axis=(-2, -1)) / denom
    return float(err) if np.ndim(err) == 0 else err


def mean_relative_l1(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean of per-sample relative L1 errors over a batch (mean of ratios)."""
    return float(np.mean(relative_l1(pred, truth)))


# --- tensor container -----------------------------------------------------


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + META_SUFFIX)


def encode_tensor(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor data must be finite")
    if data.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_FLOAT32, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 10:
        raise TensorFormatError("header: file too short")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"magic: expected {MAGIC!r}, got {blob[:4]!r}")
    version, dtype, ndim = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"version: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"dtype: unsupported dtype code {dtype}")
    offset = 10 + 4 * ndim
    if len(blob) < offset:
        raise TensorFormatError("shape: truncated dimension list")
    shape = struct.unpack_from(f"<{ndim}I", blob, 10)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(blob) - offset != expected:
        raise TensorFormatError(
            f"payload length: expected {expected} bytes, found {len(blob) - offset}"
        )
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def encode_metadata(metadata: Mapping[str, Any]) -> bytes:
    return (json.dumps(dict(metadata), indent=1, sort_keys=True) + "\n").encode("utf-8")


def save_tensor(path: str | Path, data: np.ndarray, metadata: Mapping[str, Any] | None = None) -> None:
    """Write ``data`` as float32 plus a JSON sidecar at ``path + '.meta'``."""
    path = Path(path)
    path.write_bytes(encode_tensor(data))
    meta_path(path).write_bytes(encode_metadata(metadata or {}))


def load_tensor(path: str | Path) -> tuple[np.ndarray, dict[str, Any]]:
    path = Path(path)
    data = decode_tensor(path.read_bytes())
    mpath = meta_path(path)
    metadata = json.loads(mpath.read_text("utf-8")) if mpath.exists() else {}
    return data, metadata
