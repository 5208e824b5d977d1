"""Random initial-condition samplers.

``sample_sine_ic`` draws the sine-series family controlled by a complexity
cutoff K; ``sample_ns_ic`` draws a mean-zero random truncated Fourier series for
vorticity. Both have a ``*_from_coefficients`` twin so tests can force the
coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..fields import grid


@dataclass(frozen=True)
class SineIcSpec:
    K: int
    seed: int
    resolution: int = 64

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.resolution < 4 or self.resolution % 2:
            raise ValueError("resolution must be even and >= 4")


@dataclass(frozen=True)
class NsIcSpec:
    seed: int
    resolution: int = 64
    mode_cutoff: int = 5
    amplitude_std: float = 1.0

    def __post_init__(self):
        if self.mode_cutoff < 1:
            raise ValueError("mode_cutoff must be >= 1")
        if self.mode_cutoff >= self.resolution // 2:
            raise ValueError(
                f"mode_cutoff {self.mode_cutoff} must be below resolution/2 = {self.resolution // 2}"
            )
        if self.amplitude_std <= 0:
            raise ValueError("amplitude_std must be positive")


def sine_coefficients(spec: SineIcSpec) -> np.ndarray:
    """``a[i-1, j-1] ~ U[-1, 1]`` drawn row-major over ``(i, j)``."""
    rng = np.random.default_rng(spec.seed)
    return rng.uniform(-1.0, 1.0, size=(spec.K, spec.K))


def sine_ic_from_coefficients(a: np.ndarray, resolution: int) -> np.ndarray:
    """``(pi/K^2) sum_ij a_ij / (i^2 + j^2) sin(i pi x) sin(j pi y)`` on the grid.

    ``i`` indexes the x mode and ``j`` the y mode; the result is indexed ``[y, x]``.
    """
    a = np.asarray(a, dtype=np.float64)
    K = a.shape[0]
    modes = np.arange(1, K + 1)
    x = grid(resolution)
    basis = np.sin(np.pi * modes[:, None] * x[None, :])
    weights = a / (modes[:, None] ** 2 + modes[None, :] ** 2)
    return (np.pi / K**2) * np.einsum("ij,ix,jy->yx", weights, basis, basis)


def sine_ic_bound(K: int) -> float:
    """Triangle-inequality bound on ``max |u0|`` over all coefficient draws."""
    modes = np.arange(1, K + 1)
    return float(np.pi / K**2 * np.sum(1.0 / (modes[:, None] ** 2 + modes[None, :] ** 2)))


def sample_sine_ic(spec: SineIcSpec) -> np.ndarray:
    return sine_ic_from_coefficients(sine_coefficients(spec), spec.resolution)


def ns_coefficients(spec: NsIcSpec) -> np.ndarray:
    """Hermitian-symmetric complex Gaussian coefficients on the full ``fft2`` grid.

    Modes with ``0 < max(|m|, |n|) <= mode_cutoff`` are populated; the mean mode
    is zero.
    """
    s, k0 = spec.resolution, spec.mode_cutoff
    rng = np.random.default_rng(spec.seed)
    box = 2 * k0 + 1
    draw = (rng.standard_normal((box, box)) + 1j * rng.standard_normal((box, box))) / np.sqrt(2)
    # pairing a draw with its mirror keeps each coefficient standard complex normal
    herm = (draw + np.conj(draw[::-1, ::-1])) / np.sqrt(2)
    herm[k0, k0] = 0.0
    coeffs = np.zeros((s, s), dtype=np.complex128)
    idx = np.arange(-k0, k0 + 1) % s
    coeffs[np.ix_(idx, idx)] = herm
    return coeffs


def ns_ic_from_coefficients(coeffs: np.ndarray, amplitude_std: float = 1.0) -> np.ndarray:
    field = np.fft.ifft2(coeffs)
    scale = np.max(np.abs(field)) if field.size else 0.0
    if scale == 0:
        return np.zeros(coeffs.shape)
    if np.max(np.abs(field.imag)) > 1e-12 * scale:
        raise AssertionError("coefficients are not Hermitian-symmetric")
    field = field.real
    field -= field.mean()
    return field * (amplitude_std / field.std())


def sample_ns_ic(spec: NsIcSpec) -> np.ndarray:
    return ns_ic_from_coefficients(ns_coefficients(spec), spec.amplitude_std)
