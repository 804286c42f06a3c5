"""Periodic Gaussian random fields with a power-law spectrum.

Fourier coefficients are i.i.d. standard complex normals scaled by
``sigma * (4 pi^2 |k|^2 + tau^2) ** (-alpha / 2)``, with the mean mode set to
zero, so the spectral density is ``sigma^2 (4 pi^2 |k|^2 + tau^2) ** -alpha``.
``sigma`` multiplies the square-root eigenvalue (it sits outside the square
root). One-dimensional draws are ordered by wavenumber, so the same seed at a
finer resolution reproduces the coarse field plus additional high modes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

OOD_SETTINGS: dict[str, dict[str, float]] = {
    "smooth": {"alpha": 3.5},
    "low-freq": {"tau": 10.0},
    "smooth+amp": {"alpha": 3.0, "sigma": 61.25},
    "smooth+low-tau": {"alpha": 3.5, "tau": 5.0},
}


@dataclass(frozen=True)
class GrfParams:
    """Parameters of a periodic GRF on the unit interval or square.

    ``alpha`` is the smoothness exponent, ``tau`` the inverse length scale and
    ``sigma`` the amplitude. ``sigma=None`` selects ``tau ** (alpha - dim / 2)``.
    """

    dim: int = 1
    resolution: int = 128
    alpha: float = 2.5
    tau: float = 7.0
    sigma: float | None = 49.0
    seed: int = 0

    @property
    def amplitude(self) -> float:
        if self.sigma is None:
            return float(self.tau ** (self.alpha - self.dim / 2.0))
        return float(self.sigma)

    def validate(self) -> "GrfParams":
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if not self.alpha > self.dim / 2.0:
            raise ValueError(f"alpha={self.alpha} must exceed dim/2 for finite variance")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.amplitude < 0:
            raise ValueError("sigma must be non-negative")
        return self


def ood_variant(base: GrfParams, setting: str) -> GrfParams:
    """Shifted generator: only the parameters named by ``setting`` change."""
    try:
        changes = OOD_SETTINGS[setting]
    except KeyError:
        raise ValueError(f"unknown OOD setting {setting!r}; choose from {sorted(OOD_SETTINGS)}") from None
    return dataclasses.replace(base, **changes)


def spectral_scale(params: GrfParams, k2: np.ndarray) -> np.ndarray:
    """Square root of the spectral density at squared wavenumber ``k2``."""
    return params.amplitude * (4.0 * np.pi**2 * k2 + params.tau**2) ** (-params.alpha / 2.0)


def _rng(params: GrfParams, index: int) -> np.random.Generator:
    return np.random.default_rng([params.seed, index])


def grf_coefficients_1d(params: GrfParams, index: int = 0) -> np.ndarray:
    """Complex coefficients ``c_k`` for ``k = 0 .. res//2`` (``c_0`` and Nyquist are zero)."""
    res = params.resolution
    kmax = res // 2 - 1
    z = _rng(params, index).standard_normal((max(kmax, 0), 2))
    k = np.arange(1, kmax + 1)
    c = np.zeros(res // 2 + 1, dtype=np.complex128)
    c[1 : kmax + 1] = spectral_scale(params, k**2.0) * (z[:, 0] + 1j * z[:, 1]) / np.sqrt(2.0)
    return c


def sample_grf(params: GrfParams, index: int = 0) -> np.ndarray:
    """One field on the periodic grid ``x_j = j / res``; ``index`` selects an independent draw."""
    params.validate()
    res = params.resolution
    if params.amplitude == 0.0:
        return np.zeros((res,) * params.dim)
    if params.dim == 1:
        return np.fft.irfft(grf_coefficients_1d(params, index), n=res) * res
    k = np.fft.fftfreq(res, d=1.0 / res)
    k2 = k[:, None] ** 2 + k[None, :] ** 2
    z = _rng(params, index).standard_normal((res, res, 2))
    coeff = spectral_scale(params, k2) * (z[..., 0] + 1j * z[..., 1]) / np.sqrt(2.0)
    coeff[0, 0] = 0.0
    return np.fft.ifft2(coeff).real * res * res


def sample_grf_batch(params: GrfParams, n: int, start: int = 0) -> np.ndarray:
    """Stack of ``n`` independent draws with indices ``start .. start+n-1``."""
    return np.stack([sample_grf(params, start + i) for i in range(n)])


def eval_grf_1d(params: GrfParams, x: np.ndarray, index: int = 0) -> np.ndarray:
    """Evaluate the trigonometric series of a 1-D draw at arbitrary points ``x``."""
    params.validate()
    c = grf_coefficients_1d(params, index)
    k = np.arange(c.size)
    phase = np.exp(2j * np.pi * np.multiply.outer(np.asarray(x, dtype=float), k))
    return 2.0 * (phase @ c).real
