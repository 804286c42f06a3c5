"""Grid coordinates and numerical spatial derivatives.

Periodic grids are ``x_j = j / n`` on the unit interval or square and are
differentiated spectrally. Bounded grids are ``x_j = j / (n - 1)`` including
both boundaries and use second-order central differences (one-sided at the
boundary).
"""
from __future__ import annotations

import numpy as np


def coords(n: int, periodic: bool) -> np.ndarray:
    return np.arange(n) / n if periodic else np.linspace(0.0, 1.0, n)


def spacing(n: int, periodic: bool) -> float:
    return 1.0 / n if periodic else 1.0 / (n - 1)


def wavenumbers(n: int) -> np.ndarray:
    """Angular wavenumbers ``2 pi k`` in FFT order for a unit-period grid."""
    return 2.0 * np.pi * np.fft.fftfreq(n, d=1.0 / n)


def spectral_grad(u: np.ndarray, ndim: int) -> np.ndarray:
    """Spectral gradient over the trailing ``ndim`` axes; components stacked last."""
    axes = tuple(range(-ndim, 0))
    uh = np.fft.fftn(u, axes=axes)
    comps = []
    for ax in axes:
        n = u.shape[ax]
        k = wavenumbers(n)
        if n % 2 == 0:
            k[n // 2] = 0.0
        shape = [1] * u.ndim
        shape[ax] = n
        comps.append(np.fft.ifftn(1j * k.reshape(shape) * uh, axes=axes).real)
    return np.stack(comps, axis=-1)


def spectral_laplacian(u: np.ndarray, ndim: int) -> np.ndarray:
    axes = tuple(range(-ndim, 0))
    uh = np.fft.fftn(u, axes=axes)
    k2 = np.zeros([u.shape[a] for a in axes])
    for i, ax in enumerate(axes):
        k = wavenumbers(u.shape[ax]) ** 2
        shape = [1] * ndim
        shape[i] = k.size
        k2 = k2 + k.reshape(shape)
    return np.fft.ifftn(-k2 * uh, axes=axes).real


def fd_grad(u: np.ndarray, ndim: int) -> np.ndarray:
    """Central-difference gradient on a bounded grid (second-order one-sided edges)."""
    comps = []
    for ax in range(-ndim, 0):
        h = spacing(u.shape[ax], periodic=False)
        comps.append(np.gradient(u, h, axis=ax, edge_order=2))
    return np.stack(comps, axis=-1)


def fd_laplacian(u: np.ndarray, ndim: int) -> np.ndarray:
    """Five-point (or three-point) Laplacian; boundary rows use the adjacent interior value."""
    out = np.zeros_like(u)
    inner = (Ellipsis,) + (slice(1, -1),) * ndim
    for ax in range(-ndim, 0):
        h = spacing(u.shape[ax], periodic=False)
        out[inner] += (np.roll(u, -1, axis=ax) - 2.0 * u + np.roll(u, 1, axis=ax))[inner] / h**2
    for ax in range(-ndim, 0):
        idx_lo = [slice(None)] * u.ndim
        idx_in = [slice(None)] * u.ndim
        idx_lo[ax], idx_in[ax] = 0, 1
        out[tuple(idx_lo)] = out[tuple(idx_in)]
        idx_lo[ax], idx_in[ax] = -1, -2
        out[tuple(idx_lo)] = out[tuple(idx_in)]
    return out


def grad(u: np.ndarray, ndim: int, periodic: bool) -> np.ndarray:
    return spectral_grad(u, ndim) if periodic else fd_grad(u, ndim)


def laplacian(u: np.ndarray, ndim: int, periodic: bool) -> np.ndarray:
    return spectral_laplacian(u, ndim) if periodic else fd_laplacian(u, ndim)


def shift_field(u: np.ndarray, shift: tuple[int, ...], periodic: bool) -> np.ndarray:
    """Values at ``x_j - shift * h``: periodic wrap, or edge clamping on bounded grids."""
    ndim = len(shift)
    if periodic:
        return np.roll(u, shift, axis=tuple(range(-ndim, 0)))
    out = u
    for ax, s in zip(range(-ndim, 0), shift):
        n = u.shape[ax]
        idx = np.clip(np.arange(n) - s, 0, n - 1)
        out = np.take(out, idx, axis=ax)
    return out


def valid_mask(shape: tuple[int, ...], shift: tuple[int, ...], periodic: bool) -> np.ndarray:
    """Points whose shifted anchor lies inside a bounded grid (all points if periodic)."""
    mask = np.ones(shape, dtype=bool)
    if periodic:
        return mask
    for ax, s in zip(range(-len(shift), 0), shift):
        n = shape[ax]
        j = np.arange(n) - s
        ok = (j >= 0) & (j <= n - 1)
        sh = [1] * len(shape)
        sh[ax] = n
        mask = mask & ok.reshape(sh)
    return mask
