"""Truncated harmonic-oscillator operators and Gaussian states in the Fock basis."""

from __future__ import annotations

import numpy as np

from .linalg import dag, expm


def annihilation(d: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, d, dtype=float)), 1).astype(complex)


def number(d: int) -> np.ndarray:
    return np.diag(np.arange(d, dtype=float)).astype(complex)


def position(d: int, length: float = 1.0) -> np.ndarray:
    """``x = length * (a + a^dag) / sqrt(2)``; the ground state has <x^2> = length^2 / 2."""
    a = annihilation(d)
    return length * (a + dag(a)) / np.sqrt(2.0)


def momentum(d: int, length: float = 1.0, hbar: float = 1.0) -> np.ndarray:
    """Conjugate of :func:`position`: ``[x, p] = i hbar`` away from the top level."""
    a = annihilation(d)
    return (hbar / length) * (a - dag(a)) / (1j * np.sqrt(2.0))


def gaussian_ket(d: int, alpha: complex = 0.0, zeta: complex = 0.0, pad: int = 40) -> np.ndarray:
    """Displaced squeezed vacuum ``D(alpha) S(zeta) |0>`` truncated to ``d`` levels.

    Built in a padded space so truncation only cuts the tail; the result is
    renormalized after truncation.
    """
    n = d + pad
    a = annihilation(n)
    ket = np.zeros(n, dtype=complex)
    ket[0] = 1.0
    if zeta:
        ket = expm(0.5 * (np.conj(zeta) * a @ a - zeta * dag(a) @ dag(a))) @ ket
    if alpha:
        ket = expm(alpha * dag(a) - np.conj(alpha) * a) @ ket
    ket = ket[:d]
    return ket / np.linalg.norm(ket)


def top_population(rho: np.ndarray, levels: int = 2) -> float:
    """Population in the highest ``levels`` Fock states of a single-mode state."""
    diag = np.real(np.diag(rho))
    return float(np.sum(diag[-levels:]))
