"""Dense operator toolkit: tensor products, partial traces, exponentials, distances.

Operators are plain complex ``numpy`` arrays. Density matrices are arrays that
pass :func:`check_density`. Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .constants import COMPARISON_RTOL, HERMITIAN_RTOL, STRUCTURAL_TOL


class DimensionError(ValueError):
    """Operator shape inconsistent with a declared layout."""


class NumericError(ArithmeticError):
    """Non-finite input or a violated numerical invariant."""


@dataclass(frozen=True)
class TensorLayout:
    """Ordered factor dimensions of a tensor-product space."""

    factor_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.factor_dims)
        if not dims or any(d < 1 for d in dims):
            raise DimensionError(f"invalid factor dims {self.factor_dims!r}")
        object.__setattr__(self, "factor_dims", dims)

    @property
    def dim(self) -> int:
        return int(np.prod(self.factor_dims))

    def __len__(self):
        return len(self.factor_dims)

    def check(self, a: np.ndarray) -> None:
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != self.dim:
            raise DimensionError(
                f"operator of shape {a.shape} does not match layout {self.factor_dims}"
            )


def as_operator(a, dim: int | None = None) -> np.ndarray:
    op = np.asarray(a, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {op.shape}")
    if dim is not None and op.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {op.shape[0]}")
    return op


def dag(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


def is_hermitian(a: np.ndarray, rtol: float = HERMITIAN_RTOL) -> bool:
    scale = max(np.linalg.norm(a, 2), 1.0) if a.size else 1.0
    return bool(np.max(np.abs(a - dag(a)), initial=0.0) <= rtol * scale)


def kron(*ops: np.ndarray) -> np.ndarray:
    """Kronecker product; ``kron(a, b)[(i,k),(j,l)] = a[i,j] * b[k,l]``."""
    if not ops:
        raise ValueError("kron needs at least one operator")
    return reduce(np.kron, (np.asarray(o, dtype=complex) for o in ops))


def embed(op: np.ndarray, index: int, dims: Sequence[int]) -> np.ndarray:
    """Place ``op`` on factor ``index`` of a product space, identity elsewhere."""
    dims = tuple(dims)
    if op.shape != (dims[index], dims[index]):
        raise DimensionError(f"operator {op.shape} does not fit factor {index} of {dims}")
    left = int(np.prod(dims[:index]))
    right = int(np.prod(dims[index + 1:]))
    return np.kron(np.kron(np.eye(left), op), np.eye(right))


def partial_trace(a: np.ndarray, layout: TensorLayout | Sequence[int], keep: Iterable[int]) -> np.ndarray:
    """Trace out every factor not listed in ``keep``.

    The kept factors appear in their original order.
    """
    if not isinstance(layout, TensorLayout):
        layout = TensorLayout(tuple(layout))
    a = np.asarray(a)
    layout.check(a)
    keep = sorted(set(int(k) for k in keep))
    n = len(layout)
    if any(k < 0 or k >= n for k in keep):
        raise DimensionError(f"keep indices {keep} out of range for {n} factors")
    dims = layout.factor_dims
    t = a.reshape(dims + dims)
    traced = [k for k in range(n) if k not in keep]
    # contract the highest axes first so lower axis numbers stay valid
    for k in sorted(traced, reverse=True):
        m = t.ndim // 2
        t = np.trace(t, axis1=k, axis2=k + m)
    d_keep = int(np.prod([dims[k] for k in keep])) if keep else 1
    return t.reshape(d_keep, d_keep)


def expm(a: np.ndarray) -> np.ndarray:
    """Matrix exponential.

    Anti-Hermitian input (the generator of a unitary) is exponentiated through
    the eigendecomposition of the Hermitian matrix ``i a``; anything else goes
    to scaling-and-squaring with a Padé approximant.
    """
    a = np.asarray(a, dtype=complex)
    if not np.all(np.isfinite(a)):
        raise NumericError("expm: non-finite entries")
    if a.shape == (0, 0):
        return a.copy()
    h = 1j * a
    if is_hermitian(h):
        h = 0.5 * (h + dag(h))
        w, v = np.linalg.eigh(h)
        return (v * np.exp(-1j * w)) @ dag(v)
    return scipy.linalg.expm(a)


def unitary(h: np.ndarray, t: float, hbar: float = 1.0) -> np.ndarray:
    """``exp(-i h t / hbar)`` for Hermitian ``h``."""
    return expm(-1j * (t / hbar) * np.asarray(h, dtype=complex))


def check_density(rho: np.ndarray, tol: float = STRUCTURAL_TOL) -> np.ndarray:
    """Validate a density matrix (unit trace, Hermitian, positive) and return it."""
    rho = as_operator(rho)
    if not np.all(np.isfinite(rho)):
        raise NumericError("density matrix has non-finite entries")
    tr = np.trace(rho)
    if abs(tr - 1.0) > tol:
        raise NumericError(f"trace {tr.real:.3e} differs from 1")
    if np.max(np.abs(rho - dag(rho)), initial=0.0) > tol:
        raise NumericError("density matrix is not Hermitian")
    lam = np.linalg.eigvalsh(0.5 * (rho + dag(rho)))
    if lam[0] < -tol:
        raise NumericError(f"density matrix has eigenvalue {lam[0]:.3e}")
    return rho


def is_density(rho: np.ndarray, tol: float = STRUCTURAL_TOL) -> bool:
    try:
        check_density(rho, tol)
    except (NumericError, DimensionError):
        return False
    return True


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the trace norm of ``rho - sigma``."""
    rho, sigma = np.asarray(rho), np.asarray(sigma)
    if rho.shape != sigma.shape:
        raise DimensionError(f"shape mismatch {rho.shape} vs {sigma.shape}")
    return 0.5 * float(np.sum(np.linalg.svd(rho - sigma, compute_uv=False)))


def purity(rho: np.ndarray) -> float:
    rho = np.asarray(rho)
    return float(np.real(np.vdot(rho.conj().T, rho)))


def expectation(op: np.ndarray, rho: np.ndarray) -> complex:
    return complex(np.trace(op @ rho))


def partial_transpose(rho: np.ndarray, dims: Sequence[int], index: int) -> np.ndarray:
    dims = tuple(dims)
    n = len(dims)
    t = np.asarray(rho).reshape(dims + dims)
    axes = list(range(2 * n))
    axes[index], axes[index + n] = axes[index + n], axes[index]
    d = int(np.prod(dims))
    return t.transpose(axes).reshape(d, d)


def negativity(rho: np.ndarray, dims: Sequence[int], index: int = 0) -> float:
    """Sum of the absolute negative eigenvalues of the partial transpose."""
    lam = np.linalg.eigvalsh(partial_transpose(rho, dims, index))
    return float(-np.sum(lam[lam < 0]))


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex).ravel()
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random mixed state from a Ginibre matrix of the given rank."""
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ dag(g)
    return rho / np.trace(rho)


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (g + dag(g))


def allclose_scaled(a: np.ndarray, b: np.ndarray, rtol: float = COMPARISON_RTOL) -> bool:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1.0)
    return bool(np.max(np.abs(a - b), initial=0.0) <= rtol * scale)


PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def spin(j: float, axis: str) -> np.ndarray:
    """Spin-``j`` angular momentum component (units of hbar = 1), basis m = j, j-1, ..., -j."""
    d = int(round(2 * j + 1))
    m = j - np.arange(d)
    if axis == "z":
        return np.diag(m).astype(complex)
    # <m+1|J+|m> = sqrt(j(j+1) - m(m+1))
    jp = np.diag(np.sqrt(j * (j + 1) - m[1:] * (m[1:] + 1)), 1).astype(complex)
    if axis == "x":
        return 0.5 * (jp + dag(jp))
    if axis == "y":
        return -0.5j * (jp - dag(jp))
    raise ValueError(f"unknown spin axis {axis!r}")
