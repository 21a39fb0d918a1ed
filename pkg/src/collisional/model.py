"""Declarative description of a collisional experiment.

A :class:`CycleSpec` fixes the system, the ancillae and the ordered substeps of
one collision. Everything that may depend on the collision duration (coupling
strengths, ancilla preparations, ancilla free Hamiltonians) is evaluated at the
substep duration ``tau / p``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import erf

from . import constants
from .linalg import (
    DimensionError,
    TensorLayout,
    as_operator,
    check_density,
    commutator,
    anticommutator,
    dag,
    is_hermitian,
)
from .oscillator import gaussian_ket, momentum, number, position


class ResolutionError(ValueError):
    """Grid too coarse or too narrow for the requested Gaussian width."""


class LimitError(ValueError):
    """A continuum limit could not be certified from the tau sweep."""


Series = tuple[tuple[float, float], ...]
"""Power series ``sum(c * tau**e)`` given as ``((c, e), ...)``."""


def as_series(value) -> Series:
    if value is None:
        return ()
    if isinstance(value, (int, float)):
        return ((float(value), 0.0),)
    return tuple((float(c), float(e)) for c, e in value)


def eval_series(series: Series, tau: float) -> float:
    return float(sum(c * tau**e for c, e in series))


# -- coupling schedules ------------------------------------------------------

_DELTA_WIDTH = 0.05
_DELTA_NORM = _DELTA_WIDTH * math.sqrt(2 * math.pi) * erf(0.5 / (_DELTA_WIDTH * math.sqrt(2)))

PROFILES = ("constant", "delta_like", "symmetric_bump", "ramp", "sampled")


@dataclass(frozen=True)
class CouplingSchedule:
    """Switching function with mean ``amplitude * duration**exponent``.

    ``exponent = 0`` is the weak regime (fixed mean coupling); ``exponent = -1``
    is the strong regime where ``duration * mean`` stays at ``amplitude``.
    The profile only matters for the stepped propagator.
    """

    amplitude: float = 1.0
    exponent: float = 0.0
    profile: str = "constant"
    samples: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown switching profile {self.profile!r}")
        if self.profile == "sampled":
            if not self.samples or np.mean(self.samples) == 0:
                raise ValueError("sampled profile needs samples with nonzero mean")
            object.__setattr__(self, "samples", tuple(float(s) for s in self.samples))

    def mean(self, duration: float) -> float:
        return self.amplitude * duration**self.exponent

    def shape(self, u):
        """Unit-mean profile on ``u = t / duration`` in (0, 1)."""
        u = np.asarray(u, dtype=float)
        if self.profile == "constant":
            return np.ones_like(u)
        if self.profile == "symmetric_bump":
            return 0.5 * np.pi * np.sin(np.pi * u)
        if self.profile == "ramp":
            return 2.0 * u
        if self.profile == "delta_like":
            return np.exp(-0.5 * ((u - 0.5) / _DELTA_WIDTH) ** 2) / _DELTA_NORM
        s = np.asarray(self.samples)
        idx = np.clip((u * len(s)).astype(int), 0, len(s) - 1)
        return s[idx] / s.mean()

    def __call__(self, t, duration: float):
        return self.mean(duration) * self.shape(np.asarray(t) / duration)


# -- ancilla preparations ----------------------------------------------------

class Preparation:
    """Tau-parametrized family of ancilla states.

    ``operators`` returns the ancilla operators the family itself defines
    (for instance the eigenvalue grid ``M`` of a Gaussian mixture, or the
    rescaled quadratures of an oscillator meter).
    """

    kind = "abstract"
    dim: int

    def realize(self, step: float, hbar: float = 1.0) -> np.ndarray:
        raise NotImplementedError

    def operators(self, step: float, hbar: float = 1.0) -> dict[str, np.ndarray]:
        return {}

    def pointer_basis(self, step: float, hbar: float = 1.0) -> np.ndarray | None:
        return None


@dataclass(frozen=True, eq=False)
class EigenstatePrep(Preparation):
    """Projector onto an eigenvector of ``m_op`` with the given eigenvalue."""

    m_op: np.ndarray
    eigenvalue: float
    kind = "eigenstate"

    def __post_init__(self):
        object.__setattr__(self, "m_op", as_operator(self.m_op))

    @property
    def dim(self):
        return self.m_op.shape[0]

    def realize(self, step, hbar=1.0):
        w, v = np.linalg.eigh(self.m_op)
        hits = np.flatnonzero(np.abs(w - self.eigenvalue) <= constants.EIGENSPACE_TOL)
        if hits.size == 0:
            raise ValueError(f"{self.eigenvalue} is not an eigenvalue of M (spectrum {w})")
        psi = v[:, hits[0]]
        return np.outer(psi, psi.conj())

    def operators(self, step, hbar=1.0):
        return {"M": self.m_op}


@dataclass(frozen=True, eq=False)
class GaussianMomentsPrep(Preparation):
    """Mixture diagonal in the M eigenbasis with Gaussian weights.

    With ``grid`` the eigenvalues of ``M`` are fixed and the weights are the
    Gaussian density sampled on it. Without a grid the eigenvalues follow the
    distribution: Gauss-Hermite nodes scaled to the current mean and width,
    which reproduces every moment up to order ``2 * nodes - 1`` exactly.
    """

    mean: Series = ()
    variance: Series = ((1.0, 0.0),)
    grid: tuple[float, ...] | None = None
    nodes: int = 40
    kind = "moment_gaussian"

    def __post_init__(self):
        object.__setattr__(self, "mean", as_series(self.mean))
        object.__setattr__(self, "variance", as_series(self.variance))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(x) for x in self.grid))

    @property
    def dim(self):
        return len(self.grid) if self.grid is not None else self.nodes

    def moments(self, step):
        mu = eval_series(self.mean, step)
        var = eval_series(self.variance, step)
        if var < 0:
            raise ResolutionError(f"negative variance {var:.3e} at step {step:.3e}")
        return mu, var

    def distribution(self, step) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues of M and their probabilities."""
        mu, var = self.moments(step)
        sigma = math.sqrt(var)
        if self.grid is None:
            t, w = hermgauss(self.nodes)
            return mu + math.sqrt(2.0) * sigma * t, w / math.sqrt(math.pi)
        x = np.asarray(self.grid)
        spacing = np.min(np.diff(np.sort(x)))
        span = x.max() - x.min()
        if sigma < spacing or sigma > span / 6:
            raise ResolutionError(
                f"Gaussian width {sigma:.3e} outside grid resolution [{spacing:.3e}, {span / 6:.3e}]"
            )
        w = np.exp(-0.5 * ((x - mu) / sigma) ** 2)
        return x, w / w.sum()

    def realize(self, step, hbar=1.0):
        _, p = self.distribution(step)
        return np.diag(p).astype(complex)

    def operators(self, step, hbar=1.0):
        x, _ = self.distribution(step)
        return {"M": np.diag(x).astype(complex)}


@dataclass(frozen=True, eq=False)
class OscillatorGaussianPrep(Preparation):
    """Pure Gaussian meter on a truncated oscillator.

    ``width`` is the parameter sigma of the wavefunction
    ``psi(x) ~ exp(-x**2 / (2 sigma))``. The quadratures are rescaled with the
    width (``x = sqrt(sigma) X``, ``p = hbar P / sqrt(sigma)``) so the meter
    stays near the Fock vacuum however wide it gets. ``mean_x``, ``mean_p``
    displace the state; ``squeeze`` applies ``S(zeta)`` in the rescaled frame.
    """

    dim: int
    width: Series = ((1.0, 0.0),)
    mean_x: Series = ()
    mean_p: Series = ()
    squeeze: complex = 0.0
    kind = "pure_gaussian_wavefunction"

    def __post_init__(self):
        object.__setattr__(self, "width", as_series(self.width))
        object.__setattr__(self, "mean_x", as_series(self.mean_x))
        object.__setattr__(self, "mean_p", as_series(self.mean_p))

    def sigma(self, step):
        s = eval_series(self.width, step)
        if s <= 0:
            raise ResolutionError(f"non-positive meter width {s:.3e}")
        return s

    def ket(self, step, hbar=1.0):
        length = math.sqrt(self.sigma(step))
        xm = eval_series(self.mean_x, step) / length
        pm = eval_series(self.mean_p, step) * length / hbar
        return gaussian_ket(self.dim, (xm + 1j * pm) / math.sqrt(2.0), self.squeeze)

    def realize(self, step, hbar=1.0):
        psi = self.ket(step, hbar)
        return np.outer(psi, psi.conj())

    def operators(self, step, hbar=1.0):
        length = math.sqrt(self.sigma(step))
        return {
            "x": position(self.dim, length),
            "p": momentum(self.dim, length, hbar),
            "n": number(self.dim),
        }

    def pointer_basis(self, step, hbar=1.0):
        _, v = np.linalg.eigh(position(self.dim))
        return v.astype(complex)


@dataclass(frozen=True, eq=False)
class ExplicitPrep(Preparation):
    """A fixed density matrix, independent of tau."""

    rho: np.ndarray
    kind = "explicit"

    def __post_init__(self):
        object.__setattr__(self, "rho", check_density(self.rho))

    @property
    def dim(self):
        return self.rho.shape[0]

    def realize(self, step, hbar=1.0):
        return self.rho.copy()


def realize_ancilla(prep: Preparation, tau: float, hbar: float = 1.0) -> np.ndarray:
    """Ancilla state of the family at duration ``tau`` (validated)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return check_density(prep.realize(tau, hbar))


def moment(rho: np.ndarray, m_op: np.ndarray, k: int) -> float:
    """``Tr(M^k rho)`` (real part; the imaginary part vanishes for Hermitian M)."""
    if rho.shape != m_op.shape:
        raise DimensionError(f"state {rho.shape} and operator {m_op.shape} differ")
    return float(np.real(np.trace(np.linalg.matrix_power(m_op, k) @ rho)))


# -- cycle structure ---------------------------------------------------------

@dataclass(frozen=True)
class Scaled:
    """Ancilla free-Hamiltonian term ``amplitude * step**exponent * op``."""

    op: str | np.ndarray
    amplitude: float = 1.0
    exponent: float = 0.0

    def __eq__(self, other):
        return (
            isinstance(other, Scaled)
            and _op_equal(self.op, other.op)
            and (self.amplitude, self.exponent) == (other.amplitude, other.exponent)
        )


@dataclass(frozen=True)
class AncillaState:
    rho: np.ndarray
    ops: dict[str, np.ndarray]
    m0: np.ndarray
    pointer: np.ndarray


@dataclass(frozen=True, eq=False)
class Ancilla:
    prep: Preparation
    operators: Mapping[str, np.ndarray] = field(default_factory=dict)
    m0: tuple[Scaled, ...] = ()
    pointer: str | np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "operators", {k: as_operator(v) for k, v in self.operators.items()})
        m0 = self.m0
        if isinstance(m0, np.ndarray):
            m0 = (Scaled(m0),)
        object.__setattr__(self, "m0", tuple(m0))

    @property
    def dim(self) -> int:
        return self.prep.dim

    def resolve(self, op, ops) -> np.ndarray:
        if isinstance(op, str):
            try:
                return ops[op]
            except KeyError:
                raise KeyError(f"ancilla {self.label or '?'} has no operator {op!r}") from None
        return as_operator(op, self.dim)

    def realize(self, step: float, hbar: float = 1.0) -> AncillaState:
        ops = {**self.operators, **self.prep.operators(step, hbar)}
        rho = self.prep.realize(step, hbar)
        m0 = np.zeros((self.dim, self.dim), dtype=complex)
        for term in self.m0:
            m0 = m0 + term.amplitude * step**term.exponent * self.resolve(term.op, ops)
        if self.pointer is None:
            pointer = self.prep.pointer_basis(step, hbar)
            if pointer is None:
                pointer = fourier_basis(self.dim)
        elif isinstance(self.pointer, str):
            _, pointer = np.linalg.eigh(self.resolve(self.pointer, ops))
        else:
            pointer = as_operator(self.pointer, self.dim)
        return AncillaState(rho=rho, ops=ops, m0=m0, pointer=pointer.astype(complex))


def fourier_basis(d: int) -> np.ndarray:
    """Columns are the discrete Fourier vectors, complementary to the standard basis."""
    k = np.arange(d)
    return np.exp(2j * np.pi * np.outer(k, k) / d) / math.sqrt(d)


@dataclass(frozen=True, eq=False)
class SubInteraction:
    """One ``g(t) S (x) M`` term; ``s_op`` acts on the full system space."""

    s_op: np.ndarray
    ancilla: int
    m_op: str | np.ndarray
    schedule: CouplingSchedule = CouplingSchedule()
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "s_op", as_operator(self.s_op))

    def __eq__(self, other):
        return (
            isinstance(other, SubInteraction)
            and np.array_equal(self.s_op, other.s_op)
            and self.ancilla == other.ancilla
            and _op_equal(self.m_op, other.m_op)
            and self.schedule == other.schedule
        )


def _op_equal(a, b) -> bool:
    if isinstance(a, str) or isinstance(b, str):
        return a == b
    return np.array_equal(a, b)


@dataclass(frozen=True, eq=False)
class CycleSpec:
    """Structure of one collision: ``p`` equal substeps of duration ``tau / p``.

    The joint space is ordered system factors first, then the ancillae in
    list order.
    """

    system: TensorLayout
    s0: np.ndarray
    ancillae: tuple[Ancilla, ...]
    substeps: tuple[tuple[SubInteraction, ...], ...]
    hbar: float = 1.0
    label: str = ""

    def __post_init__(self):
        system = self.system if isinstance(self.system, TensorLayout) else TensorLayout(tuple(self.system))
        object.__setattr__(self, "system", system)
        s0 = as_operator(self.s0, system.dim)
        if not is_hermitian(s0):
            raise ValueError("S0 must be Hermitian")
        object.__setattr__(self, "s0", s0)
        object.__setattr__(self, "ancillae", tuple(self.ancillae))
        substeps = tuple(tuple(s) if isinstance(s, (list, tuple)) else (s,) for s in self.substeps)
        if not substeps:
            raise ValueError("a cycle needs at least one substep")
        object.__setattr__(self, "substeps", substeps)
        for sub in substeps:
            for c in sub:
                if c.s_op.shape[0] != system.dim:
                    raise DimensionError(
                        f"system operator of dim {c.s_op.shape[0]} on a {system.dim}-dim system"
                    )
                if not is_hermitian(c.s_op):
                    raise ValueError("system coupling operators must be Hermitian")
                if not 0 <= c.ancilla < len(self.ancillae):
                    raise DimensionError(f"coupling references ancilla {c.ancilla}")

    @property
    def p(self) -> int:
        return len(self.substeps)

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def ancilla_dims(self) -> tuple[int, ...]:
        return tuple(a.dim for a in self.ancillae)

    def step(self, tau: float) -> float:
        return tau / self.p

    def couplings(self) -> list[tuple[int, SubInteraction]]:
        """All coupling terms with their (0-based) substep index."""
        return [(i, c) for i, sub in enumerate(self.substeps) for c in sub]

    def realize(self, tau: float) -> "RealizedCycle":
        step = self.step(tau)
        states = tuple(a.realize(step, self.hbar) for a in self.ancillae)
        terms = []
        for i, c in self.couplings():
            anc = self.ancillae[c.ancilla]
            m = anc.resolve(c.m_op, states[c.ancilla].ops)
            if not is_hermitian(m):
                raise ValueError("ancilla coupling operators must be Hermitian")
            terms.append(RealizedTerm(i, c.s_op, c.ancilla, m, c.schedule.mean(step), c.schedule))
        return RealizedCycle(self, tau, step, states, tuple(terms))

    def __eq__(self, other):
        if not isinstance(other, CycleSpec):
            return NotImplemented
        return structurally_equal(self, other)

    __hash__ = None


def structurally_equal(a, b) -> bool:
    """Field-by-field equality through dataclasses, containers and arrays."""
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
    if hasattr(a, "__dataclass_fields__"):
        if type(a) is not type(b):
            return False
        return all(structurally_equal(getattr(a, f), getattr(b, f)) for f in a.__dataclass_fields__)
    if isinstance(a, Mapping):
        return isinstance(b, Mapping) and a.keys() == b.keys() and all(structurally_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return (
            isinstance(b, (list, tuple)) and len(a) == len(b)
            and all(structurally_equal(x, y) for x, y in zip(a, b))
        )
    return a == b


@dataclass(frozen=True)
class RealizedTerm:
    substep: int
    s_op: np.ndarray
    ancilla: int
    m_op: np.ndarray
    gbar: float
    schedule: CouplingSchedule


@dataclass(frozen=True)
class RealizedCycle:
    """A cycle with every tau-dependent quantity evaluated."""

    cycle: CycleSpec
    tau: float
    step: float
    ancillae: tuple[AncillaState, ...]
    terms: tuple[RealizedTerm, ...]

    def pair_moment(self, a: RealizedTerm, b: RealizedTerm) -> complex:
        """``<M_a M_b>`` in the product state of the ancillae."""
        if a.ancilla == b.ancilla:
            rho = self.ancillae[a.ancilla].rho
            return complex(np.trace(a.m_op @ b.m_op @ rho))
        return self.mean(a) * self.mean(b)

    def mean(self, a: RealizedTerm) -> complex:
        return complex(np.trace(a.m_op @ self.ancillae[a.ancilla].rho))


# -- second-order coefficients and their limits ------------------------------

def coefficients(cycle: CycleSpec, tau: float) -> dict[str, np.ndarray]:
    """Finite-tau values of the potential, noise and feedback coefficients.

    For couplings ``a, b`` with mean strengths ``g_a, g_b`` and substep duration
    ``s``: ``xi_a = g_a <M_a>``, ``gamma_ab = s g_a g_b <{M_a, M_b}> / 4``,
    ``mtilde_ab = s g_a g_b <i[M_a, M_b]> / (4 hbar)`` and
    ``mtilde0_a = s g_a <i[M_a, M0]> / (4 hbar)``.
    """
    rc = cycle.realize(tau)
    hbar = cycle.hbar
    terms = rc.terms
    n = len(terms)
    xi = np.array([t.gbar * rc.mean(t).real for t in terms])
    gamma = np.zeros((n, n))
    mtilde = np.zeros((n, n))
    mtilde0 = np.zeros(n)
    for a, ta in enumerate(terms):
        anc = rc.ancillae[ta.ancilla]
        c0 = 1j * commutator(ta.m_op, anc.m0)
        mtilde0[a] = rc.step * ta.gbar * np.real(np.trace(c0 @ anc.rho)) / (4 * hbar)
        for b, tb in enumerate(terms):
            ab, ba = rc.pair_moment(ta, tb), rc.pair_moment(tb, ta)
            scale = rc.step * ta.gbar * tb.gbar / 4
            gamma[a, b] = scale * (ab + ba).real
            mtilde[a, b] = scale * (1j * (ab - ba)).real / hbar
    return {"xi": xi, "gamma": gamma, "mtilde": mtilde, "mtilde0": mtilde0}


@dataclass(frozen=True)
class Extrapolation:
    value: np.ndarray
    residual: float
    diverges: bool
    established: bool
    slope: float


def extrapolate(taus: Sequence[float], values, order: int = constants.RICHARDSON_ORDER) -> Extrapolation:
    """Polynomial (Richardson) extrapolation of ``values(tau)`` to ``tau -> 0``.

    The residual is the change of the extrapolant when the coarsest point is
    dropped. A sequence whose norm grows with log-log slope below
    ``DIVERGENCE_SLOPE`` over the finest three points is flagged divergent.
    """
    taus = np.asarray(taus, dtype=float)
    vals = np.asarray(values)
    if len(taus) < 3:
        raise ValueError("extrapolation needs at least three tau values")
    order_idx = np.argsort(-taus)
    taus, vals = taus[order_idx], vals[order_idx]
    n = len(taus)
    flat = vals.reshape(n, -1)

    def fit(t, v, deg):
        V = np.vander(t / t[0], deg + 1, increasing=True)
        coef, *_ = np.linalg.lstsq(V, v, rcond=None)
        return coef[0]

    deg = min(order, n - 1)
    full = fit(taus, flat, deg)
    reduced = fit(taus[1:], flat[1:], min(deg, n - 2))
    residual = float(np.max(np.abs(full - reduced), initial=0.0))
    norms = np.linalg.norm(flat, axis=1)
    fine = slice(n - 3, n)
    if np.all(norms[fine] > 0):
        slope = float(np.polyfit(np.log(taus[fine]), np.log(norms[fine]), 1)[0])
    else:
        slope = 0.0
    diverges = slope < constants.DIVERGENCE_SLOPE and norms[-1] > norms[0]
    scale = float(norms.max())
    established = (not diverges) and residual <= constants.ESTABLISH_RTOL * scale + 1e-14
    # a power-law decay already below tolerance at the finest point converges to zero
    decaying = slope >= 0.5 and norms[-1] <= constants.ESTABLISH_RTOL * scale
    if decaying and not established:
        full = np.zeros_like(full)
        residual = float(norms[-1])
        established = True
    return Extrapolation(full.reshape(vals.shape[1:]), residual, bool(diverges), bool(established), slope)


def vanishes(ex: Extrapolation, samples) -> bool:
    scale = float(np.max(np.abs(np.asarray(samples)), initial=0.0))
    return ex.established and float(np.max(np.abs(ex.value), initial=0.0)) <= constants.VANISH_RTOL * scale + 1e-12


@dataclass(frozen=True)
class LimitSet:
    """Continuum limits of the second-order coefficients, one index per coupling."""

    xi: np.ndarray
    gamma: np.ndarray
    mtilde: np.ndarray
    mtilde0: np.ndarray
    residuals: dict[str, float]
    divergent: tuple[str, ...]
    unestablished: tuple[str, ...]
    taus: tuple[float, ...]

    @property
    def ok(self) -> bool:
        return not self.divergent and not self.unestablished


def check_sweep(taus: Sequence[float]) -> tuple[float, ...]:
    taus = tuple(float(t) for t in taus)
    if len(taus) < 3:
        raise ValueError("tau sweep needs at least 3 points")
    if any(t <= 0 for t in taus) or any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("tau sweep must be positive and strictly decreasing")
    if taus[0] / taus[-1] < 100 * (1 - 1e-12):
        raise ValueError("tau sweep must span at least two decades")
    return taus


def limit_set(cycle: CycleSpec, taus: Sequence[float]) -> LimitSet:
    """Extrapolate every coefficient of :func:`coefficients` to ``tau -> 0``.

    Entries that diverge or whose extrapolation is not stable are listed in
    ``divergent`` / ``unestablished`` and reported as NaN.
    """
    taus = check_sweep(taus)
    samples = [coefficients(cycle, t) for t in taus]
    out, residuals, divergent, unestablished = {}, {}, [], []
    for name in ("xi", "gamma", "mtilde", "mtilde0"):
        stack = np.array([s[name] for s in samples])
        value = np.full(stack.shape[1:], np.nan)
        for idx in np.ndindex(*stack.shape[1:]):
            series = stack[(slice(None),) + idx]
            key = f"{name}{list(idx)}"
            ex = extrapolate(taus, series)
            residuals[key] = ex.residual
            if ex.diverges:
                divergent.append(key)
            elif not ex.established:
                unestablished.append(key)
            else:
                value[idx] = float(np.real(ex.value))
        out[name] = value
    return LimitSet(
        out["xi"], out["gamma"], out["mtilde"], out["mtilde0"],
        residuals, tuple(divergent), tuple(unestablished), taus,
    )


def moment_gram(rho: np.ndarray, ops: Sequence[np.ndarray], gbars: Sequence[float]) -> np.ndarray:
    """``G_ij = g_i g_j <M_i M_j>``; positive semidefinite for every state."""
    n = len(ops)
    g = np.empty((n, n), dtype=complex)
    for i in range(n):
        for j in range(n):
            g[i, j] = gbars[i] * gbars[j] * np.trace(ops[i] @ ops[j] @ rho)
    return g


def feedback_noise_margin(rho, m1, m2, g1, g2) -> float:
    """``<(g1 M1 - i g2 M2)(g1 M1 + i g2 M2)>``, nonnegative for every state."""
    a = g1 * m1 - 1j * g2 * m2
    return float(np.real(np.trace(a @ dag(a) @ rho)))
