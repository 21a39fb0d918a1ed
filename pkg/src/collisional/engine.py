"""Exact repeated-interaction dynamics.

One collision couples the system to freshly prepared ancillae for ``p``
substeps and then discards the ancillae. The reduced map is kept in Kraus
form: the ancilla state is split into pure components, the joint unitary is
applied to ``system (x) component`` and the ancilla output is projected onto a
pointer basis. The same Kraus operators give the unconditional channel (sum
over outcomes) and the conditional, measured update (one outcome).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from . import constants
from .linalg import DimensionError, NumericError, dag, is_hermitian, kron, unitary
from .model import CycleSpec, RealizedCycle, ResolutionError, extrapolate, check_sweep
from .oscillator import top_population

DENSE_LIMIT = 1024
"""Joint dimensions above this use sparse exponential actions instead of dense unitaries."""


# -- joint-space Hamiltonians ------------------------------------------------

def _embed_sparse(ops: Mapping[int, np.ndarray], dims: Sequence[int]):
    factors = [sp.csr_matrix(ops[i]) if i in ops else sp.identity(d, format="csr") for i, d in enumerate(dims)]
    out = factors[0]
    for f in factors[1:]:
        out = sp.kron(out, f, format="csr")
    return out


def joint_dims(cycle: CycleSpec) -> tuple[int, ...]:
    """Factor dims of the joint space: the whole system first, then each ancilla."""
    return (cycle.dim,) + cycle.ancilla_dims


def free_hamiltonian(rc: RealizedCycle):
    dims = joint_dims(rc.cycle)
    h = _embed_sparse({0: rc.cycle.s0}, dims)
    for a, anc in enumerate(rc.ancillae):
        if np.any(anc.m0):
            h = h + _embed_sparse({1 + a: anc.m0}, dims)
    return h


def substep_hamiltonian(rc: RealizedCycle, substep: int, gains: Sequence[float] | None = None):
    """``H0 + sum_c g_c S_c (x) M_c`` for the couplings of one substep (sparse).

    ``gains`` overrides the mean couplings, in the order the substep lists them.
    """
    dims = joint_dims(rc.cycle)
    terms = [t for t in rc.terms if t.substep == substep]
    if gains is None:
        gains = [t.gbar for t in terms]
    h = free_hamiltonian(rc)
    for t, g in zip(terms, gains):
        if g:
            h = h + g * _embed_sparse({0: t.s_op, 1 + t.ancilla: t.m_op}, dims)
    return h


def _propagate(h, vectors: np.ndarray, duration: float, hbar: float) -> np.ndarray:
    """``exp(-i h duration / hbar) @ vectors``."""
    if h.shape[0] <= DENSE_LIMIT:
        return unitary(h.toarray(), duration, hbar) @ vectors
    return expm_multiply((-1j * duration / hbar) * h.tocsc(), vectors)


def substep_slices(rc: RealizedCycle, substep: int, slices: int):
    """Midpoint-sampled Hamiltonians of a stepped substep, in time order."""
    dims = joint_dims(rc.cycle)
    terms = [t for t in rc.terms if t.substep == substep]
    h0 = free_hamiltonian(rc)
    couplings = [_embed_sparse({0: t.s_op, 1 + t.ancilla: t.m_op}, dims) for t in terms]
    dt = rc.step / slices
    mid = (np.arange(slices) + 0.5) * dt
    gains = np.array([c.schedule(mid, rc.step) for c in terms]).reshape(len(terms), slices)
    for k in range(slices):
        h = h0
        for g, v in zip(gains[:, k], couplings):
            if g:
                h = h + float(g) * v
        yield h, dt


def apply_cycle(rc: RealizedCycle, vectors: np.ndarray, stepped: int | None = None) -> np.ndarray:
    """Apply the full cycle unitary ``U_p ... U_1`` to joint-space vectors."""
    hbar = rc.cycle.hbar
    out = vectors
    for i in range(rc.cycle.p):
        if stepped is None:
            out = _propagate(substep_hamiltonian(rc, i), out, rc.step, hbar)
        else:
            for h, dt in substep_slices(rc, i, stepped):
                out = _propagate(h, out, dt, hbar)
    return out


def cycle_unitary(cycle: CycleSpec, tau: float, stepped: int | None = None) -> np.ndarray:
    """Dense joint unitary of one collision (small joint spaces only)."""
    rc = cycle.realize(tau)
    n = int(np.prod(joint_dims(cycle)))
    return apply_cycle(rc, np.eye(n, dtype=complex), stepped)


def stepped_propagator(cycle: CycleSpec, tau: float, slices: int, substep: int = 0) -> np.ndarray:
    """Ordered product of ``slices`` piecewise-constant exponentials for one substep."""
    if slices < 2:
        raise ValueError("stepped propagator needs at least 2 slices")
    rc = cycle.realize(tau)
    dims = joint_dims(cycle)
    terms = [t for t in rc.terms if t.substep == substep]
    h0 = free_hamiltonian(rc).toarray()
    couplings = np.array([_embed_sparse({0: t.s_op, 1 + t.ancilla: t.m_op}, dims).toarray() for t in terms])
    dt = rc.step / slices
    mid = (np.arange(slices) + 0.5) * dt
    gains = np.array([c.schedule(mid, rc.step) for c in terms]).reshape(len(terms), slices)
    u = np.eye(len(h0), dtype=complex)
    for k in range(slices):
        h = h0 + np.tensordot(gains[:, k], couplings, axes=1)
        u = unitary(h, dt, cycle.hbar) @ u
    return u


def mean_propagator(cycle: CycleSpec, tau: float, substep: int = 0) -> np.ndarray:
    rc = cycle.realize(tau)
    return unitary(substep_hamiltonian(rc, substep).toarray(), rc.step, cycle.hbar)


# -- the reduced channel -----------------------------------------------------

def _pure_components(rho: np.ndarray, cutoff: float = 1e-15) -> np.ndarray:
    """Columns ``sqrt(p_j) |phi_j>`` with ``rho = sum_j |.><.|``."""
    w, v = np.linalg.eigh(0.5 * (rho + dag(rho)))
    keep = w > cutoff * max(w.max(), 1.0)
    return v[:, keep] * np.sqrt(w[keep])


@dataclass(frozen=True)
class Channel:
    """Kraus form of one collision.

    ``kraus[x, j]`` is the system operator for pointer outcome ``x`` and
    ancilla purification index ``j``.
    """

    kraus: np.ndarray
    tau: float
    outcomes: int

    @property
    def dim(self) -> int:
        return self.kraus.shape[-1]

    def _flat(self):
        return self.kraus.reshape(-1, self.dim, self.dim)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        k = self._flat()
        return np.einsum("kij,jl,kml->im", k, rho, k.conj(), optimize=True)

    def conditional(self, rho: np.ndarray, outcome: int) -> np.ndarray:
        """Unnormalized post-measurement state for one pointer outcome."""
        k = self.kraus[outcome]
        return np.einsum("kij,jl,kml->im", k, rho, k.conj(), optimize=True)

    def probabilities(self, rho: np.ndarray) -> np.ndarray:
        kr = np.einsum("xkij,jl->xkil", self.kraus, rho, optimize=True)
        p = np.einsum("xkil,xkil->x", kr, self.kraus.conj(), optimize=True).real
        return np.clip(p, 0.0, None)

    def superoperator(self) -> np.ndarray:
        """Matrix acting on row-major ``rho.ravel()``."""
        k = self._flat()
        return np.einsum("kij,kml->imjl", k, k.conj()).reshape(self.dim**2, self.dim**2)


def _check_leakage(rc: RealizedCycle) -> None:
    for a, (spec, state) in enumerate(zip(rc.cycle.ancillae, rc.ancillae)):
        if spec.prep.kind == "pure_gaussian_wavefunction":
            top = top_population(state.rho)
            if top > constants.LEAKAGE_TOL:
                raise ResolutionError(
                    f"ancilla {a} truncation leaks {top:.2e} into its top levels; raise its dimension"
                )


def build_channel(cycle: CycleSpec, tau: float, stepped: int | None = None) -> Channel:
    """Kraus operators of the collision at duration ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rc = cycle.realize(tau)
    _check_leakage(rc)
    ds = cycle.dim
    comps = [_pure_components(s.rho) for s in rc.ancillae]
    phi = kron(*comps) if comps else np.ones((1, 1), dtype=complex)
    d_anc, r = phi.shape
    # columns (s, j): |s> (x) phi_j
    start = np.kron(np.eye(ds), phi)
    w = apply_cycle(rc, start, stepped)
    pointer = kron(*[s.pointer for s in rc.ancillae]) if rc.ancillae else np.ones((1, 1))
    w = w.reshape(ds, d_anc, ds, r)
    kraus = np.einsum("ax,sajr->xrsj", pointer.conj(), w, optimize=True)
    return Channel(np.ascontiguousarray(kraus), tau, d_anc)


def _check_state(rho: np.ndarray, dim: int) -> np.ndarray:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (dim, dim):
        raise DimensionError(f"state of shape {rho.shape} does not match system dimension {dim}")
    return rho


def collide_once(rho: np.ndarray, cycle: CycleSpec, tau: float, stepped: int | None = None) -> np.ndarray:
    """One collision: joint unitary on ``rho (x) ancillae``, then trace out the ancillae."""
    rho = _check_state(rho, cycle.dim)
    out = build_channel(cycle, tau, stepped).apply(rho)
    _check_step(out, 1)
    return out


def collide_joint(rho: np.ndarray, cycle: CycleSpec, tau: float) -> np.ndarray:
    """Reference collision computed on the full joint density matrix.

    Slow; kept as an independent route for tests.
    """
    rho = _check_state(rho, cycle.dim)
    rc = cycle.realize(tau)
    joint = kron(rho, *[s.rho for s in rc.ancillae])
    u = cycle_unitary(cycle, tau)
    out = u @ joint @ dag(u)
    d_anc = int(np.prod(cycle.ancilla_dims))
    return np.trace(out.reshape(cycle.dim, d_anc, cycle.dim, d_anc), axis1=1, axis2=3)


def _check_step(rho: np.ndarray, k: int) -> None:
    drift = abs(np.trace(rho) - 1.0)
    if not np.isfinite(drift) or drift > max(k * constants.TRACE_DRIFT_PER_STEP, constants.STRUCTURAL_TOL):
        raise NumericError(f"trace drift {drift:.2e} after {k} collisions")


# -- iteration ---------------------------------------------------------------

@dataclass
class EvolutionTrace:
    times: np.ndarray
    states: list[np.ndarray]
    observables: dict[str, np.ndarray]
    tau: float
    n: int
    extra: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _expectations(observables, rho):
    return {k: complex(np.trace(op @ rho)) for k, op in observables.items()}


def _finish_series(series: dict[str, list], observables) -> dict[str, np.ndarray]:
    out = {}
    for k, vals in series.items():
        arr = np.array(vals)
        out[k] = arr.real if is_hermitian(observables[k]) else arr
    return out


def iterate_channel(
    rho0: np.ndarray,
    step: Callable[[np.ndarray], np.ndarray],
    n: int,
    tau: float,
    observables: Mapping[str, np.ndarray] | None = None,
    record_every: int = 1,
) -> EvolutionTrace:
    """Apply ``step`` ``n`` times, recording states every ``record_every`` steps."""
    if n < 1:
        raise ValueError("n must be at least 1")
    observables = dict(observables or {})
    rho = np.asarray(rho0, dtype=complex)
    times, states = [0.0], [rho]
    series = {k: [v] for k, v in _expectations(observables, rho).items()}
    for k in range(1, n + 1):
        rho = step(rho)
        _check_step(rho, k)
        if k % record_every == 0 or k == n:
            times.append(k * tau)
            states.append(rho)
            for name, v in _expectations(observables, rho).items():
                series[name].append(v)
    return EvolutionTrace(np.array(times), states, _finish_series(series, observables), tau, n)


def evolve(
    rho0: np.ndarray,
    cycle: CycleSpec,
    T: float,
    n: int,
    observables: Mapping[str, np.ndarray] | None = None,
    stepped: int | None = None,
    record_every: int = 1,
) -> EvolutionTrace:
    """``n`` collisions of duration ``T / n``.

    The ancilla family is re-realized for every collision; since it depends
    only on tau the Kraus operators are computed once and reused.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rho0 = _check_state(rho0, cycle.dim)
    tau = T / n
    ch = build_channel(cycle, tau, stepped)
    return iterate_channel(rho0, ch.apply, n, tau, observables, record_every)


def composite_evolve(rho0, cycle: CycleSpec, T: float, n: int, **kwargs) -> EvolutionTrace:
    """Evolution of a two-body system with two meters and two substeps.

    Checks the cross-coupling structure: two system factors, two ancillae and
    two substeps in which each ancilla meets each subsystem once.
    """
    if len(cycle.system) != 2 or len(cycle.ancillae) != 2 or cycle.p != 2:
        raise DimensionError("composite evolution needs two subsystems, two ancillae and two substeps")
    return evolve(rho0, cycle, T, n, **kwargs)


def free_evolution(rho0: np.ndarray, h: np.ndarray, times: Sequence[float], hbar: float = 1.0) -> list[np.ndarray]:
    out = []
    for t in times:
        u = unitary(h, t, hbar)
        out.append(u @ rho0 @ dag(u))
    return out


# -- generator estimates -----------------------------------------------------

@dataclass(frozen=True)
class GeneratorEstimate:
    value: np.ndarray
    residual: float
    diverges: bool
    established: bool
    samples: np.ndarray


def tau_sweep(fn: Callable[[float], object], taus: Sequence[float], workers: int | None = None) -> list:
    """Evaluate ``fn`` over a tau sweep; results keep the order of ``taus``."""
    if workers is None or workers <= 1:
        return [fn(t) for t in taus]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, taus))


def generator_estimate(cycle: CycleSpec, rho: np.ndarray, taus: Sequence[float], workers=None) -> GeneratorEstimate:
    """``(V(tau)[rho] - rho) / tau`` extrapolated to ``tau -> 0``."""
    taus = _check_taus(taus)
    rho = _check_state(rho, cycle.dim)
    samples = np.array(tau_sweep(lambda t: (build_channel(cycle, t).apply(rho) - rho) / t, taus, workers))
    ex = extrapolate(taus, samples)
    return GeneratorEstimate(ex.value, ex.residual, ex.diverges, ex.established, samples)


def generator_superoperator(cycle: CycleSpec, taus: Sequence[float], workers=None) -> GeneratorEstimate:
    """Extrapolated ``(V(tau) - 1) / tau`` as a matrix on row-major ``rho.ravel()``."""
    taus = _check_taus(taus)
    eye = np.eye(cycle.dim**2)
    samples = np.array(tau_sweep(lambda t: (build_channel(cycle, t).superoperator() - eye) / t, taus, workers))
    ex = extrapolate(taus, samples)
    return GeneratorEstimate(ex.value, ex.residual, ex.diverges, ex.established, samples)


def _check_taus(taus):
    taus = tuple(float(t) for t in taus)
    if len(taus) < 3 or any(b >= a for a, b in zip(taus, taus[1:])) or taus[-1] <= 0:
        raise ValueError("tau list must be positive, strictly decreasing, with at least 3 entries")
    return taus


__all__ = [
    "Channel", "EvolutionTrace", "GeneratorEstimate", "build_channel", "collide_once", "collide_joint",
    "composite_evolve", "cycle_unitary", "evolve", "free_evolution", "generator_estimate",
    "generator_superoperator", "iterate_channel", "joint_dims", "mean_propagator", "stepped_propagator",
    "substep_hamiltonian", "tau_sweep", "check_sweep",
]
