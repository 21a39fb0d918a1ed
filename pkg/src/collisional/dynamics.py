"""Continuum limits of the collisional dynamics.

Regime classification from the tau scaling of the ancilla moments, the
master equation that the collisions converge to, a fixed-step RK4 integrator
for it, closed forms for the Zeno regime and the exact-unitarity predicate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import dblquad

from . import constants
from .engine import EvolutionTrace, _expectations, _finish_series
from .linalg import NumericError, anticommutator, commutator, dag, expm, is_hermitian
from .model import (
    CouplingSchedule,
    CycleSpec,
    LimitSet,
    Preparation,
    check_sweep,
    extrapolate,
    limit_set,
    vanishes,
)


class StepSizeError(ValueError):
    """Integrator step exceeds the stability bound."""


class Regime(str, Enum):
    EXACT_UNITARY = "ExactUnitary"
    EFFECTIVE_UNITARY = "EffectiveUnitary"
    FINITE_DECOHERENCE = "FiniteDecoherence"
    ZENO = "Zeno"
    UNDETERMINED = "Undetermined"


# -- exact unitarity ----------------------------------------------------------

@dataclass(frozen=True)
class UnitarityCheck:
    passed: bool
    violated: str | None
    magnitude: float
    eigenvalue: float

    def __bool__(self):
        return self.passed


def eigenspace_projector(m_op: np.ndarray, value: float, tol: float = constants.EIGENSPACE_TOL) -> np.ndarray:
    w, v = np.linalg.eigh(m_op)
    sel = v[:, np.abs(w - value) <= tol]
    return sel @ dag(sel)


def check_exact_unitarity(state, m_op: np.ndarray, m0: np.ndarray | None = None, tau: float = 1.0, hbar: float = 1.0) -> UnitarityCheck:
    """Does a collision with this ancilla act on the system by a unitary alone?

    It does iff (i) the ancilla state lives in one eigenspace of ``M`` and
    (ii) ``M0`` maps that eigenspace into itself. The witness names the first
    violated condition and how large the violation is.
    """
    rho = state.realize(tau, hbar) if isinstance(state, Preparation) else np.asarray(state, dtype=complex)
    m_op = np.asarray(m_op, dtype=complex)
    m = float(np.real(np.trace(m_op @ rho)))
    w, v = np.linalg.eigh(m_op)
    # snap to the nearest eigenvalue so tiny mixing does not hide the eigenspace
    m = float(w[np.argmin(np.abs(w - m))])
    p = eigenspace_projector(m_op, m)
    q = np.eye(len(p)) - p
    leak = float(np.linalg.norm(q @ rho))
    if leak > constants.EIGENSPACE_TOL:
        return UnitarityCheck(False, "support", leak, m)
    if m0 is not None:
        mix = float(np.linalg.norm(q @ m0 @ p, 2))
        if mix > constants.EIGENSPACE_TOL:
            return UnitarityCheck(False, "invariance", mix, m)
    return UnitarityCheck(True, None, max(leak, 0.0), m)


def cycle_exact_unitarity(cycle: CycleSpec, tau: float) -> UnitarityCheck:
    """The predicate for every coupling of a cycle at one tau."""
    rc = cycle.realize(tau)
    worst = UnitarityCheck(True, None, 0.0, 0.0)
    for t in rc.terms:
        anc = rc.ancillae[t.ancilla]
        res = check_exact_unitarity(anc.rho, t.m_op, anc.m0)
        if not res.passed:
            return res
        worst = res if res.magnitude > worst.magnitude else worst
    return worst


# -- regime classification ---------------------------------------------------

@dataclass
class RegimeReport:
    regime: Regime
    limits: LimitSet | None
    certificate: dict[str, bool] = field(default_factory=dict)
    k_range: tuple[int, int] = (2, constants.K_MAX_DEFAULT)
    details: dict[str, float] = field(default_factory=dict)


def scaled_moments(cycle: CycleSpec, tau: float, k_max: int) -> np.ndarray:
    """``Y[c, k] = s**(k-1) g**k <M**k>`` for k = 1..k_max, one row per coupling.

    ``Y[:, 1]`` is the potential coefficient; ``Y[:, 2]`` is twice the noise
    coefficient; higher k measure the non-Gaussian remainder of a collision.
    """
    rc = cycle.realize(tau)
    out = np.zeros((len(rc.terms), k_max + 1))
    for c, t in enumerate(rc.terms):
        rho = rc.ancillae[t.ancilla].rho
        mk = np.eye(len(rho), dtype=complex)
        for k in range(1, k_max + 1):
            mk = mk @ t.m_op
            out[c, k] = rc.step ** (k - 1) * t.gbar**k * np.real(np.trace(mk @ rho))
    return out


def classify_regime(cycle: CycleSpec, taus: Sequence[float], k_max: int = constants.K_MAX_DEFAULT) -> RegimeReport:
    """Decide which continuum limit a tau sweep is heading to."""
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    taus = check_sweep(taus)
    cert: dict[str, bool] = {}
    details: dict[str, float] = {}
    checks = [cycle_exact_unitarity(cycle, t) for t in taus]
    cert["exact_unitary"] = all(c.passed for c in checks)
    limits = limit_set(cycle, taus)
    if cert["exact_unitary"]:
        return RegimeReport(Regime.EXACT_UNITARY, limits, cert, (2, k_max), details)

    y = np.array([scaled_moments(cycle, t, k_max) for t in taus])
    n_c = y.shape[1]
    diverge2, finite2, nonzero2, higher_vanish, all_vanish, xi_ok = False, True, False, True, True, True
    for c in range(n_c):
        ex_xi = extrapolate(taus, y[:, c, 1])
        xi_ok &= ex_xi.established
        for k in range(2, k_max + 1):
            ex = extrapolate(taus, y[:, c, k])
            van = vanishes(ex, y[:, c, k])
            details[f"Y{k}[{c}]"] = float(ex.value) if ex.established else math.nan
            if k == 2:
                diverge2 |= ex.diverges
                finite2 &= ex.established
                nonzero2 |= ex.established and not van
            else:
                higher_vanish &= van
            all_vanish &= van
    cert.update(
        zeno=diverge2, noise_finite=finite2, noise_nonzero=nonzero2,
        higher_orders_vanish=higher_vanish, all_orders_vanish=all_vanish, potential_finite=xi_ok,
    )
    if diverge2:
        regime = Regime.ZENO
    elif finite2 and nonzero2 and higher_vanish and xi_ok:
        regime = Regime.FINITE_DECOHERENCE
    elif all_vanish and xi_ok:
        regime = Regime.EFFECTIVE_UNITARY
    else:
        regime = Regime.UNDETERMINED
    return RegimeReport(regime, limits, cert, (2, k_max), details)


# -- master equations ----------------------------------------------------------

@dataclass
class MasterEquationSpec:
    """``d rho/dt = -(i/hbar)[h_eff, rho] + dissipators + feedback``.

    A dissipator ``(A, B, r)`` contributes ``-(r / hbar**2) [A, [B, rho]]``; a
    feedback term ``(A, B, r)`` contributes ``+(i r / hbar) [A, B rho + rho B]``.
    """

    h_eff: np.ndarray
    dissipators: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    feedback: list[tuple[np.ndarray, np.ndarray, float]] = field(default_factory=list)
    hbar: float = 1.0

    def __post_init__(self):
        self.h_eff = np.asarray(self.h_eff, dtype=complex)
        if not is_hermitian(self.h_eff):
            raise ValueError("effective Hamiltonian must be Hermitian")
        for terms in (self.dissipators, self.feedback):
            for _, _, r in terms:
                if not np.isfinite(r) or np.iscomplexobj(r) and np.imag(r) != 0:
                    raise ValueError("rates must be finite reals")

    @property
    def dim(self) -> int:
        return self.h_eff.shape[0]

    def rhs(self, rho: np.ndarray) -> np.ndarray:
        hb = self.hbar
        out = (-1j / hb) * commutator(self.h_eff, rho)
        for a, b, r in self.dissipators:
            out = out - (r / hb**2) * commutator(a, commutator(b, rho))
        for a, b, r in self.feedback:
            out = out + (1j * r / hb) * commutator(a, anticommutator(b, rho))
        return out

    __call__ = rhs

    def liouvillian(self) -> np.ndarray:
        """Matrix of :meth:`rhs` on row-major ``rho.ravel()``."""
        d = self.dim
        basis = np.eye(d * d, dtype=complex)
        return np.stack([self.rhs(e.reshape(d, d)).ravel() for e in basis], axis=1)

    def norm_bound(self) -> float:
        """Upper bound on the operator norm of the generator."""
        hb = self.hbar
        nrm = lambda x: np.linalg.norm(x, 2)
        bound = 2 * nrm(self.h_eff) / hb
        bound += sum(4 * abs(r) * nrm(a) * nrm(b) for a, b, r in self.dissipators) / hb**2
        bound += sum(4 * abs(r) * nrm(a) * nrm(b) for a, b, r in self.feedback) / hb
        return float(bound)

    def rate(self, a: np.ndarray, b: np.ndarray | None = None) -> float:
        """Total dissipator rate on ``[a, [b, .]]`` (``b`` defaults to ``a``)."""
        b = a if b is None else b
        return float(sum(r for x, y, r in self.dissipators if np.array_equal(x, a) and np.array_equal(y, b)))


def _ordering_weight(i: int, j: int) -> float:
    if i == j:
        return 0.5
    return 1.0 if i > j else 0.0


def build_master_equation(cycle: CycleSpec, limits: LimitSet, drop_below: float = 0.0) -> MasterEquationSpec:
    """Second-order continuum limit of a cycle from its coefficient limits.

    With substep duration ``s = tau / p`` and coupling ``c`` in substep
    ``i_c`` (counted from 1):

    * potential: ``(1/p) xi_c S_c``, shifted by ``-(4 i_c - 2)/p * mtilde0_c S_c``;
    * noise: ``(2 w_ab / p) gamma_ab`` on ``[S_a, [S_b, .]]``;
    * feedback: ``(2 w_ab / p) mtilde_ab`` on ``[S_a, S_b . + . S_b]``;

    where ``w_ab`` is 1/2 within a substep, 1 if ``a`` acts after ``b`` and 0
    otherwise. A single substep reproduces ``S0 + (xi - 2 mtilde0) S`` with
    noise ``gamma`` on ``[S, [S, .]]``.
    """
    if limits.divergent:
        raise ValueError(f"no Lindblad limit: divergent coefficients {', '.join(limits.divergent)}")
    if limits.unestablished:
        raise ValueError(f"limits not established: {', '.join(limits.unestablished)}")
    p = cycle.p
    couplings = cycle.couplings()
    h = cycle.s0.copy()
    for c, (i, sub) in enumerate(couplings):
        h = h + (limits.xi[c] / p - (4 * (i + 1) - 2) / p * limits.mtilde0[c]) * sub.s_op
    h = 0.5 * (h + dag(h))
    dissipators, feedback = [], []
    for a, (ia, sa) in enumerate(couplings):
        for b, (ib, sb) in enumerate(couplings):
            w = _ordering_weight(ia, ib)
            if w == 0:
                continue
            g = 2 * w * limits.gamma[a, b] / p
            m = 2 * w * limits.mtilde[a, b] / p
            if abs(g) > drop_below:
                dissipators.append((sa.s_op, sb.s_op, float(g)))
            if abs(m) > drop_below:
                feedback.append((sa.s_op, sb.s_op, float(m)))
    return MasterEquationSpec(h, dissipators, feedback, cycle.hbar)


def integrate_master(
    spec: MasterEquationSpec,
    rho0: np.ndarray,
    T: float,
    dt: float,
    observables: Mapping[str, np.ndarray] | None = None,
    record_every: int = 1,
) -> EvolutionTrace:
    """Classical RK4 with fixed step; the step is shortened to divide ``T``."""
    bound = spec.norm_bound()
    if dt * bound > constants.STABILITY_FACTOR:
        raise StepSizeError(
            f"dt={dt:.3e} exceeds stability bound {constants.STABILITY_FACTOR / bound:.3e}"
        )
    n = max(1, math.ceil(T / dt - 1e-12))
    h = T / n
    observables = dict(observables or {})
    rho = np.asarray(rho0, dtype=complex)
    times, states = [0.0], [rho]
    series = {k: [v] for k, v in _expectations(observables, rho).items()}
    f = spec.rhs
    min_eig = float(np.linalg.eigvalsh(rho)[0])
    for k in range(1, n + 1):
        k1 = f(rho)
        k2 = f(rho + 0.5 * h * k1)
        k3 = f(rho + 0.5 * h * k2)
        k4 = f(rho + h * k3)
        rho = rho + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        rho = 0.5 * (rho + dag(rho))
        if k % record_every == 0 or k == n:
            drift = abs(np.trace(rho) - 1)
            if drift > constants.INTEGRATOR_TRACE_TOL:
                raise NumericError(f"integrator trace drift {drift:.2e}")
            min_eig = min(min_eig, float(np.linalg.eigvalsh(rho)[0]))
            times.append(k * h)
            states.append(rho)
            for name, v in _expectations(observables, rho).items():
                series[name].append(v)
    trace = EvolutionTrace(np.array(times), states, _finish_series(series, observables), h, n)
    trace.extra["min_eigenvalue"] = min_eig
    return trace


def propagate_exact(spec: MasterEquationSpec, rho0: np.ndarray, t: float) -> np.ndarray:
    """``exp(L t) rho0`` through the dense Liouvillian (small systems)."""
    d = spec.dim
    return (expm(spec.liouvillian() * t) @ np.asarray(rho0, dtype=complex).ravel()).reshape(d, d)


# -- Zeno regime ---------------------------------------------------------------

def zeno_factor(state, m_op: np.ndarray, ds: float, tau_g: float = 1.0, hbar: float = 1.0, tau: float = 1.0) -> complex:
    """Per-collision multiplier ``Tr(exp(-i tau_g ds M / hbar) rho_m)`` of a coherence."""
    rho = state.realize(tau, hbar) if isinstance(state, Preparation) else np.asarray(state, dtype=complex)
    w, v = np.linalg.eigh(np.asarray(m_op, dtype=complex))
    phases = np.exp(-1j * tau_g * ds * w / hbar)
    return complex(np.sum(phases * np.real(np.einsum("ik,ij,jk->k", v.conj(), rho, v))))


def gaussian_zeno_factor(mean: float, sigma: float, ds: float, hbar: float = 1.0) -> complex:
    """Characteristic function of a Gaussian at ``ds / hbar``."""
    return complex(np.exp(-1j * ds * mean / hbar) * np.exp(-0.5 * (ds * sigma / hbar) ** 2))


def zeno_decay_curve(sigma: float, ds: float, t, tau: float, hbar: float = 1.0, form: str = "continuum"):
    """Coherence multiplier after time ``t`` with collisions of duration ``tau``.

    ``continuum`` is the rate-equation solution
    ``exp(-(t/tau) (1 - exp(-sigma^2 ds^2 / 2 hbar^2)))``; ``discrete`` is the
    exact product of per-collision factors, ``exp(-(t/tau) sigma^2 ds^2 / 2 hbar^2)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = 0.5 * (sigma * ds / hbar) ** 2
    t = np.asarray(t, dtype=float)
    if form == "continuum":
        out = np.exp(-(t / tau) * -np.expm1(-x))
    elif form == "discrete":
        out = np.exp(-(t / tau) * x)
    else:
        raise ValueError(f"unknown form {form!r}")
    return float(out) if out.ndim == 0 else out


def zeno_first_order(sigma: float, ds: float, t, tau: float, hbar: float = 1.0):
    """Leading small-width expansion ``1 - (sigma^2 ds^2 / 2 hbar^2) t / tau``."""
    return 1 - 0.5 * (sigma * ds / hbar) ** 2 * np.asarray(t, dtype=float) / tau


# -- time-dependent switching --------------------------------------------------

def magnus_asymmetry(schedule: CouplingSchedule, duration: float) -> float:
    """``I = int_0^d dt1 int_0^t1 (g(t2) - g(t1)) dt2``; zero for time-symmetric switching."""
    g = lambda t: float(schedule(t, duration))
    val, _ = dblquad(lambda t2, t1: g(t2) - g(t1), 0.0, duration, 0.0, lambda t1: t1, epsabs=1e-14, epsrel=1e-10)
    return val


def magnus_defect(h0: np.ndarray, hi: np.ndarray, schedule: CouplingSchedule, duration: float, hbar: float = 1.0) -> float:
    """Leading distance between the time-ordered and the mean-coupling propagators.

    For ``H(t) = H0 + g(t) HI`` the second Magnus term is
    ``-(I / 2 hbar^2) [H0, HI]`` with ``I`` from :func:`magnus_asymmetry`.
    """
    c = commutator(np.asarray(h0, dtype=complex), np.asarray(hi, dtype=complex))
    return abs(magnus_asymmetry(schedule, duration)) * np.linalg.norm(c, 2) / (2 * hbar**2)


# -- generator fits ----------------------------------------------------------

@dataclass(frozen=True)
class GeneratorTerm:
    """One term of a master equation, in :class:`MasterEquationSpec` conventions."""

    kind: str
    a: np.ndarray
    b: np.ndarray | None = None
    label: str = ""

    def action(self, rho: np.ndarray, hbar: float = 1.0) -> np.ndarray:
        if self.kind == "hamiltonian":
            return (-1j / hbar) * commutator(self.a, rho)
        if self.kind == "dissipator":
            return -commutator(self.a, commutator(self.b, rho)) / hbar**2
        if self.kind == "feedback":
            return (1j / hbar) * commutator(self.a, anticommutator(self.b, rho))
        raise ValueError(f"unknown term kind {self.kind!r}")


@dataclass(frozen=True)
class GeneratorFit:
    coefficients: np.ndarray
    residual: float
    extrapolation_residual: float
    diverges: bool


def probe_states(dim: int, count: int, seed: int = 0) -> list[np.ndarray]:
    from .linalg import random_density

    rng = np.random.default_rng(seed)
    return [random_density(dim, rng, rank=1 + k % 2) for k in range(count)]


def fit_generator(
    cycle: CycleSpec,
    terms: Sequence[GeneratorTerm],
    taus: Sequence[float],
    probes: Sequence[np.ndarray] | None = None,
    known: MasterEquationSpec | None = None,
    workers: int | None = None,
) -> GeneratorFit:
    """Least-squares coefficients of ``terms`` in the extrapolated collision generator.

    The generator is sampled as ``(V(tau)[rho] - rho) / tau`` on a few probe
    states, extrapolated to ``tau -> 0``, the ``known`` part (by default the
    free evolution under S0) is subtracted and the rest is fitted.
    """
    from .engine import build_channel, tau_sweep

    hbar = cycle.hbar
    probes = list(probes) if probes is not None else probe_states(cycle.dim, 4)
    known = known if known is not None else MasterEquationSpec(cycle.s0, hbar=hbar)

    def sample(t):
        ch = build_channel(cycle, t)
        return np.array([(ch.apply(r) - r) / t for r in probes])

    samples = np.array(tau_sweep(sample, taus, workers))
    ex = extrapolate(taus, samples)
    target = np.concatenate([(ex.value[k] - known.rhs(r)).ravel() for k, r in enumerate(probes)])
    design = np.array([np.concatenate([t.action(r, hbar).ravel() for r in probes]) for t in terms]).T
    a = np.vstack([design.real, design.imag])
    y = np.concatenate([target.real, target.imag])
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = float(np.linalg.norm(a @ coef - y) / max(np.linalg.norm(y), 1e-300))
    return GeneratorFit(coef, resid, ex.residual, ex.diverges)
