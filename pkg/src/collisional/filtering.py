"""Conditional (measured) collisional dynamics.

After every collision the ancilla is projected onto a pointer-basis vector
``|x>`` instead of being traced out. The update is computed exactly from the
Kraus operators of :mod:`collisional.engine`, so conditional states stay
normalized and positive at any tau.

Noise increments are reported scaled by ``sqrt(Gamma)``: for outcome ``x``
with ``z = <x|M rho_m|x> / <x|rho_m|x>``, ``re = tau g Im z`` and
``im = tau g Re z``. ``re`` is the innovation that drives the conditional
state and ``im`` the random potential.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import constants
from .engine import Channel, EvolutionTrace, build_channel
from .linalg import DimensionError, NumericError, commutator, dag, expm
from .model import CycleSpec, RealizedCycle


@dataclass(frozen=True)
class NoiseIncrement:
    re: float
    im: float

    @property
    def dW(self) -> complex:
        return complex(self.re, self.im)


@dataclass(frozen=True)
class MeasurementRecord:
    outcomes: np.ndarray
    probabilities: np.ndarray
    basis: str = "pointer"


@dataclass
class ConditionalTrajectory:
    record: MeasurementRecord
    states: list[np.ndarray]
    increments: list[NoiseIncrement]
    current: np.ndarray
    seed: int
    index: int = 0
    times: np.ndarray | None = None


@dataclass(frozen=True)
class Feedback:
    """Apply ``exp(-i gain * current * S * tau / hbar)`` after every measurement."""

    s_op: np.ndarray
    gain: float


@dataclass(frozen=True)
class OutcomeTable:
    """Per-outcome data of one measured collision, independent of the system state."""

    channel: Channel
    re: np.ndarray
    im: np.ndarray
    prior: np.ndarray
    s_op: np.ndarray
    gamma: float
    pointer_values: np.ndarray | None = None

    @property
    def tau(self) -> float:
        return self.channel.tau


def _outcome_table(cycle: CycleSpec, tau: float, coupling: int = 0, gamma: float | None = None) -> OutcomeTable:
    rc = cycle.realize(tau)
    term = rc.terms[coupling]
    if len(cycle.ancillae) != 1:
        raise DimensionError("filtering supports cycles with a single ancilla")
    anc = rc.ancillae[term.ancilla]
    b = anc.pointer
    prior = np.real(np.einsum("ax,ab,bx->x", b.conj(), anc.rho, b))
    mz = np.einsum("ax,ab,bx->x", b.conj(), term.m_op @ anc.rho, b)
    safe = prior > 1e-300
    z = np.where(safe, mz / np.where(safe, prior, 1.0), 0.0)
    tg = rc.step * term.gbar
    re, im = tg * z.imag, tg * z.real
    if gamma is None:
        mean = float(np.sum(prior * re))
        gamma = float(np.sum(prior * (re - mean) ** 2)) / tau
    return OutcomeTable(build_channel(cycle, tau), re, im, prior, term.s_op, gamma)


def outcome_table(cycle: CycleSpec, tau: float, coupling: int = 0, gamma: float | None = None) -> OutcomeTable:
    """Kraus operators, increments and prior outcome distribution at duration ``tau``.

    ``gamma`` defaults to the variance of ``re`` under the prior divided by
    ``tau``; for a centred Gaussian meter this is ``tau g^2 <M^2>``.
    """
    return _outcome_table(cycle, tau, coupling, gamma)


def conditional_collide(rho: np.ndarray, cycle: CycleSpec, tau: float, outcome: int, channel: Channel | None = None):
    """Unnormalized post-measurement system state and its probability."""
    ch = channel if channel is not None else build_channel(cycle, tau)
    if not 0 <= outcome < ch.outcomes:
        raise IndexError(f"outcome {outcome} outside pointer basis of size {ch.outcomes}")
    out = ch.conditional(np.asarray(rho, dtype=complex), outcome)
    p = float(np.real(np.trace(out)))
    if p <= 0:
        raise ValueError(f"outcome {outcome} has zero probability")
    return out, p


def correction_terms(rho_m: np.ndarray, m_op: np.ndarray, pointer: np.ndarray) -> np.ndarray:
    """Per-outcome ``<M^2 rho - M rho M>_x`` and ``<rho M^2 - M rho M>_x`` (unnormalized).

    Both vanish when ``rho_m`` is diagonal in the eigenbasis of ``M`` or the
    pointer vectors are eigenvectors of ``M``.
    """
    mrm = m_op @ rho_m @ m_op
    left = m_op @ m_op @ rho_m - mrm
    right = rho_m @ m_op @ m_op - mrm
    diag = lambda a: np.einsum("ax,ab,bx->x", pointer.conj(), a, pointer)
    return np.stack([diag(left), diag(right)])


def increment_moments(table: OutcomeTable) -> dict[str, float]:
    """Prior mean of ``re`` and ``im`` and the prior second moment of ``re``."""
    p = table.prior
    return {
        "mean_re": float(np.sum(p * table.re)),
        "mean_im": float(np.sum(p * table.im)),
        "second_re": float(np.sum(p * table.re**2)),
    }


# -- batched trajectory core -------------------------------------------------

def _expect(op, states):
    return np.real(np.einsum("ij,nji->n", op, states))


def _feedback_unitaries(fb: Feedback, currents: np.ndarray, tau: float, hbar: float) -> np.ndarray:
    w, v = np.linalg.eigh(fb.s_op)
    phase = np.exp(-1j * fb.gain * tau / hbar * np.outer(currents, w))
    return np.einsum("ik,nk,jk->nij", v, phase, v.conj())


def _step_batch(states, table: OutcomeTable, uniforms, hbar, feedback: Feedback | None):
    """One measured collision for a batch of conditional states."""
    k = table.channel.kraus
    cond = np.einsum("xrij,njl,xrml->nxim", k, states, k.conj(), optimize=True)
    probs = np.real(np.einsum("nxii->nx", cond))
    probs = np.clip(probs, 0.0, None)
    total = probs.sum(axis=1)
    cdf = np.cumsum(probs, axis=1) / total[:, None]
    idx = np.minimum((cdf < uniforms[:, None]).sum(axis=1), probs.shape[1] - 1)
    rows = np.arange(len(states))
    p = probs[rows, idx]
    new = cond[rows, idx] / p[:, None, None]
    new = 0.5 * (new + np.conj(np.swapaxes(new, 1, 2)))
    # innovation: re minus its mean under the outcome distribution of this state
    expected = probs @ table.re / total
    innovation = table.re[idx] - expected
    s_mean = _expect(table.s_op, states)
    current = s_mean + hbar * innovation / (2 * table.gamma * table.tau) if table.gamma > 0 else s_mean
    if feedback is not None:
        u = _feedback_unitaries(feedback, current, table.tau, hbar)
        new = u @ new @ np.conj(np.swapaxes(u, 1, 2))
    return new, idx, p / total, current


def _uniforms(seed: int, indices: Sequence[int], n: int) -> np.ndarray:
    return np.array([np.random.default_rng([seed, int(i)]).random(n) for i in indices])


def sample_trajectory(
    rho0: np.ndarray,
    cycle: CycleSpec,
    T: float,
    n: int,
    seed: int,
    index: int = 0,
    feedback: Feedback | None = None,
    coupling: int = 0,
    gamma: float | None = None,
) -> ConditionalTrajectory:
    """One conditional trajectory; the outcome stream is fixed by ``(seed, index)``."""
    tau = T / n
    table = outcome_table(cycle, tau, coupling, gamma)
    u = _uniforms(seed, [index], n)
    rho = np.asarray(rho0, dtype=complex)[None]
    states, outcomes, probs, currents, incs = [rho[0]], [], [], [], []
    for k in range(n):
        rho, idx, p, cur = _step_batch(rho, table, u[:, k], cycle.hbar, feedback)
        x = int(idx[0])
        if abs(np.trace(rho[0]) - 1) > constants.INTEGRATOR_TRACE_TOL:
            raise NumericError("conditional state lost normalization")
        states.append(rho[0])
        outcomes.append(x)
        probs.append(float(p[0]))
        currents.append(float(cur[0]))
        incs.append(NoiseIncrement(float(table.re[x]), float(table.im[x])))
    record = MeasurementRecord(np.array(outcomes), np.array(probs))
    return ConditionalTrajectory(record, states, incs, np.array(currents), seed, index, tau * np.arange(n + 1))


@dataclass
class EnsembleResult:
    """Pointwise mean and spread of an ensemble of conditional trajectories."""

    times: np.ndarray
    mean: np.ndarray
    spread: np.ndarray
    ntraj: int
    mean_current: np.ndarray
    extra: dict = field(default_factory=dict)

    def band(self, k: float = 3.0) -> np.ndarray:
        """Monte Carlo tolerance ``k * spread / sqrt(N)`` at every grid time."""
        return k * self.spread / np.sqrt(self.ntraj)

    def as_trace(self) -> EvolutionTrace:
        return EvolutionTrace(self.times, list(self.mean), {}, self.times[1] - self.times[0], len(self.times) - 1)


def run_ensemble(
    rho0: np.ndarray,
    cycle: CycleSpec,
    T: float,
    n: int,
    ntraj: int,
    seed: int,
    feedback: Feedback | None = None,
    coupling: int = 0,
    gamma: float | None = None,
    batch: int = 1024,
) -> EnsembleResult:
    """Simulate ``ntraj`` trajectories in batches, keeping only running moments.

    Trajectory ``i`` uses the stream ``(seed, i)`` whatever the batching, so
    results do not depend on ``batch``.
    """
    tau = T / n
    table = outcome_table(cycle, tau, coupling, gamma)
    rho0 = np.asarray(rho0, dtype=complex)
    d = rho0.shape[0]
    s1 = np.zeros((n + 1, d, d), dtype=complex)
    s2 = np.zeros(n + 1)
    cur = np.zeros(n)
    for start in range(0, ntraj, batch):
        idx = range(start, min(start + batch, ntraj))
        u = _uniforms(seed, idx, n)
        rho = np.repeat(rho0[None], len(idx), axis=0)
        s1[0] += rho.sum(axis=0)
        s2[0] += np.sum(np.abs(rho) ** 2)
        for k in range(n):
            rho, _, _, c = _step_batch(rho, table, u[:, k], cycle.hbar, feedback)
            s1[k + 1] += rho.sum(axis=0)
            s2[k + 1] += np.sum(np.abs(rho) ** 2)
            cur[k] += c.sum()
    mean = s1 / ntraj
    var = s2 / ntraj - np.sum(np.abs(mean) ** 2, axis=(1, 2))
    spread = np.sqrt(np.clip(var, 0.0, None))
    return EnsembleResult(tau * np.arange(n + 1), mean, spread, ntraj, cur / ntraj, {"gamma": table.gamma})


def ensemble_average(trajectories: Sequence[ConditionalTrajectory]) -> EnsembleResult:
    """Pointwise mean of stored trajectories (all on the same grid)."""
    if not trajectories:
        raise ValueError("empty ensemble")
    lengths = {len(t.states) for t in trajectories}
    if len(lengths) != 1:
        raise ValueError("trajectories are on different grids")
    stack = np.array([t.states for t in trajectories])
    mean = stack.mean(axis=0)
    dev = np.sum(np.abs(stack - mean) ** 2, axis=(2, 3))
    spread = np.sqrt(dev.mean(axis=0))
    cur = np.array([t.current for t in trajectories]).mean(axis=0)
    times = trajectories[0].times
    return EnsembleResult(times, mean, spread, len(trajectories), cur)


def feedback_step(rho: np.ndarray, current: float, feedback: Feedback, tau: float, hbar: float = 1.0) -> np.ndarray:
    """``exp(-i g current S tau / hbar) rho exp(+...)``."""
    if not np.isfinite(current):
        raise ValueError("feedback current must be finite")
    u = expm(-1j * feedback.gain * current * tau / hbar * np.asarray(feedback.s_op, dtype=complex))
    return u @ rho @ dag(u)


def pointer_current(cycle: CycleSpec, tau: float, pointer_op: np.ndarray, m0: np.ndarray | None = None, coupling: int = 0):
    """Read-out current from the pointer operator ``m``, when it is well defined.

    Returns ``(f, values)`` with ``[M0, m] = f M`` and ``values[x] =
    (m_x - <m>) / tau`` the current for each outcome, or ``(None, None)`` if
    the commutator is not proportional to ``M``.
    """
    rc: RealizedCycle = cycle.realize(tau)
    term = rc.terms[coupling]
    anc = rc.ancillae[term.ancilla]
    m0 = anc.m0 if m0 is None else m0
    c = commutator(m0, pointer_op)
    mm = term.m_op
    f = complex(np.vdot(mm, c) / np.vdot(mm, mm)) if np.any(mm) else 0j
    if np.linalg.norm(c - f * mm) > 1e-8 * max(np.linalg.norm(c), 1.0):
        return None, None
    b = anc.pointer
    vals = np.real(np.einsum("ax,ab,bx->x", b.conj(), pointer_op, b))
    mean = float(np.real(np.trace(pointer_op @ anc.rho)))
    return f, (vals - mean) / tau
