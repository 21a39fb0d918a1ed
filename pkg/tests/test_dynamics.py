import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collisional.dynamics import (
    GeneratorTerm, MasterEquationSpec, Regime, StepSizeError, build_master_equation,
    check_exact_unitarity, classify_regime, fit_generator, integrate_master, magnus_asymmetry,
    magnus_defect, probe_states, propagate_exact, scaled_moments, zeno_decay_curve, zeno_factor,
    zeno_first_order,
)
from collisional.engine import generator_superoperator
from collisional.linalg import random_density, random_hermitian
from collisional.model import (
    Ancilla, CouplingSchedule, CycleSpec, EigenstatePrep, ExplicitPrep, GaussianMomentsPrep, Scaled,
    SubInteraction, limit_set,
)

X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]])
Z = np.diag([1.0, -1.0]).astype(complex)
TAUS = [0.1, 0.03, 0.01, 0.003, 0.001]


def _single(prep, schedule, s=X, s0=0.5 * Z, **anc):
    return CycleSpec([2], s0, [Ancilla(prep, **anc)], [[SubInteraction(s, 0, "M", schedule)]])


def test_dephasing_matches_closed_form():
    g = 0.7
    spec = MasterEquationSpec(np.zeros((2, 2)), [(Z, Z, g)])
    rho0 = np.full((2, 2), 0.5, dtype=complex)
    t = 1.3
    out = propagate_exact(spec, rho0, t)
    # -(g)[Z,[Z,rho]] multiplies the coherence by exp(-4 g t)
    assert abs(out[0, 1] - 0.5 * np.exp(-4 * g * t)) < 1e-12
    tr = integrate_master(spec, rho0, t, 0.01)
    assert abs(tr.final[0, 1] - 0.5 * np.exp(-4 * g * t)) < 1e-9


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_rk4_matches_liouvillian_exponential(seed):
    rng = np.random.default_rng(seed)
    a, b = random_hermitian(3, rng), random_hermitian(3, rng)
    spec = MasterEquationSpec(random_hermitian(3, rng), [(a, a, 0.3), (b, b, 0.2)], [(a, b, 0.1)])
    rho0 = random_density(3, rng)
    dt = 0.05 / spec.norm_bound()
    tr = integrate_master(spec, rho0, 0.5, dt)
    assert np.allclose(tr.final, propagate_exact(spec, rho0, 0.5), atol=1e-9)
    assert abs(np.trace(tr.final) - 1) < 1e-12


def test_step_size_guard():
    spec = MasterEquationSpec(10 * Z, [(X, X, 5.0)])
    with pytest.raises(StepSizeError):
        integrate_master(spec, np.eye(2) / 2, 1.0, 0.1)


def test_master_spec_rejects_non_hermitian():
    with pytest.raises(ValueError):
        MasterEquationSpec(np.array([[0, 1], [0, 0]]))


def test_exact_unitarity_predicate():
    m = np.diag([-1.0, 0.0, 1.0])
    rho = EigenstatePrep(m, 1.0).realize(0.1)
    assert check_exact_unitarity(rho, m, np.diag([0.0, 0.3, 0.7]))
    # (i) violated: support in two eigenspaces
    mixed = np.diag([0.0, 0.1, 0.9])
    res = check_exact_unitarity(mixed, m)
    assert not res and res.violated == "support"
    # (ii) violated: M0 couples the eigenspace out
    m0 = np.zeros((3, 3))
    m0[1, 2] = m0[2, 1] = 0.2
    res = check_exact_unitarity(rho, m, m0)
    assert not res and res.violated == "invariance"


def test_exact_unitarity_degenerate_eigenspace():
    # a superposition inside a degenerate eigenspace is still exact
    m = np.diag([1.0, 1.0, -1.0])
    psi = np.array([0.6, 0.8, 0.0])
    assert check_exact_unitarity(np.outer(psi, psi), m, np.diag([0.1, 0.1, 0.0]))


@pytest.mark.parametrize("seed", range(5))
def test_exact_unitarity_iff_purity_preserved(seed):
    from collisional.engine import collide_once
    from collisional.linalg import purity

    rng = np.random.default_rng(seed)
    m = np.diag([-1.0, 0.0, 1.0])
    rho_s = random_density(2, rng, rank=1)
    good = _single(EigenstatePrep(m, 0.0), CouplingSchedule(0.9), operators={"M": m}, m0=(Scaled(np.diag([0.2, 0.5, 0.1])),))
    assert abs(purity(collide_once(rho_s, good, 0.5)) - 1) < 1e-12
    m0 = np.zeros((3, 3))
    m0[1, 2] = m0[2, 1] = 1.0
    bad = _single(EigenstatePrep(m, 0.0), CouplingSchedule(0.9), operators={"M": m}, m0=(Scaled(m0),))
    assert purity(collide_once(rho_s, bad, 0.5)) < 1 - 1e-6


def test_regimes():
    weak = _single(ExplicitPrep(np.diag([0.2, 0.3, 0.5])), CouplingSchedule(1.0), operators={"M": np.diag([-1.0, 0, 1])})
    assert classify_regime(weak, TAUS).regime == Regime.EFFECTIVE_UNITARY
    finite = _single(GaussianMomentsPrep(((0.4, 1),), ((0.3, 1), (-0.16, 2))), CouplingSchedule(1.0, -1.0))
    rep = classify_regime(finite, TAUS)
    assert rep.regime == Regime.FINITE_DECOHERENCE
    assert rep.limits.gamma[0, 0] == pytest.approx(0.15, abs=1e-9)
    zeno = _single(GaussianMomentsPrep(0.0, ((0.25, 0),)), CouplingSchedule(1.0, -1.0), s=Z)
    assert classify_regime(zeno, TAUS).regime == Regime.ZENO
    m = np.diag([-1.0, 0.0, 1.0])
    exact = _single(EigenstatePrep(m, 1.0), CouplingSchedule(1.0, -1.0), operators={"M": m})
    assert classify_regime(exact, TAUS).regime == Regime.EXACT_UNITARY


def test_scaled_moments_definition():
    cyc = _single(GaussianMomentsPrep(0.0, ((0.3, 1),)), CouplingSchedule(1.0, -1.0))
    y = scaled_moments(cyc, 0.01, 4)
    assert y[0, 1] == pytest.approx(0.0, abs=1e-12)
    assert y[0, 2] == pytest.approx(0.3)
    assert y[0, 4] == pytest.approx(0.01 * 3 * 0.09, rel=1e-9)


def test_single_substep_builder_matches_collision_generator():
    prep = GaussianMomentsPrep(((0.4, 1),), ((0.3, 1), (-0.16, 2)))
    cyc = _single(prep, CouplingSchedule(1.0, -1.0))
    me = build_master_equation(cyc, limit_set(cyc, TAUS))
    assert me.rate(X) == pytest.approx(0.3 / 2, abs=1e-9)
    assert np.allclose(me.h_eff, 0.5 * Z + 0.4 * X, atol=1e-9)
    est = generator_superoperator(cyc, [0.004, 0.002, 0.001])
    assert np.allclose(est.value, me.liouvillian(), atol=1e-5)


def test_two_substep_builder_matches_collision_generator():
    rng = np.random.default_rng(3)
    a, b = random_hermitian(3, rng), random_hermitian(3, rng)
    a -= np.trace(a) / 3 * np.eye(3)
    b -= np.trace(b) / 3 * np.eye(3)
    anc = Ancilla(ExplicitPrep(np.eye(3) / 3), {"A": a, "B": b}, m0=(Scaled(random_hermitian(3, rng, 0.3)),))
    cyc = CycleSpec([2], 0.4 * Z, [anc], [
        [SubInteraction(X, 0, "A", CouplingSchedule(1.0, -0.5))],
        [SubInteraction(Y, 0, "B", CouplingSchedule(0.8, -0.5))],
    ])
    me = build_master_equation(cyc, limit_set(cyc, TAUS))
    errs = []
    for tau in (1e-2, 1e-4):
        est = generator_superoperator(cyc, [tau, tau / 2, tau / 4])
        errs.append(np.max(np.abs(est.samples[-1] - me.liouvillian())))
    # the mismatch shrinks like sqrt(tau)
    assert errs[1] < errs[0] / 5


def test_builder_rejects_divergent_limits():
    cyc = _single(GaussianMomentsPrep(0.0, ((0.25, 0),)), CouplingSchedule(1.0, -1.0), s=Z)
    with pytest.raises(ValueError):
        build_master_equation(cyc, limit_set(cyc, TAUS))


def test_zeno_forms():
    m = np.diag([-1.0, 1.0])
    rho = np.diag([0.25, 0.75])
    assert abs(zeno_factor(rho, m, 0.5) - (0.25 * np.exp(0.5j) + 0.75 * np.exp(-0.5j))) < 1e-14
    t = np.linspace(0, 2, 5)
    d = zeno_decay_curve(0.5, 2.0, t, 0.1, form="discrete")
    assert np.allclose(d, np.exp(-0.5 * t / 0.1))
    c = zeno_decay_curve(0.5, 2.0, t, 0.1)
    assert np.allclose(c, np.exp(-(t / 0.1) * (1 - np.exp(-0.5))))
    with pytest.raises(ValueError):
        zeno_decay_curve(0.5, 2.0, t, 0.1, form="other")
    # first-order form agrees with both at small width
    for form in ("discrete", "continuum"):
        full = zeno_decay_curve(0.01, 1.0, 0.1, 0.1, form=form)
        assert abs(full - zeno_first_order(0.01, 1.0, 0.1, 0.1)) < 1e-8


def test_magnus_asymmetry_values():
    assert abs(magnus_asymmetry(CouplingSchedule(1.0, 0.0, "symmetric_bump"), 1.0)) < 1e-10
    assert abs(magnus_asymmetry(CouplingSchedule(1.0, 0.0, "constant"), 0.7)) < 1e-12
    # g = 2t/d: I = (2/d) int_0^d dt1 int_0^t1 (t2 - t1) dt2 = -d^2/3
    assert magnus_asymmetry(CouplingSchedule(1.0, 0.0, "ramp"), 1.0) == pytest.approx(-1 / 3, rel=1e-8)
    assert magnus_asymmetry(CouplingSchedule(1.0, 0.0, "ramp"), 0.5) == pytest.approx(-0.25 / 3, rel=1e-8)
    d = magnus_defect(Z, X, CouplingSchedule(1.0, 0.0, "ramp"), 1.0)
    assert d == pytest.approx(np.linalg.norm(Z @ X - X @ Z, 2) / 6, rel=1e-8)


def test_generator_term_actions():
    rho = random_density(2, np.random.default_rng(0))
    spec = MasterEquationSpec(0.3 * Z, [(X, X, 0.2)], [(Z, X, 0.1)])
    terms = [GeneratorTerm("hamiltonian", Z), GeneratorTerm("dissipator", X, X), GeneratorTerm("feedback", Z, X)]
    total = sum(c * t.action(rho) for c, t in zip([0.3, 0.2, 0.1], terms))
    assert np.allclose(total, spec.rhs(rho))
    with pytest.raises(ValueError):
        GeneratorTerm("other", Z).action(rho)


def test_fit_generator_recovers_single_substep():
    prep = GaussianMomentsPrep(((0.4, 1),), ((0.3, 1), (-0.16, 2)))
    cyc = _single(prep, CouplingSchedule(1.0, -1.0))
    fit = fit_generator(cyc, [GeneratorTerm("hamiltonian", X), GeneratorTerm("dissipator", X, X)],
                        [0.004, 0.002, 0.001], probe_states(2, 3))
    assert np.allclose(fit.coefficients, [0.4, 0.15], rtol=1e-4)
    assert fit.residual < 1e-4
