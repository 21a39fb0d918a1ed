import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collisional.dynamics import gaussian_zeno_factor
from collisional.engine import (
    build_channel, collide_joint, collide_once, composite_evolve, cycle_unitary, evolve,
    generator_estimate, mean_propagator, stepped_propagator, tau_sweep,
)
from collisional.linalg import DimensionError, kron, random_density, random_hermitian, unitary
from collisional.model import (
    Ancilla, CouplingSchedule, CycleSpec, ExplicitPrep, GaussianMomentsPrep, OscillatorGaussianPrep,
    ResolutionError, Scaled, SubInteraction,
)

X = np.array([[0, 1], [1, 0]], dtype=complex)
Z = np.diag([1.0, -1.0]).astype(complex)


def _random_cycle(seed, ds=2, da=3, p=2):
    rng = np.random.default_rng(seed)
    anc = Ancilla(ExplicitPrep(random_density(da, rng)), {"A": random_hermitian(da, rng), "B": random_hermitian(da, rng)},
                  m0=(Scaled(random_hermitian(da, rng, 0.5)),))
    subs = [[SubInteraction(random_hermitian(ds, rng), 0, "AB"[i % 2], CouplingSchedule(1.0 + i))] for i in range(p)]
    return CycleSpec([ds], random_hermitian(ds, rng), [anc], subs)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
@settings(max_examples=25, deadline=None)
def test_kraus_route_matches_joint_route(seed, tau):
    cyc = _random_cycle(seed)
    rho = random_density(2, np.random.default_rng(seed + 1))
    assert np.allclose(collide_once(rho, cyc, tau), collide_joint(rho, cyc, tau), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_channel_is_cptp(seed):
    ch = build_channel(_random_cycle(seed, ds=3), 0.3)
    k = ch.kraus.reshape(-1, 3, 3)
    assert np.allclose(np.einsum("kji,kjl->il", k.conj(), k), np.eye(3), atol=1e-12)
    # Choi matrix is positive
    choi = np.einsum("kij,kml->ijml", k, k.conj()).reshape(9, 9)
    assert np.min(np.linalg.eigvalsh(choi)) > -1e-12


def test_two_ancilla_composite_matches_joint():
    rng = np.random.default_rng(5)
    ops = {"M": random_hermitian(2, rng)}
    anc = [Ancilla(ExplicitPrep(random_density(2, rng)), ops), Ancilla(ExplicitPrep(random_density(2, rng)), ops)]
    s1, s2 = kron(X, np.eye(2)), kron(np.eye(2), Z)
    cyc = CycleSpec([2, 2], 0.3 * kron(Z, Z), anc, [
        [SubInteraction(s1, 0, "M"), SubInteraction(s2, 1, "M")],
        [SubInteraction(s2, 0, "M"), SubInteraction(s1, 1, "M")],
    ])
    rho = random_density(4, rng)
    assert np.allclose(collide_once(rho, cyc, 0.2), collide_joint(rho, cyc, 0.2), atol=1e-12)
    tr = composite_evolve(rho, cyc, 1.0, 5)
    assert len(tr.states) == 6
    with pytest.raises(DimensionError):
        composite_evolve(np.eye(2) / 2, _random_cycle(0), 1.0, 2)


def test_uncoupled_ancilla_gives_free_evolution():
    rng = np.random.default_rng(1)
    h = random_hermitian(2, rng)
    cyc = CycleSpec([2], h, [Ancilla(ExplicitPrep(np.eye(2) / 2), {"M": Z})], [[SubInteraction(X, 0, "M", CouplingSchedule(0.0))]])
    rho = random_density(2, rng)
    u = unitary(h, 0.7)
    assert np.allclose(collide_once(rho, cyc, 0.7), u @ rho @ u.conj().T, atol=1e-12)


def test_evolve_is_repeated_collision():
    cyc = _random_cycle(3)
    rho = random_density(2, np.random.default_rng(4))
    tr = evolve(rho, cyc, 1.0, 4)
    r = rho
    for _ in range(4):
        r = collide_once(r, cyc, 0.25)
    assert np.allclose(tr.final, r, atol=1e-13)
    assert np.allclose(tr.times, [0, 0.25, 0.5, 0.75, 1.0])


def test_evolve_records_observables():
    cyc = _random_cycle(3)
    tr = evolve(np.diag([1.0, 0]), cyc, 1.0, 10, observables={"z": Z}, record_every=5)
    assert len(tr.times) == 3 and tr.observables["z"].shape == (3,)
    assert tr.observables["z"][0] == pytest.approx(1.0)


def test_state_dimension_checked():
    with pytest.raises(DimensionError):
        collide_once(np.eye(3) / 3, _random_cycle(0), 0.1)


def test_channel_depends_only_on_moments():
    # two ancilla states with identical distribution of M eigenvalues but different coherences in other bases
    m = np.diag([-1.0, 1.0, 1.0])
    a = np.diag([0.3, 0.7, 0.0])
    b = np.diag([0.3, 0.35, 0.35]).astype(complex)
    b[1, 2] = b[2, 1] = 0.35
    cyc = lambda r: CycleSpec([2], 0.4 * Z, [Ancilla(ExplicitPrep(r), {"M": m})], [[SubInteraction(X, 0, "M", CouplingSchedule(2.0))]])
    rho = random_density(2, np.random.default_rng(7))
    assert np.allclose(collide_once(rho, cyc(a), 0.3), collide_once(rho, cyc(b), 0.3), atol=1e-12)


@pytest.mark.parametrize("sigma,ds", [(0.5, 2.0), (0.3, 1.0), (1.0, 1.0)])
def test_zeno_multiplier(sigma, ds):
    prep = GaussianMomentsPrep(0.0, ((sigma**2, 0),))
    cyc = CycleSpec([2], np.zeros((2, 2)), [Ancilla(prep)], [[SubInteraction(0.5 * ds * Z, 0, "M", CouplingSchedule(1.0, -1.0))]])
    rho = np.full((2, 2), 0.5)
    for tau in (0.1, 0.01):
        out = collide_once(rho, cyc, tau)
        assert abs(out[0, 1] / rho[0, 1] - gaussian_zeno_factor(0.0, sigma, ds)) < 1e-10
        assert abs(out[0, 0] - 0.5) < 1e-13


def test_leakage_guard():
    prep = OscillatorGaussianPrep(6, ((1.0, 0),), mean_x=((3.0, 0),))
    cyc = CycleSpec([2], Z, [Ancilla(prep)], [[SubInteraction(X, 0, "x")]])
    with pytest.raises(ResolutionError):
        build_channel(cyc, 0.1)


def test_constant_profile_stepped_equals_mean():
    cyc = _random_cycle(2, p=1)
    assert np.allclose(stepped_propagator(cyc, 0.1, 16), mean_propagator(cyc, 0.1), atol=1e-12)


def test_cycle_unitary_is_unitary():
    u = cycle_unitary(_random_cycle(9), 0.4)
    assert np.allclose(u @ u.conj().T, np.eye(len(u)), atol=1e-12)


def test_generator_estimate_free_part():
    # with no coupling the generator is -i[S0, rho]
    rng = np.random.default_rng(11)
    h = random_hermitian(2, rng)
    cyc = CycleSpec([2], h, [Ancilla(ExplicitPrep(np.eye(2) / 2), {"M": Z})], [[SubInteraction(X, 0, "M", CouplingSchedule(0.0))]])
    rho = random_density(2, rng)
    est = generator_estimate(cyc, rho, [0.01, 0.003, 0.001, 0.0003, 0.0001])
    assert est.established
    assert np.allclose(est.value, -1j * (h @ rho - rho @ h), atol=1e-8)
    with pytest.raises(ValueError):
        generator_estimate(cyc, rho, [0.01, 0.02, 0.001])


def test_tau_sweep_keeps_order():
    assert tau_sweep(lambda t: 2 * t, [3.0, 2.0, 1.0], workers=3) == [6.0, 4.0, 2.0]
