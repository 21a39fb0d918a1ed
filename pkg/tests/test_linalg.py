import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from collisional.linalg import (
    DimensionError, NumericError, TensorLayout, check_density, embed, expm, kron, negativity,
    partial_trace, purity, random_density, random_hermitian, spin, trace_distance, unitary,
)
from collisional import oscillator


def _kron_loops(a, b):
    m, n = a.shape
    p, q = b.shape
    out = np.zeros((m * p, n * q), dtype=complex)
    for i in range(m):
        for j in range(n):
            for k in range(p):
                for l in range(q):
                    out[i * p + k, j * q + l] = a[i, j] * b[k, l]
    return out


def _ptrace_sum(rho, da, db, keep):
    r = rho.reshape(da, db, da, db)
    if keep == 0:
        return sum(r[:, k, :, k] for k in range(db))
    return sum(r[k, :, k, :] for k in range(da))


seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.integers(1, 4), st.integers(1, 4))
def test_kron_matches_index_formula(seed, da, db):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(da, da)) + 1j * rng.normal(size=(da, da))
    b = rng.normal(size=(db, db))
    assert np.allclose(kron(a, b), _kron_loops(a, b), atol=1e-13)


@given(seeds, st.integers(1, 4), st.integers(1, 4))
def test_partial_trace_matches_double_sum(seed, da, db):
    rho = random_density(da * db, np.random.default_rng(seed))
    for keep in (0, 1):
        got = partial_trace(rho, [da, db], [keep])
        assert np.allclose(got, _ptrace_sum(rho, da, db, keep), atol=1e-13)


@given(seeds)
def test_partial_trace_of_product(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_density(d, rng) for d in (2, 3, 2))
    rho = kron(a, b, c)
    assert np.allclose(partial_trace(rho, [2, 3, 2], [1]), b, atol=1e-13)
    assert np.allclose(partial_trace(rho, [2, 3, 2], [0, 2]), kron(a, c), atol=1e-13)


def test_partial_trace_rejects_wrong_layout():
    with pytest.raises(DimensionError):
        partial_trace(np.eye(6), [2, 2], [0])


def test_embed_places_factor():
    z = np.diag([1.0, -1.0])
    assert np.allclose(embed(z, 1, [3, 2, 2]), kron(np.eye(3), z, np.eye(2)))


@given(seeds, st.integers(1, 6), st.floats(0.01, 5.0))
def test_unitary_matches_pade(seed, d, t):
    h = random_hermitian(d, np.random.default_rng(seed))
    u = unitary(h, t)
    assert np.allclose(u, scipy.linalg.expm(-1j * h * t), atol=1e-10)
    assert np.allclose(u @ u.conj().T, np.eye(d), atol=1e-12)


def test_expm_general_matrix():
    a = np.array([[0.1, 2.0], [0.0, -0.3]])
    assert np.allclose(expm(a), scipy.linalg.expm(a), atol=1e-13)


@given(seeds, st.integers(2, 5))
def test_trace_distance_properties(seed, d):
    rng = np.random.default_rng(seed)
    r, s = random_density(d, rng), random_density(d, rng)
    dist = trace_distance(r, s)
    assert 0 <= dist <= 1 + 1e-12
    assert abs(dist - 0.5 * np.sum(np.abs(np.linalg.eigvalsh(r - s)))) < 1e-12
    assert trace_distance(r, r) < 1e-12


def test_trace_distance_orthogonal_pure_states():
    assert abs(trace_distance(np.diag([1.0, 0]), np.diag([0, 1.0])) - 1) < 1e-14


@given(seeds, st.integers(2, 6))
def test_random_density_is_state(seed, d):
    rho = random_density(d, np.random.default_rng(seed))
    check_density(rho)
    assert 1 / d - 1e-12 <= purity(rho) <= 1 + 1e-12


def test_check_density_rejects():
    with pytest.raises(NumericError):
        check_density(np.diag([1.2, -0.2]))
    with pytest.raises(NumericError):
        check_density(np.diag([0.6, 0.6]))


def test_negativity_bell_and_product():
    bell = np.zeros(4)
    bell[[0, 3]] = 1 / np.sqrt(2)
    assert abs(negativity(np.outer(bell, bell), [2, 2]) - 0.5) < 1e-12
    assert negativity(kron(np.diag([1.0, 0]), np.eye(2) / 2), [2, 2]) < 1e-12


def test_spin_algebra():
    jx, jy, jz = (spin(1, a) for a in "xyz")
    assert np.allclose(jx @ jy - jy @ jx, 1j * jz)
    assert np.allclose(jx @ jx + jy @ jy + jz @ jz, 2 * np.eye(3))
    assert np.allclose(np.diag(jz), [1, 0, -1])


def test_oscillator_commutator_away_from_cutoff():
    d = 30
    x, p = oscillator.position(d), oscillator.momentum(d)
    c = x @ p - p @ x
    assert np.allclose(c[: d - 1, : d - 1], 1j * np.eye(d - 1), atol=1e-12)


def test_gaussian_ket_vacuum_moments():
    psi = oscillator.gaussian_ket(20)
    x = oscillator.position(20)
    assert abs(np.vdot(psi, psi) - 1) < 1e-12
    assert abs(np.vdot(psi, x @ x @ psi).real - 0.5) < 1e-10
