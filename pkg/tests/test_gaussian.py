import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from bosonloops.gaussian import (
    JSpec,
    QuadraticForm,
    conditional_angular_expectation,
    dynkin_identity,
    gaussian_moment,
    normalization,
    sample_field,
    symanzik_closed,
    symanzik_mc,
    verify_lejan,
)
from bosonloops.graph import build_generator
from bosonloops.soup import GenuineLoopSampler, sample_point_field_markov, stream
from _fixtures import pair, random_graph, single


def test_normalization_examples():
    assert normalization(np.array([[2.0]])) == pytest.approx(math.pi / 2)
    assert normalization(np.eye(3)) == pytest.approx(math.pi**3)


def test_normalization_complex_scalar_by_quadrature():
    a = 1 + 0.5j
    f = lambda u, v, part: getattr(np.exp(-a * (u * u + v * v)), part)
    re = integrate.dblquad(lambda u, v: f(u, v, "real"), -9, 9, -9, 9, epsabs=1e-10)[0]
    im = integrate.dblquad(lambda u, v: f(u, v, "imag"), -9, 9, -9, 9, epsabs=1e-10)[0]
    assert abs(normalization(np.array([[a]])) - complex(re, im)) < 1e-4
    assert normalization(np.array([[a]])) == pytest.approx(math.pi / a)


@st.composite
def forms(draw, max_n=8):
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    h = m @ m.conj().T + 0.5 * np.eye(n)
    s = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return h + draw(st.floats(0, 2)) * (s - s.conj().T)


@settings(max_examples=40, deadline=None)
@given(forms())
def test_normalization_times_determinant(a):
    assert normalization(a) * np.linalg.det(a) == pytest.approx(math.pi ** a.shape[0], rel=1e-10)


def test_nonpositive_hermitian_part_rejected():
    with pytest.raises(ValueError):
        QuadraticForm(np.array([[0.0, 1.0], [-1.0, 0.0]]))


def test_moment_examples():
    assert gaussian_moment(np.diag([1.0, 3.0]), 0, 1) == 0
    assert gaussian_moment(np.array([[2.0]]), 0, 0) == pytest.approx(0.5)
    assert gaussian_moment(np.array([[2.0, -1.0], [-1.0, 2.0]]), 0, 1) == pytest.approx(1 / 3)


def test_moment_orientation_against_proposal_oracle():
    # independent of sample_field: standard complex normal proposal, self-normalized weights
    a = np.array([[2.0, 1.0], [0.2, 2.0]])
    rng = np.random.default_rng(5)
    n = 400_000
    phi = (rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))) / math.sqrt(2)
    q = np.einsum("sx,xy,sy->s", phi, a, phi.conj())
    w = np.exp(-q + (np.abs(phi) ** 2).sum(1))
    m01 = np.mean(w * phi[:, 0].conj() * phi[:, 1]) / np.mean(w)
    inv = np.linalg.inv(a)
    assert abs(m01 - inv[0, 1]) < 0.01
    assert abs(m01 - inv[1, 0]) > 0.1


def test_hermitian_weights_are_one():
    s = sample_field(np.array([[2.0, -1.0], [-1.0, 2.0]]), 100, stream(1))
    assert np.all(s.weight == 1)


def test_weighted_sampling_recovers_moment():
    Q = build_generator(pair(1.25, 1.0, (0.5, 0.5)))
    A = QuadraticForm.from_generator(Q, 0.0)
    assert A.relative_skew_norm() < 0.2
    s = sample_field(A, 200_000, stream(2))
    vals = s.weight * s.phi[:, 0].conj() * s.phi[:, 1]
    est, se = vals.mean(), vals.real.std() / math.sqrt(vals.size)
    assert abs(est.real - np.linalg.inv(A.a)[0, 1].real) < 4 * se
    assert abs(s.weight.mean() - 1) < 0.01


def test_lejan_trivial_and_scalar():
    for c in verify_lejan(pair(), -0.5, [0.0, 0.0], 500, stream(3)):
        assert c.exact == 1 and c.estimate == pytest.approx(1.0)
    checks = verify_lejan(single(1.0), 0.0, [1.0], 20_000, stream(4))
    assert all(c.exact == pytest.approx(0.5) and c.passed for c in checks)


def test_lejan_non_symmetric():
    checks = verify_lejan(pair(2.0, 1.0, (0.5, 0.0)), 0.0, [1.0, 1.0], 40_000, stream(6))
    assert all(c.passed for c in checks)
    assert {c.identity for c in checks} == {"lejan/gaussian", "lejan/soup"}
    d = checks[0].to_dict()
    assert set(d) == {"identity", "parameters", "exact", "estimate", "stderr", "z_score", "pass"}


def test_dynkin_examples():
    assert dynkin_identity(single(1.0), 0.0, "x", "x", [0.0]) == pytest.approx((1.0, 1.0))
    assert dynkin_identity(pair(), -1.0, "a", "b", [0.0, 0.0]) == pytest.approx((1 / 3, 1 / 3))
    lhs, rhs = dynkin_identity(pair(), -1.0, "a", "b", [1.0, 1.0])
    assert lhs == pytest.approx(0.046875, abs=1e-14) and rhs == pytest.approx(0.046875, abs=1e-14)


def test_dynkin_on_random_graphs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        g = random_graph(rng, symmetric=bool(rng.integers(2)))
        v = rng.uniform(0, 2, g.n)
        x, y = rng.integers(g.n, size=2)
        lhs, rhs = dynkin_identity(g, -rng.uniform(0, 1), int(x), int(y), v)
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_symanzik_closed_forms():
    g = random_graph(np.random.default_rng(8), 4)
    lhs, rhs = symanzik_closed(g, -0.3, 2.5, 0, 2, np.zeros(4))
    A = -(build_generator(g).q - 0.3 * np.eye(4))
    assert lhs == pytest.approx(np.linalg.inv(2.5 * A)[0, 2], rel=1e-10)
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert symanzik_closed(single(1.0), 0.0, 1.0, "x", "x", [1.0]) == pytest.approx((0.5, 0.5))
    lhs, rhs = symanzik_closed(g, -0.3, 0.7, 1, 3, [0.2, 0.0, 1.0, 0.4])
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_symanzik_monte_carlo_linear():
    checks = symanzik_mc(pair(1.0, 1.0, (0.3, 0.0)), -0.2, 1.5, "a", "b", JSpec.linear([0.5, 0.2]), 20_000, stream(9))
    assert len(checks) == 3 and all(c.passed for c in checks)


@pytest.mark.slow
def test_symanzik_monte_carlo_point_mass_mixture():
    checks = symanzik_mc(pair(2.0, 1.0, (0.5, 0.0)), 0.0, 1.0, "a", "b", JSpec.mixture([0.5]), 100_000, stream(10))
    assert len(checks) == 1 and checks[0].passed


def test_jspec_validation_and_values():
    with pytest.raises(ValueError):
        JSpec.linear([-1.0])
    with pytest.raises(ValueError):
        JSpec.mixture([1.0], [-1.0])
    J = JSpec.mixture([0.0, 2.0], [0.5, 0.5])
    assert J(np.array([1.0, 0.0])) == pytest.approx(0.5 * (1 + math.exp(-2)))


def test_angular_examples():
    Q = build_generator(pair(2.0, 1.0, (0.5, 0.0)))
    occ = np.array([0.7, 1.9])
    assert conditional_angular_expectation(Q, 0.0, occ, lambda p: np.ones(len(p)), stream(1)) == pytest.approx(1.0)
    assert abs(conditional_angular_expectation(single(1.0), 0.0, [2.0], lambda p: p[:, 0], stream(1))) < 1e-12
    val = conditional_angular_expectation(Q, 0.0, occ, lambda p: np.abs(p[:, 1]) ** 2, stream(1))
    assert val == pytest.approx(1.9, rel=1e-12)
    with pytest.raises(ValueError):
        conditional_angular_expectation(Q, 0.0, [-1.0, 1.0], lambda p: p[:, 0], stream(1))


def test_soup_plus_angles_reproduce_moment():
    # E_A[conj(phi_0) phi_1] from soup occupation fields and the angular conditional law
    g = pair(1.25, 1.0, (0.5, 0.5))
    Q = build_generator(g)
    A = QuadraticForm.from_generator(Q, 0.0)
    assert A.relative_skew_norm() <= 0.2
    rng = stream(11)
    n = 3000
    occ = sample_point_field_markov(Q, 0.0, n, rng) + GenuineLoopSampler(Q, 0.0).fields(n, rng)
    F = lambda p: p[:, 0].conj() * p[:, 1]
    vals = np.array([conditional_angular_expectation(Q, 0.0, o, F, rng, samples=256, A=A) for o in occ])
    exact = np.linalg.inv(A.a)[0, 1]
    se = vals.real.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean().real - exact.real) < 3 * se
    assert abs(vals.mean().imag) < 3 * vals.imag.std(ddof=1) / math.sqrt(n) + 1e-12
