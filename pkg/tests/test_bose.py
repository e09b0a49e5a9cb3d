import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from bosonloops.bose import (
    BoseSystem,
    box_density,
    critical_density_trend,
    dirichlet_levels,
    fock_oracle,
    occupation_basis,
    partition_free,
    partition_interacting_mc,
    particle_density,
    particle_density_fd,
    rdm_free,
    rdm_free_matrix,
    rdm_interacting_mc,
    rdm_series,
    torus_green_rdm,
)
from bosonloops.graph import box_graph, build_generator
from bosonloops.loopmeas import LoopParams, bridge_measure_green
from bosonloops.soup import BosonicSoupSampler, stream
from _fixtures import graphs, pair, random_graph, single


def free(g, mu, beta=1.0, potential=None):
    return BoseSystem(g, LoopParams(mu, beta), potential or {})


def test_partition_examples():
    assert math.exp(partition_free(free(single(1.0), 0.0))) == pytest.approx(1 / (1 - math.exp(-1)), rel=1e-7)
    assert math.exp(partition_free(free(pair(), -1.0))) == pytest.approx(1.664865, rel=1e-6)
    assert partition_free(free(single(1.0), -50.0)) == pytest.approx(0.0, abs=1e-20)


def test_density_examples():
    s = free(single(1.0), 0.0)
    assert particle_density(s) == pytest.approx(1 / (math.e - 1), rel=1e-12)
    assert particle_density(s) == pytest.approx(0.581977, abs=1e-6)
    for sys_ in (s, free(pair(2.0, 1.0, (0.5, 0.0)), -0.2, 1.7)):
        assert abs(particle_density_fd(sys_) - particle_density(sys_)) < 1e-8


def test_density_from_soup_winding_numbers():
    s = free(pair(2.0, 1.0, (0.5, 0.0)), 0.0)
    sampler = BosonicSoupSampler(s.generator, s.params)
    rng = stream(1)
    counts = np.array([sum(lp.length for lp in sampler.sample(rng).loops) for _ in range(40_000)]) / s.n
    assert abs(counts.mean() - particle_density(s)) < 3 * counts.std(ddof=1) / math.sqrt(counts.size)


def test_mass_condition_enforced():
    with pytest.raises(ValueError):
        free(pair(), 0.0)
    with pytest.raises(ValueError):
        free(single(1.0), 0.5)


@settings(max_examples=25, deadline=None)
@given(graphs(), st.floats(-1.0, 0.0), st.floats(0.2, 3.0))
def test_rdm_closed_form_series_and_bridge_mass(g, mu, beta):
    s = free(g, mu, beta)
    rho = rdm_free_matrix(s)
    E = expm(beta * (s.generator.q + mu * np.eye(g.n)))
    assert np.allclose(rho, E @ np.linalg.inv(np.eye(g.n) - E), atol=1e-10)
    assert np.allclose(rdm_series(s), rho, atol=1e-8)
    assert np.trace(rho) == pytest.approx(particle_density(s) * g.n, rel=1e-10)
    for x, y in [(0, 0), (0, g.n - 1)]:
        assert abs(rdm_free(s, x, y) - bridge_measure_green(s.generator, s.params, x, y, bosonic=True)) < 1e-12


def test_rdm_symmetric_on_symmetric_graphs():
    rho = rdm_free_matrix(free(random_graph(np.random.default_rng(3), 5, symmetric=True), -0.1, 2.0))
    assert np.allclose(rho, rho.T, atol=1e-13)


def test_trace_series_is_number_derivative():
    # sum_j e^{beta mu j} tr p_{j beta} = d log Z / d(beta mu)
    s = free(random_graph(np.random.default_rng(5), 4), -0.3, 1.2)
    vals = np.linalg.eigvals(s.generator.q - 0.3 * np.eye(4))
    series = sum(np.sum(np.exp(1.2 * j * vals)).real for j in range(1, 400))
    assert np.trace(rdm_free_matrix(s)) == pytest.approx(series, abs=1e-10)


# --- Fock oracle --------------------------------------------------------------------------


def test_occupation_basis_sizes():
    assert occupation_basis(3, 0).tolist() == [[0, 0, 0]]
    for n_sites, n in [(2, 5), (3, 4), (4, 3)]:
        b = occupation_basis(n_sites, n)
        assert len(b) == math.comb(n + n_sites - 1, n) and np.all(b.sum(1) == n)
        assert len({tuple(r) for r in b}) == len(b)


def test_fock_free_single_vertex():
    r = fock_oracle(free(single(1.0), 0.0), 30)
    assert r.log_z == pytest.approx(partition_free(free(single(1.0), 0.0)), abs=1e-12)
    assert r.rho1[0, 0] == pytest.approx(1 / (math.e - 1), abs=1e-11)
    vac = fock_oracle(free(single(1.0), 0.0), 0)
    assert vac.log_z == 0.0 and vac.rho1[0, 0] == 0.0


def test_fock_free_two_vertex_and_bound():
    s = free(pair(), -1.0)
    r = fock_oracle(s, 16)
    assert abs(r.log_z - partition_free(s)) < 1e-6
    assert np.abs(r.rho1 - rdm_free_matrix(s)).max() < 1e-6
    coarse = fock_oracle(s, 6)
    assert abs(coarse.log_z - partition_free(s)) <= coarse.log_z_bound * (1 + 1e-9)
    assert np.abs(coarse.rho1 - rdm_free_matrix(s)).max() <= coarse.rho1_bound
    assert coarse.sector_weights.sum() == pytest.approx(1.0)


def test_fock_orientation_on_non_symmetric_graph():
    s = free(pair(2.0, 0.5, (0.5, 0.0)), -1.5)
    r = fock_oracle(s, 30)
    assert r.log_z_bound == math.inf
    rho = rdm_free_matrix(s)
    assert abs(rho[0, 1] - rho[1, 0]) > 0.05
    assert np.allclose(r.rho1, rho, atol=1e-7)


def test_fock_interaction_lowers_partition_function():
    g = box_graph(1, 2)
    base = fock_oracle(free(g, -0.5), 10).log_z
    weak = fock_oracle(free(g, -0.5, potential={0: 0.3}), 10).log_z
    strong = fock_oracle(free(g, -0.5, potential={0: 1.0, 1: 0.2}), 10).log_z
    assert strong < weak < base


def test_fock_too_large_rejected():
    with pytest.raises(ValueError):
        fock_oracle(free(box_graph(2, 4), -0.5), 12)


# --- interacting Monte Carlo ---------------------------------------------------------------


def test_mc_without_interaction_is_exact():
    s = free(pair(), -0.5)
    assert partition_interacting_mc(s, 10, stream(0)).value == partition_free(s)
    est = rdm_interacting_mc(s, "a", "b", 10, stream(0))
    assert est.value == rdm_free(s, "a", "b") and est.stderr == 0.0


def test_unstable_pair_potential_rejected():
    with pytest.raises(ValueError):
        partition_interacting_mc(free(box_graph(1, 2), -0.5, potential={0: -1.0}), 10, stream(0))


def test_interacting_mc_matches_fock():
    s = free(box_graph(1, 2), -0.5, potential={0: 1.0, 1: 0.2})
    ref = fock_oracle(s, 8)
    z = partition_interacting_mc(s, 20_000, stream(2))
    assert not z.flagged
    assert abs(z.value - ref.log_z) < 3 * z.stderr + ref.log_z_bound
    assert z.value < partition_free(s)
    x, y = s.graph.vertices
    r = rdm_interacting_mc(s, x, y, 20_000, stream(3))
    assert abs(r.value - ref.rho1[0, 1]) < 3 * r.stderr + ref.rho1_bound
    assert r.value < rdm_free(s, x, y)
    assert set(r.to_dict()) >= {"value", "stderr", "samples", "flagged", "rho1_free", "ratio"}


# --- critical density -----------------------------------------------------------------------


def test_dirichlet_levels():
    L = 6
    Q = build_generator(box_graph(1, L)).q
    assert np.allclose(np.sort(dirichlet_levels(L)), np.sort(np.linalg.eigvalsh(-Q)))


def test_box_density_matches_generic_route():
    for d, L in [(1, 7), (2, 4), (3, 4)]:
        s = free(box_graph(d, L), -0.05, 1.5)
        assert box_density(d, L, 1.5, -0.05) == pytest.approx(particle_density(s), rel=1e-10)


def test_critical_density_trend_report():
    rep = critical_density_trend(1, 1.0, [16, 64, 256], [-1e-1, -1e-2])
    assert rep["monotone_in_mu"] and rep["mu_growth"] > 1
    assert len(rep["rows"]) == 6
    with pytest.raises(ValueError):
        critical_density_trend(4, 1.0, [4], [-0.1])
    with pytest.raises(ValueError):
        critical_density_trend(1, 1.0, [4], [0.0])


def test_critical_density_saturates_in_three_dimensions_only():
    three = critical_density_trend(3, 1.0, [32, 64], [-1e-2, -1e-3])
    assert three["bounded"] is False or three["rel_change"] < 0.2
    one = critical_density_trend(1, 1.0, [512, 2048], [-1e-1, -1e-3])
    assert one["mu_growth"] > 5


# --- space-time linkage -----------------------------------------------------------------


def test_torus_green_sum_reaches_rdm():
    g = pair(1.0, 1.0, (0.3, 0.0))
    s = free(g, -0.4, 1.7)
    gaps = [np.abs(torus_green_rdm(g, -0.4, 1.7, N) - rdm_free_matrix(s)).max() for N in (8, 16, 32, 64)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
