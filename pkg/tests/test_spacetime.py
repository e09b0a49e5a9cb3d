import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.linalg import expm

from bosonloops.bose import torus_green_rdm
from bosonloops.graph import build_generator, heat_kernel, torus_kernel
from bosonloops.loopmeas import FDDQuery, LoopParams, markov_fdd
from bosonloops.soup import MarkovSoupSampler, stream
from bosonloops.spacetime import (
    SPLIT_KEYS,
    SpaceTimePath,
    build_spacetime,
    gamma_mixture_fdd,
    occupation_convergence,
    periodic_box,
    perturbation_bound,
    project_loop,
    projected_fdd_exact,
    rows_to_csv,
    split_local_time,
    torus_limit_sweep,
    torus_limit_value,
    winding_diagnostics,
)
from _fixtures import pair, random_graph, single

QUERY = FDDQuery((0.5,), ("a",), [[0.9, 1.1]])


# --- assembly ----------------------------------------------------------------------


def test_single_vertex_torus_circulant():
    st_ = build_spacetime(single(0.0 + 1.0), 3, 2.0)
    q = st_.generator.q
    assert q[0, 1] == pytest.approx(1.5) and q[1, 2] == pytest.approx(1.5) and q[2, 0] == pytest.approx(1.5)
    assert q[1, 0] == 0.0
    assert np.allclose(q.sum(1), -1.0)


def test_two_vertex_two_site_assembly():
    q = build_spacetime(pair(), 2, 1.0).generator.q
    assert q.shape == (4, 4)
    # state (x, tau) sits at x * N + tau
    assert q[0, 1] == pytest.approx(2.0) and q[0, 2] == pytest.approx(1.0) and q[0, 3] == 0.0
    assert np.allclose(q.sum(1), 0.0)


@pytest.mark.parametrize("variant", ["independent", "symmetrized", "perturbed"])
@pytest.mark.parametrize("N", [1, 2, 5, 9])
def test_row_sums_are_base_killing(variant, N):
    base = random_graph(np.random.default_rng(N), 3)
    st_ = build_spacetime(base, N, 1.3, variant, seed=4)
    assert np.allclose(st_.generator.q.sum(1), -st_.lift(base.killing), atol=1e-12)
    off = st_.generator.q - np.diag(np.diag(st_.generator.q))
    assert np.all(off >= 0)


def test_symmetrized_rates_both_ways():
    q = build_spacetime(single(), 6, 1.5, "symmetrized").generator.q
    assert q[0, 1] == pytest.approx(4.0) and q[1, 0] == pytest.approx(4.0) and q[0, 5] == pytest.approx(4.0)


def test_perturbation_norm_and_floor():
    base = pair()
    st4 = build_spacetime(base, 4, 1.0, "perturbed", schedule="weak", seed=1)
    diff = st4.generator.q - build_spacetime(base, 4, 1.0).generator.q
    off = diff - np.diag(np.diag(diff))
    assert np.all(off >= 0)
    assert off.sum() == pytest.approx(perturbation_bound("weak", 4, 2, 1.0, 1.0), rel=1e-9)
    assert not st4.floored
    st64 = build_spacetime(base, 64, 1.0, "perturbed", schedule="weak", seed=1)
    assert st64.floored and st64.perturbation_norm == 1e-300
    again = build_spacetime(base, 4, 1.0, "perturbed", schedule="weak", seed=1)
    assert np.array_equal(again.generator.q, st4.generator.q)
    with pytest.raises(ValueError):
        perturbation_bound("strong", 4, 2, 1.0, 3.0, alpha=2.0)


@pytest.mark.parametrize("N", [1, 3, 8, 16])
def test_heat_kernel_factorizes(N):
    base = random_graph(np.random.default_rng(30 + N), 3)
    st_ = build_spacetime(base, N, 0.8)
    t = 0.7
    big = expm(t * st_.generator.q)
    p = heat_kernel(base, t).matrix
    tk = torus_kernel(N, 0.8, t)
    n = base.n
    for x in range(n):
        for y in range(n):
            for tau in range(N):
                row = big[st_.state(x, tau), [st_.state(y, s) for s in range(N)]]
                assert np.allclose(row, p[x, y] * tk[(np.arange(N) - tau) % N], atol=1e-10)


# --- projected fdds ----------------------------------------------------------------


def _probe(N, directed, nonzero=False):
    """Direct quadrature with Poisson / Skellam return probabilities from scipy.stats."""
    Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    js = np.arange(-40, 41)
    if nonzero:
        js = js[js != 0]

    def ret(t):
        r = t * N
        if directed:
            return stats.poisson.pmf(js[js >= 0] * N, r).sum()
        return stats.skellam.pmf(js * N, r, r).sum()

    f = lambda t: expm(t * Q)[0, 0] * N * ret(t) * math.exp(-0.5 * t) / t
    return integrate.quad(f, 0.9, 1.1, epsabs=1e-14)[0]


@pytest.mark.parametrize("N", [8, 16])
def test_closed_form_against_scipy_oracle(N):
    ind = projected_fdd_exact(build_spacetime(pair(), N, 1.0), -0.5, QUERY)
    sym = build_spacetime(pair(), N, 1.0, "symmetrized")
    assert ind == pytest.approx(_probe(N, True), rel=1e-7)
    assert projected_fdd_exact(sym, -0.5, QUERY) == pytest.approx(_probe(N, False), rel=1e-7)
    assert projected_fdd_exact(sym, -0.5, QUERY, winding="nonzero") == pytest.approx(_probe(N, False, True), rel=1e-6)


@pytest.mark.parametrize("variant", ["independent", "symmetrized"])
def test_dense_and_closed_routes_agree(variant):
    base = random_graph(np.random.default_rng(40), 3)
    q = FDDQuery((0.3, 0.6), (base.vertices[0], base.vertices[1]), [[0.95, 2.2]])
    for N in (1, 4, 9):
        st_ = build_spacetime(base, N, 1.1, variant)
        a = projected_fdd_exact(st_, -0.2, q, method="closed")
        b = projected_fdd_exact(st_, -0.2, q, method="dense")
        assert a == pytest.approx(b, rel=1e-8, abs=1e-13)


def test_n1_is_markovian_with_folded_torus_holding():
    # with N = 1 the torus jumps are self-loops, so the walk is the base walk
    base = pair(1.0, 0.5, (0.2, 0.0))
    q = FDDQuery((0.4,), ("b",), [[1.3, 2.7]])
    val = projected_fdd_exact(build_spacetime(base, 1, 1.0), -0.3, q)
    # N * P_{1,0,0} = 1, so the projected measure equals the Markovian loop measure
    assert val == pytest.approx(markov_fdd(base, -0.3, q), rel=1e-9)


def test_gamma_mixture_representation():
    base = random_graph(np.random.default_rng(41), 3)
    x = base.vertices[2]
    for A in ([[0.7, 2.6]], [[1.4, "inf"]]):
        q = FDDQuery((0.2,), (x,), A)
        for N in (3, 12):
            st_ = build_spacetime(base, N, 0.9)
            assert projected_fdd_exact(st_, -0.4, q) == pytest.approx(gamma_mixture_fdd(st_, -0.4, q), rel=1e-8)


def test_single_vertex_independent_approaches_bosonic():
    q = FDDQuery((0.5,), ("x",), [[0.9, 1.1]])
    errs = [abs(projected_fdd_exact(build_spacetime(single(), N, 1.0), 0.0, q) - math.exp(-1)) for N in (8, 32, 128, 256)]
    # the window is narrow, so the error only drops once beta / sqrt(N) is below its width
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0] / 5


def test_symmetrized_nonzero_winding_part_vanishes():
    vals = [projected_fdd_exact(build_spacetime(pair(), N, 1.0, "symmetrized"), -0.5, QUERY, winding="nonzero") for N in (8, 16, 32, 64)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6


def test_symmetrized_below_independent():
    for N in (8, 16, 32, 64):
        ind = projected_fdd_exact(build_spacetime(pair(), N, 1.0), -0.5, QUERY)
        sym = projected_fdd_exact(build_spacetime(pair(), N, 1.0, "symmetrized"), -0.5, QUERY)
        assert sym < ind


def test_periodic_mixing_limit_and_trend():
    base = periodic_box(1, 1)
    assert len(base.vertices) == 3
    q = FDDQuery((0.5,), (base.vertices[0],), [[0.9, 1.1]])
    lim = torus_limit_value("periodic_mixing", base, -0.5, 1.0, q)
    assert lim == pytest.approx(math.exp(-0.5) / 3, rel=1e-12)
    rows = torus_limit_sweep(base, -0.5, 1.0, q, [8, 16, 32, 64], "periodic_mixing")
    errs = [r["abs_error"] for r in rows]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_sweep_rows_and_boundary_check():
    rows = torus_limit_sweep(pair(), -0.5, 1.0, QUERY, [16, 8], "symmetrized", query_id="q1")
    assert [r["N"] for r in rows] == [8, 16]
    assert all(r["limit"] == 0.0 and r["query_id"] == "q1" for r in rows)
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "variant,N,query_id,value,limit,abs_error"
    with pytest.raises(ValueError):
        torus_limit_sweep(pair(), -0.5, 1.0, FDDQuery((0.5,), ("a",), [[0.9, 1.0]]), [8])


# --- space-time loops ---------------------------------------------------------------


def test_loop_projection_and_bookkeeping():
    base = pair(1.0, 0.7, (0.2, 0.0))
    N = 4
    st_ = build_spacetime(base, N, 1.0)
    sampler = MarkovSoupSampler(st_.generator, -0.1, 0.3)
    rng = stream(42)
    seen = set()
    for _ in range(150):
        for lp in sampler.sample(rng).loops:
            sp = SpaceTimePath(lp, N)
            assert sp.torus_jumps == N * sp.winding
            pr = project_loop(sp)
            pr.validate(build_generator(base))
            assert pr.length == lp.length
            full = lp.local_times(st_.n_states).reshape(base.n, N).sum(1)
            assert np.allclose(pr.local_times(base.n), full)
            parts = split_local_time(sp, base.n)
            assert set(parts) == set(SPLIT_KEYS)
            assert sum(v.sum() for v in parts.values()) == pytest.approx(lp.length)
            seen.add(next(k for k in SPLIT_KEYS if parts[k].sum() > 0))
    assert {"space_and_torus", "torus_only"} <= seen


def test_projection_of_pure_torus_and_constant_loops():
    from bosonloops.soup import Loop

    N = 3
    torus_loop = Loop(3, 2.0, [0.5, 1.0, 1.5], [4, 5, 3])  # vertex 1, tau 0 -> 1 -> 2 -> 0
    sp = SpaceTimePath(torus_loop, N)
    assert sp.winding == 1 and sp.spatial_jumps == 0
    pr = project_loop(sp)
    assert pr.n_jumps == 0 and pr.start == 1 and pr.length == 2.0
    assert split_local_time(sp, 2)["torus_only"].sum() == pytest.approx(2.0)
    const = SpaceTimePath(Loop(2, 1.0), N)
    assert split_local_time(const, 2)["no_jump"].sum() == pytest.approx(1.0)


# --- winding diagnostics -----------------------------------------------------------


def test_independent_winding_time_matches_gamma_law():
    # one winding takes N torus steps at rate N/beta; survival tilts the Gamma rate by kappa
    beta, kappa = 1.0, 1.0
    for N in (8, 32):
        rep = winding_diagnostics(build_spacetime(single(kappa), N, beta), 0.0, 20_000, stream(N))
        r = N / beta + kappa
        mean, var = N / r, N / r**2
        assert abs(rep.d_hat[0, 0] - (N / beta / r) ** N) <= 3 * rep.d_stderr[0, 0]
        exact = var + (beta - mean) ** 2
        assert abs(rep.time_var[0, 0] - exact) <= 3 * rep.time_var_stderr[0, 0]
        assert rep.d_hat.sum(1).max() <= 1


def test_symmetrized_winding_time_does_not_concentrate():
    reps = [winding_diagnostics(build_spacetime(single(), N, 1.0, "symmetrized"), 0.0, 5000, stream(N)) for N in (8, 32, 128)]
    tv = [r.time_var[0, 0] for r in reps]
    assert min(tv) > 0.3
    assert tv[2] > tv[0]


# --- occupation fields and Green functions ------------------------------------------


def test_occupation_convergence_examples():
    rows = occupation_convergence(single(), 0.0, 1.0, [0.0], [4, 8])
    assert all(r["left"] == pytest.approx(1.0) and r["right"] == pytest.approx(1.0) for r in rows)
    rows = occupation_convergence(single(), 0.0, 1.0, [1.0], [4, 8, 16, 32])
    assert rows[0]["right"] == pytest.approx(math.exp(-1) * (1 - math.exp(-1)) / (1 - math.exp(-2)), rel=1e-12)
    gaps = [r["gap"] for r in rows]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))


@pytest.mark.parametrize("v", [None, [0.3, 0.1]])
def test_torus_green_sum_tends_to_reduced_density_matrix(v):
    base = pair(1.0, 1.0, (0.3, 0.0))
    mu, beta = -0.4, 1.7
    shifted = build_generator(base).shifted(np.zeros(2) if v is None else np.asarray(v))
    from bosonloops.loopmeas import bosonic_green

    target = bosonic_green(shifted, LoopParams(mu, beta))
    gaps = [np.abs(torus_green_rdm(base, mu, beta, N, v) - target).max() for N in (8, 16, 32, 64)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.06
    # first-order rate
    assert gaps[-2] / gaps[-1] == pytest.approx(2.0, rel=0.15)
