"""Space-time random walks on Lambda x T_N and their torus limits.

State (x, tau) of the product graph is stored at index ``x * N + tau``.  The
independent walk has generator Q (x) I_N + I (x) (N/beta)(Sigma - I), where
Sigma is the right shift of the discrete torus T_N = Z/NZ.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

from .graph import (
    Generator,
    GraphError,
    KernelEvaluator,
    WeightedGraph,
    build_generator,
    check_mass_condition,
    expm_generator,
    generator_from_matrix,
    perron_bound,
    torus_generator,
    torus_kernel,
)
from .loopmeas import FDDQuery, LoopParams, _path_product, bosonic_fdd, occupation_laplace_bosonic, occupation_laplace_markov
from .soup import Loop, Path, RngLike, as_rng, stream

VARIANTS = ("independent", "perturbed", "symmetrized", "periodic_mixing")
DENSE_LIMIT = 4096
NORM_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class SpaceTimeGraph:
    base: WeightedGraph
    n: int
    beta: float
    variant: str
    generator: Generator
    schedule: str | None = None
    perturbation_norm: float = 0.0
    floored: bool = False
    info: dict = field(default_factory=dict)

    @property
    def n_space(self) -> int:
        return self.base.n

    @property
    def n_states(self) -> int:
        return self.base.n * self.n

    def state(self, x: int, tau: int) -> int:
        return x * self.n + tau % self.n

    def split(self, s) -> tuple:
        return np.divmod(s, self.n)

    def lift(self, v) -> np.ndarray:
        """Spatial vector -> space-time vector constant along the torus."""
        return np.repeat(np.asarray(v, dtype=float), self.n)


def periodic_box(M: int, d: int = 1) -> WeightedGraph:
    """{-M, ..., M}^d with periodic identification and unit nearest-neighbour rates."""
    from .graph import box_graph

    g = box_graph(d, 2 * M + 1, boundary="periodic")
    labels = tuple(",".join(str(int(c) - M) for c in lab.split(",")) for lab in g.vertices)
    return WeightedGraph(labels, g.weights, g.killing)


def perturbation_bound(schedule: str, N: int, n_space: int, beta: float, lam_max: float, alpha: float | None = None) -> float:
    """Entrywise 1-norm budget of E_N: N^{-2N|Lambda|}/N (weak) or e^{-alpha N^2}/N (strong)."""
    if schedule == "weak":
        return math.exp(-2 * N * n_space * math.log(N) - math.log(N)) if N > 1 else 0.5
    if schedule == "strong":
        if alpha is None:
            alpha = lam_max / beta + 1.0
        if alpha <= lam_max / beta:
            raise ValueError("strong schedule needs alpha > max(lambda)/beta")
        return math.exp(-alpha * N * N - math.log(N))
    raise ValueError(f"unknown perturbation schedule {schedule!r}")


def build_spacetime(
    base: WeightedGraph,
    N: int,
    beta: float,
    variant: str = "independent",
    *,
    schedule: str = "weak",
    seed: int = 0,
    alpha: float | None = None,
    norm: float | None = None,
) -> SpaceTimeGraph:
    """Assemble the generator of one of the four space-time walks.

    ``perturbed`` adds a seeded nonnegative E_N (diagonal compensated so that row
    sums stay -kappa).  Its entrywise 1-norm follows ``schedule`` unless ``norm``
    is given; budgets below 1e-300 are raised to that floor and flagged.
    ``periodic_mixing`` moves space and torus together: (x, tau) -> (y, tau + 1)
    at rate (N/beta) P(x, y) with P the base jump chain.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if N < 1 or int(N) != N:
        raise ValueError("torus size N must be a positive integer")
    if not beta > 0:
        raise ValueError("beta must be positive")
    N = int(N)
    Q = build_generator(base)
    n = base.n
    eye_n, eye_N = np.eye(n), np.eye(N)
    info: dict = {}
    pnorm, floored = 0.0, False
    if variant in ("independent", "perturbed"):
        g = np.kron(Q.q, eye_N) + np.kron(eye_n, torus_generator(N, beta, True))
    elif variant == "symmetrized":
        g = np.kron(Q.q, eye_N) + np.kron(eye_n, torus_generator(N, beta, False))
    else:
        P = base.weights / np.where(base.weights.sum(1) > 0, base.weights.sum(1), 1.0)[:, None]
        if np.any(base.weights.sum(1) == 0):
            raise GraphError("periodic_mixing needs every vertex to have a neighbour")
        shift = np.roll(eye_N, 1, axis=1)  # shift[tau, tau + 1] = 1
        g = (N / beta) * (np.kron(P, shift) - np.eye(n * N)) - np.kron(np.diag(base.killing), eye_N)
        info["stationary"] = stationary_distribution(P).tolist()
    if variant == "perturbed":
        budget = perturbation_bound(schedule, N, n, beta, float(Q.lam.max()), alpha) if norm is None else float(norm)
        if budget < NORM_FLOOR:
            budget, floored = NORM_FLOOR, True
        rng = stream(seed, N)
        e = rng.random((n * N, n * N))
        np.fill_diagonal(e, 0.0)
        e *= budget / e.sum()
        g = g + e
        g[np.diag_indices_from(g)] -= e.sum(axis=1)
        pnorm = float(e.sum())
        info.update(schedule=schedule, seed=seed)
    gen = generator_from_matrix(g)
    return SpaceTimeGraph(base, N, float(beta), variant, gen, schedule if variant == "perturbed" else None, pnorm, floored, info)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Left Perron vector of a stochastic matrix, normalized to sum 1."""
    evals, evecs = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(evals - 1)))
    pi = np.abs(evecs[:, k].real)
    return pi / pi.sum()


# --- torus factors ------------------------------------------------------------------


def torus_return_weight(N: int, beta: float, t: float, directed: bool = True, winding: str = "all") -> float:
    """N * P(torus walk at 0 at time t | start 0), optionally restricted by winding.

    ``winding='all'`` uses the circulant kernel; ``'nonzero'`` removes the loops
    whose net torus displacement is zero, using the Poisson (directed) or Skellam
    (two-sided) law of the lifted walk on Z.
    """
    if winding == "all":
        return N * float(torus_kernel(N, beta, t, directed)[0])
    if winding != "nonzero":
        raise ValueError(f"unknown winding filter {winding!r}")
    r = N / beta * t
    if directed:
        js = np.arange(1, int((r + 40 * math.sqrt(r + 1) + 40) / N) + 2)
        return N * float(np.exp(stats.poisson.logpmf(js * N, r)).sum())
    # P(U - D = m) for independent Poisson(r) counts = e^{-2r} I_m(2r)
    jmax = int((2 * r + 40 * math.sqrt(2 * r + 1) + 40) / N) + 2
    ms = np.arange(1, jmax + 1) * N
    return N * 2 * float(special.ive(ms, 2 * r).sum())


def _directed_closed_form(st: SpaceTimeGraph) -> bool | None:
    if st.variant == "independent":
        return True
    if st.variant == "symmetrized":
        return False
    return None


# --- projected fdd --------------------------------------------------------------------


def _split_at_multiples(a: float, b: float, beta: float) -> list[float]:
    pts = [a]
    j = math.floor(a / beta) + 1
    while j * beta < b:
        pts.append(j * beta)
        j += 1
    pts.append(b)
    return pts


def _tail_cutoff(q: np.ndarray, mu: float, a: float, prefactor: float, delta: float, x: int, y: int, tol: float) -> float:
    """T with int_T^inf prefactor e^{mu t}/t e^{tQ}(x, y)|_{t - delta} dt below tol (Perron bound)."""
    lam, u = perron_bound(q)
    rate = mu + lam
    const = prefactor * math.exp(-delta * lam) * u[x] / u[y]
    if rate >= 0:
        raise ValueError("fdd diverges on an unbounded length set")
    T = max(a, 1.0)
    while const * math.exp(rate * T) / (T * -rate) > tol:
        T *= 1.25
    return T


def projected_fdd_exact(
    st: SpaceTimeGraph,
    mu: float,
    q: FDDQuery,
    *,
    winding: str = "all",
    method: str = "auto",
    tol: float = 1e-9,
) -> float:
    """Finite-dimensional distribution of the spatially projected space-time loop measure.

    For the independent and symmetrized walks the torus factor separates:
    p^{(k)} int_A p_{t - t_k + t_1}(x_k, x_1) N P_t(0 -> 0) e^{mu t}/t dt.  Other
    variants (or ``method='dense'``) sum the space-time heat kernel over the torus
    coordinates, tr(B_1 ... B_{k-1} C(t)), with dense exponentials on Lambda x T_N.
    """
    Q = build_generator(st.base)
    check_mass_condition(st.generator, mu)
    idx = q.indices(st.base)
    directed = _directed_closed_form(st)
    if method == "auto":
        method = "closed" if directed is not None else "dense"
    if method == "closed":
        if directed is None:
            raise ValueError(f"closed torus factor unavailable for variant {st.variant!r}")
        return _fdd_closed(st, Q, mu, q, idx, directed, winding, tol)
    if winding != "all":
        raise ValueError("winding filters need the closed torus factor")
    return _fdd_dense(st, mu, q, idx, tol)


def _fdd_closed(st, Q, mu, q, idx, directed, winding, tol) -> float:
    pk = _path_product(Q, q.times, idx)
    if pk == 0:
        return 0.0
    delta = q.times[-1] - q.times[0]
    kern = KernelEvaluator(Q.q)
    x, y = idx[-1], idx[0]
    N, beta = st.n, st.beta

    def f(t):
        return math.exp(mu * t) / t * kern.entry(t - delta, x, y) * torus_return_weight(N, beta, t, directed, winding)

    total = 0.0
    for a, b in q.lengths.intervals:
        if math.isinf(b):
            b = _tail_cutoff(Q.q, mu, a, float(N), delta, x, y, tol * 1e-3)
        pts = _split_at_multiples(a, b, beta)
        for lo, hi in zip(pts, pts[1:]):
            val, _ = integrate.quad(f, lo, hi, epsabs=tol / len(pts), epsrel=1e-11, limit=400)
            total += val
    return pk * total


def _fdd_dense(st, mu, q, idx, tol) -> float:
    if st.n_states > DENSE_LIMIT:
        raise ValueError(f"dense fallback limited to {DENSE_LIMIT} states, got {st.n_states}")
    G = st.generator.q
    N = st.n
    blk = lambda x: slice(x * N, (x + 1) * N)  # noqa: E731
    prod = np.eye(N)
    for (s, t), (a, b) in zip(zip(q.times, q.times[1:]), zip(idx, idx[1:])):
        prod = prod @ expm_generator(G, t - s, False)[blk(a), blk(b)]
    delta = q.times[-1] - q.times[0]
    kern = KernelEvaluator(G)
    x, y = idx[-1], idx[0]

    def f(t):
        C = kern(t - delta)[blk(x), blk(y)]
        return math.exp(mu * t) / t * float(np.sum(prod.T * C))

    total = 0.0
    for a, b in q.lengths.intervals:
        if math.isinf(b):
            b = max(
                _tail_cutoff(G, mu, a, float(N * N), delta, x * N + i, y * N + j, tol * 1e-3)
                for i in (0, N - 1) for j in (0, N - 1)
            )
        pts = _split_at_multiples(a, b, st.beta)
        for lo, hi in zip(pts, pts[1:]):
            val, _ = integrate.quad(f, lo, hi, epsabs=tol / len(pts), epsrel=1e-11, limit=400)
            total += val
    return total


def gamma_mixture_fdd(st: SpaceTimeGraph, mu: float, q: FDDQuery, tol: float = 1e-12) -> float:
    """Independent walk only: beta p^{(k)} sum_{j >= 0} E[1_A(X) p_{X - t_k + t_1}(x_k, x_1) e^{mu X}/X],
    X ~ Gamma(shape jN + 1, rate N/beta)."""
    if st.variant != "independent":
        raise ValueError("the Gamma-mixture representation holds for the independent walk")
    Q = build_generator(st.base)
    idx = q.indices(st.base)
    pk = _path_product(Q, q.times, idx)
    delta = q.times[-1] - q.times[0]
    kern = KernelEvaluator(Q.q)
    x, y = idx[-1], idx[0]
    N, beta = st.n, st.beta
    rate = N / beta
    total = 0.0
    j = 0
    while True:
        dist = stats.gamma(a=j * N + 1, scale=1 / rate)
        lo_q, hi_q = dist.ppf(1e-17), dist.isf(1e-17)
        part = 0.0
        for a, b in q.lengths.intervals:
            lo, hi = max(a, lo_q), min(b, hi_q)
            if hi <= lo:
                continue
            g = lambda t: dist.pdf(t) * kern.entry(t - delta, x, y) * math.exp(mu * t) / t  # noqa: E731
            part += integrate.quad(g, lo, hi, epsabs=tol, epsrel=1e-11, limit=400, points=[dist.mean()] if lo < dist.mean() < hi else None)[0]
        total += part
        mean = (j * N + 1) / rate
        if mean > q.lengths.sup + 20 * math.sqrt(j * N + 1) / rate:
            break
        if not q.lengths.bounded and part < tol * 1e-3 and mean > q.lengths.inf + 1:
            break
        j += 1
    return beta * pk * total


def torus_limit_value(st_or_variant, base: WeightedGraph, mu: float, beta: float, q: FDDQuery) -> float:
    """Limit of the projected fdd as N -> infinity for the given variant."""
    variant = st_or_variant.variant if isinstance(st_or_variant, SpaceTimeGraph) else st_or_variant
    if variant in ("independent", "perturbed"):
        return bosonic_fdd(base, LoopParams(mu, beta), q)
    if variant == "symmetrized":
        return 0.0
    if q.k != 1:
        raise ValueError("the periodic-mixing limit is implemented for one-time queries")
    P = base.weights / base.weights.sum(1)[:, None]
    pi = stationary_distribution(P)
    x = q.indices(base)[0]
    js = q.lengths.multiples(beta, None if q.lengths.bounded else _jcut(mu, beta))
    return float(pi[x] * sum(math.exp(mu * j * beta) / j for j in js))


def _jcut(mu: float, beta: float) -> int:
    if mu >= 0:
        raise ValueError("periodic-mixing limit on an unbounded set needs mu < 0")
    return int(math.ceil(40 / (-mu * beta))) + 1


# --- loops on the space-time graph ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpaceTimePath:
    loop: Path
    n: int

    @property
    def winding(self) -> int:
        """Net torus displacement / N, read off the jump record."""
        if self.n == 1 or self.loop.n_jumps == 0:
            return 0
        tau = self.loop.states % self.n
        d = np.diff(tau) % self.n
        d = np.where(d > self.n // 2, d - self.n, d)
        if self.n == 2:
            d = np.abs(d)
        return int(round(d.sum() / self.n))

    @property
    def torus_jumps(self) -> int:
        tau = self.loop.states % self.n
        return int(np.count_nonzero(np.diff(tau)))

    @property
    def spatial_jumps(self) -> int:
        x = self.loop.states // self.n
        return int(np.count_nonzero(np.diff(x)))


def project_loop(p: SpaceTimePath) -> Path:
    """Spatial component of a space-time path; torus-only jumps disappear."""
    lp = p.loop
    xs = lp.states // p.n
    moves = xs[1:] != xs[:-1]
    cls = Loop if isinstance(lp, Loop) else Path
    return cls(int(xs[0]), lp.length, lp.jump_times[moves], xs[1:][moves])


SPLIT_KEYS = ("space_and_torus", "torus_only", "space_only", "no_jump")


def split_local_time(p: SpaceTimePath, n_space: int) -> dict:
    """Local time on Lambda x T_N assigned to one of four classes by the jump types present."""
    lt = p.loop.local_times(n_space * p.n)
    has_space, has_torus = p.spatial_jumps > 0, p.torus_jumps > 0
    key = {(True, True): "space_and_torus", (False, True): "torus_only", (True, False): "space_only", (False, False): "no_jump"}[
        (has_space, has_torus)
    ]
    return {k: (lt if k == key else np.zeros_like(lt)) for k in SPLIT_KEYS}


# --- winding diagnostics --------------------------------------------------------------


@dataclass
class WindingReport:
    d_hat: np.ndarray
    d_stderr: np.ndarray
    time_var: np.ndarray
    time_var_stderr: np.ndarray
    weighted_msd: np.ndarray
    completed: np.ndarray
    attempts: int
    capped: int

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def winding_diagnostics(
    st: SpaceTimeGraph, mu: float, samples: int, rng: RngLike = None, max_steps: int | None = None
) -> WindingReport:
    """Monte Carlo over excursions of the embedded jump chain until the first torus return.

    From (x, tau) with tau uniform, the chain runs until its torus coordinate is
    tau again (a winding-one path) or it is killed.  W is the sum of the holding
    times before the return step.  ``d_hat[x, y]`` estimates the probability of
    returning at spatial site y; ``time_var[x, y]`` the conditional mean of
    (beta - W)^2 on that event; ``weighted_msd`` their product (the P-weighted sum).
    """
    check_mass_condition(st.generator, mu)
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = as_rng(rng)
    G = st.generator.q
    S, N, n = st.n_states, st.n, st.n_space
    out_rate = -np.diag(G)
    off = G - np.diag(np.diag(G))
    width = max(1, int((off > 0).sum(axis=1).max()))
    targets = np.full((S, width), -1, dtype=int)
    cum = np.zeros((S, width))
    for s in range(S):
        nz = np.flatnonzero(off[s] > 0)
        targets[s, : nz.size] = nz
        cum[s, : nz.size] = np.cumsum(off[s, nz]) / out_rate[s]
    cum[cum == 0] = np.inf
    cum[:, 0] = np.where(targets[:, 0] >= 0, cum[:, 0], np.inf)
    if max_steps is None:
        max_steps = 20 * (N + 50)
    hits = np.zeros((n, n))
    sq = np.zeros((n, n))
    sq2 = np.zeros((n, n))
    capped = 0
    for x in range(n):
        tau0 = rng.integers(0, N, samples)
        state = x * N + tau0
        W = np.zeros(samples)
        alive = np.ones(samples, dtype=bool)
        steps = 0
        while alive.any() and steps < max_steps:
            ia = np.flatnonzero(alive)
            s = state[ia]
            W[ia] += rng.exponential(1.0, ia.size) / out_rate[s]
            u = rng.random(ia.size)
            k = (cum[s] < u[:, None]).sum(axis=1)
            killed = (k >= width) | (np.take_along_axis(targets[s], np.minimum(k, width - 1)[:, None], 1)[:, 0] < 0)
            nxt = np.where(killed, -1, np.take_along_axis(targets[s], np.minimum(k, width - 1)[:, None], 1)[:, 0])
            alive[ia[killed]] = False
            live = ia[~killed]
            nxt = nxt[~killed]
            state[live] = nxt
            back = (nxt % N) == tau0[live]
            done = live[back]
            if done.size:
                ys = state[done] // N
                dev = (st.beta - W[done]) ** 2
                np.add.at(hits[x], ys, 1.0)
                np.add.at(sq[x], ys, dev)
                np.add.at(sq2[x], ys, dev**2)
                alive[done] = False
            steps += 1
        capped += int(alive.sum())
    d_hat = hits / samples
    d_se = np.sqrt(d_hat * (1 - d_hat) / samples)
    with np.errstate(invalid="ignore", divide="ignore"):
        tv = np.where(hits > 0, sq / hits, np.nan)
        tv_var = np.where(hits > 1, (sq2 / hits - tv**2) / np.maximum(hits - 1, 1), np.nan)
    if not np.any(hits > 0):
        raise RuntimeError("no winding-one excursion completed within the step cap")
    return WindingReport(d_hat, d_se, tv, np.sqrt(tv_var), d_hat * np.nan_to_num(tv), hits.astype(int), samples * n, capped)


# --- sweeps -------------------------------------------------------------------------


def torus_limit_sweep(
    base: WeightedGraph,
    mu: float,
    beta: float,
    query: FDDQuery,
    Ns,
    variant: str = "independent",
    query_id: str = "q0",
    **build_kw,
) -> list[dict]:
    """Projected fdd against its torus limit for each N (rows sorted by N)."""
    if not query.lengths.avoids_multiples(beta):
        raise ValueError("length-set endpoints must avoid multiples of beta")
    limit = torus_limit_value(variant, base, mu, beta, query)
    rows = []
    for N in sorted(int(n) for n in Ns):
        st = build_spacetime(base, N, beta, variant, **build_kw)
        val = projected_fdd_exact(st, mu, query)
        rows.append(
            {"variant": variant, "N": N, "query_id": query_id, "value": val, "limit": limit, "abs_error": abs(val - limit)}
        )
    return rows


def occupation_convergence(base: WeightedGraph, mu: float, beta: float, v, Ns, variant: str = "independent", **build_kw) -> list[dict]:
    """Exact E_N[e^{-<v, L>}] on Lambda x T_N against e^{-beta <v, 1>} E^B[e^{-<v, L>}]."""
    v = np.asarray(v, dtype=float)
    right = math.exp(-beta * v.sum()) * occupation_laplace_bosonic(base, LoopParams(mu, beta), v)
    rows = []
    for N in sorted(int(n) for n in Ns):
        st = build_spacetime(base, N, beta, variant, **build_kw)
        if st.n_states > DENSE_LIMIT:
            raise ValueError("state space too large for the determinant ratio")
        left = occupation_laplace_markov(st.generator, mu, st.lift(v))
        rows.append({"variant": variant, "N": N, "left": left, "right": right, "gap": abs(left - right)})
    return rows


def green_torus_sum(st: SpaceTimeGraph, mu: float, v=None) -> np.ndarray:
    """sum_tau [(A_N + V_N)^{-1}]((x, tau), (y, tau)) with A_N = -(G_N + mu I)."""
    S, N, n = st.n_states, st.n, st.n_space
    a = -(st.generator.q + mu * np.eye(S))
    if v is not None:
        a = a + np.diag(st.lift(v))
    g = np.linalg.inv(a)
    return np.einsum("xtyt->xy", g.reshape(n, N, n, N))


def rows_to_csv(rows: list[dict], columns=("variant", "N", "query_id", "value", "limit", "abs_error")) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format(r[c], ".17g") if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def rows_to_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2)
