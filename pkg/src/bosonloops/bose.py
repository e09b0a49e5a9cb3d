"""Ideal and interacting Bose gases on finite graphs through Bosonic loop soups.

The one-particle Hamiltonian is h = -Q (hopping plus killing), so the free
grand-canonical partition function is det(I - e^{beta(Q + mu)})^{-1} and the
free reduced density matrix is E (I - E)^{-1} with E = e^{beta(Q + mu)}.
Interactions enter through the leg pairing energy V of the soup; a brute-force
Fock-space diagonalization provides the reference values.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .graph import Generator, WeightedGraph, build_generator, check_mass_condition
from .loopmeas import LoopParams, bosonic_green, bosonic_total_mass, resolve_states, series_cutoff, _boltzmann
from .soup import BosonicSoupSampler, BridgeSampler, Path, RngLike, as_rng, leg_interaction, pair_matrix

Potential = Mapping[int, float] | Callable[[int], float]

# Fock spaces larger than this are refused.
MAX_FOCK_DIM = 20000


@dataclass(eq=False)
class BoseSystem:
    graph: WeightedGraph
    params: LoopParams
    potential: Potential = field(default_factory=dict)

    def __post_init__(self):
        self.generator = build_generator(self.graph)
        check_mass_condition(self.generator, self.params.mu)
        self.pair = pair_matrix(self.graph, self.potential)
        if not np.all(np.isfinite(self.pair)):
            raise ValueError("pair potential must be finite")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def interacting(self) -> bool:
        return bool(np.any(self.pair))

    def with_mu(self, mu: float) -> "BoseSystem":
        return BoseSystem(self.graph, LoopParams(mu, self.params.beta), self.potential)


@dataclass(frozen=True)
class MCEstimate:
    value: float
    stderr: float
    samples: int
    flagged: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "samples": self.samples, "flagged": self.flagged, **self.details}


# --- free gas ------------------------------------------------------------------------


def partition_free(sys: BoseSystem) -> float:
    """log Z of the ideal gas."""
    return bosonic_total_mass(sys.generator, sys.params)


def particle_density(sys: BoseSystem) -> float:
    return float(np.trace(bosonic_green(sys.generator, sys.params)).real / sys.n)


def particle_density_fd(sys: BoseSystem, h: float = 1e-5) -> float:
    """(1/(beta |G|)) d/dmu log Z by finite differences (backward stencil near mu = 0)."""
    mu, beta = sys.params.mu, sys.params.beta
    f = lambda m: partition_free(sys.with_mu(m))
    if mu + h <= 0:
        deriv = (f(mu + h) - f(mu - h)) / (2 * h)
    else:
        deriv = (3 * f(mu) - 4 * f(mu - h) + f(mu - 2 * h)) / (2 * h)
    return deriv / (beta * sys.n)


def rdm_free_matrix(sys: BoseSystem) -> np.ndarray:
    return bosonic_green(sys.generator, sys.params)


def rdm_free(sys: BoseSystem, x, y) -> float:
    i, j = resolve_states(sys.generator, [x, y])
    return float(rdm_free_matrix(sys)[i, j])


def rdm_series(sys: BoseSystem, J: int | None = None) -> np.ndarray:
    """sum_{j <= J} e^{beta mu j} p_{j beta}; J defaults to the certified cutoff."""
    J = series_cutoff(sys.generator, sys.params) if J is None else int(J)
    step = _boltzmann(sys.generator, sys.params)
    out = np.zeros_like(step)
    power = np.eye(sys.n)
    for _ in range(J):
        power = power @ step
        out += power
    return out


# --- Fock-space oracle ---------------------------------------------------------------


def occupation_basis(n_sites: int, n: int) -> np.ndarray:
    """All occupation vectors with total n, one per row, in lexicographic order of multisets."""
    rows = []
    for combo in itertools.combinations_with_replacement(range(n_sites), n):
        rows.append(np.bincount(np.array(combo, dtype=int), minlength=n_sites))
    if not rows:
        return np.zeros((1, n_sites), dtype=int)
    return np.array(rows, dtype=int)


def _sector_hamiltonian(h: np.ndarray, pair: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Matrix of sum h(x, y) a_x^+ a_y + interaction on one particle-number sector."""
    dim, n_sites = basis.shape
    index = {tuple(b): i for i, b in enumerate(basis)}
    H = np.zeros((dim, dim))
    off = pair - np.diag(np.diag(pair))
    for col, occ in enumerate(basis):
        # pair energy: v(0) n(n-1)/2 on sites plus v(d) n_x n_y over unordered pairs
        H[col, col] += 0.5 * float(np.diag(pair) @ (occ * (occ - 1))) + 0.5 * float(occ @ off @ occ)
        H[col, col] += float(np.diag(h) @ occ)
        for y in np.flatnonzero(occ):
            for x in range(n_sites):
                if x == y or h[x, y] == 0:
                    continue
                new = occ.copy()
                new[y] -= 1
                new[x] += 1
                H[index[tuple(new)], col] += h[x, y] * math.sqrt(occ[y] * new[x])
    return H


@dataclass(frozen=True)
class FockResult:
    log_z: float
    rho1: np.ndarray
    n_max: int
    log_z_bound: float
    rho1_bound: float
    sector_weights: np.ndarray

    def to_dict(self) -> dict:
        return {
            "log_z": self.log_z,
            "rho1": self.rho1.tolist(),
            "n_max": self.n_max,
            "log_z_bound": self.log_z_bound,
            "rho1_bound": self.rho1_bound,
        }


def fock_oracle(sys: BoseSystem, n_max: int) -> FockResult:
    """Exact diagonalization of the grand-canonical ensemble truncated at n_max particles.

    The truncation bounds compare against the ideal gas: for a symmetric h and a
    nonnegative pair potential every sector trace is dominated by the free one, so
    the discarded weight is at most Z_free minus its truncated part, and the
    discarded part of Tr(e^{-beta(H - mu N)} a_y^+ a_x) is at most the free
    tail of N.  For other systems the bounds are reported as inf.
    """
    n_max = int(n_max)
    if n_max < 0:
        raise ValueError("n_max must be nonnegative")
    n_sites = sys.n
    dim = math.comb(n_sites + n_max, n_max)
    if dim > MAX_FOCK_DIM:
        raise ValueError(f"Fock space dimension {dim} exceeds {MAX_FOCK_DIM}")
    beta, mu = sys.params.beta, sys.params.mu
    h = -sys.generator.q
    zero = np.zeros_like(sys.pair)
    free_terms, free_n_terms = [], []
    rho_num = np.zeros((n_sites, n_sites))
    parts = []
    for n in range(n_max + 1):
        basis = occupation_basis(n_sites, n)
        rho_n = scipy.linalg.expm(-beta * _sector_hamiltonian(h, sys.pair, basis))
        free_n = np.trace(scipy.linalg.expm(-beta * _sector_hamiltonian(h, zero, basis))) if sys.interacting else np.trace(rho_n)
        w = math.exp(beta * mu * n)
        parts.append(w * np.trace(rho_n))
        free_terms.append(w * free_n)
        free_n_terms.append(w * n * free_n)
        if n:
            rho_num += w * _one_body_trace(rho_n, basis)
    Z = float(sum(parts))
    rho1 = rho_num / Z

    zf = math.exp(partition_free(sys))
    nf = zf * particle_density(sys) * n_sites
    bounded = sys.generator.is_symmetric() and np.all(sys.pair >= 0)
    if bounded:
        z_tail = max(zf - sum(free_terms), 0.0)
        n_tail = max(nf - sum(free_n_terms), 0.0)
        lz_bound = math.log1p(z_tail / Z)
        r_bound = (n_tail + float(np.max(np.abs(rho1))) * z_tail) / Z
    else:
        lz_bound = r_bound = math.inf
    return FockResult(math.log(Z), rho1, n_max, lz_bound, r_bound, np.array(parts) / Z)


def _one_body_trace(rho_n: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """out[x, y] = Tr(rho_n a_y^+ a_x) on one sector."""
    n_sites = basis.shape[1]
    index = {tuple(b): i for i, b in enumerate(basis)}
    out = np.zeros((n_sites, n_sites))
    for col, occ in enumerate(basis):
        for x in np.flatnonzero(occ):
            for y in range(n_sites):
                new = occ.copy()
                new[x] -= 1
                new[y] += 1
                amp = math.sqrt(occ[x] * new[y])
                # <col| rho_n |new> <new| a_y^+ a_x |col>
                out[x, y] += rho_n[col, index[tuple(new)]] * amp
    return out


# --- interacting gas by loop soups -------------------------------------------------


def _weights_check(weights: np.ndarray, threshold: float) -> bool:
    """True when one weight exceeds ``threshold`` times the running mean it belongs to."""
    if weights.size == 0:
        return False
    means = np.cumsum(weights) / np.arange(1, weights.size + 1)
    return bool(np.any(weights > threshold * means))


def partition_interacting_mc(sys: BoseSystem, samples: int, rng: RngLike = None, threshold: float = 1e3) -> MCEstimate:
    """log Z_v = log Z_free + log E[e^{-V(eta)}] over Bosonic soups eta."""
    if samples < 1:
        raise ValueError("samples must be at least 1")
    if np.min(sys.pair) < 0 and np.min(np.linalg.eigvalsh(0.5 * (sys.pair + sys.pair.T))) < 0:
        raise ValueError("pair potential is not bounded below on this graph")
    rng = as_rng(rng)
    log_free = partition_free(sys)
    if not sys.interacting:
        return MCEstimate(log_free, 0.0, samples, details={"log_z_free": log_free})
    sampler = BosonicSoupSampler(sys.generator, sys.params)
    beta = sys.params.beta
    w = np.empty(samples)
    for s in range(samples):
        soup = sampler.sample(rng)
        w[s] = math.exp(-leg_interaction(soup.loops, sys.pair, beta))
    m = float(w.mean())
    se = float(w.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    return MCEstimate(
        log_free + math.log(m),
        se / m,
        samples,
        _weights_check(w, threshold),
        {"log_z_free": log_free, "mean_weight": m},
    )


class OpenPathSampler:
    """Open paths from x to y of length j beta with weight e^{beta mu j} p_{j beta}(x, y)."""

    def __init__(self, Q: Generator, p: LoopParams, x: int, y: int):
        self.p, self.x, self.y = p, x, y
        J = series_cutoff(Q, p)
        step = _boltzmann(Q, p)
        col = np.zeros(Q.n)
        col[y] = 1.0
        w = np.empty(J)
        for j in range(J):
            col = step @ col
            w[j] = max(col[x], 0.0)
        self.weights = w
        self.mass = float(w.sum())
        if not self.mass > 0:
            raise ValueError("no open path joins the requested vertices")
        self._cdf = np.cumsum(w) / self.mass
        self.bridges = BridgeSampler(Q)

    def sample(self, rng: np.random.Generator) -> Path:
        j = int(np.searchsorted(self._cdf, rng.random(), side="right")) + 1
        j = min(j, self.weights.size)
        return self.bridges.sample(self.x, self.y, j * self.p.beta, rng)


def rdm_interacting_mc(sys: BoseSystem, x, y, samples: int, rng: RngLike = None, threshold: float = 1e3) -> MCEstimate:
    """Ratio estimator of rho1(x, y) with numerator and denominator on the same soups.

    The numerator draws an open path X independent of the soup and weighs
    e^{-V(X, eta)}, where the legs of X pair with every soup leg and with each
    other.  Its total mass is the free rho1(x, y).
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = as_rng(rng)
    i, j = resolve_states(sys.generator, [x, y])
    opens = OpenPathSampler(sys.generator, sys.params, i, j)
    free = rdm_free(sys, i, j)
    if not sys.interacting:
        return MCEstimate(free, 0.0, samples, details={"rho1_free": free})
    sampler = BosonicSoupSampler(sys.generator, sys.params)
    beta = sys.params.beta
    num = np.empty(samples)
    den = np.empty(samples)
    for s in range(samples):
        soup = sampler.sample(rng)
        path = opens.sample(rng)
        den[s] = math.exp(-leg_interaction(soup.loops, sys.pair, beta))
        num[s] = math.exp(-leg_interaction(list(soup.loops) + [path], sys.pair, beta))
    r = num.mean() / den.mean()
    # delta method for a ratio of correlated means
    if samples > 1:
        c = np.cov(num, den)
        var = (c[0, 0] - 2 * r * c[0, 1] + r * r * c[1, 1]) / (samples * den.mean() ** 2)
        se = math.sqrt(max(var, 0.0))
    else:
        se = math.inf
    return MCEstimate(
        free * float(r),
        free * se,
        samples,
        _weights_check(den, threshold),
        {"rho1_free": free, "ratio": float(r)},
    )


# --- critical density ----------------------------------------------------------------


def dirichlet_levels(L: int) -> np.ndarray:
    """Eigenvalues of the killed 1-d walk generator on {1..L} with unit rates, negated."""
    k = np.arange(1, L + 1)
    return 2.0 - 2.0 * np.cos(np.pi * k / (L + 1))


def box_density(d: int, L: int, beta: float, mu: float) -> float:
    """Ideal-gas density on the Dirichlet box of side L in Z^d from its separable spectrum."""
    if mu >= 0:
        raise ValueError("the box density needs mu < 0")
    e1 = dirichlet_levels(L)
    occ = 0.0
    # sum over the last axis in slabs keeps memory at L^(d-1)
    base = np.zeros(1)
    for _ in range(d - 1):
        base = np.add.outer(base, e1).ravel()
    for e in e1:
        occ += float(np.sum(1.0 / np.expm1(beta * (base + e - mu))))
    return occ / L**d


def critical_density_trend(d: int, beta: float, sizes: Sequence[int], mus: Sequence[float], rel_tol: float = 0.05) -> dict:
    """Density table over box sizes and mu -> 0^- with a verdict on the double trend.

    The trend counts as bounded when the density at the mu closest to 0 changes
    by less than ``rel_tol`` (relative) between the two largest boxes.
    """
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    sizes = sorted(int(L) for L in sizes)
    mus = sorted(float(m) for m in mus)
    if any(m >= 0 for m in mus):
        raise ValueError("every mu must be negative")
    rows = [{"d": d, "L": L, "mu": m, "rho": box_density(d, L, beta, m)} for L in sizes for m in mus]
    table = {(r["L"], r["mu"]): r["rho"] for r in rows}
    top = mus[-1]
    out = {"rows": rows, "d": d, "beta": beta}
    if len(sizes) >= 2:
        a, b = table[(sizes[-2], top)], table[(sizes[-1], top)]
        out["rel_change"] = abs(b - a) / b
        out["bounded"] = out["rel_change"] < rel_tol
    if len(mus) >= 2:
        out["mu_growth"] = table[(sizes[-1], top)] / table[(sizes[-1], mus[0])]
    out["monotone_in_mu"] = all(
        table[(L, mus[i])] < table[(L, mus[i + 1])] for L in sizes for i in range(len(mus) - 1)
    )
    return out


def torus_green_rdm(base: WeightedGraph, mu: float, beta: float, N: int, v=None, variant: str = "independent") -> np.ndarray:
    """Space-time approximation of rho1: (1/beta) sum_tau G_N((x, tau), (y, tau)) - I.

    The identity removes the contribution of paths that never wind around the
    torus, which in the limit is beta times a point mass at time zero.
    """
    from .spacetime import build_spacetime, green_torus_sum

    st = build_spacetime(base, N, beta, variant)
    return green_torus_sum(st, mu, v) / beta - np.eye(base.n)
