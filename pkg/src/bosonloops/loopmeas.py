"""Exact values of Markovian and Bosonic loop-measure quantities.

Conventions: ``Q`` is the generator, ``mu <= 0`` the chemical potential and ``beta``
the time horizon.  The Markovian measure weighs loop length t by e^{mu t}/t dt; the
Bosonic measure puts mass e^{beta mu j}/j on length j*beta, j = 1, 2, ...
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np
import scipy.linalg
from scipy import integrate

from .graph import (
    Generator,
    KernelEvaluator,
    WeightedGraph,
    as_generator,
    check_mass_condition,
    expm_generator,
    green_function,
    perron_bound,
)

SERIES_TOL = 1e-14


@dataclass(frozen=True)
class LoopParams:
    mu: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.mu) and self.mu <= 0):
            raise ValueError(f"mu must be finite and nonpositive, got {self.mu}")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError(f"beta must be finite and positive, got {self.beta}")


@dataclass(frozen=True)
class LengthSet:
    """Finite union of disjoint half-open intervals [a, b) with 0 < a; b may be inf."""

    intervals: tuple

    def __post_init__(self):
        ivs = []
        for pair in self.intervals:
            a, b = (float(v) for v in pair)
            if not (a > 0 and math.isfinite(a)):
                raise ValueError(f"interval start must be positive and finite, got {a}")
            if not b >= a:
                raise ValueError(f"empty or reversed interval [{a}, {b})")
            ivs.append((a, b))
        ivs.sort()
        for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise ValueError("intervals overlap")
            if math.isinf(b0):
                raise ValueError("only the last interval may be unbounded")
        object.__setattr__(self, "intervals", tuple(ivs))

    @classmethod
    def parse(cls, obj) -> "LengthSet":
        """Accepts ``[[a, b], ...]`` or a single ``[a, b]``; ``"inf"`` marks an open end."""
        if isinstance(obj, LengthSet):
            return obj
        pairs = obj
        if len(pairs) == 2 and not isinstance(pairs[0], (list, tuple)):
            pairs = [pairs]
        return cls(tuple((float(a), float(b)) for a, b in pairs))

    @property
    def inf(self) -> float:
        return self.intervals[0][0] if self.intervals else math.inf

    @property
    def sup(self) -> float:
        return self.intervals[-1][1] if self.intervals else 0.0

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.sup)

    def contains(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=bool)
        for a, b in self.intervals:
            out |= (t >= a) & (t < b)
        return out

    def multiples(self, beta: float, jmax: int | None = None) -> np.ndarray:
        """Integers j >= 1 with j*beta in the set (up to jmax when unbounded)."""
        js = []
        for a, b in self.intervals:
            lo = max(1, math.ceil(a / beta - 1e-12))
            if math.isinf(b):
                if jmax is None:
                    raise ValueError("unbounded length set needs a series cutoff")
                hi = jmax
            else:
                hi = math.ceil(b / beta + 1e-12) - 1
                if jmax is not None:
                    hi = min(hi, jmax)
            js.extend(j for j in range(lo, hi + 1) if a <= j * beta < b)
        return np.array(sorted(set(js)), dtype=int)

    def avoids_multiples(self, beta: float, rtol: float = 1e-12) -> bool:
        """True when no finite endpoint is an integer multiple of beta."""
        for a, b in self.intervals:
            for e in (a, b):
                if math.isfinite(e) and abs(e / beta - round(e / beta)) < rtol * max(1.0, e / beta):
                    return False
        return True

    def to_list(self) -> list:
        return [[a, "inf" if math.isinf(b) else b] for a, b in self.intervals]


@dataclass(frozen=True)
class FDDQuery:
    """Event {X_{t_1} = x_1, ..., X_{t_k} = x_k, length in A}."""

    times: tuple
    states: tuple
    lengths: LengthSet

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        states = tuple(self.states)
        if not times or len(times) != len(states):
            raise ValueError("need k >= 1 times and as many states")
        if times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("times must be positive and strictly increasing")
        lengths = LengthSet.parse(self.lengths)
        if lengths.intervals and not lengths.inf > times[-1]:
            raise ValueError("inf of the length set must exceed the last time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "lengths", lengths)

    @property
    def k(self) -> int:
        return len(self.times)

    def indices(self, Q: Generator | WeightedGraph) -> list[int]:
        return resolve_states(Q, self.states)


def resolve_states(Q, states: Sequence[Hashable]) -> list[int]:
    g = Q if isinstance(Q, WeightedGraph) else getattr(Q, "graph", None)
    out = []
    for s in states:
        if g is not None and s in g.index:
            out.append(g.index[s])
        elif isinstance(s, (int, np.integer)) and not isinstance(s, bool):
            out.append(int(s))
        elif g is not None:
            g.idx(s)  # raises with the offending label
        else:
            raise ValueError(f"cannot resolve vertex {s!r} without a labelled graph")
    n = as_generator(Q).n
    for i in out:
        if not 0 <= i < n:
            raise ValueError(f"vertex index {i} out of range")
    return out


def _path_product(Q: Generator, times, idx) -> float:
    """p^{(k)} = prod_i p_{t_{i+1}-t_i}(x_i, x_{i+1})."""
    out = 1.0
    sym = Q.is_symmetric()
    for (s, t), (a, b) in zip(zip(times, times[1:]), zip(idx, idx[1:])):
        out *= expm_generator(Q.q, t - s, sym)[a, b]
    return out


def _geometric_cutoff(rate: float, const: float, tol: float, j0: int = 1) -> int:
    """Smallest J >= j0 with const * e^{(J+1) rate}/((J+1)(1 - e^{rate})) < tol."""
    if rate >= 0:
        raise ValueError("loop series diverges: spectral bound of Q + mu I is not negative")
    denom = -math.expm1(rate)
    J = j0
    # closed-form start, then refine
    if const > 0:
        guess = math.log(tol * denom / const) / rate - 1
        J = max(j0, int(guess) - 1)
    while const * math.exp((J + 1) * rate) / ((J + 1) * denom) >= tol:
        J += 1
    return J


def series_cutoff(Q: Generator, p: LoopParams, tol: float = SERIES_TOL) -> int:
    """J_max for traces: |G| e^{beta J (mu + lam)}/(J (1 - e^{beta (mu + lam)})) < tol."""
    lam, _ = perron_bound(Q.q)
    return _geometric_cutoff(p.beta * (p.mu + lam), Q.n, tol)


# --- finite-dimensional distributions --------------------------------------------


def bosonic_fdd(Q, p: LoopParams, q: FDDQuery, tol: float = SERIES_TOL) -> float:
    """sum over j*beta in A of (e^{beta mu j}/j) p^{(k)} p_{j beta - t_k + t_1}(x_k, x_1)."""
    Q = as_generator(Q)
    idx = q.indices(Q)
    pk = _path_product(Q, q.times, idx)
    if pk == 0 or not q.lengths.intervals:
        return 0.0
    delta = q.times[-1] - q.times[0]
    jmax = None
    if not q.lengths.bounded:
        check_mass_condition(Q, p.mu)
        lam, u = perron_bound(Q.q)
        const = pk * math.exp(-delta * lam) * u[idx[-1]] / u[idx[0]]
        jmax = _geometric_cutoff(p.beta * (p.mu + lam), const, tol)
    js = q.lengths.multiples(p.beta, jmax)
    if js.size == 0:
        return 0.0
    sym = Q.is_symmetric()
    step = expm_generator(Q.q, p.beta, sym)
    col = expm_generator(Q.q, js[0] * p.beta - delta, sym)[:, idx[0]]
    total = 0.0
    j = js[0]
    wanted = set(js.tolist())
    while j <= js[-1]:
        if j in wanted:
            total += math.exp(p.beta * p.mu * j) / j * col[idx[-1]]
        col = step @ col
        j += 1
    return pk * total


def markov_fdd(Q, mu: float, q: FDDQuery, tol: float = 1e-9) -> float:
    """integral over A of (e^{mu t}/t) p^{(k)} p_{t - t_k + t_1}(x_k, x_1) dt."""
    Q = as_generator(Q)
    idx = q.indices(Q)
    pk = _path_product(Q, q.times, idx)
    if pk == 0 or not q.lengths.intervals:
        return 0.0
    delta = q.times[-1] - q.times[0]
    kern = KernelEvaluator(Q.q)
    x, y = idx[-1], idx[0]

    def f(t):
        return math.exp(mu * t) / t * kern.entry(t - delta, x, y)

    total = 0.0
    for a, b in q.lengths.intervals:
        if math.isinf(b):
            check_mass_condition(Q, mu)
            lam, u = perron_bound(Q.q)
            rate = mu + lam
            if rate >= 0:
                raise ValueError("Markovian fdd diverges on an unbounded length set")
            const = math.exp(-delta * lam) * u[x] / u[y]
            # int_T^inf e^{mu t}/t * const e^{lam t} dt <= const e^{rate T}/(T |rate|)
            T = max(a, 1.0)
            while const * math.exp(rate * T) / (T * -rate) > tol * 1e-3:
                T *= 1.5
            b = T
        total += _quad_pieces(f, a, b, tol)
    return pk * total


def _quad_pieces(f, a: float, b: float, tol: float, width: float | None = None) -> float:
    """Adaptive Gauss-Kronrod over [a, b], split into pieces so long ranges stay resolved."""
    if b <= a:
        return 0.0
    npieces = 1 if width is None else max(1, math.ceil((b - a) / width))
    if width is None and b / a > 8:
        edges = np.geomspace(a, b, int(math.ceil(math.log(b / a) / math.log(4))) + 1)
    else:
        edges = np.linspace(a, b, npieces + 1)
    total = 0.0
    for lo, hi in zip(edges, edges[1:]):
        val, _ = integrate.quad(f, lo, hi, epsabs=tol / len(edges), epsrel=1e-12, limit=200)
        total += val
    return total


# --- masses ------------------------------------------------------------------------


def _neg_logdet(m: np.ndarray) -> float:
    """log det(-m) for a matrix whose spectrum lies in the open left half plane."""
    sign, ld = np.linalg.slogdet(-np.asarray(m))
    if sign <= 0:
        raise ValueError("matrix is singular or has the wrong spectral sign")
    return float(ld)


def log_det_one_minus(E: np.ndarray) -> float:
    """log det(I - E) for a matrix with spectral radius below one.

    Small ``E`` goes through the trace series -sum tr(E^k)/k so that values
    like log(1 - e^{-50}) keep full relative accuracy.
    """
    E = np.asarray(E, dtype=float)
    norm = np.linalg.norm(E, 2) if E.size else 0.0
    if norm < 0.25:
        acc = 0.0
        power = E.copy()
        k = 1
        while True:
            term = np.trace(power) / k
            acc -= term
            if abs(term) <= 1e-18 * abs(acc) or norm**k < 1e-300 or k > 200:
                break
            power = power @ E
            k += 1
        return float(acc)
    sign, ld = np.linalg.slogdet(np.eye(E.shape[0]) - E)
    if sign <= 0:
        raise ValueError("det(I - e^{beta(Q + mu I)}) is not positive")
    return float(ld)


def _boltzmann(Q: Generator, p: LoopParams, v=None) -> np.ndarray:
    m = Q.q + p.mu * np.eye(Q.n)
    sym = Q.is_symmetric()
    if v is not None:
        m = m - np.diag(np.asarray(v, dtype=float))
    return expm_generator(m, p.beta, sym)


def markov_mass_jumps(Q, mu: float) -> float:
    """log det(D + mu I) - log det(Q + mu I): mass of Markovian loops with a jump."""
    Q = as_generator(Q)
    check_mass_condition(Q, mu)
    eye = np.eye(Q.n)
    d = np.log(Q.lam - mu).sum()
    return max(float(d - _neg_logdet(Q.q + mu * eye)), 0.0)


def bosonic_mass_jumps(Q, p: LoopParams) -> float:
    """log det(I - e^{beta(D + mu)}) - log det(I - e^{beta(Q + mu)})."""
    Q = as_generator(Q)
    check_mass_condition(Q, p.mu)
    e_d = -np.expm1(p.beta * (Q.diag + p.mu))
    return max(float(np.log(e_d).sum() - log_det_one_minus(_boltzmann(Q, p))), 0.0)


def bosonic_total_mass(Q, p: LoopParams) -> float:
    """-log det(I - e^{beta(Q + mu I)}): total Bosonic loop mass (= log Z of the free gas)."""
    Q = as_generator(Q)
    check_mass_condition(Q, p.mu)
    return -log_det_one_minus(_boltzmann(Q, p))


def bosonic_length_table(Q, p: LoopParams, tol: float = SERIES_TOL) -> tuple[np.ndarray, float]:
    """Masses of {root = x, length = j beta}: table[j-1, x] = e^{beta mu j}/j p_{j beta}(x, x).

    Returns the table up to the certified cutoff together with the tail bound.
    """
    Q = as_generator(Q)
    check_mass_condition(Q, p.mu)
    lam, _ = perron_bound(Q.q)
    rate = p.beta * (p.mu + lam)
    J = _geometric_cutoff(rate, Q.n, tol)
    step = _boltzmann(Q, p)
    power = step.copy()
    rows = []
    for j in range(1, J + 1):
        rows.append(np.maximum(np.diag(power), 0.0) / j)
        power = power @ step
    tail = Q.n * math.exp((J + 1) * rate) / ((J + 1) * -math.expm1(rate))
    return np.array(rows), tail


def markov_mass_range(Q, mu: float, eps: float, tol: float = 1e-12) -> float:
    """int_eps^inf (e^{mu t}/t) tr e^{tQ} dt: mass of Markovian loops longer than eps."""
    Q = as_generator(Q)
    check_mass_condition(Q, mu)
    kern = KernelEvaluator(Q.q)
    T = markov_length_cutoff(Q, mu, eps, tol)
    return _quad_pieces(lambda t: math.exp(mu * t) / t * kern.trace(t), eps, T, tol)


def markov_length_cutoff(Q: Generator, mu: float, eps: float, tol: float = 1e-14) -> float:
    """T with int_T^inf (e^{mu t}/t) tr e^{tQ} dt < tol (Perron bound on the trace)."""
    lam, _ = perron_bound(Q.q)
    rate = mu + lam
    if rate >= 0:
        raise ValueError("Markovian loop mass diverges at long lengths")
    T = max(2 * eps, 1.0)
    while Q.n * math.exp(rate * T) / (T * -rate) > tol:
        T *= 1.25
    return T


# --- Laplace transforms ------------------------------------------------------------


def _check_v(Q: Generator, v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (Q.n,):
        raise ValueError(f"potential has {v.size} entries, graph has {Q.n} vertices")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("potential must be finite and nonnegative")
    return v


def occupation_laplace_markov(Q, mu: float, v) -> float:
    """E[e^{-<v, L>}] under the Markovian soup: det(Q + mu I)/det(Q + mu I - V)."""
    Q = as_generator(Q)
    check_mass_condition(Q, mu)
    v = _check_v(Q, v)
    eye = np.eye(Q.n)
    ld = _neg_logdet(Q.q + mu * eye) - _neg_logdet(Q.q + mu * eye - np.diag(v))
    return float(np.exp(ld))


def occupation_laplace_bosonic(Q, p: LoopParams, v) -> float:
    """E[e^{-<v, L>}] under the Bosonic soup: det(I - e^{beta(Q+mu)})/det(I - e^{beta(Q+mu-V)})."""
    Q = as_generator(Q)
    check_mass_condition(Q, p.mu)
    v = _check_v(Q, v)
    ld = log_det_one_minus(_boltzmann(Q, p)) - log_det_one_minus(_boltzmann(Q, p, v))
    return float(np.exp(ld))


def point_loop_laplace_bosonic(Q, p: LoopParams, v, markovian: bool = False) -> np.ndarray:
    """Per-vertex Laplace transform of the point-loop (no-jump) occupation field.

    Bosonic: (1 - e^{beta d})/(1 - e^{beta (d - v)}) with d = q(x, x) + mu, the
    diagonal of Q + mu I.  Markovian: (lambda - mu)/(lambda - mu + v), i.e. an
    Exp(lambda(x) - mu) field.
    """
    Q = as_generator(Q)
    v = _check_v(Q, v)
    d = Q.diag + p.mu
    if np.any(d >= 0):
        raise ValueError("point-loop field needs q(x, x) + mu < 0 at every vertex")
    if markovian:
        return -d / (-d + v)
    return np.expm1(p.beta * d) / np.expm1(p.beta * (d - v))


def campbell_log_laplace_markov(Q, mu: float, v, eps: float = 0.0, tol: float = 1e-10) -> float:
    """-log E[e^{-<v, L>}] by quadrature: int_eps^inf (e^{mu t}/t)(tr e^{tQ} - tr e^{t(Q-V)}) dt."""
    Q = as_generator(Q)
    check_mass_condition(Q, mu)
    v = _check_v(Q, v)
    k0 = KernelEvaluator(Q.q)
    k1 = KernelEvaluator(Q.q - np.diag(v))
    T = markov_length_cutoff(Q, mu, max(eps, 1e-3), tol * 1e-2)
    total_v = float(v.sum())

    def f(t):
        if t == 0:
            return total_v
        return math.exp(mu * t) / t * (k0.trace(t) - k1.trace(t))

    lo = eps
    out = 0.0
    if lo < 1.0:
        out += _quad_pieces(f, lo, 1.0, tol) if lo > 0 else integrate.quad(f, 0.0, 1.0, epsabs=tol, epsrel=1e-12, limit=200)[0]
        lo = 1.0
    return out + _quad_pieces(f, lo, max(T, lo), tol)


def campbell_log_laplace_bosonic(Q, p: LoopParams, v, tol: float = SERIES_TOL) -> float:
    """-log E[e^{-<v, L>}] as the loop series sum_j (e^{beta mu j}/j)(tr e^{j beta Q} - tr e^{j beta (Q-V)})."""
    Q = as_generator(Q)
    v = _check_v(Q, v)
    J = series_cutoff(Q, p, tol)
    e0, e1 = _boltzmann(Q, p), _boltzmann(Q, p, v)
    a0, a1 = e0.copy(), e1.copy()
    out = 0.0
    for j in range(1, J + 1):
        out += (np.trace(a0) - np.trace(a1)) / j
        a0, a1 = a0 @ e0, a1 @ e1
    return float(out)


# --- bridge measures ---------------------------------------------------------------


def bosonic_green(Q, p: LoopParams) -> np.ndarray:
    """sum_{j >= 1} e^{beta mu j} p_{j beta} = e^{beta(Q+mu)}(I - e^{beta(Q+mu)})^{-1}."""
    Q = as_generator(Q)
    check_mass_condition(Q, p.mu)
    E = _boltzmann(Q, p)
    return scipy.linalg.solve(np.eye(Q.n) - E, E)


def bridge_measure_green(Q, p: LoopParams, x, y, bosonic: bool = False) -> float:
    """Total mass of the Markovian (G^mu/beta) or Bosonic bridge measure from x to y."""
    Q = as_generator(Q)
    i, j = resolve_states(Q, [x, y])
    if bosonic:
        return float(max(bosonic_green(Q, p)[i, j], 0.0))
    return float(green_function(Q, p.mu)[i, j] / p.beta)
