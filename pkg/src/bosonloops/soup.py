"""Samplers for bridges, loops and Poisson loop soups, plus occupation fields.

Paths are stored as a jump skeleton: the starting vertex, the total duration and
the (time, new state) pairs of every genuine jump.  Vertices are integer indices
into the generator.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from .graph import Generator, KernelEvaluator, WeightedGraph, as_generator, check_mass_condition, hop_distance, perron_bound
from .loopmeas import LoopParams, bosonic_length_table, markov_length_cutoff, markov_mass_range

RngLike = np.random.Generator | int | None


def as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream(0 if rng is None else int(rng))


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream identified by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# --- paths -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Path:
    start: int
    length: float
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_states: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        object.__setattr__(self, "jump_times", np.asarray(self.jump_times, dtype=float))
        object.__setattr__(self, "jump_states", np.asarray(self.jump_states, dtype=int))

    @property
    def end(self) -> int:
        return int(self.jump_states[-1]) if self.jump_states.size else int(self.start)

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    @property
    def states(self) -> np.ndarray:
        return np.concatenate(([self.start], self.jump_states)).astype(int)

    @property
    def holding_times(self) -> np.ndarray:
        return np.diff(np.concatenate(([0.0], self.jump_times, [self.length])))

    def local_times(self, n: int) -> np.ndarray:
        return np.bincount(self.states, weights=self.holding_times, minlength=n)

    def state_at(self, t) -> np.ndarray:
        """X_t for t in [0, length) (right-continuous)."""
        k = np.searchsorted(self.jump_times, t, side="right")
        return self.states[k]

    def validate(self, Q: Generator | None = None, atol: float = 1e-9) -> None:
        jt = self.jump_times
        if not self.length > 0:
            raise ValueError("path length must be positive")
        if jt.size != self.jump_states.size:
            raise ValueError("jump times and states differ in length")
        if jt.size and (jt[0] <= 0 or jt[-1] >= self.length or np.any(np.diff(jt) <= 0)):
            raise ValueError("jump times must be strictly increasing inside (0, length)")
        st = self.states
        if np.any(st[1:] == st[:-1]):
            raise ValueError("consecutive states must differ")
        if Q is not None and st.size > 1 and np.any(Q.q[st[:-1], st[1:]] <= 0):
            raise ValueError("path uses a transition of zero rate")

    def shifted(self, s: float) -> "Path":
        """Cyclic re-rooting of a closed path at time s."""
        s = float(s) % self.length
        if self.n_jumps == 0 or s == 0:
            return type(self)(self.start, self.length, self.jump_times, self.jump_states)
        if np.any(self.jump_times == s):
            raise ValueError("cannot re-root a loop exactly at one of its jump times")
        new_start = int(self.state_at(s))
        t = (self.jump_times - s) % self.length
        order = np.argsort(t, kind="stable")
        t, states = t[order], self.jump_states[order]
        keep = t > 0
        return type(self)(new_start, self.length, t[keep], states[keep])

    def to_record(self, labels: Sequence | None = None) -> dict:
        lab = (lambda i: labels[i]) if labels is not None else int
        return {
            "root": lab(self.start),
            "length": float(self.length),
            "jump_times": [float(t) for t in self.jump_times],
            "jump_states": [lab(int(s)) for s in self.jump_states],
        }


class Loop(Path):
    """Closed path: the state at time 0 equals the state at time ``length``."""

    @property
    def root(self) -> int:
        return int(self.start)

    def validate(self, Q: Generator | None = None, atol: float = 1e-9) -> None:
        super().validate(Q, atol)
        if self.end != self.start:
            raise ValueError("loop does not return to its root")


@dataclass
class LoopSoup:
    loops: list
    intensity_tag: dict
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.loops)

    def to_json(self, labels: Sequence | None = None) -> str:
        header = {"measure": self.intensity_tag, "seed": self.seed, "count": len(self.loops)}
        lines = [json.dumps(header)]
        lines.extend(json.dumps(lp.to_record(labels)) for lp in self.loops)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str, labels: Sequence | None = None) -> "LoopSoup":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        header, recs = rows[0], rows[1:]
        pos = {v: i for i, v in enumerate(labels)} if labels is not None else None
        conv = (lambda s: pos[s]) if pos is not None else int
        loops = [
            Loop(conv(r["root"]), r["length"], np.array(r["jump_times"]), np.array([conv(s) for s in r["jump_states"]], dtype=int))
            for r in recs
        ]
        return cls(loops, header["measure"], header.get("seed"))


@dataclass(frozen=True)
class OccupationField:
    values: np.ndarray

    def __getitem__(self, i):
        return self.values[i]

    @property
    def total(self) -> float:
        return float(self.values.sum())


def occupation_field(soup: LoopSoup | Iterable[Path], n: int) -> OccupationField:
    loops = soup.loops if isinstance(soup, LoopSoup) else list(soup)
    out = np.zeros(n)
    for lp in loops:
        out += lp.local_times(n)
    return OccupationField(out)


def split_point_genuine(soup: LoopSoup) -> tuple[LoopSoup, LoopSoup]:
    point = [lp for lp in soup.loops if lp.n_jumps == 0]
    genuine = [lp for lp in soup.loops if lp.n_jumps > 0]
    return (
        LoopSoup(point, {**soup.intensity_tag, "part": "point"}, soup.seed),
        LoopSoup(genuine, {**soup.intensity_tag, "part": "genuine"}, soup.seed),
    )


# --- uniformization bridges --------------------------------------------------------


class BridgeSampler:
    """Exact endpoint-conditioned paths of a CTMC by uniformization.

    With Lambda = max lambda (1 + 1e-6) and R = I + Q/Lambda, the number of clock
    rings m on [0, t] given X_0 = x, X_t = y has law proportional to
    Poisson(Lambda t; m) R^m(x, y).  The discrete skeleton is drawn by backward
    filtering through the cached powers of R, ring times are sorted uniforms and
    the self-transitions are dropped.
    """

    def __init__(self, Q: Generator | WeightedGraph):
        self.Q = as_generator(Q)
        self.n = self.Q.n
        self.rate = float(np.max(self.Q.lam)) * (1 + 1e-6)
        if self.rate == 0:
            self.rate = 1.0
        self.R = np.eye(self.n) + self.Q.q / self.rate
        self._powers = [np.eye(self.n)]
        self._cdf_cache: dict = {}

    def power(self, m: int) -> np.ndarray:
        while len(self._powers) <= m:
            self._powers.append(self._powers[-1] @ self.R)
        return self._powers[m]

    def m_max(self, t: float) -> int:
        lt = self.rate * t
        return int(math.ceil(lt + 12 * math.sqrt(lt) + 30))

    def _count_cdf(self, x: int, y: int, t: float) -> np.ndarray:
        key = (x, y, t)
        cdf = self._cdf_cache.get(key)
        if cdf is None:
            M = self.m_max(t)
            self.power(M)
            ms = np.arange(M + 1)
            lt = self.rate * t
            logpois = -lt + ms * math.log(lt) - special.gammaln(ms + 1) if lt > 0 else np.where(ms == 0, 0.0, -np.inf)
            rm = np.array([self._powers[m][x, y] for m in ms])
            with np.errstate(divide="ignore"):
                w = np.exp(logpois) * np.maximum(rm, 0.0)
            tot = w.sum()
            if not tot > 0:
                raise ValueError(f"p_t(x, y) = 0 for x={x}, y={y}, t={t}")
            cdf = np.cumsum(w) / tot
            if len(self._cdf_cache) < 4096:
                self._cdf_cache[key] = cdf
        return cdf

    def sample(self, x: int, y: int, t: float, rng: np.random.Generator) -> Path:
        if not t > 0:
            raise ValueError("bridge duration must be positive")
        cdf = self._count_cdf(x, y, t)
        m = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        m = min(m, cdf.size - 1)
        if m == 0:
            return Path(x, t)
        z = np.empty(m + 1, dtype=int)
        z[0], z[m] = x, y
        R = self.R
        u = rng.random(m - 1) if m > 1 else ()
        for i in range(1, m):
            w = R[z[i - 1]] * self._powers[m - i][:, y]
            c = np.cumsum(w)
            z[i] = min(int(np.searchsorted(c, u[i - 1] * c[-1], side="right")), self.n - 1)
        times = np.sort(rng.random(m)) * t
        moves = z[1:] != z[:-1]
        return Path(x, t, times[moves], z[1:][moves])


def sample_bridge(Q, x: int, y: int, t: float, rng: RngLike = None) -> Path:
    return BridgeSampler(Q).sample(x, y, t, as_rng(rng))


# --- point loops -------------------------------------------------------------------


def sample_point_field_markov(Q, mu: float, size: int, rng: RngLike = None) -> np.ndarray:
    """Point-loop occupation fields of the full Markovian soup: independent Exp(lambda - mu)."""
    Q = as_generator(Q)
    rate = Q.lam - mu
    if np.any(rate <= 0):
        raise ValueError("point-loop field needs lambda(x) - mu > 0")
    return as_rng(rng).exponential(1.0, size=(size, Q.n)) / rate


def sample_point_field_bosonic(Q, p: LoopParams, size: int, rng: RngLike = None) -> np.ndarray:
    """Point-loop fields of the Bosonic soup.

    At x the point loops of length j beta form a Poisson family with means
    e^{beta j d}/j, d = q(x, x) + mu, so their number is Poisson(-log(1 - e^{beta d}))
    and each j is log-series distributed.
    """
    Q = as_generator(Q)
    rng = as_rng(rng)
    r = np.exp(p.beta * (Q.diag + p.mu))
    if np.any(r >= 1):
        raise ValueError("point-loop field needs q(x, x) + mu < 0")
    out = np.zeros((size, Q.n))
    for x in range(Q.n):
        if r[x] == 0:
            continue
        counts = rng.poisson(-math.log1p(-r[x]), size)
        total = int(counts.sum())
        if total:
            js = rng.logseries(r[x], total) if r[x] > 0 else np.ones(total)
            owner = np.repeat(np.arange(size), counts)
            np.add.at(out[:, x], owner, p.beta * js)
    return out


# --- Bosonic soups -----------------------------------------------------------------


class BosonicSoupSampler:
    """Poisson soups of the Bosonic loop measure via (root, winding) tables and bridges."""

    def __init__(self, Q, p: LoopParams, tol: float = 1e-14):
        self.Q = as_generator(Q)
        self.p = p
        self.table, self.tail = bosonic_length_table(self.Q, p, tol)
        self.mass = float(self.table.sum())
        self._flat_cdf = np.cumsum(self.table.ravel())
        self.bridges = BridgeSampler(self.Q)

    def sample_roots(self, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if count == 0:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        k = np.searchsorted(self._flat_cdf, rng.random(count) * self._flat_cdf[-1], side="right")
        k = np.minimum(k, self._flat_cdf.size - 1)
        js, xs = np.divmod(k, self.Q.n)
        return xs, js + 1

    def sample(self, rng: RngLike = None, seed: int | None = None) -> LoopSoup:
        rng = as_rng(rng)
        count = int(rng.poisson(self.mass)) if self.mass > 0 else 0
        xs, js = self.sample_roots(count, rng)
        loops = []
        for x, j in zip(xs, js):
            path = self.bridges.sample(int(x), int(x), j * self.p.beta, rng)
            loops.append(Loop(path.start, path.length, path.jump_times, path.jump_states))
        tag = {"measure": "bosonic", "mu": self.p.mu, "beta": self.p.beta}
        return LoopSoup(loops, tag, seed)

    def fields(self, size: int, rng: RngLike = None) -> np.ndarray:
        """Occupation fields of ``size`` independent soups, shape (size, |G|)."""
        rng = as_rng(rng)
        n = self.Q.n
        out = np.zeros((size, n))
        counts = rng.poisson(self.mass, size)
        xs, js = self.sample_roots(int(counts.sum()), rng)
        owner = np.repeat(np.arange(size), counts)
        for s, x, j in zip(owner, xs, js):
            path = self.bridges.sample(int(x), int(x), j * self.p.beta, rng)
            out[s] += path.local_times(n)
        return out


def sample_bosonic_soup(Q, p: LoopParams, rng: RngLike = None, seed: int | None = None) -> LoopSoup:
    return BosonicSoupSampler(Q, p).sample(rng, seed)


# --- truncated Markovian soups ----------------------------------------------------


class _GridDensitySampler:
    """Rejection sampler for a positive density on [a, b] tabulated on a grid (log-spaced by default).

    The proposal is the piecewise-linear interpolant through the nodes (sampled
    exactly); the envelope constant is the largest density/interpolant ratio seen
    at the cell midpoints, padded by 1e-3.
    """

    def __init__(self, density: Callable[[np.ndarray], np.ndarray], a: float = 0.0, b: float = 0.0, nodes: int = 4096, grid=None):
        self.f = density
        t = np.geomspace(a, b, nodes) if grid is None else np.asarray(grid, dtype=float)
        y = np.maximum(density(t), 0.0)
        self.t, self.y = t, y
        mids = 0.5 * (t[1:] + t[:-1])
        g_mid = 0.5 * (y[1:] + y[:-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(g_mid > 0, density(mids) / g_mid, 1.0)
        self.c = float(np.max(ratio)) * (1 + 1e-3)
        cell = 0.5 * (y[1:] + y[:-1]) * np.diff(t)
        self.cdf = np.cumsum(cell)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(size)
        filled = 0
        while filled < size:
            need = size - filled
            k = np.searchsorted(self.cdf, rng.random(need) * self.cdf[-1], side="right")
            k = np.minimum(k, self.cdf.size - 1)
            t0, t1 = self.t[k], self.t[k + 1]
            y0, y1 = self.y[k], self.y[k + 1]
            u = rng.random(need)
            # inverse CDF of the linear density on [t0, t1]
            h = t1 - t0
            slope = y1 - y0
            with np.errstate(divide="ignore", invalid="ignore"):
                disc = np.sqrt(y0**2 + 2 * slope / h * u * 0.5 * (y0 + y1) * h)
                s = np.where(np.abs(slope) > 1e-12 * np.maximum(y0, y1), (disc - y0) / (slope / h), u * h)
            x = t0 + np.clip(s, 0, h)
            g = y0 + (x - t0) / h * slope
            accept = rng.random(need) * self.c * g <= self.f(x)
            got = x[accept]
            out[filled:filled + got.size] = got
            filled += got.size
        return out


class MarkovSoupSampler:
    """Markovian loop soup restricted to loops of length at least eps."""

    def __init__(self, Q, mu: float, eps: float, nodes: int = 4096):
        if not eps > 0:
            raise ValueError("eps must be positive")
        self.Q = as_generator(Q)
        check_mass_condition(self.Q, mu)
        self.mu, self.eps = mu, eps
        self.kernel = KernelEvaluator(self.Q.q)
        self.t_max = markov_length_cutoff(self.Q, mu, eps)
        self.mass = markov_mass_range(self.Q, mu, eps)
        self.bridges = BridgeSampler(self.Q)
        self._lengths = None
        if self.mass > 0 and self.t_max > eps:
            dens = np.vectorize(lambda t: math.exp(mu * t) / t * self.kernel.trace(t))
            self._lengths = _GridDensitySampler(dens, eps, self.t_max, nodes)

    def sample(self, rng: RngLike = None, seed: int | None = None) -> LoopSoup:
        rng = as_rng(rng)
        count = int(rng.poisson(self.mass)) if self._lengths is not None else 0
        loops = []
        if count:
            for t in self._lengths.sample(count, rng):
                diag = np.maximum(np.diag(self.kernel(t)), 0.0)
                x = int(rng.choice(self.Q.n, p=diag / diag.sum()))
                path = self.bridges.sample(x, x, float(t), rng)
                loops.append(Loop(path.start, path.length, path.jump_times, path.jump_states))
        tag = {"measure": "markov", "mu": self.mu, "eps": self.eps}
        return LoopSoup(loops, tag, seed)


def sample_markov_soup(Q, mu: float, eps: float, rng: RngLike = None, seed: int | None = None) -> LoopSoup:
    return MarkovSoupSampler(Q, mu, eps).sample(rng, seed)


# --- exact Markovian genuine loops --------------------------------------------------


class GenuineLoopSampler:
    """Exact soup of Markovian loops with at least one jump.

    The jump skeleton of such a loop is a discrete cycle of the chain
    P_mu = W/(lambda - mu); the cycles of k steps carry total mass tr(P_mu^k)/k,
    which sums to log det(D + mu I) - log det(Q + mu I).  Holding times are
    independent Exp(lambda - mu).  No length truncation is involved.
    """

    def __init__(self, Q, mu: float, tol: float = 1e-15):
        self.Q = as_generator(Q)
        check_mass_condition(self.Q, mu)
        self.mu = mu
        n = self.Q.n
        self.rate = self.Q.lam - mu
        off = self.Q.q - np.diag(self.Q.diag)
        self.P = off / self.rate[:, None]
        rho, _ = perron_bound(self.P - np.eye(n)) if n > 1 else (-1.0, None)
        rho += 1.0
        if n == 1 or not np.any(off > 0):
            self.K, self.weights, self._powers = 0, np.zeros(0), [np.eye(n)]
            self.mass = 0.0
            return
        if rho >= 1:
            raise ValueError("jump chain is not strictly substochastic")
        K = 2
        while n * rho ** (K + 1) / ((K + 1) * (1 - rho)) > tol:
            K += 1
        self._powers = [np.eye(n)]
        for _ in range(K):
            self._powers.append(self._powers[-1] @ self.P)
        self.K = K
        self.weights = np.array([max(np.trace(self._powers[k]), 0.0) / k for k in range(1, K + 1)])
        self.mass = float(self.weights.sum())

    def _skeletons(self, k: int, size: int, rng: np.random.Generator) -> np.ndarray:
        """``size`` discrete cycles of k steps rooted at a jump, shape (size, k)."""
        n = self.Q.n
        d = np.maximum(np.diag(self._powers[k]), 0.0)
        z = np.empty((size, k), dtype=int)
        z[:, 0] = rng.choice(n, size=size, p=d / d.sum())
        x0 = z[:, 0]
        for i in range(1, k):
            w = self.P[z[:, i - 1]] * self._powers[k - i][:, x0].T
            c = np.cumsum(w, axis=1)
            u = rng.random(size) * c[:, -1]
            z[:, i] = np.minimum((c < u[:, None]).sum(axis=1), n - 1)
        return z

    def fields(self, size: int, rng: RngLike = None) -> np.ndarray:
        rng = as_rng(rng)
        n = self.Q.n
        out = np.zeros((size, n))
        if self.mass == 0:
            return out
        counts = rng.poisson(self.mass, size)
        total = int(counts.sum())
        owner = np.repeat(np.arange(size), counts)
        ks = 1 + np.searchsorted(np.cumsum(self.weights), rng.random(total) * self.mass, side="right")
        ks = np.minimum(ks, self.K)
        for k in np.unique(ks):
            sel = np.flatnonzero(ks == k)
            z = self._skeletons(int(k), sel.size, rng)
            hold = rng.exponential(1.0, size=z.shape) / self.rate[z]
            np.add.at(out, (np.repeat(owner[sel], k), z.ravel()), hold.ravel())
        return out

    def sample(self, rng: RngLike = None, seed: int | None = None) -> LoopSoup:
        rng = as_rng(rng)
        loops = []
        count = int(rng.poisson(self.mass)) if self.mass > 0 else 0
        if count:
            ks = 1 + np.searchsorted(np.cumsum(self.weights), rng.random(count) * self.mass, side="right")
            for k in np.minimum(ks, self.K):
                z = self._skeletons(int(k), 1, rng)[0]
                hold = rng.exponential(1.0, size=k) / self.rate[z]
                # split the root's sojourn so the cycle closes inside [0, length)
                head = rng.random() * hold[0]
                times = np.cumsum(np.concatenate(([head], hold[1:])))
                lp = Loop(int(z[0]), float(hold.sum()), times, np.append(z[1:], z[0]))
                while True:
                    try:
                        loops.append(lp.shifted(rng.random() * lp.length))
                        break
                    except ValueError:
                        continue
        return LoopSoup(loops, {"measure": "markov", "mu": self.mu, "part": "genuine"}, seed)


def sample_markov_fields(Q, mu: float, size: int, rng: RngLike = None) -> tuple[np.ndarray, np.ndarray]:
    """(point, genuine) occupation fields of ``size`` independent full Markovian soups."""
    rng = as_rng(rng)
    point = sample_point_field_markov(Q, mu, size, rng)
    genuine = GenuineLoopSampler(Q, mu).fields(size, rng)
    return point, genuine


# --- interaction -------------------------------------------------------------------


def pair_matrix(graph: WeightedGraph, potential: Mapping[int, float] | Callable[[int], float]) -> np.ndarray:
    """V[x, y] = v(d(x, y)) with d the hop distance; missing distances give 0."""
    dist = hop_distance(graph)
    if callable(potential):
        return np.vectorize(lambda r: float(potential(int(r))))(dist).astype(float)
    table = {int(k): float(val) for k, val in potential.items()}
    return np.vectorize(lambda r: table.get(int(r), 0.0))(dist).astype(float)


def _legs(path: Path, beta: float) -> list[tuple[np.ndarray, np.ndarray]]:
    k = int(round(path.length / beta))
    if k < 1 or abs(path.length - k * beta) > 1e-9 * beta:
        raise ValueError(f"path length {path.length} is not a multiple of beta={beta}")
    legs = []
    states = path.states
    for i in range(k):
        lo, hi = i * beta, (i + 1) * beta
        inside = (path.jump_times > lo) & (path.jump_times < hi)
        times = path.jump_times[inside] - lo
        first = states[np.searchsorted(path.jump_times, lo, side="right")]
        legs.append((np.concatenate(([0.0], times)), np.concatenate(([first], path.jump_states[inside]))))
    return legs


def leg_interaction(paths: Sequence[Path], pair: np.ndarray, beta: float) -> float:
    """Half the sum over ordered pairs of distinct legs of int_0^beta V[X_a(t), X_b(t)] dt.

    Every path of length k beta is cut into k legs of duration beta sharing one
    clock.  The integrand is piecewise constant, so it is integrated exactly on
    the common refinement of all legs' jump times.
    """
    pair = np.asarray(pair, dtype=float)
    legs = [leg for p in paths for leg in _legs(p, beta)]
    if len(legs) < 2 or not np.any(pair):
        return 0.0
    grid = np.unique(np.concatenate([t for t, _ in legs] + [[beta]]))
    grid = grid[grid <= beta]
    dt = np.diff(grid)
    starts = grid[:-1]
    n = pair.shape[0]
    occ = np.zeros((starts.size, n))
    rows = np.arange(starts.size)
    for times, states in legs:
        k = np.searchsorted(times, starts, side="right") - 1
        np.add.at(occ, (rows, states[k]), 1.0)
    energy = 0.5 * (np.einsum("ix,xy,iy->i", occ, pair, occ) - occ @ np.diag(pair))
    return float(energy @ dt)
