"""Weighted graphs with killing, their generators, heat kernels and Green functions.

Every other module indexes vertices by their position in ``WeightedGraph.vertices``;
the order in which a graph document declares its vertices is therefore canonical.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    """Raised for malformed or reducible graph descriptions."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Finite vertex set with nonnegative jump rates ``weights[x, y]`` and killing rates."""

    vertices: tuple
    weights: np.ndarray
    killing: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        verts = tuple(self.vertices)
        n = len(verts)
        if n == 0:
            raise GraphError("graph has no vertices")
        if len(set(verts)) != n:
            raise GraphError("duplicate vertex labels")
        w = np.asarray(self.weights, dtype=float)
        k = np.asarray(self.killing, dtype=float)
        if w.shape != (n, n) or k.shape != (n,):
            raise GraphError(f"shape mismatch: weights {w.shape}, killing {k.shape}, |V|={n}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(k))):
            raise GraphError("weights and killing rates must be finite")
        if np.any(w < 0):
            raise GraphError("negative edge weight")
        if np.any(k < 0):
            raise GraphError("negative killing rate")
        if np.any(np.diag(w) != 0):
            bad = verts[int(np.flatnonzero(np.diag(w))[0])]
            raise GraphError(f"self-loop weight at vertex {bad!r}")
        if n > 1:
            ncomp, _ = connected_components(csr_matrix(w > 0), directed=True, connection="strong")
            if ncomp != 1:
                raise GraphError(f"graph is reducible ({ncomp} strongly connected components)")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "killing", _frozen(k))
        object.__setattr__(self, "index", {v: i for i, v in enumerate(verts)})

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def exit_rates(self) -> np.ndarray:
        """lambda(x) = kappa(x) + sum_y w(x, y)."""
        return self.killing + self.weights.sum(axis=1)

    def idx(self, label: Hashable) -> int:
        try:
            return self.index[label]
        except KeyError:
            raise GraphError(f"unknown vertex label {label!r}") from None

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))

    def to_dict(self) -> dict:
        edges = [
            {"from": self.vertices[i], "to": self.vertices[j], "weight": float(self.weights[i, j])}
            for i, j in zip(*np.nonzero(self.weights))
        ]
        killing = {v: float(k) for v, k in zip(self.vertices, self.killing) if k != 0}
        return {"vertices": list(self.vertices), "edges": edges, "killing": killing}


def graph_from_edges(
    vertices: Sequence[Hashable],
    edges: Iterable[tuple],
    killing: Mapping[Hashable, float] | None = None,
) -> WeightedGraph:
    """Build a graph from ``(from, to, weight)`` triples; repeated edges accumulate."""
    verts = tuple(vertices)
    pos = {v: i for i, v in enumerate(verts)}
    n = len(verts)
    w = np.zeros((n, n))
    for a, b, rate in edges:
        if a not in pos or b not in pos:
            raise GraphError(f"edge refers to unknown vertex {a if a not in pos else b!r}")
        if a == b:
            raise GraphError(f"self-loop weight at vertex {a!r}")
        w[pos[a], pos[b]] += float(rate)
    k = np.zeros(n)
    for v, rate in (killing or {}).items():
        if v not in pos:
            raise GraphError(f"killing refers to unknown vertex {v!r}")
        k[pos[v]] = float(rate)
    return WeightedGraph(verts, w, k)


def parse_graph(doc: Mapping) -> WeightedGraph:
    """Validate a JSON-shaped graph document."""
    try:
        vertices = doc["vertices"]
        raw_edges = doc.get("edges", [])
        edges = [(e["from"], e["to"], e["weight"]) for e in raw_edges]
        killing = doc.get("killing", {}) or {}
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph document: {exc}") from None
    if not isinstance(vertices, list):
        raise GraphError("'vertices' must be a list")
    for _, _, rate in edges:
        if not isinstance(rate, (int, float)) or isinstance(rate, bool):
            raise GraphError(f"non-numeric edge weight {rate!r}")
    return graph_from_edges(vertices, edges, killing)


def load_graph(source: str | os.PathLike | Mapping) -> WeightedGraph:
    """Load a graph from a JSON file path, a JSON string, or an already parsed mapping."""
    if isinstance(source, Mapping):
        return parse_graph(source)
    text = str(source)
    try:
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            with open(text, encoding="utf-8") as fh:
                doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphError(f"cannot parse graph document: {exc}") from None
    return parse_graph(doc)


# --- generators -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Generator:
    """Sub-Markovian rate matrix Q = W - diag(lambda)."""

    q: np.ndarray
    lam: np.ndarray
    diag: np.ndarray
    graph: WeightedGraph | None = None

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def killing(self) -> np.ndarray:
        return -self.q.sum(axis=1)

    @property
    def jump_matrix(self) -> np.ndarray:
        """P(x, y) = w(x, y)/lambda(x); rows of pure-killing vertices are zero."""
        off = self.q - np.diag(self.diag)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(self.lam[:, None] > 0, off / self.lam[:, None], 0.0)
        return p

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.q, self.q.T))

    def shifted(self, v: np.ndarray) -> "Generator":
        """Generator Q - diag(v): extra killing at rate v."""
        v = np.asarray(v, dtype=float)
        q = self.q - np.diag(v)
        return Generator(_frozen(q), _frozen(self.lam + v), _frozen(np.diag(q)), None)


def generator_from_matrix(q: np.ndarray, graph: WeightedGraph | None = None) -> Generator:
    q = np.asarray(q, dtype=float)
    off = q - np.diag(np.diag(q))
    if np.any(off < 0):
        raise GraphError("generator has negative off-diagonal entries")
    if np.any(q.sum(axis=1) > 1e-9 * np.maximum(1.0, np.abs(np.diag(q)))):
        raise GraphError("generator rows must sum to a nonpositive value")
    return Generator(_frozen(q), _frozen(-np.diag(q)), _frozen(np.diag(q)), graph)


def build_generator(g: WeightedGraph) -> Generator:
    lam = g.exit_rates
    q = g.weights - np.diag(lam)
    return Generator(_frozen(q), _frozen(lam), _frozen(-lam), g)


def as_generator(obj: WeightedGraph | Generator | np.ndarray) -> Generator:
    if isinstance(obj, Generator):
        return obj
    if isinstance(obj, WeightedGraph):
        return build_generator(obj)
    return generator_from_matrix(obj)


# --- heat kernels ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HeatKernel:
    t: float
    matrix: np.ndarray


def expm_generator(q: np.ndarray, t: float, symmetric: bool | None = None) -> np.ndarray:
    """e^{tQ}; spectral for symmetric Q, Pade scaling-and-squaring otherwise."""
    q = np.asarray(q, dtype=float)
    if t == 0:
        return np.eye(q.shape[0])
    if symmetric is None:
        symmetric = bool(np.array_equal(q, q.T))
    if symmetric:
        evals, evecs = np.linalg.eigh(q)
        out = (evecs * np.exp(t * evals)) @ evecs.T
    else:
        out = scipy.linalg.expm(t * q)
    # clip rounding noise: a sub-Markovian kernel is entrywise nonnegative
    return np.maximum(out, 0.0)


def heat_kernel(Q: Generator | WeightedGraph, t: float) -> HeatKernel:
    Q = as_generator(Q)
    t = float(t)
    if not t >= 0:
        raise ValueError(f"heat kernel time must be nonnegative, got {t}")
    m = expm_generator(Q.q, t, Q.is_symmetric())
    m.setflags(write=False)
    return HeatKernel(t, m)


class KernelEvaluator:
    """Repeated evaluation of t -> e^{tQ} with a cached spectral decomposition.

    Symmetric generators are diagonalized once with ``eigh``.  For other
    generators the eigenbasis is used only when it is well conditioned; otherwise
    each call falls back to ``scipy.linalg.expm``.
    """

    def __init__(self, q: np.ndarray, cond_limit: float = 1e6):
        q = np.asarray(q, dtype=float)
        self.q = q
        self.n = q.shape[0]
        if np.array_equal(q, q.T):
            evals, evecs = np.linalg.eigh(q)
            self._evals, self._v, self._vinv = evals.astype(complex), evecs, evecs.T
            self.spectral = True
        else:
            evals, evecs = np.linalg.eig(q)
            self.spectral = np.linalg.cond(evecs) < cond_limit
            if self.spectral:
                self._evals, self._v, self._vinv = evals, evecs, np.linalg.inv(evecs)

    def __call__(self, t: float) -> np.ndarray:
        if t == 0:
            return np.eye(self.n)
        if self.spectral:
            out = (self._v * np.exp(t * self._evals)) @ self._vinv
            return np.maximum(out.real, 0.0)
        return np.maximum(scipy.linalg.expm(t * self.q), 0.0)

    def entry(self, t: float, x: int, y: int) -> float:
        if self.spectral:
            val = np.sum(self._v[x] * np.exp(t * self._evals) * self._vinv[:, y]).real
            return max(val, 0.0)
        return float(self(t)[x, y])

    def entries(self, ts: np.ndarray, x: int, y: int) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        if self.spectral:
            coef = self._v[x] * self._vinv[:, y]
            val = (np.exp(np.multiply.outer(ts, self._evals)) @ coef).real
            return np.maximum(val, 0.0)
        return np.array([self(t)[x, y] for t in ts.ravel()]).reshape(ts.shape)

    def trace(self, t: float) -> float:
        if self.spectral:
            return float(np.sum(np.exp(t * self._evals)).real)
        return float(np.trace(self(t)))


# --- spectral bounds and Green functions ----------------------------------------


def perron_bound(q: np.ndarray) -> tuple[float, np.ndarray]:
    """Certified upper bound on the spectral abscissa of a Metzler matrix.

    Returns ``(lam, u)`` with ``u > 0`` and ``Q u <= lam u`` componentwise, so that
    ``e^{tQ}(x, y) <= e^{t lam} u(x)/u(y)`` for every ``t >= 0`` (Collatz-Wielandt).
    """
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    if n == 1:
        return float(q[0, 0]), np.ones(1)
    evals, evecs = np.linalg.eig(q)
    k = int(np.argmax(evals.real))
    u = np.abs(evecs[:, k].real)
    if not np.all(u > 0):
        u = np.maximum(u, 1e-300) + 1e-12 * u.max()
    lam = float(np.max((q @ u) / u))
    return lam, u / u.max()


def check_mass_condition(Q: Generator, mu: float) -> None:
    """kappa(x) - mu > 0 for some x: makes -(Q + mu I) a nonsingular M-matrix."""
    if not mu <= 0:
        raise ValueError(f"chemical potential must be nonpositive, got {mu}")
    if not np.any(Q.killing - mu > 1e-14 * np.maximum(1.0, Q.lam)):
        raise ValueError("need kappa(x) - mu > 0 for at least one vertex (finite loop mass)")


def green_function(Q: Generator | WeightedGraph, mu: float = 0.0) -> np.ndarray:
    """G^mu = (-(Q + mu I))^{-1} = int_0^inf e^{mu t} p_t dt."""
    Q = as_generator(Q)
    check_mass_condition(Q, mu)
    a = -(Q.q + mu * np.eye(Q.n))
    try:
        return scipy.linalg.solve(a, np.eye(Q.n))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:  # pragma: no cover
        raise ValueError(f"-(Q + mu I) is singular: {exc}") from None


def logdet(a: np.ndarray) -> tuple[float, float]:
    """(sign, log|det a|) from an LU factorization with sign tracking."""
    sign, ld = np.linalg.slogdet(np.asarray(a))
    return sign, float(ld)


# --- torus ----------------------------------------------------------------------


def torus_rate_pattern(n: int, beta: float, directed: bool = True) -> np.ndarray:
    """First column ``b`` of the circulant torus generator, ``B[i, j] = b[(i - j) % n]``."""
    r = n / beta
    b = np.zeros(n)
    b[0] -= r
    b[(n - 1) % n] += r  # B[tau, tau + 1] = r
    if not directed:
        b[0] -= r
        b[1 % n] += r  # B[tau, tau - 1] = r
    return b


def torus_kernel(n: int, beta: float, t: float, directed: bool = True) -> np.ndarray:
    """tau -> P(torus walk started at 0 is at tau at time t), by circulant diagonalization."""
    if n < 1:
        raise ValueError("torus size must be at least 1")
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        out = np.zeros(n)
        out[0] = 1.0
        return out
    b = torus_rate_pattern(n, beta, directed)
    col = np.fft.ifft(np.exp(t * np.fft.fft(b))).real
    out = col[(-np.arange(n)) % n]
    return np.clip(out, 0.0, 1.0)


def torus_generator(n: int, beta: float, directed: bool = True) -> np.ndarray:
    b = torus_rate_pattern(n, beta, directed)
    idx = np.arange(n)
    return b[(idx[:, None] - idx[None, :]) % n]


# --- lattice boxes --------------------------------------------------------------


def box_graph(d: int, L: int, boundary: str = "dirichlet", weight: float = 1.0) -> WeightedGraph:
    """Box {0..L-1}^d of Z^d with unit nearest-neighbour rates.

    ``dirichlet``: each missing neighbour becomes killing at the same rate.
    ``periodic``: coordinates wrap around (L >= 3 to avoid double edges).
    """
    if boundary not in ("dirichlet", "periodic"):
        raise ValueError(f"unknown boundary condition {boundary!r}")
    shape = (L,) * d
    verts = list(np.ndindex(*shape))
    n = len(verts)
    w = np.zeros((n, n))
    k = np.zeros(n)
    for i, site in enumerate(verts):
        for axis in range(d):
            for step in (-1, 1):
                c = site[axis] + step
                if 0 <= c < L:
                    j = np.ravel_multi_index(site[:axis] + (c,) + site[axis + 1:], shape)
                    w[i, j] += weight
                elif boundary == "periodic":
                    j = np.ravel_multi_index(site[:axis] + (c % L,) + site[axis + 1:], shape)
                    if j != i:
                        w[i, j] += weight
                else:
                    k[i] += weight
    labels = tuple(",".join(map(str, s)) for s in verts)
    return WeightedGraph(labels, w, k)


def hop_distance(g: WeightedGraph) -> np.ndarray:
    """Graph distance (number of hops along positive-weight edges, either direction)."""
    from scipy.sparse.csgraph import shortest_path

    adj = (g.weights > 0) | (g.weights.T > 0)
    dist = shortest_path(csr_matrix(adj.astype(float)), unweighted=True, directed=False)
    return np.rint(dist).astype(int)
