"""Complex Gaussian measures with non-Hermitian quadratic forms and the isomorphism identities.

The measure mu_A has density proportional to exp(-<phi, A conj(phi)>) with
<phi, A conj(phi)> = sum_{x,y} phi_x A[x, y] conj(phi_y).  It is a probability
measure whenever the Hermitian part (A + A*)/2 is positive definite, even though
A itself may be non-Hermitian.  Then E_A[conj(phi_x) phi_y] = (A^{-1})[x, y].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .graph import Generator, as_generator, check_mass_condition, green_function
from .loopmeas import occupation_laplace_markov, resolve_states
from .soup import BridgeSampler, GenuineLoopSampler, RngLike, _GridDensitySampler, as_rng, sample_point_field_markov
from .graph import KernelEvaluator, perron_bound


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    a: np.ndarray
    hermitian_part: np.ndarray = field(init=False)
    skew_part: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=complex))
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("quadratic form must be a square matrix")
        h = 0.5 * (a + a.conj().T)
        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            raise ValueError("Hermitian part of A is not positive definite") from None
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "hermitian_part", h)
        object.__setattr__(self, "skew_part", a - h)

    @classmethod
    def from_generator(cls, Q, mu: float = 0.0, v=None) -> "QuadraticForm":
        """A = -(Q + mu I) (+ diag(v))."""
        Q = as_generator(Q)
        check_mass_condition(Q, mu)
        a = -(Q.q + mu * np.eye(Q.n))
        if v is not None:
            a = a + np.diag(np.asarray(v, dtype=float))
        return cls(a)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    def relative_skew_norm(self) -> float:
        """|| H^{-1/2} A^S H^{-1/2} ||_2 with H the Hermitian part."""
        L = np.linalg.cholesky(self.hermitian_part)
        m = scipy.linalg.solve_triangular(L, self.skew_part, lower=True)
        m = scipy.linalg.solve_triangular(L, m.conj().T, lower=True).conj().T
        return float(np.linalg.norm(m, 2))

    def is_hermitian(self) -> bool:
        return bool(np.all(self.skew_part == 0))


def _as_form(A) -> QuadraticForm:
    return A if isinstance(A, QuadraticForm) else QuadraticForm(A)


def normalization(A) -> complex:
    """Z_A = int exp(-<phi, A conj(phi)>) prod d phi_x = pi^n/det A (Lebesgue measure on C^n)."""
    A = _as_form(A)
    sign, ld = np.linalg.slogdet(A.a)
    return complex(np.exp(A.n * math.log(math.pi) - ld) / sign)


def covariance(A) -> np.ndarray:
    """C[x, y] = E_A[conj(phi_x) phi_y] = (A^{-1})[x, y]."""
    A = _as_form(A)
    return np.linalg.inv(A.a)


def gaussian_moment(A, x: int, y: int) -> complex:
    return complex(covariance(A)[x, y])


@dataclass
class ComplexFieldSample:
    phi: np.ndarray
    weight: np.ndarray


def quadratic_value(phi: np.ndarray, M: np.ndarray) -> np.ndarray:
    """<phi, M conj(phi)> row-wise for phi of shape (..., n)."""
    return np.einsum("...x,xy,...y->...", phi, M, phi.conj())


def sample_field(A, size: int, rng: RngLike = None) -> ComplexFieldSample:
    """Draw phi from mu_H (H the Hermitian part) with weights f = (det A/det H) e^{-<phi, A^S conj(phi)>}.

    conj(phi) = L z with L L* = H^{-1} and z standard complex normal, so that
    E[conj(phi_x) phi_y] = H^{-1}[x, y].  Weighted means estimate E_A.
    """
    A = _as_form(A)
    rng = as_rng(rng)
    cov = np.linalg.inv(A.hermitian_part)
    cov = 0.5 * (cov + cov.conj().T)
    L = np.linalg.cholesky(cov)
    z = (rng.standard_normal((size, A.n)) + 1j * rng.standard_normal((size, A.n))) / math.sqrt(2)
    phi = (z @ L.T).conj()
    if A.is_hermitian():
        return ComplexFieldSample(phi, np.ones(size, dtype=complex))
    s1, l1 = np.linalg.slogdet(A.a)
    s2, l2 = np.linalg.slogdet(A.hermitian_part)
    ratio = s1 / s2 * np.exp(l1 - l2)
    w = ratio * np.exp(-quadratic_value(phi, A.skew_part))
    return ComplexFieldSample(phi, w)


# --- reports --------------------------------------------------------------------


@dataclass
class Check:
    identity: str
    parameters: dict
    exact: float
    estimate: float
    stderr: float

    @property
    def z_score(self) -> float:
        if self.stderr == 0:
            return 0.0 if abs(self.estimate - self.exact) < 1e-12 else math.inf
        return (self.estimate - self.exact) / self.stderr

    @property
    def passed(self) -> bool:
        return abs(self.z_score) <= 3.0

    def to_dict(self) -> dict:
        return {
            "identity": self.identity,
            "parameters": self.parameters,
            "exact": self.exact,
            "estimate": self.estimate,
            "stderr": self.stderr,
            "z_score": self.z_score,
            "pass": self.passed,
        }


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0


def verify_lejan(Q, mu: float, v, samples: int, rng: RngLike = None) -> list[Check]:
    """E[e^{-<v, |phi|^2>}] under mu_A, A = -(Q + mu I), against the Markovian soup and the determinant ratio.

    The soup side combines the exact point-loop field (independent exponentials)
    with the genuine loops sampled through their discrete skeletons, so nothing
    is truncated.
    """
    Q = as_generator(Q)
    rng = as_rng(rng)
    v = np.asarray(v, dtype=float)
    exact = occupation_laplace_markov(Q, mu, v)
    A = QuadraticForm.from_generator(Q, mu)
    s = sample_field(A, samples, rng)
    g = (s.weight * np.exp(-(np.abs(s.phi) ** 2) @ v)).real
    point = sample_point_field_markov(Q, mu, samples, rng)
    genuine = GenuineLoopSampler(Q, mu).fields(samples, rng)
    h = np.exp(-(point + genuine) @ v)
    params = {"mu": mu, "v": v.tolist(), "samples": samples, "relative_skew_norm": A.relative_skew_norm()}
    return [
        Check("lejan/gaussian", params, exact, *_mean_se(g)),
        Check("lejan/soup", params, exact, *_mean_se(h)),
    ]


def dynkin_identity(Q, mu: float, x, y, v) -> tuple[float, float]:
    """Both sides of the Dynkin identity for F = e^{-<v, .>}.

    lhs: loop side, the Feynman-Kac Green function (-(Q + mu - V))^{-1}(x, y)
    times the soup Laplace transform det(Q + mu)/det(Q + mu - V).
    rhs: Gaussian side, E_A[conj(phi_x) phi_y e^{-<v, |phi|^2>}] = (Z_{A+V}/Z_A) E_{A+V}[conj(phi_x) phi_y].
    """
    Q = as_generator(Q)
    i, j = resolve_states(Q, [x, y])
    v = np.asarray(v, dtype=float)
    lhs = green_function(Q.shifted(v), mu)[i, j] * occupation_laplace_markov(Q, mu, v)
    A = QuadraticForm.from_generator(Q, mu)
    AV = QuadraticForm(A.a + np.diag(v))
    rhs = (normalization(AV) / normalization(A)) * gaussian_moment(AV, i, j)
    return float(lhs), float(rhs.real)


# --- Symanzik ------------------------------------------------------------------


@dataclass(frozen=True)
class JSpec:
    """J(u) = prod_x sum_i c_i e^{-u_x w_i}: a finite mixture (``weights`` c, ``rates`` w).

    ``linear(v)`` is the degenerate family J(u) = e^{-<v, u>} with per-vertex rates.
    """

    kind: str
    v: np.ndarray | None = None
    rates: np.ndarray | None = None
    weights: np.ndarray | None = None

    @classmethod
    def linear(cls, v) -> "JSpec":
        v = np.asarray(v, dtype=float)
        if np.any(v < 0):
            raise ValueError("linear J needs v >= 0")
        return cls("linear", v=v)

    @classmethod
    def mixture(cls, rates: Sequence[float], weights: Sequence[float] | None = None) -> "JSpec":
        rates = np.asarray(rates, dtype=float)
        weights = np.ones_like(rates) / rates.size if weights is None else np.asarray(weights, dtype=float)
        if np.any(rates < 0) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("mixture J needs nonnegative rates and weights with positive total")
        return cls("mixture", rates=rates, weights=weights)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "linear":
            return np.exp(-u @ self.v)
        per_site = np.exp(-u[..., None] * self.rates) @ self.weights
        return np.prod(per_site, axis=-1)


def symanzik_closed(Q, mu: float, beta: float, x, y, v) -> tuple[float, float]:
    """Linear J = e^{-<v, .>}.

    lhs: E_{beta(A+V)}[conj(phi_x) phi_y], the tilted Gaussian moment.
    rhs: the bridge-measure side, (1/beta) int_0^inf e^{mu s} E_x[e^{-<v, L_s>}; X_s = y] ds,
    evaluated as the Green function of the killed generator Q - V.
    """
    Q = as_generator(Q)
    i, j = resolve_states(Q, [x, y])
    v = np.asarray(v, dtype=float)
    A = QuadraticForm.from_generator(Q, mu)
    lhs = gaussian_moment(QuadraticForm(beta * (A.a + np.diag(v))), i, j)
    rhs = green_function(Q.shifted(v), mu)[i, j] / beta
    return float(lhs.real), float(rhs)


def _bridge_length_sampler(Q: Generator, mu: float, x: int, y: int, nodes: int = 8192) -> _GridDensitySampler:
    """Lengths s of the bridge measure from x to y: density proportional to e^{mu s} p_s(x, y)."""
    kern = KernelEvaluator(Q.q)
    lam, _ = perron_bound(Q.q)
    T = 1.0
    while math.exp((mu + lam) * T) > 1e-16:
        T *= 1.25
    grid = np.concatenate((np.linspace(0.0, 1.0, nodes // 2, endpoint=False), np.geomspace(1.0, T, nodes // 2)))
    return _GridDensitySampler(lambda s: np.exp(mu * s) * kern.entries(s, x, y), grid=grid)


def symanzik_mc(Q, mu: float, beta: float, x, y, J: JSpec, samples: int, rng: RngLike = None) -> list[Check]:
    """Two Monte Carlo estimates of E_{A,J}[conj(phi_x) phi_y] for a mixture (or linear) J.

    Gaussian side: weighted sampling from mu_{beta A}, ratio of the means of
    conj(phi_x) phi_y J(beta |phi|^2) and J(beta |phi|^2).
    Loop side: the bridge measure from x to y (total mass G^mu(x, y)/beta, length
    law e^{mu s} p_s(x, y)) together with an independent full Markovian soup,
    ratio of the means of J(L + soup) and J(soup).
    """
    Q = as_generator(Q)
    rng = as_rng(rng)
    i, j = resolve_states(Q, [x, y])
    A = QuadraticForm.from_generator(Q, mu)
    s = sample_field(QuadraticForm(beta * A.a), samples, rng)
    jv = J(beta * np.abs(s.phi) ** 2)
    num = (s.weight * s.phi[:, i].conj() * s.phi[:, j] * jv).real
    den = (s.weight * jv).real
    gauss, gauss_se = _ratio_se(num, den)

    point = sample_point_field_markov(Q, mu, samples, rng)
    soup = point + GenuineLoopSampler(Q, mu).fields(samples, rng)
    lengths = _bridge_length_sampler(Q, mu, i, j).sample(samples, rng)
    bridges = BridgeSampler(Q)
    L = np.array([bridges.sample(i, j, float(t), rng).local_times(Q.n) for t in lengths])
    mass = green_function(Q, mu)[i, j] / beta
    loop, loop_se = _ratio_se(mass * J(soup + L), J(soup))
    exact = symanzik_closed(Q, mu, beta, i, j, J.v)[0] if J.kind == "linear" else math.nan
    params = {"mu": mu, "beta": beta, "x": i, "y": j, "samples": samples, "J": J.kind}
    # the two Monte Carlo estimates are independent: compare their difference
    diff = Check("symanzik/gaussian-vs-loop", params, 0.0, gauss - loop, math.hypot(gauss_se, loop_se))
    out = [diff]
    if J.kind == "linear":
        out += [Check("symanzik/gaussian", params, exact, gauss, gauss_se), Check("symanzik/loop", params, exact, loop, loop_se)]
    return out


def _ratio_se(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Ratio of means with its delta-method standard error."""
    n = num.size
    mn, md = num.mean(), den.mean()
    r = mn / md
    resid = (num - r * den) / md
    return float(r), float(resid.std(ddof=1) / math.sqrt(n))


# --- angular representation -----------------------------------------------------------


def _lattice_angles(n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly shifted rank-1 lattice on [0, 2 pi)^n (Korobov generator)."""
    a = int(count * 0.6180339887498949) | 1
    gen = np.array([pow(a, k, count) for k in range(n)], dtype=float)
    pts = (np.arange(count)[:, None] * gen[None, :] / count + rng.random(n)) % 1.0
    return 2 * math.pi * pts


def conditional_angular_expectation(
    Q,
    mu: float,
    occupation,
    F: Callable[[np.ndarray], np.ndarray],
    rng: RngLike = None,
    samples: int = 2**14,
    A=None,
) -> complex:
    """int F(theta sqrt(L)) e^{-<sqrt(L) theta, A sqrt(L) conj(theta)>} dS(theta) / (same with F = 1).

    theta ranges over the product of unit circles with uniform measure; both
    integrals use the same quasi-uniform angle set.
    """
    rng = as_rng(rng)
    if A is None:
        A = QuadraticForm.from_generator(Q, mu)
    A = _as_form(A)
    occ = np.asarray(getattr(occupation, "values", occupation), dtype=float)
    if np.any(occ < 0):
        raise ValueError("occupation field must be nonnegative")
    ang = _lattice_angles(A.n, samples, rng)
    phi = np.sqrt(occ) * np.exp(1j * ang)
    w = np.exp(-quadratic_value(phi, A.a))
    den = w.mean()
    if abs(den) == 0:
        raise ZeroDivisionError("angular normalizing integral vanished")
    return complex(np.mean(np.asarray(F(phi)) * w) / den)
