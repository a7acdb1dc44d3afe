"""Multivariate Student-t distributions as members of the t-exponential family.

A k-dimensional ``St(mu, Sigma, v)`` has deformation index
``t = 1 + 2 / (v + k)``.  Writing ``K = (v Sigma)^-1`` and

    Psi = (Gamma((v+k)/2) / ((pi v)^(k/2) Gamma(v/2) |Sigma|^(1/2)))^(1-t),

the density is ``exp_t(<Phi(x), theta> - g_t(theta))`` with natural parameters
``theta1 = -2 Psi K mu / (1-t)``, ``theta2 = Psi K / (1-t)``.  Everything the EP
code adds or subtracts lives in the pair ``(Psi K, Psi K mu)``; that pair is
what :class:`NaturalParams` stores.

Determinants are handled in log space throughout: ``|Sigma|^((1-t)/2)``
under/overflows for moderate ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import integrate, special

from .qalgebra import exp_t


class NotPositiveDefinite(ValueError):
    """A scale / precision matrix failed its Cholesky factorization."""


def dof_to_t(v: float, k: int) -> float:
    return 1.0 + 2.0 / (v + k)


def t_to_dof(t: float, k: int) -> float:
    return 2.0 / (t - 1.0) - k


def _chol(a: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def _logdet_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@lru_cache(maxsize=256)
def log_alpha(v: float, k: int) -> float:
    """log of ``Gamma((v+k)/2) / ((pi v)^(k/2) Gamma(v/2))``, the density constant at |Sigma| = 1."""
    return float(special.gammaln((v + k) / 2.0) - 0.5 * k * np.log(np.pi * v) - special.gammaln(v / 2.0))


@dataclass(frozen=True, eq=False)
class StudentT:
    """``St(mu, Sigma, v)`` in moment form.  ``v = inf`` is the Gaussian limit."""

    mu: np.ndarray
    Sigma: np.ndarray
    v: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if Sigma.shape != (mu.size, mu.size):
            raise ValueError(f"Sigma shape {Sigma.shape} does not match mean of length {mu.size}")
        if not self.v > 0:
            raise ValueError(f"degrees of freedom must be positive, got {self.v}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", 0.5 * (Sigma + Sigma.T))
        object.__setattr__(self, "v", float(self.v))

    @property
    def k(self) -> int:
        return self.mu.size

    @property
    def t(self) -> float:
        return 1.0 if np.isinf(self.v) else dof_to_t(self.v, self.k)

    @property
    def chol(self) -> np.ndarray:
        return _chol(self.Sigma)

    @property
    def logdet(self) -> float:
        return _logdet_chol(self.chol)

    @property
    def log_psi(self) -> float:
        return (1.0 - self.t) * (log_alpha(self.v, self.k) - 0.5 * self.logdet)

    @property
    def psi(self) -> float:
        return float(np.exp(self.log_psi))

    @property
    def K(self) -> np.ndarray:
        return np.linalg.inv(self.v * self.Sigma)

    def natural(self) -> "NaturalParams":
        return to_natural(self)

    def pdf(self, x) -> np.ndarray | float:
        return density(self, x)


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """The ``(Psi K, Psi K mu)`` pair at deformation index ``t``.

    The same container holds normalized Student-t parameters and unnormalized
    site contributions; addition and subtraction are componentwise.
    """

    psi_k: np.ndarray
    psi_k_mu: np.ndarray
    t: float

    def __post_init__(self):
        object.__setattr__(self, "psi_k", np.atleast_2d(np.asarray(self.psi_k, dtype=float)))
        object.__setattr__(self, "psi_k_mu", np.atleast_1d(np.asarray(self.psi_k_mu, dtype=float)))

    @property
    def k(self) -> int:
        return self.psi_k_mu.size

    @property
    def v(self) -> float:
        """Degrees of freedom of the Student-t with this dimension and ``t``."""
        return t_to_dof(self.t, self.k)

    @property
    def theta1(self) -> np.ndarray:
        return -2.0 * self.psi_k_mu / (1.0 - self.t)

    @property
    def theta2(self) -> np.ndarray:
        return self.psi_k / (1.0 - self.t)

    def inner(self, w) -> np.ndarray | float:
        """``<Phi(w), theta>`` for a point or a stack of points (rows)."""
        w = np.asarray(w, dtype=float)
        scalar = w.ndim <= 1 and not (self.k == 1 and w.ndim == 1 and w.size > 1)
        W = w.reshape(-1, self.k)
        quad = np.einsum("ni,ij,nj->n", W, self.psi_k, W)
        val = (quad - 2.0 * W @ self.psi_k_mu) / (1.0 - self.t)
        return float(val[0]) if scalar else val

    def _check(self, other: "NaturalParams"):
        if abs(self.t - other.t) > 1e-12 or self.k != other.k:
            raise ValueError("natural parameters with different t or dimension")

    def __add__(self, other: "NaturalParams") -> "NaturalParams":
        self._check(other)
        return NaturalParams(self.psi_k + other.psi_k, self.psi_k_mu + other.psi_k_mu, self.t)

    def __sub__(self, other: "NaturalParams") -> "NaturalParams":
        self._check(other)
        return NaturalParams(self.psi_k - other.psi_k, self.psi_k_mu - other.psi_k_mu, self.t)

    def scaled(self, c: float) -> "NaturalParams":
        return NaturalParams(c * self.psi_k, c * self.psi_k_mu, self.t)

    @classmethod
    def zeros(cls, k: int, t: float) -> "NaturalParams":
        return cls(np.zeros((k, k)), np.zeros(k), t)


def log_density(d: StudentT, x) -> np.ndarray | float:
    """Log of :func:`density`."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0 or (x.ndim == 1 and (d.k > 1 or x.size == 1))
    X = x.reshape(-1, d.k)
    L = d.chol
    z = np.linalg.solve(L, (X - d.mu).T)
    maha = np.sum(z * z, axis=0)
    logdet = _logdet_chol(L)
    if np.isinf(d.v):
        logp = -0.5 * (d.k * np.log(2 * np.pi) + logdet + maha)
    else:
        logp = log_alpha(d.v, d.k) - 0.5 * logdet - 0.5 * (d.v + d.k) * np.log1p(maha / d.v)
    return float(logp[0]) if scalar else logp


def density(d: StudentT, x) -> np.ndarray | float:
    """Student-t pdf at a point (length-k vector) or at each row of an ``(n, k)`` array."""
    return np.exp(log_density(d, x))


def moments_to_natural(mu: np.ndarray, Sigma: np.ndarray, v: float) -> tuple[np.ndarray, np.ndarray]:
    """``(Psi K, Psi K mu)`` from raw moment parameters (no validation)."""
    k = mu.size
    t = dof_to_t(v, k)
    L = _chol(Sigma)
    log_psi = (1.0 - t) * (log_alpha(v, k) - 0.5 * _logdet_chol(L))
    Linv = np.linalg.inv(L)
    psi_k = (np.exp(log_psi) / v) * (Linv.T @ Linv)
    psi_k = 0.5 * (psi_k + psi_k.T)
    return psi_k, psi_k @ mu


def natural_to_moments(psi_k: np.ndarray, psi_k_mu: np.ndarray, v: float) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, Sigma)`` from raw natural parameters; see :func:`recover_scale`."""
    k = psi_k_mu.size
    t = dof_to_t(v, k)
    log_a = log_alpha(v, k)
    denom = k * (t - 1.0) / 2.0 - 1.0
    if abs(denom) < 1e-14:
        raise ZeroDivisionError("determinant exponent is singular: (t-1)/2 == 1/k")
    L = _chol(psi_k)
    logdet_sigma = (_logdet_chol(L) - k * (1.0 - t) * log_a + k * np.log(v)) / denom
    log_psi = (1.0 - t) * (log_a - 0.5 * logdet_sigma)
    Linv = np.linalg.inv(L)
    Minv = Linv.T @ Linv
    return Minv @ psi_k_mu, (np.exp(log_psi) / v) * Minv


def to_natural(d: StudentT) -> NaturalParams:
    psi_k, psi_k_mu = moments_to_natural(d.mu, d.Sigma, d.v)
    return NaturalParams(psi_k, psi_k_mu, d.t)


def recover_scale(psi_k: np.ndarray, v: float, alpha_const: float | None = None) -> np.ndarray:
    """Solve ``(alpha / |Sigma|^(1/2))^(1-t) (v Sigma)^-1 = psi_k`` for ``Sigma``.

    ``alpha_const`` defaults to the Student-t constant for ``(v, k)``.  Taking
    log-determinants of both sides gives ``log|Sigma|`` in closed form, which
    fixes ``Psi``; then ``Sigma = (Psi / v) psi_k^-1``.
    """
    M = np.atleast_2d(np.asarray(psi_k, dtype=float))
    k = M.shape[0]
    t = dof_to_t(v, k)
    log_a = log_alpha(v, k) if alpha_const is None else float(np.log(alpha_const))
    denom = k * (t - 1.0) / 2.0 - 1.0
    if abs(denom) < 1e-14:
        raise ZeroDivisionError("determinant exponent is singular: (t-1)/2 == 1/k")
    L = _chol(0.5 * (M + M.T))
    logdet_m = _logdet_chol(L)
    logdet_sigma = (logdet_m - k * (1.0 - t) * log_a + k * np.log(v)) / denom
    log_psi = (1.0 - t) * (log_a - 0.5 * logdet_sigma)
    Linv = np.linalg.inv(L)
    Minv = Linv.T @ Linv
    return np.exp(log_psi) / v * Minv


def from_natural(n: NaturalParams, v: float | None = None) -> StudentT:
    v = n.v if v is None else float(v)
    mu, Sigma = natural_to_moments(0.5 * (n.psi_k + n.psi_k.T), n.psi_k_mu, v)
    return StudentT(mu, Sigma, v)


def log_partition(d: StudentT | NaturalParams) -> float:
    """``g_t(theta) = (1 - Psi (mu' K mu + 1)) / (1 - t)``."""
    if isinstance(d, NaturalParams):
        d = from_natural(d)
    quad = float(d.mu @ np.linalg.solve(d.v * d.Sigma, d.mu))
    return (1.0 - d.psi * (quad + 1.0)) / (1.0 - d.t)


def escort(d: StudentT) -> StudentT:
    """Normalized ``p^t``: ``St(mu, Sigma v/(v+2), v+2)``."""
    if np.isinf(d.v):
        return d
    return StudentT(d.mu, d.Sigma * d.v / (d.v + 2.0), d.v + 2.0)


def escort_moments(d: StudentT) -> tuple[np.ndarray, np.ndarray]:
    """Expected sufficient statistics ``(E_q[w], E_q[w w'])`` under the escort.

    The escort covariance equals the scale matrix ``Sigma`` itself.
    """
    return d.mu.copy(), d.Sigma + np.outer(d.mu, d.mu)


def t_integral(theta: NaturalParams, g: float) -> float:
    """``int exp_t(<Phi(w), theta> - g) dw`` in closed form.

    The result is ``exp_t((g_t(theta) - g) / Psi)`` raised to ``1 + k(1-t)/2``;
    for ``k = 1`` the exponent is ``(3-t)/2``.
    """
    d = from_natural(theta)
    t, k = theta.t, theta.k
    base = exp_t((log_partition(d) - g) / d.psi, t)
    return float(base ** (1.0 + k * (1.0 - t) / 2.0))


def integral_exponent(t: float, k: int) -> float:
    """Power applied to ``exp_t(.)`` in :func:`t_integral` (``(3-t)/2`` when ``k = 1``)."""
    return 1.0 + k * (1.0 - t) / 2.0


def marginal(d: StudentT, idx: Sequence[int]) -> StudentT:
    idx = np.asarray(idx, dtype=int)
    return StudentT(d.mu[idx], d.Sigma[np.ix_(idx, idx)], d.v)


def conditional(d: StudentT, idx1: Sequence[int], x1) -> StudentT:
    """Distribution of the remaining coordinates given ``w[idx1] = x1``."""
    idx1 = np.asarray(idx1, dtype=int)
    idx2 = np.setdiff1d(np.arange(d.k), idx1)
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    S11 = d.Sigma[np.ix_(idx1, idx1)]
    S21 = d.Sigma[np.ix_(idx2, idx1)]
    S22 = d.Sigma[np.ix_(idx2, idx2)]
    L = _chol(S11)
    r = np.linalg.solve(L, x1 - d.mu[idx1])
    W = np.linalg.solve(L, S21.T)  # L^-1 S12
    beta = float(r @ r)
    n1 = idx1.size
    mu2 = d.mu[idx2] + W.T @ r
    S22c = S22 - W.T @ W
    return StudentT(mu2, (d.v + beta) / (d.v + n1) * S22c, d.v + n1)


def cdf_1d(z, v: float):
    """Lower CDF of the standard 1-D Student-t (regularized incomplete beta)."""
    out = special.stdtr(v, z)
    return float(out) if np.ndim(out) == 0 else out


def pdf_1d(z, v: float, scale2: float = 1.0):
    """Density of ``St(0, scale2, v)`` in one dimension."""
    z = np.asarray(z, dtype=float)
    out = np.exp(log_alpha(v, 1) - 0.5 * np.log(scale2) - 0.5 * (v + 1.0) * np.log1p(z * z / (scale2 * v)))
    return float(out) if out.ndim == 0 else out


def t_divergence(p: StudentT, p2: StudentT) -> float:
    """``int q(x) (ln_t p(x) - ln_t p2(x)) dx`` with ``q`` the escort of ``p``, by quadrature.

    Only ``k`` in {1, 2} is supported; this is a checking utility.
    """
    if p.k != p2.k:
        raise ValueError("dimension mismatch")
    if abs(p.t - p2.t) > 1e-12:
        raise ValueError("t-divergence needs both distributions at the same t")
    q, t = escort(p), p.t

    def ln_t_of(d, x):
        # ln_t from the log density, so underflowed tails stay finite
        return np.expm1((1.0 - t) * log_density(d, x)) / (1.0 - t)

    def f(*x):
        x = np.array(x[::-1])
        return density(q, x) * (ln_t_of(p, x) - ln_t_of(p2, x))

    if p.k == 1:
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-11, limit=200)
    elif p.k == 2:
        val, _ = integrate.dblquad(f, -np.inf, np.inf, -np.inf, np.inf, epsabs=1e-11, epsrel=1e-9)
    else:
        raise NotImplementedError("t_divergence quadrature supports k <= 2")
    return float(val)
