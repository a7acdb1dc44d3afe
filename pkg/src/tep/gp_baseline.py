"""Classical (Gaussian) EP baselines with the same step likelihood.

Written independently of the t-exponential code so they can serve as the
``t -> 1`` oracle:

* :func:`gp_ep_fit` - function-space GP classification;
* :func:`linear_ep_fit` - weight-space Gaussian EP for the Bayes point machine.

Likelihood ``l(f) = eps + (1 - 2 eps) step(y f)``; against ``N(f; mu, s2)`` it
integrates to ``Z = eps + (1 - 2 eps) Phi(y mu / s)``.  Site precisions may go
negative (the likelihood is not log-concave for ``eps > 0``), so nothing below
assumes ``tau >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtr

from .stp import Kernel


def gaussian_tilted(mu: float, s2: float, y: int, epsilon: float) -> tuple[float, float, float]:
    """``(mu_hat, s2_hat, log Z)`` of ``N(f; mu, s2) * l(f)``."""
    s = np.sqrt(s2)
    z = y * mu / s
    D = 1.0 - 2.0 * epsilon
    log_pdf = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)
    if epsilon > 0:
        logZ = float(np.log(epsilon + D * ndtr(z)))
    else:
        logZ = float(log_ndtr(z))
    # D N(z) / Z, in log space so deep tails stay finite
    ratio = np.exp(np.log(D) + log_pdf - logZ) if D > 0 else 0.0
    mu_hat = mu + y * s * ratio
    s2_hat = s2 * (1.0 - ratio * (z + ratio))
    return float(mu_hat), float(s2_hat), logZ


@dataclass
class GPStatus:
    converged: bool = False
    sweeps: int = 0
    skipped: int = 0
    max_change: list = field(default_factory=list)


def _site_log_terms(tau, nu, mu_c, s2_c, logZ_hat) -> float:
    """Per-site part of the EP log evidence in natural form (valid for any sign of ``tau``)."""
    a = 1.0 + tau * s2_c
    return float(np.sum(logZ_hat + 0.5 * np.log(a) + 0.5 * (tau * mu_c**2 - 2.0 * nu * mu_c - nu**2 * s2_c) / a))


def _tilted_all(mu, s2, tau, nu, y, epsilon):
    tc = 1.0 / s2 - tau
    nc = mu / s2 - nu
    mu_c, s2_c = nc / tc, 1.0 / tc
    logZ = np.array([gaussian_tilted(mu_c[i], s2_c[i], int(y[i]), epsilon)[2] for i in range(len(y))])
    return mu_c, s2_c, logZ


def _sweep(n, y, epsilon, damping, status, get_marginal, apply_update, tau, nu):
    """One sequential sweep over the sites; returns the largest parameter change."""
    change = 0.0
    for i in range(n):
        m, v = get_marginal(i)
        tc = 1.0 / v - tau[i]
        nc = m / v - nu[i]
        if not tc > 0:
            status.skipped += 1
            continue
        m_h, s2_h, _ = gaussian_tilted(nc / tc, 1.0 / tc, int(y[i]), epsilon)
        if not s2_h > 0:
            status.skipped += 1
            continue
        t_new = damping * (1.0 / s2_h - tc) + (1.0 - damping) * tau[i]
        n_new = damping * (m_h / s2_h - nc) + (1.0 - damping) * nu[i]
        if not apply_update(i, t_new - tau[i], n_new - nu[i]):
            status.skipped += 1
            continue
        change = max(change, abs(t_new - tau[i]), abs(n_new - nu[i]))
        tau[i], nu[i] = t_new, n_new
    return change


@dataclass
class GPFit:
    X: np.ndarray
    y: np.ndarray
    kernel: Kernel
    epsilon: float
    tau: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    log_Z: float
    status: GPStatus

    @property
    def converged(self) -> bool:
        return self.status.converged

    @property
    def Z_EP(self) -> float:
        return float(np.exp(self.log_Z))

    def decision_function(self, Xstar) -> np.ndarray:
        return gp_decision_function(self, Xstar)

    def predict(self, Xstar) -> np.ndarray:
        return gp_predict_sign(self, Xstar)


def _gp_posterior(G, tau, nu):
    """``Sigma = (G^-1 + T)^-1 = G (I + T G)^-1`` and ``log|I + T G|``."""
    n = len(tau)
    lu = linalg.lu_factor(np.eye(n) + tau[:, None] * G)
    Sigma = linalg.lu_solve(lu, G, trans=1)  # (I + G T)^-1 G
    Sigma = 0.5 * (Sigma + Sigma.T)
    logdet = float(np.sum(np.log(np.abs(np.diag(lu[0])))))
    return Sigma, Sigma @ nu, logdet


def gp_ep_fit(
    X,
    y,
    kernel: Kernel,
    epsilon: float = 0.1,
    *,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    damping: float = 1.0,
) -> GPFit:
    """Sequential EP for GP classification with the step likelihood.

    ``Sigma`` is updated by Sherman-Morrison within a sweep and recomputed from
    scratch after it; ``log_Z`` is the usual EP evidence.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    n = len(y)
    G = kernel(X)
    tau, nu = np.zeros(n), np.zeros(n)
    cur = {"Sigma": G.copy(), "mu": np.zeros(n)}
    status = GPStatus()

    def marginal(i):
        return cur["mu"][i], cur["Sigma"][i, i]

    def apply(i, dt, dn):
        S = cur["Sigma"]
        si = S[:, i].copy()
        denom = 1.0 + dt * si[i]
        if not denom > 0:
            return False
        S -= (dt / denom) * np.outer(si, si)
        cur["mu"] = S @ (nu + dn * np.eye(n)[i])
        return True

    for sweep in range(max_sweeps):
        change = _sweep(n, y, epsilon, damping, status, marginal, apply, tau, nu)
        cur["Sigma"], cur["mu"], _ = _gp_posterior(G, tau, nu)
        status.sweeps = sweep + 1
        status.max_change.append(change)
        if change < tol:
            status.converged = True
            break
    Sigma, mu, logdet = _gp_posterior(G, tau, nu)
    mu_c, s2_c, logZ_hat = _tilted_all(mu, np.diag(Sigma), tau, nu, y, epsilon)
    log_Z = _site_log_terms(tau, nu, mu_c, s2_c, logZ_hat) - 0.5 * logdet + 0.5 * float(nu @ Sigma @ nu)
    return GPFit(X, y, kernel, float(epsilon), tau, nu, mu, Sigma, log_Z, status)


def gp_decision_function(post: GPFit, Xstar) -> np.ndarray:
    """``k' G^-1 mu``, the mirror of the Student-t process rule."""
    w = np.linalg.solve(post.kernel(post.X), post.mu)
    return post.kernel(np.atleast_2d(Xstar), post.X) @ w


def gp_predict_sign(post: GPFit, Xstar) -> np.ndarray:
    """Labels ``sign(k' G^-1 mu)``; ties go to +1."""
    return np.where(gp_decision_function(post, Xstar) >= 0, 1, -1)


@dataclass
class LinearFit:
    mu: np.ndarray
    Sigma: np.ndarray
    tau: np.ndarray
    nu: np.ndarray
    log_Z: float
    status: GPStatus

    @property
    def converged(self) -> bool:
        return self.status.converged

    @property
    def Z_EP(self) -> float:
        return float(np.exp(self.log_Z))


def linear_ep_fit(
    X,
    y,
    prior_cov,
    epsilon: float = 0.1,
    *,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    damping: float = 1.0,
) -> LinearFit:
    """Weight-space EP for ``w ~ N(0, prior_cov)`` with rank-one Gaussian sites on ``f_i = <w, x_i>``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    n, k = X.shape
    S0 = np.atleast_2d(np.asarray(prior_cov, dtype=float))
    P0 = np.linalg.inv(S0)
    tau, nu = np.zeros(n), np.zeros(n)
    cur = {"Sigma": S0.copy()}
    status = GPStatus()

    def mean():
        return cur["Sigma"] @ (X.T @ nu)

    def marginal(i):
        x = X[i]
        return float(x @ mean()), float(x @ cur["Sigma"] @ x)

    def apply(i, dt, dn):
        S, x = cur["Sigma"], X[i]
        Sx = S @ x
        denom = 1.0 + dt * float(x @ Sx)
        if not denom > 0:
            return False
        cur["Sigma"] = S - (dt / denom) * np.outer(Sx, Sx)
        return True

    def recompute():
        P = P0 + (X * tau[:, None]).T @ X
        cur["Sigma"] = np.linalg.inv(P)
        cur["Sigma"] = 0.5 * (cur["Sigma"] + cur["Sigma"].T)

    for sweep in range(max_sweeps):
        change = _sweep(n, y, epsilon, damping, status, marginal, apply, tau, nu)
        recompute()
        status.sweeps = sweep + 1
        status.max_change.append(change)
        if change < tol:
            status.converged = True
            break
    recompute()
    Sigma = cur["Sigma"]
    b = X.T @ nu
    mu = Sigma @ b
    fm, fv = X @ mu, np.einsum("ij,jk,ik->i", X, Sigma, X)
    mu_c, s2_c, logZ_hat = _tilted_all(fm, fv, tau, nu, y, epsilon)
    logdet = np.linalg.slogdet(np.eye(k) + S0 @ (X * tau[:, None]).T @ X)[1]
    log_Z = _site_log_terms(tau, nu, mu_c, s2_c, logZ_hat) - 0.5 * logdet + 0.5 * float(b @ Sigma @ b)
    return LinearFit(mu, Sigma, tau, nu, float(log_Z), status)
