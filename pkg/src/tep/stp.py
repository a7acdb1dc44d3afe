"""Student-t process binary classification by EP.

The latent vector ``f`` over the n training inputs has prior
``St(0, K(X, X) + jitter I, v)``; the approximation is an n-dimensional
Student-t at ``t = 1 + 2/(v + n)``.  Sites are scalars on the diagonal of
``Psi K``: site i adds ``tau_i`` to ``(Psi K)_ii`` and ``nu_i`` to
``(Psi K mu)_i``.

Site update for point i, with ``A = (Psi K)^-1 = Psi^-1 v Sigma`` cached:

1. cavity ``tau_-i = 1 / A_ii - tau_i``, ``nu_-i = mu_i / A_ii - nu_i``.  Since
   ``1 / A_ii = Psi / (v sigma_i^2) = Psi / (v_site sigma_i'^2)`` this is the
   marginal rescaled to dof ``v_site = v + n - 1`` (``sigma_i'^2 = sigma_i^2
   v / v_site``) minus the site;
2. the cavity scale ``s2 = Psi_-i / (v_site tau_-i)`` uses the joint ``Psi``
   of the leave-one-out approximation, so that every ``tau`` lives in the
   units of the n-dimensional ``Psi K``;
3. scalar escort moment matching against the step likelihood;
4. the new site is chosen so that the updated joint has the matched scalar
   scale, accounting for the change of the joint ``Psi`` with ``|Psi K|``, and
   is applied to ``A`` by a rank-one update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ep_core
from .bpm import _step_match
from .ep_core import EPState, InvalidCavity, run_ep, site_normalizer
from .qalgebra import ln_t
from .student_t import (
    NotPositiveDefinite,
    StudentT,
    dof_to_t,
    log_alpha,
    moments_to_natural,
    natural_to_moments,
)


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential kernel ``s2 exp(-|x - x'|^2 / (2 l^2))``."""

    lengthscale: float = 1.0
    amplitude: float = 1.0
    jitter: Optional[float] = None

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.amplitude > 0):
            raise ValueError("lengthscale and amplitude must be positive")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def delta(self) -> float:
        return 1e-6 * self.amplitude if self.jitter is None else self.jitter

    def _sqdist(self, X, X2):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        d2 = np.sum(X**2, 1)[:, None] + np.sum(X2**2, 1)[None, :] - 2.0 * X @ X2.T
        return np.maximum(d2, 0.0)

    def __call__(self, X, X2=None) -> np.ndarray:
        """Cross-covariance; with ``X2=None`` the jittered Gram matrix of ``X``."""
        if X2 is None:
            G = self.amplitude * np.exp(-0.5 * self._sqdist(X, X) / self.lengthscale**2)
            return G + self.delta * np.eye(G.shape[0])
        return self.amplitude * np.exp(-0.5 * self._sqdist(X, X2) / self.lengthscale**2)

    def grads(self, X) -> dict[str, np.ndarray]:
        """Derivatives of the jittered Gram matrix w.r.t. ``lengthscale`` and ``amplitude``."""
        d2 = self._sqdist(X, X)
        E = np.exp(-0.5 * d2 / self.lengthscale**2)
        dA = E.copy()
        if self.jitter is None:
            dA = dA + 1e-6 * np.eye(E.shape[0])
        return {
            "lengthscale": self.amplitude * E * d2 / self.lengthscale**3,
            "amplitude": dA,
        }

    def replace(self, **kw) -> "Kernel":
        d = {"lengthscale": self.lengthscale, "amplitude": self.amplitude, "jitter": self.jitter}
        d.update(kw)
        return Kernel(**d)


@dataclass
class StpPosterior:
    mu: np.ndarray
    Sigma: np.ndarray
    v: float
    PsiInvVSigma: np.ndarray

    @classmethod
    def from_state(cls, state: EPState) -> "StpPosterior":
        return cls(state.mean(), state.scale(), state.v, state.inverse.copy())


def prior(X, kernel: Kernel, v: float) -> StudentT:
    G = kernel(X)
    try:
        np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("Gram matrix is not positive definite; add jitter") from None
    return StudentT(np.zeros(G.shape[0]), G, v)


def _log_psi_from_logdet(logdet_pk: float, v: float, n: int) -> float:
    """``log Psi`` of an n-dim Student-t given ``log|Psi K|`` (see recover_scale)."""
    t = dof_to_t(v, n)
    la = log_alpha(v, n)
    logdet_sigma = (logdet_pk - n * (1.0 - t) * la + n * np.log(v)) / (n * (t - 1.0) / 2.0 - 1.0)
    return (1.0 - t) * (la - 0.5 * logdet_sigma)


def cavity_i(a_ii: float, mu_i: float, tau_i: float, nu_i: float) -> tuple[float, float]:
    """Cavity ``(tau_-i, nu_-i)`` of point i.

    ``a_ii`` is the (i, i) element of ``(Psi K)^-1 = Psi^-1 v Sigma``, so
    ``1 / a_ii = Psi / (v sigma_i^2) = Psi / (v_site sigma_i'^2)`` with the
    dof-corrected scale ``sigma_i'^2 = sigma_i^2 v / v_site``.
    """
    return 1.0 / a_ii - tau_i, mu_i / a_ii - nu_i


def include_i(tau_c: float, nu_c: float, y: int, epsilon: float, v_site: float, psi_c: float):
    """Scalar escort moment matching; returns ``(mu_hat, s2_hat, Z1, Z2, mu_c, s2_c)``.

    ``psi_c`` is the joint ``Psi`` of the cavity, which turns the precision
    ``tau_c`` into the one-dimensional scale ``s2_c = psi_c / (v_site tau_c)``.
    Raises :class:`InvalidCavity` for ``tau_c <= 0``; a non-positive
    ``s2_hat`` is returned as is and means the update should be skipped.
    """
    if not tau_c > 0:
        raise InvalidCavity(detail=f"cavity precision {tau_c:.3g}")
    mu_c = nu_c / tau_c
    s2_c = psi_c / (v_site * tau_c)
    res = _step_match(np.array([mu_c]), np.array([[s2_c]]), v_site, np.ones(1), y, epsilon)
    return float(res.mean[0]), float(res.scale[0, 0]), res.Z1, res.Z2, mu_c, s2_c


def exclude_i(tau_c: float, nu_c: float, mu_hat: float, s2_hat: float, psi_c: float, v: float, v_site: float):
    """New site ``(tau_i, nu_i)`` such that the updated joint has marginal ``(mu_hat, s2_hat)``.

    Solves ``tau_i + tau_c = Psi_new / (v_site s2_hat)`` where the joint
    ``Psi_new = psi_c (1 + tau_i / tau_c)^(-1/v)`` moves with the determinant.
    """
    X = (psi_c * tau_c ** (1.0 / v) / (v_site * s2_hat)) ** (v / (v + 1.0))
    return X - tau_c, X * mu_hat - nu_c


def _site_terms(state: EPState, i: int, y: int, epsilon: float, normalizer: bool = False):
    """Cavity, inclusion and exclusion for point i against the current joint.

    Returns ``(tau_new, nu_new)``, or ``(tau_new, nu_new, C_tilde)`` with
    ``normalizer=True``; None when the inclusion gives a non-positive scale.
    """
    n, v = state.k, state.v
    v_site = v + n - 1.0
    A, b = state.inverse, state.psi_k_mu
    site = state.sites[i]
    Ai = A[:, i]
    a = float(Ai[i])
    mu = A @ b if normalizer else None
    mu_i = float(Ai @ b)
    tau_c, nu_c = cavity_i(a, mu_i, site.tau, site.nu)
    if not tau_c > 0:
        raise InvalidCavity(i, f"cavity precision {tau_c:.3g}")
    # joint Psi of the leave-one-out cavity via the determinant lemma
    logdet_c = state.logdet + np.log(a * tau_c)
    psi_c = float(np.exp(_log_psi_from_logdet(logdet_c, v, n)))
    mu_h, s2_h, Z1, _, mu_c, _ = include_i(tau_c, nu_c, y, epsilon, v_site, psi_c)
    if not s2_h > 0:
        return None
    tau_new, nu_new = exclude_i(tau_c, nu_c, mu_h, s2_h, psi_c, v, v_site)
    if not normalizer:
        return tau_new, nu_new
    # n-dim log partitions g = (1 - Psi - mu' Psi K mu) / (1 - t)
    t = state.t
    psi = float(np.exp(state.log_psi()))
    g_new = (1.0 - psi - float(mu @ b)) / (1.0 - t)
    b_c = b.copy()
    b_c[i] -= site.nu
    mu_cav = mu + Ai * (site.tau * mu_c - site.nu)
    g_c = (1.0 - psi_c - float(mu_cav @ b_c)) / (1.0 - t)
    C = site_normalizer(Z1, g_new, g_c, psi, t, n)
    return tau_new, nu_new, C


def rank_one_update(post: StpPosterior, i: int, dtau: float, nu_tilde: np.ndarray) -> StpPosterior:
    """Apply ``Psi K += dtau e_i e_i'`` to the cached ``Psi^-1 v Sigma``.

    ``nu_tilde`` is the full (already updated) site shift vector, so that
    ``mu = (Psi K)^-1 nu_tilde``.
    """
    A = post.PsiInvVSigma
    n = A.shape[0]
    t = dof_to_t(post.v, n)
    s = A[:, i].copy()
    denom = 1.0 + dtau * s[i]
    if not denom > 0:
        raise NotPositiveDefinite(f"rank-one denominator {denom:.3g}")
    A_new = A - (dtau / denom) * np.outer(s, s)
    # log|Psi K| -> log|Sigma| -> Psi, as in recover_scale
    logdet_pk = -np.linalg.slogdet(A)[1] + np.log(denom)
    la = log_alpha(post.v, n)
    logdet_sigma = (logdet_pk - n * (1.0 - t) * la + n * np.log(post.v)) / (n * (t - 1.0) / 2.0 - 1.0)
    psi = np.exp((1.0 - t) * (la - 0.5 * logdet_sigma))
    return StpPosterior(A_new @ nu_tilde, psi / post.v * A_new, post.v, A_new)


def full_recompute(prior_dist: StudentT, tau_tilde, nu_tilde) -> StpPosterior:
    """Posterior from ``Psi K = Psi_0 K_0 + diag(tau)``, ``Psi K mu = nu`` by direct inversion."""
    P0, _ = moments_to_natural(prior_dist.mu, prior_dist.Sigma, prior_dist.v)
    P = P0 + np.diag(tau_tilde)
    mu, Sigma = natural_to_moments(P, np.asarray(nu_tilde, dtype=float), prior_dist.v)
    return StpPosterior(mu, Sigma, prior_dist.v, np.linalg.inv(P))


@dataclass
class StpFit:
    X: np.ndarray
    y: np.ndarray
    kernel: Kernel
    v: float
    epsilon: float
    state: EPState
    posterior: StpPosterior
    Z_EP: float = float("nan")
    log_t_evidence: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.state.status.converged

    @property
    def tau(self) -> np.ndarray:
        return np.array([s.tau for s in self.state.sites])

    @property
    def nu(self) -> np.ndarray:
        return np.array([s.nu for s in self.state.sites])

    @property
    def C_tilde(self) -> np.ndarray:
        return np.array([s.C_tilde for s in self.state.sites])

    @property
    def v_site(self) -> float:
        return self.v + len(self.y) - 1.0

    def decision_function(self, Xstar) -> np.ndarray:
        return decision_function(self, Xstar)

    def predict(self, Xstar) -> np.ndarray:
        return predict_sign(self, Xstar)


def fit(
    X,
    y,
    kernel: Kernel,
    v: float = 10.0,
    epsilon: float = 0.1,
    *,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    damping: float = 1.0,
    order: str = "sequential",
    rng: Optional[np.random.Generator] = None,
) -> StpFit:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    n = len(y)
    pri = prior(X, kernel, v)
    state = EPState(pri.natural(), np.eye(n), track_inverse=True)

    def update(state: EPState, i: int):
        return _site_terms(state, i, int(y[i]), epsilon)

    # sites are measured against the prior marginal precision Psi_0 / (v G_ii)
    scale = pri.psi / (v * float(np.mean(np.diag(pri.Sigma)))) if n else 1.0
    run_ep(state, update, max_sweeps=max_sweeps, tol=tol, damping=damping, order=order, rng=rng,
           tol_scale=scale)
    _fill_normalizers(state, y, epsilon)
    res = StpFit(X, y, kernel, float(v), float(epsilon), state, StpPosterior.from_state(state))
    res.extra["tol_scale"] = scale
    res.log_t_evidence = ep_core.log_t_evidence(state)
    res.Z_EP = ep_core.marginal_likelihood(state)
    return res


def _fill_normalizers(state: EPState, y, epsilon) -> None:
    for i, s in enumerate(state.sites):
        out = _site_terms(state, i, int(y[i]), epsilon, normalizer=True)
        s.C_tilde = 1.0 if out is None else out[2]


def decision_function(res: StpFit, Xstar) -> np.ndarray:
    """``k' G^-1 mu`` with ``G`` the (jittered) prior Gram matrix."""
    G = res.kernel(res.X)
    w = np.linalg.solve(G, res.posterior.mu)
    return res.kernel(np.atleast_2d(Xstar), res.X) @ w


def predict_sign(res: StpFit, Xstar) -> np.ndarray:
    """Labels ``sign(k' G^-1 mu)``; ties (including ``k = 0``) go to +1."""
    return np.where(decision_function(res, Xstar) >= 0, 1, -1)


def _state_with_sites(X, kernel: Kernel, v: float, tau, nu) -> EPState:
    pri = prior(X, kernel, v)
    state = EPState(pri.natural(), np.eye(len(tau)), track_inverse=True)
    for s, a, b in zip(state.sites, tau, nu):
        s.tau, s.nu = float(a), float(b)
    state.refresh()
    return state


def _parallel_map(state: EPState, y, epsilon) -> np.ndarray:
    """All site proposals against one fixed joint, stacked as ``[tau; nu]``.

    Its fixed points are exactly the fixed points of the sequential sweep.
    """
    n = len(state)
    out = np.empty(2 * n)
    for i, s in enumerate(state.sites):
        prop = _site_terms(state, i, int(y[i]), epsilon)
        out[i], out[n + i] = (s.tau, s.nu) if prop is None else prop
    return out


def _sum_ln_c(state: EPState, y, epsilon) -> float:
    _fill_normalizers(state, y, epsilon)
    return float(sum(ln_t(s.C_tilde, state.t) for s in state.sites))


def _prior_term(state: EPState, G, dG, v) -> tuple[float, float]:
    """``((eta - eta_prior)' dtheta_prior / Psi - F dlog Psi, dlog Psi)`` with sites and normalizers fixed."""
    n, t = len(state), state.t
    Ginv = np.linalg.inv(G)
    psi0 = StudentT(np.zeros(n), G, v).psi
    A = state.inverse
    mu = state.mean()
    psi = float(np.exp(state.log_psi()))
    Sigma = psi / v * A
    GidG = Ginv @ dG
    dlog_psi0 = -(1.0 - t) / 2.0 * np.trace(GidG)
    # d(Psi_0 (v G)^-1)
    dP0 = psi0 / v * (dlog_psi0 * Ginv - GidG @ Ginv)
    dg = float(np.sum((Sigma + np.outer(mu, mu) - G) * dP0)) / (1.0 - t)
    dlog_psi = -float(np.sum(A * dP0)) / v
    F = ep_core.log_t_evidence(state)
    return dg / psi - F * dlog_psi, dlog_psi


def hyperparam_gradient(res: StpFit, params=("lengthscale", "amplitude"), rel_step: float = 1e-5) -> dict[str, float]:
    """Gradient of ``ln_t Z_EP^(1/e)`` w.r.t. kernel hyperparameters at an EP fixed point.

    With ``F = (sum_i ln_t C_i + g_t(theta) - g_t(theta_prior)) / Psi``,

        dF = [(eta - eta_prior)' dtheta_prior + sum_i d ln_t C_i] / Psi - F dlog Psi.

    The first term is evaluated in closed form from the Gram derivative.  The
    deformed evidence is not stationary in the site parameters (unlike the
    Gaussian case), so ``d ln_t C_i`` must include how the fixed point moves.
    That sensitivity is obtained by implicit differentiation of the
    fixed-point equation ``U(s, psi) = s`` (adjoint form); the Jacobian blocks of
    the closed-form site update ``U`` and of the site normalizers are taken by
    central differences.
    """
    X, y, eps, v = res.X, res.y, res.epsilon, res.v
    n = len(y)
    if n == 0:
        return {p: 0.0 for p in params}
    state = res.state
    s0 = np.r_[res.tau, res.nu]
    tau_scale = res.extra.get("tol_scale", 1.0)
    hs = rel_step * np.maximum(np.abs(s0), tau_scale)

    def G_of(s, kernel):
        st = _state_with_sites(X, kernel, v, s[:n], s[n:])
        _fill_normalizers(st, y, eps)
        return ep_core.log_t_evidence(st), st

    # d(evidence)/ds and dU/ds with psi fixed
    dG_ds = np.empty(2 * n)
    J = np.empty((2 * n, 2 * n))
    for j in range(2 * n):
        e = np.zeros(2 * n)
        e[j] = hs[j]
        fp, sp = G_of(s0 + e, res.kernel)
        fm, sm = G_of(s0 - e, res.kernel)
        dG_ds[j] = (fp - fm) / (2 * hs[j])
        J[:, j] = (_parallel_map(sp, y, eps) - _parallel_map(sm, y, eps)) / (2 * hs[j])
    # adjoint: (I - J)' lam = dG/ds
    lam = np.linalg.solve((np.eye(2 * n) - J).T, dG_ds)

    psi = float(np.exp(state.log_psi()))
    G = res.kernel(X)
    grads = res.kernel.grads(X)
    out = {}
    for name in params:
        p0 = getattr(res.kernel, name)
        h = rel_step * p0
        kp, km = res.kernel.replace(**{name: p0 + h}), res.kernel.replace(**{name: p0 - h})
        prior_part, _ = _prior_term(state, G, grads[name], v)
        # sites fixed: normalizers move with the cavity
        sp = _state_with_sites(X, kp, v, res.tau, res.nu)
        sm = _state_with_sites(X, km, v, res.tau, res.nu)
        dC = (_sum_ln_c(sp, y, eps) - _sum_ln_c(sm, y, eps)) / (2 * h)
        dU = (_parallel_map(sp, y, eps) - _parallel_map(sm, y, eps)) / (2 * h)
        out[name] = prior_part + dC / psi + float(lam @ dU)
    return out


def optimize_hyperparameters(
    X,
    y,
    kernel: Kernel,
    v: float = 10.0,
    epsilon: float = 0.1,
    *,
    steps: int = 20,
    lr: float = 0.1,
    fit_kw: Optional[dict] = None,
) -> tuple[Kernel, list[float]]:
    """Gradient ascent on ``ln_t Z_EP^(1/e)`` in log-hyperparameter space, with backtracking."""
    fit_kw = fit_kw or {}
    cur = fit(X, y, kernel, v, epsilon, **fit_kw)
    trace = [cur.log_t_evidence]
    for _ in range(steps):
        g = hyperparam_gradient(cur)
        # chain rule to log-parameters
        step = {k: lr * g[k] * getattr(cur.kernel, k) for k in g}
        eta = 1.0
        while eta > 1e-4:
            cand_k = cur.kernel.replace(**{k: getattr(cur.kernel, k) * np.exp(eta * step[k]) for k in step})
            try:
                cand = fit(X, y, cand_k, v, epsilon, **fit_kw)
            except (InvalidCavity, NotPositiveDefinite):
                cand = None
            if cand is not None and cand.log_t_evidence > cur.log_t_evidence:
                cur = cand
                break
            eta *= 0.5
        else:
            break
        trace.append(cur.log_t_evidence)
    return cur.kernel, trace
