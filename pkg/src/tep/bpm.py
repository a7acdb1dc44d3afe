"""Bayes point machine with a Student-t posterior: ADF and EP.

Likelihood of one labelled point: ``l(w) = eps + (1 - 2 eps) step(y <w, x>)``.
The homogeneous linear model has no bias term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ep_core
from .ep_core import EPState, InvalidCavity, MomentMatchResult, project_rank_one, run_ep, site_normalizer
from .student_t import (
    NaturalParams,
    NotPositiveDefinite,
    StudentT,
    cdf_1d,
    from_natural,
    log_partition,
    moments_to_natural,
    natural_to_moments,
    pdf_1d,
    recover_scale,
)


@dataclass(frozen=True, eq=False)
class StepLikelihood:
    epsilon: float
    x: np.ndarray
    y: int

    def __post_init__(self):
        if not 0 <= self.epsilon < 0.5 + 1e-15:
            raise ValueError("epsilon must lie in [0, 1/2]")
        if self.y not in (1, -1):
            raise ValueError("labels must be +1 or -1")
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))

    def __call__(self, w) -> np.ndarray:
        w = np.atleast_2d(w)
        return self.epsilon + (1.0 - 2.0 * self.epsilon) * (self.y * (w @ self.x) > 0)

    def match(self, cavity: StudentT) -> MomentMatchResult:
        return step_match(cavity, self.x, self.y, self.epsilon)


def make_data(X, y, epsilon: float = 0.1) -> list[StepLikelihood]:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return [StepLikelihood(epsilon, X[i], int(y[i])) for i in range(X.shape[0])]


def step_match(cavity: StudentT, x, y: int, epsilon: float) -> MomentMatchResult:
    """Closed-form escort moment matching of ``cavity * l`` along direction ``x``.

    Works for any dimension; with ``x = [1.0]`` it is the scalar inclusion used
    by process classification.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return _step_match(cavity.mu, cavity.Sigma, cavity.v, x, y, epsilon)


def _step_match(mu, S, v, x, y, epsilon) -> MomentMatchResult:
    t = 1.0 + 2.0 / (v + mu.size)
    Sx = S @ x
    s2 = float(x @ Sx)
    if not s2 > 0:
        raise NotPositiveDefinite(f"degenerate projection x'Sigma x = {s2}")
    s = np.sqrt(s2)
    z = y * float(x @ mu) / s
    et = epsilon**t
    D = (1.0 - epsilon) ** t - et
    Z1 = et + D * cdf_1d(z, v)
    # escort of St(0, 1, v) is St(0, v/(v+2), v+2)
    Z2 = et + D * cdf_1d(z * np.sqrt((v + 2.0) / v), v + 2.0)
    r = Z1 / Z2
    alpha = D * pdf_1d(z, v) / (Z2 * s)
    mu_new = mu + alpha * y * Sx
    c = alpha * y * float(x @ mu_new) / s2
    S_new = r * S - c * np.outer(Sx, Sx)
    S_new = 0.5 * (S_new + S_new.T)
    return MomentMatchResult(mu_new, S_new, float(Z1), float(Z2), float(r), float(alpha), float(z))


def adf_step(posterior: StudentT, datum: StepLikelihood) -> StudentT:
    """One assumed-density-filtering update; raises NotPositiveDefinite if the new scale is not PD."""
    res = ep_core.moment_match(posterior, datum)
    out = StudentT(res.mean, res.scale, posterior.v)
    out.chol  # PD check
    return out


def adf_fit(prior: StudentT, data: Sequence[StepLikelihood]) -> StudentT:
    post = prior
    for datum in data:
        post = adf_step(post, datum)
    return post


def _update(data: Sequence[StepLikelihood]):
    def update(state: EPState, j: int):
        datum, site = data[j], state.sites[j]
        x = datum.x
        P = state.psi_k - site.tau * np.outer(x, x)
        b = state.psi_k_mu - site.nu * x
        try:
            mu, S = natural_to_moments(P, b, state.v)
        except NotPositiveDefinite:
            raise InvalidCavity(j, "precision part not positive definite") from None
        try:
            res = _step_match(mu, S, state.v, x, datum.y, datum.epsilon)
            P_new, b_new = moments_to_natural(res.mean, res.scale, state.v)
        except NotPositiveDefinite:
            return None
        delta = NaturalParams(P_new - P, b_new - b, state.t)
        return project_rank_one(delta, x)

    return update


def site_normalizers(state: EPState, data: Sequence[StepLikelihood]) -> None:
    """Fill in ``C_tilde`` of every site from the current (converged) state."""
    post = state.posterior()
    g_new, psi = log_partition(post), post.psi
    for j, site in enumerate(state.sites):
        cav = from_natural(state.cavity(j), state.v)
        Z1 = data[j].match(cav).Z1
        site.C_tilde = site_normalizer(Z1, g_new, log_partition(cav), psi, state.t, state.k)


def ep_fit(
    prior: StudentT,
    data: Sequence[StepLikelihood],
    *,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    damping: float = 1.0,
    order: str = "sequential",
    rng: Optional[np.random.Generator] = None,
    schedule: Optional[Sequence[int]] = None,
) -> tuple[EPState, StudentT]:
    """EP with rank-one sites ``tau_j x_j x_j'``.

    Each update recovers the cavity scale from its natural parameters, runs
    the ADF inclusion on the cavity, and projects the natural-parameter
    difference onto ``x_j x_j'`` (least squares).
    """
    X = np.array([d.x for d in data]).reshape(len(data), prior.k)
    state = EPState(prior.natural(), X)
    run_ep(state, _update(data), max_sweeps=max_sweeps, tol=tol, damping=damping,
           order=order, rng=rng, schedule=schedule)
    site_normalizers(state, data)
    return state, state.posterior()


def site_view(state: EPState, j: int) -> tuple[float, float, float]:
    """Scalar site parameters ``(m_j, sigma_j, Psi_j)`` for a site with positive ``tau``.

    Sites are one-dimensional with dof ``v + k - 1`` so that they share ``t``
    with the k-dimensional approximation.
    """
    s = state.sites[j]
    if not s.tau > 0:
        raise ValueError(f"site {j} has non-positive precision {s.tau}")
    v_site = state.v + state.k - 1.0
    sigma = float(recover_scale([[s.tau]], v_site)[0, 0])
    psi = s.tau * v_site * sigma
    return s.nu / s.tau, sigma, psi


def predict(posterior: StudentT, x) -> np.ndarray | int:
    """Sign of ``<mu, x>``; ties go to +1."""
    x = np.asarray(x, dtype=float)
    f = x @ posterior.mu
    lab = np.where(f >= 0, 1, -1)
    return int(lab) if np.ndim(lab) == 0 else lab


def boundary_angle(a, b) -> float:
    """Angle in radians between two homogeneous decision boundaries (normals ``a``, ``b``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def angular_spread(normals) -> float:
    normals = list(normals)
    best = 0.0
    for i in range(len(normals)):
        for j in range(i + 1, len(normals)):
            best = max(best, boundary_angle(normals[i], normals[j]))
    return best
