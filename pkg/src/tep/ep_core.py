"""EP machinery for t-exponential family approximations.

The approximation is a t-factorization: the global natural parameters are the
prior's plus one rank-one contribution per site,

    Psi K     = (Psi K)_prior     + sum_j tau_j d_j d_j'
    Psi K mu  = (Psi K mu)_prior  + sum_j nu_j d_j

where ``d_j`` is the site's fixed direction (the input vector for the Bayes
point machine, a unit vector for process classification).  Cavities, exclusion
and replacement are therefore plain subtraction/addition of ``(tau, nu)``.

Model code supplies the inclusion step as a callable ``update(state, j)`` that
returns the proposed ``(tau_j, nu_j)`` or ``None`` to skip; :func:`run_ep`
drives the sweeps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .qalgebra import DomainError, exp_t, ln_t
from .student_t import (
    NaturalParams,
    NotPositiveDefinite,
    StudentT,
    from_natural,
    integral_exponent,
    log_alpha,
    log_partition,
)

log = logging.getLogger(__name__)


class InvalidCavity(ArithmeticError):
    """Removing a site left a cavity whose scale is not positive definite."""

    def __init__(self, index: Optional[int] = None, detail: str = ""):
        self.index = index
        msg = "invalid cavity" + (f" at site {index}" if index is not None else "")
        super().__init__(msg + (f": {detail}" if detail else ""))


@dataclass
class Site:
    """One rank-one site: contributes ``tau d d'`` and ``nu d``; ``C_tilde`` is its normalizer."""

    index: int
    direction: np.ndarray
    tau: float = 0.0
    nu: float = 0.0
    C_tilde: float = 1.0

    def natural(self, t: float) -> NaturalParams:
        d = self.direction
        return NaturalParams(self.tau * np.outer(d, d), self.nu * d, t)


@dataclass
class MomentMatchResult:
    """Escort moments of the tilted distribution and the quantities that produced them."""

    mean: np.ndarray
    scale: np.ndarray
    Z1: float
    Z2: float
    r: float
    alpha: float
    z: float = 0.0

    @property
    def eta(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean, self.scale + np.outer(self.mean, self.mean)


@dataclass
class EPStatus:
    converged: bool = False
    sweeps: int = 0
    max_change: list = field(default_factory=list)
    skipped: int = 0


class EPState:
    """Prior, sites and the global approximation of one EP run.

    With ``track_inverse=True`` the inverse of the global ``Psi K`` and its
    log-determinant are maintained by Sherman-Morrison / determinant-lemma
    updates, so a site replacement costs O(k^2).
    """

    def __init__(
        self,
        prior: NaturalParams,
        directions: np.ndarray,
        *,
        track_inverse: bool = False,
    ):
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if directions.size and directions.shape[1] != prior.k:
            raise ValueError("site directions must have the prior's dimension")
        self.prior = prior
        self.t = prior.t
        self.sites = [Site(i, directions[i].copy()) for i in range(directions.shape[0] if directions.size else 0)]
        self.track_inverse = track_inverse
        self.status = EPStatus()
        self.refresh()

    @property
    def k(self) -> int:
        return self.prior.k

    @property
    def v(self) -> float:
        return self.prior.v

    def __len__(self) -> int:
        return len(self.sites)

    def refresh(self) -> None:
        """Rebuild the global parameters from prior + sites (drops accumulated round-off)."""
        psi_k = self.prior.psi_k.copy()
        psi_k_mu = self.prior.psi_k_mu.copy()
        if self.sites:
            D = np.array([s.direction for s in self.sites])
            tau = np.array([s.tau for s in self.sites])
            nu = np.array([s.nu for s in self.sites])
            psi_k += (D * tau[:, None]).T @ D
            psi_k_mu += D.T @ nu
        self.psi_k = 0.5 * (psi_k + psi_k.T)
        self.psi_k_mu = psi_k_mu
        if self.track_inverse:
            try:
                L = np.linalg.cholesky(self.psi_k)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(str(exc)) from None
            Linv = np.linalg.inv(L)
            self.inverse = Linv.T @ Linv
            self.logdet = 2.0 * float(np.sum(np.log(np.diag(L))))

    @property
    def global_params(self) -> NaturalParams:
        return NaturalParams(self.psi_k, self.psi_k_mu, self.t)

    def site_params(self, j: int) -> NaturalParams:
        return self.sites[j].natural(self.t)

    def posterior(self) -> StudentT:
        if not self.track_inverse:
            return from_natural(self.global_params)
        return StudentT(self.mean(), self.scale(), self.v)

    # Cached-inverse views (track_inverse=True)
    def log_psi(self) -> float:
        k, t, v = self.k, self.t, self.v
        logdet_sigma = (self.logdet - k * (1.0 - t) * log_alpha(v, k) + k * np.log(v)) / (k * (t - 1.0) / 2.0 - 1.0)
        return (1.0 - t) * (log_alpha(v, k) - 0.5 * logdet_sigma)

    def mean(self) -> np.ndarray:
        return self.inverse @ self.psi_k_mu

    def scale(self) -> np.ndarray:
        return np.exp(self.log_psi()) / self.v * self.inverse

    def scale_diag(self, i: int) -> float:
        return float(np.exp(self.log_psi()) / self.v * self.inverse[i, i])

    def cavity(self, j: int) -> NaturalParams:
        """Global minus site ``j``; raises :class:`InvalidCavity` if the result is not PD."""
        cav = self.global_params - self.site_params(j)
        try:
            np.linalg.cholesky(cav.psi_k)
        except np.linalg.LinAlgError:
            raise InvalidCavity(j, "precision part not positive definite") from None
        return cav

    def set_site(self, j: int, tau: float, nu: float) -> None:
        """Replace site ``j``.  Raises :class:`NotPositiveDefinite` (state untouched) if the global would lose PD."""
        s = self.sites[j]
        dtau, dnu = tau - s.tau, nu - s.nu
        d = s.direction
        if self.track_inverse:
            Ad = self.inverse @ d
            denom = 1.0 + dtau * float(d @ Ad)
            if not denom > 0:
                raise NotPositiveDefinite(f"site {j}: rank-one update denominator {denom:.3g}")
            self.inverse = self.inverse - (dtau / denom) * np.outer(Ad, Ad)
            self.logdet += np.log(denom)
        self.psi_k = self.psi_k + dtau * np.outer(d, d)
        self.psi_k_mu = self.psi_k_mu + dnu * d
        s.tau, s.nu = float(tau), float(nu)

    def bookkeeping_error(self) -> float:
        """Max deviation of the global parameters from prior + sum of sites."""
        psi_k, psi_k_mu = self.psi_k, self.psi_k_mu
        ref = self.prior
        for s in self.sites:
            ref = ref + s.natural(self.t)
        return float(max(np.abs(psi_k - ref.psi_k).max(), np.abs(psi_k_mu - ref.psi_k_mu).max()))


def exclude(new_global: NaturalParams, cavity: NaturalParams) -> NaturalParams:
    """Site parameters implied by a new global approximation: ``theta_new - theta_cavity``."""
    return new_global - cavity


def project_rank_one(delta: NaturalParams, direction: np.ndarray) -> tuple[float, float]:
    """Least-squares ``(tau, nu)`` with ``delta ~ (tau d d', nu d)``.

    Exact whenever ``delta`` already has rank-one structure along ``d``.
    """
    d = np.asarray(direction, dtype=float)
    dd = float(d @ d)
    tau = float(d @ delta.psi_k @ d) / (dd * dd)
    nu = float(d @ delta.psi_k_mu) / dd
    return tau, nu


def moment_match(cavity: StudentT, likelihood) -> MomentMatchResult:
    """Escort moment matching of ``cavity * likelihood``.

    ``likelihood`` must provide ``match(cavity) -> MomentMatchResult``.
    """
    res = likelihood.match(cavity)
    if not (np.isfinite(res.Z2) and res.Z2 > 0):
        raise InvalidCavity(detail=f"Z2 = {res.Z2}")
    return res


def site_normalizer(Z1: float, g_new: float, g_cavity: float, Psi: float, t: float, k: int = 1) -> float:
    """Solve ``ln_t Z1^(1/e) = (g_new - g_cavity + ln_t C) / Psi`` for ``C``.

    ``e`` is :func:`integral_exponent` (``(3-t)/2`` for one-dimensional sites).
    """
    e = integral_exponent(t, k)
    lnC = Psi * ln_t(Z1 ** (1.0 / e), t) - g_new + g_cavity
    return float(exp_t(lnC, t))


def log_t_evidence(state: EPState) -> float:
    """``ln_t Z_EP^(1/e)`` = ``(sum_i ln_t C_i + g_t(theta) - g_t(theta_prior)) / Psi``."""
    post = state.posterior()
    S = sum(ln_t(s.C_tilde, state.t) for s in state.sites)
    g = log_partition(post)
    g0 = log_partition(from_natural(state.prior))
    return (S + g - g0) / post.psi


def marginal_likelihood(state: EPState) -> float:
    """``Z_EP = exp_t(ln_t-evidence)^e`` from stored site normalizers."""
    e = integral_exponent(state.t, state.k)
    try:
        return float(exp_t(log_t_evidence(state), state.t) ** e)
    except DomainError:
        raise
    except FloatingPointError:
        return float("nan")


def run_ep(
    state: EPState,
    update: Callable[[EPState, int], Optional[tuple[float, float]]],
    *,
    max_sweeps: int = 200,
    tol: float = 1e-8,
    damping: float = 1.0,
    order: str = "sequential",
    rng: Optional[np.random.Generator] = None,
    schedule: Optional[Sequence[int]] = None,
    tol_scale: float = 1.0,
) -> EPState:
    """Iterate cavity -> inclusion -> exclusion -> replacement over all sites.

    ``schedule`` fixes the visiting order of every sweep; otherwise ``order``
    is ``"sequential"`` (index order) or ``"random"`` (fresh permutation per
    sweep from ``rng``).  Damping mixes proposed and old site parameters,
    ``new = damping * proposed + (1 - damping) * old``.  Proposals that would
    make the global approximation indefinite are skipped for that sweep.

    A sweep converges when the largest site change, divided by ``tol_scale``
    (the natural size of a site parameter), is below ``tol``.

    Convergence is reported in ``state.status``; non-convergence is not an
    exception.  :class:`InvalidCavity` from ``update`` propagates with the
    site index attached.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    n = len(state)
    status = state.status = EPStatus()
    if n == 0:
        status.converged, status.sweeps = True, 1
        return state
    if order == "random" and rng is None:
        rng = np.random.default_rng(0)
    for sweep in range(max_sweeps):
        if schedule is not None:
            idx = np.asarray(schedule, dtype=int)
        elif order == "random":
            idx = rng.permutation(n)
        else:
            idx = np.arange(n)
        change = 0.0
        for j in idx:
            try:
                prop = update(state, int(j))
            except InvalidCavity as exc:
                if exc.index is None:
                    raise InvalidCavity(int(j), str(exc)) from None
                raise
            if prop is None:
                status.skipped += 1
                continue
            s = state.sites[j]
            tau = damping * prop[0] + (1.0 - damping) * s.tau
            nu = damping * prop[1] + (1.0 - damping) * s.nu
            if not (np.isfinite(tau) and np.isfinite(nu)):
                status.skipped += 1
                continue
            old = (s.tau, s.nu)
            try:
                state.set_site(int(j), tau, nu)
            except NotPositiveDefinite:
                status.skipped += 1
                continue
            change = max(change, abs(tau - old[0]), abs(nu - old[1]))
        state.refresh()
        status.sweeps = sweep + 1
        status.max_change.append(change)
        log.debug("sweep %d: max site change %.3g", sweep + 1, change)
        if change < tol * tol_scale:
            status.converged = True
            break
    return state
