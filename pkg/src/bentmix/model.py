"""Bent-cable mean structure and AR(p) regression transforms.

The bent cable is a three-phase trend: a linear incoming phase, a quadratic
bend of half-width ``gamma`` centred at ``tau``, and a linear outgoing phase.
Setting ``gamma == 0`` collapses the bend to an abrupt kink (broken stick).

Everything in this module is a pure function of its arguments; there is no
shared mutable state, so concurrent callers are safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

__all__ = [
    "ModelSetupError",
    "BentCableCoefs",
    "TransitionCoefs",
    "ArCoefs",
    "IndividualParams",
    "PopulationParams",
    "bend_basis",
    "bent_cable",
    "cable_values",
    "critical_time_point",
    "slope_changes_sign",
    "ar_stationary",
    "quasi_difference",
    "ar_design",
    "ArDesign",
    "conditional_loglik",
    "conditional_loglik_arrays",
]


class ModelSetupError(ValueError):
    """A profile or parameter set cannot support the requested model."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BentCableCoefs:
    """Linear coefficients of one cable.

    ``beta0`` is the incoming intercept, ``beta1`` the incoming slope and
    ``beta2`` the slope difference (outgoing minus incoming).
    """

    beta0: float
    beta1: float
    beta2: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite([self.beta0, self.beta1, self.beta2])):
            raise ValueError("bent-cable coefficients must be finite")

    @property
    def outgoing_slope(self) -> float:
        return self.beta1 + self.beta2

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2], dtype=float)


@dataclass(frozen=True)
class TransitionCoefs:
    """Bend geometry: half-width ``gamma`` >= 0 and centre ``tau`` > 0.

    ``gamma == 0`` means an abrupt transition (broken stick).
    """

    gamma: float
    tau: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (np.isfinite(self.tau) and self.tau > 0.0):
            raise ValueError(f"tau must be finite and > 0, got {self.tau}")

    @property
    def is_abrupt(self) -> bool:
        return self.gamma == 0.0


@dataclass(frozen=True)
class ArCoefs:
    """AR(p) coefficients for the within-individual noise process.

    Stationarity is computable via :meth:`is_stationary` but deliberately
    not enforced: posterior draws of the coefficients may be non-stationary
    and are only monitored.
    """

    phi: np.ndarray

    def __post_init__(self) -> None:
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if phi.ndim != 1:
            raise ValueError("phi must be a 1-d sequence")
        object.__setattr__(self, "phi", phi)

    @property
    def p(self) -> int:
        return int(self.phi.shape[0])

    def is_stationary(self) -> bool:
        return ar_stationary(self.phi)


@dataclass(frozen=True)
class IndividualParams:
    """Regression state of one individual, including its population label.

    ``indicator == 1`` marks a gradual (Population G) individual and requires
    ``trans.gamma > 0``; ``indicator == 0`` marks an abrupt (Population A)
    individual and requires ``trans.gamma == 0`` exactly.
    """

    beta: BentCableCoefs
    trans: TransitionCoefs
    indicator: int
    sigma2: float

    def __post_init__(self) -> None:
        if self.indicator not in (0, 1):
            raise ValueError("indicator must be 0 or 1")
        if self.indicator == 0 and self.trans.gamma != 0.0:
            raise ValueError("abrupt individuals must have gamma == 0")
        if self.indicator == 1 and self.trans.gamma <= 0.0:
            raise ValueError("gradual individuals must have gamma > 0")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0.0):
            raise ValueError("sigma2 must be finite and > 0")


@dataclass(frozen=True)
class PopulationParams:
    """Between-individual (Level 2/3) state."""

    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_alpha: np.ndarray
    Sigma_alpha: np.ndarray
    mu_tauA: float
    sigma2_tauA: float
    omega: float
    ar: ArCoefs

    def __post_init__(self) -> None:
        mu_beta = np.asarray(self.mu_beta, dtype=float)
        mu_alpha = np.asarray(self.mu_alpha, dtype=float)
        if mu_beta.shape != (3,) or mu_alpha.shape != (2,):
            raise ValueError("mu_beta must have shape (3,), mu_alpha (2,)")
        object.__setattr__(self, "mu_beta", mu_beta)
        object.__setattr__(self, "mu_alpha", mu_alpha)
        for name, mat, d in (
            ("Sigma_beta", self.Sigma_beta, 3),
            ("Sigma_alpha", self.Sigma_alpha, 2),
        ):
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
            if not is_spd(mat):
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, mat)
        if not (self.sigma2_tauA > 0.0 and np.isfinite(self.sigma2_tauA)):
            raise ValueError("sigma2_tauA must be finite and > 0")
        if not (0.0 < self.omega < 1.0):
            raise ValueError("omega must be strictly inside (0, 1)")


def is_spd(mat: np.ndarray, sym_tol: float = 1e-8) -> bool:
    """Symmetric positive definite check via Cholesky."""
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        return False
    scale = max(np.abs(mat).max(), 1.0)
    if np.abs(mat - mat.T).max() > sym_tol * scale:
        return False
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return True


# ---------------------------------------------------------------------------
# Mean structure
# ---------------------------------------------------------------------------


def bend_basis(t, gamma, tau):
    """Quadratic-bend basis of the cable; broadcasts over array inputs.

    Piecewise: 0 left of the bend, ``(t - tau + gamma)^2 / (4 gamma)`` inside
    ``|t - tau| <= gamma`` (for ``gamma > 0``), and ``t - tau`` to the right.
    With ``gamma == 0`` this is the hinge ``max(t - tau, 0)`` with a strict
    ``>`` on the linear branch.  Boundary points ``|t - tau| == gamma`` take
    the quadratic branch so results are bit-reproducible.
    """
    t = np.asarray(t, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    d = t - tau
    positive = gamma > 0.0
    safe = np.where(positive, gamma, 1.0)
    quad = np.where(positive & (np.abs(d) <= gamma), (d + gamma) ** 2 / (4.0 * safe), 0.0)
    lin = np.where(d > gamma, d, 0.0)
    out = quad + lin
    return out if out.ndim else float(out)


def bent_cable(t, lin: BentCableCoefs, trans: TransitionCoefs):
    """Evaluate the cable ``beta0 + beta1 t + beta2 * bend_basis(t)``."""
    return lin.beta0 + lin.beta1 * np.asarray(t, dtype=float) + lin.beta2 * bend_basis(
        t, trans.gamma, trans.tau
    )


def cable_values(t, beta0, beta1, beta2, gamma, tau):
    """Array form of :func:`bent_cable`; all parameters broadcast."""
    t = np.asarray(t, dtype=float)
    return beta0 + beta1 * t + beta2 * bend_basis(t, gamma, tau)


def slope_changes_sign(beta1: float, beta2: float) -> bool:
    """Whether the cable's slope changes sign between the two linear phases.

    Uses ``sign(beta1) != sign(beta1 + beta2)`` with ``beta2 != 0``; a zero
    incoming slope therefore counts as a change when the outgoing slope is
    nonzero.
    """
    if beta2 == 0.0:
        return False
    return np.sign(beta1) != np.sign(beta1 + beta2)


def critical_time_point(lin: BentCableCoefs, trans: TransitionCoefs) -> Optional[float]:
    """Time at which the cable's slope changes sign, or None if it never does.

    For a gradual bend the slope crosses zero at
    ``tau - gamma - 2 beta1 gamma / beta2``; for an abrupt one, at ``tau``.
    The value is undefined (None) when the incoming and outgoing slopes share
    a sign, in which case no crossing exists.
    """
    if not slope_changes_sign(lin.beta1, lin.beta2):
        return None
    if trans.gamma == 0.0:
        return float(trans.tau)
    return float(trans.tau - trans.gamma - 2.0 * lin.beta1 * trans.gamma / lin.beta2)


# ---------------------------------------------------------------------------
# AR(p) machinery
# ---------------------------------------------------------------------------


def ar_stationary(phi) -> bool:
    """True when all roots of ``1 - phi_1 z - ... - phi_p z^p`` lie outside
    the unit circle (p == 0 is trivially stationary)."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if phi.size == 0:
        return True
    if not np.all(np.isfinite(phi)):
        return False
    # np.roots wants the highest degree first: -phi_p, ..., -phi_1, 1.
    coefs = np.concatenate((-phi[::-1], [1.0]))
    roots = np.roots(coefs)
    if roots.size == 0:  # all phi exactly zero
        return True
    return bool(np.min(np.abs(roots)) > 1.0)


def quasi_difference(values: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Return ``v_j - sum_k phi_k v_{j-k}`` for j = p+1..n (0-based j >= p)."""
    values = np.asarray(values, dtype=float)
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    p = phi.shape[0]
    n = values.shape[-1]
    out = values[..., p:].copy()
    for k in range(1, p + 1):
        out -= phi[k - 1] * values[..., p - k : n - k]
    return out


class ArDesign(NamedTuple):
    """AR-adjusted response and regressors for one profile (length n - p)."""

    z: np.ndarray
    x: np.ndarray
    r: np.ndarray
    intercept: float


def ar_design(times, responses, trans: TransitionCoefs, ar: ArCoefs) -> ArDesign:
    """Quasi-difference a profile's response, time and bend-basis columns.

    The conditional-likelihood regression for observations p+1..n uses the
    intercept weight ``1 - sum(phi)`` and the transformed columns returned
    here.  Profiles with ``n_i <= p`` cannot contribute and are rejected.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(responses, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and responses must be equal-length 1-d arrays")
    if t.shape[0] <= ar.p:
        raise ModelSetupError(
            f"profile has {t.shape[0]} observations; AR order {ar.p} needs more"
        )
    q = bend_basis(t, trans.gamma, trans.tau)
    return ArDesign(
        z=quasi_difference(y, ar.phi),
        x=quasi_difference(t, ar.phi),
        r=quasi_difference(q, ar.phi),
        intercept=float(1.0 - ar.phi.sum()),
    )


# ---------------------------------------------------------------------------
# Conditional (Level 1) log likelihood
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def conditional_loglik_arrays(profiles, beta, gamma, tau, sigma2, phi) -> float:
    """Gaussian conditional log likelihood over all profiles, array form.

    ``profiles`` is a sequence of ``(times, responses)`` pairs; ``beta`` has
    shape (m, 3) and the remaining parameters shape (m,).  The first ``p``
    observations of each profile are conditioned on, not scored.
    """
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if np.any(sigma2 <= 0.0):
        raise ValueError("sigma2 must be positive for every individual")
    p = phi.shape[0]
    total = 0.0
    for i, (t, y) in enumerate(profiles):
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        if t.shape[0] <= p:
            raise ModelSetupError(
                f"profile {i} has {t.shape[0]} observations; AR order {p} needs more"
            )
        q = bend_basis(t, gamma[i], tau[i])
        z = quasi_difference(y, phi)
        mean = (
            beta[i, 0] * (1.0 - phi.sum())
            + beta[i, 1] * quasi_difference(t, phi)
            + beta[i, 2] * quasi_difference(q, phi)
        )
        resid = z - mean
        n_eff = t.shape[0] - p
        total += -0.5 * (
            n_eff * (_LOG_2PI + np.log(sigma2[i])) + resid @ resid / sigma2[i]
        )
    return float(total)


def conditional_loglik(dataset, params: Sequence[IndividualParams], ar: ArCoefs) -> float:
    """Conditional log likelihood of a dataset under per-individual params.

    Sums, over individuals and observations p+1..n_i, the normal log density
    of each response around the AR-adjusted cable mean with that individual's
    innovation variance.
    """
    if len(params) != dataset.m:
        raise ValueError("need exactly one parameter set per profile")
    beta = np.array([pr.beta.as_array() for pr in params])
    gamma = np.array([pr.trans.gamma for pr in params])
    tau = np.array([pr.trans.tau for pr in params])
    sigma2 = np.array([pr.sigma2 for pr in params])
    profiles = [(pf.times, pf.responses) for pf in dataset.profiles]
    return conditional_loglik_arrays(profiles, beta, gamma, tau, sigma2, ar.phi)
