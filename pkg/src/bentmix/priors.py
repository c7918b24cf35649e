"""Hyperparameters (Level 3) with vague defaults, and data-driven elicitation.

The Wishart convention used throughout the package: ``X ~ W(nu, S)`` has mean
``nu * S``, so a precision prior ``W(nu, (nu A)^-1)`` has mean ``A^-1`` and
``A`` plays the role of a rough prior estimate of the covariance it controls.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .data import LongitudinalDataset
from .model import bend_basis, is_spd

__all__ = [
    "Hyperparameters",
    "default_hyperparameters",
    "elicit_scale_matrices",
    "GridFit",
    "grid_profile_fit",
]

_VAGUE_VAR = 1e4
_VAGUE_RATE = 1e-4


@dataclass(frozen=True)
class Hyperparameters:
    """All fixed Level-3 constants.

    ``(h1, H1)``, ``(h2, H2)`` and ``(h3, H3)`` are normal means/covariances
    for the cable-coefficient mean, the log transition mean (Population G)
    and the AR coefficients.  ``(a0, a1)`` is the normal prior for the
    Population A log transition mean, ``(nu1, A1)`` and ``(nu2, A2)`` feed the
    Wishart precision priors, ``(b0, b1)`` and ``(d0, d1)`` the gamma
    precision priors (shape-rate, each halved), and ``(c0, c1)`` the beta
    prior on the mixing weight.
    """

    h1: np.ndarray
    H1: np.ndarray
    h2: np.ndarray
    H2: np.ndarray
    h3: np.ndarray
    H3: np.ndarray
    a0: float
    a1: float
    nu1: float
    A1: np.ndarray
    nu2: float
    A2: np.ndarray
    b0: float
    b1: float
    c0: float
    c1: float
    d0: float
    d1: float

    def __post_init__(self) -> None:
        for name, d in (("h1", 3), ("h2", 2)):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (d,):
                raise ValueError(f"{name} must have shape ({d},)")
            object.__setattr__(self, name, v)
        h3 = np.atleast_1d(np.asarray(self.h3, dtype=float))
        object.__setattr__(self, "h3", h3)
        p = h3.shape[0]
        for name, d in (("H1", 3), ("H2", 2), ("H3", p), ("A1", 3), ("A2", 2)):
            mat = np.asarray(getattr(self, name), dtype=float)
            if d == 0:
                mat = mat.reshape(0, 0)
            if mat.shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
            if d > 0 and not is_spd(mat):
                raise ValueError(f"{name} must be symmetric positive definite")
            object.__setattr__(self, name, mat)
        if self.nu1 < 3:
            raise ValueError("nu1 must be >= 3 (order of A1)")
        if self.nu2 < 2:
            raise ValueError("nu2 must be >= 2 (order of A2)")
        for name in ("a1", "b0", "b1", "c0", "c1", "d0", "d1"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @property
    def p(self) -> int:
        return int(self.h3.shape[0])

    def with_ar_order(self, p: int) -> "Hyperparameters":
        """Copy with ``h3``/``H3`` resized for AR order ``p``.

        The diagonal variance of the existing H3 is reused when present,
        otherwise the vague default applies.
        """
        if p == self.p:
            return self
        var = float(self.H3[0, 0]) if self.p > 0 else _VAGUE_VAR
        return replace(self, h3=np.zeros(p), H3=var * np.eye(p))

    def override(self, config: dict) -> "Hyperparameters":
        """Return a copy with fields replaced from a JSON-style mapping."""
        known = set(self.__dataclass_fields__)
        unknown = set(config) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        fields = {k: np.asarray(v, dtype=float) if k[0] in "hHA" else float(v)
                  for k, v in config.items()}
        return replace(self, **fields)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            out[name] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_json(cls, path, p: int, scale_beta=None, scale_alpha=None) -> "Hyperparameters":
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
        base = default_hyperparameters(
            p,
            scale_beta if scale_beta is not None else np.eye(3),
            scale_alpha if scale_alpha is not None else np.eye(2),
        )
        return base.override(config)


def default_hyperparameters(p: int, scale_beta, scale_alpha) -> Hyperparameters:
    """Vague defaults: flat normal means, uniform mixing weight, diffuse
    gamma precisions, and minimally informative Wisharts anchored at the
    supplied covariance scales (degrees of freedom equal to matrix order)."""
    scale_beta = np.asarray(scale_beta, dtype=float)
    scale_alpha = np.asarray(scale_alpha, dtype=float)
    if not is_spd(scale_beta) or scale_beta.shape != (3, 3):
        raise ValueError("scale_beta must be a 3x3 SPD matrix")
    if not is_spd(scale_alpha) or scale_alpha.shape != (2, 2):
        raise ValueError("scale_alpha must be a 2x2 SPD matrix")
    return Hyperparameters(
        h1=np.zeros(3),
        H1=_VAGUE_VAR * np.eye(3),
        h2=np.zeros(2),
        H2=_VAGUE_VAR * np.eye(2),
        h3=np.zeros(p),
        H3=_VAGUE_VAR * np.eye(p),
        a0=0.0,
        a1=_VAGUE_VAR,
        nu1=3.0,
        A1=scale_beta,
        nu2=2.0,
        A2=scale_alpha,
        b0=_VAGUE_RATE,
        b1=_VAGUE_RATE,
        c0=1.0,
        c1=1.0,
        d0=_VAGUE_RATE,
        d1=_VAGUE_RATE,
    )


# ---------------------------------------------------------------------------
# Coarse per-profile fits (grid over the bend, OLS for the line)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridFit:
    """Deterministic coarse fit of one profile.

    ``rss_stick`` is the best residual sum of squares achievable with an
    abrupt kink (zero width); ``rss_min`` the best over the whole grid.
    Their ratio measures the evidence for a genuinely gradual bend.
    """

    beta: np.ndarray
    gamma: float
    tau: float
    rss: float
    rss_stick: float = float("nan")
    rss_min: float = float("nan")

    @property
    def bend_evidence(self) -> float:
        return self.rss_stick / self.rss_min


def _tau_grid(t: np.ndarray, points: int = 41) -> np.ndarray:
    lo, hi = float(t[0]), float(t[-1])
    span = hi - lo
    return np.linspace(lo + 0.1 * span, hi - 0.1 * span, points)


def _gamma_grid(t: np.ndarray, points: int = 20) -> np.ndarray:
    span = float(t[-1] - t[0])
    # 0 for the broken stick plus log-spaced widths up to half the span
    return np.concatenate(([0.0], np.geomspace(0.005 * span, 0.5 * span, points)))


def grid_profile_fit(times, responses, tie_tol: float = 0.02, refine: bool = True) -> GridFit:
    """Least-squares cable fit over a deterministic (tau, gamma) grid.

    For each grid pair the linear coefficients are solved by OLS.  Among all
    pairs whose residual sum of squares is within ``tie_tol`` (relative) of
    the overall minimum, the smallest bend width wins: near-abrupt profiles
    have an almost flat RSS landscape in the width, and without the
    parsimony rule they draw arbitrary moderate widths from noise.  Positive
    widths are then polished off-grid (``refine``).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(responses, dtype=float)
    taus = _tau_grid(t)
    gammas = _gamma_grid(t)
    ones = np.ones_like(t)
    fits = []
    for gamma in gammas:
        best_g = None
        for tau in taus:
            X = np.column_stack((ones, t, bend_basis(t, gamma, tau)))
            coef, res, rank, _ = np.linalg.lstsq(X, y, rcond=None)
            rss = float(res[0]) if res.size else float(np.sum((y - X @ coef) ** 2))
            if best_g is None or rss < best_g[0] - 1e-12:
                best_g = (rss, coef, gamma, tau)
        fits.append(best_g)
    rss_min = min(f[0] for f in fits)
    cutoff = rss_min * (1.0 + tie_tol) + 1e-12
    rss, coef, gamma, tau = next(f for f in fits if f[0] <= cutoff)
    if refine and gamma > 0.0:
        rss, coef, gamma, tau = _refine_fit(t, y, ones, rss, coef, gamma, tau)
    return GridFit(
        beta=coef,
        gamma=float(gamma),
        tau=float(tau),
        rss=rss,
        rss_stick=fits[0][0],
        rss_min=rss_min,
    )


def _refine_fit(t, y, ones, rss0, coef0, gamma0, tau0):
    """Polish a positive-width grid optimum by Nelder-Mead on log (gamma, tau).

    The width grid is log-spaced at ~27% steps; without polishing, that
    granularity dominates the between-profile spread of fitted widths.
    """
    from scipy.optimize import minimize

    def objective(p):
        gamma, tau = np.exp(p)
        X = np.column_stack((ones, t, bend_basis(t, gamma, tau)))
        coef, res, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        return float(res[0]) if res.size else float(np.sum((y - X @ coef) ** 2))

    result = minimize(
        objective,
        x0=np.log([gamma0, tau0]),
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 200},
    )
    if not result.success or result.fun > rss0:
        return rss0, coef0, gamma0, tau0
    gamma, tau = np.exp(result.x)
    X = np.column_stack((ones, t, bend_basis(t, gamma, tau)))
    coef, res, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(res[0]) if res.size else float(np.sum((y - X @ coef) ** 2))
    return rss, coef, float(gamma), float(tau)


def residual_variance(times, responses, fit: GridFit) -> float:
    t = np.asarray(times, dtype=float)
    dof = max(t.shape[0] - 5, 1)
    return float(max(fit.rss / dof, 1e-12))


def elicit_scale_matrices(
    dataset: LongitudinalDataset,
    min_usable: int = 4,
    evidence_threshold: float = 1.05,
) -> Tuple[np.ndarray, np.ndarray]:
    """Wishart scale matrices from covariances of coarse per-profile fits.

    The 3x3 scale is the sample covariance of the fitted cable coefficients
    across profiles.  The 2x2 scale is a robust (median/MAD) covariance of
    (log gamma, log tau) over profiles with clear evidence of a gradual bend
    (stick fit at least ``evidence_threshold`` times worse than the best
    fit).  Robustness matters: the transition scale anchors the gradual
    population's spread, and a single stray width estimate from a noisy
    near-abrupt profile can inflate it enough to let the gradual population
    swallow the whole sample.  Constant profiles are excluded; with too few
    usable fits the affected matrix falls back to the identity.
    """
    betas = []
    log_alphas = []
    est_vars = []
    for prof in dataset.profiles:
        if np.ptp(prof.responses) == 0.0:
            continue
        fit = grid_profile_fit(prof.times, prof.responses)
        betas.append(fit.beta)
        if (
            fit.gamma > 0.0
            and fit.tau > 0.0
            and np.isfinite(fit.bend_evidence)
            and fit.bend_evidence >= evidence_threshold
        ):
            log_alphas.append((np.log(fit.gamma), np.log(fit.tau)))
            est_vars.append(_fit_log_variances(prof.times, prof.responses, fit))

    if len(betas) < min_usable:
        warnings.warn(
            f"only {len(betas)} usable profiles for elicitation; "
            "falling back to identity scales",
            stacklevel=2,
        )
        return np.eye(3), np.eye(2)

    A1 = _spd_or_jitter(np.cov(np.asarray(betas).T))
    if len(log_alphas) >= min_usable:
        A2 = _robust_cov2(np.asarray(log_alphas))
        # The dispersion of the estimates is (between-individual variance)
        # plus (per-profile estimation variance); remove the latter so the
        # prior scale anchors the population spread, not the fit noise.
        noise = np.median(np.asarray(est_vars), axis=0)
        A2 = _deflate_cov(A2, noise)
    else:
        warnings.warn(
            f"only {len(log_alphas)} clear gradual-bend fits for elicitation; "
            "falling back to the identity scale for the transition block",
            stacklevel=2,
        )
        A2 = np.eye(2)
    return A1, A2


def _fit_log_variances(times, responses, fit: GridFit, h: float = 0.05) -> np.ndarray:
    """Approximate sampling variances of (log gamma, log tau) for one fit.

    Uses the numerical curvature of the profiled RSS around the optimum:
    var ~ 2 sigma^2 / d2RSS, with sigma^2 from the fit residuals.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(responses, dtype=float)
    ones = np.ones_like(t)
    sigma2 = max(fit.rss / max(t.shape[0] - 5, 1), 1e-12)

    def rss_at(u, v):
        X = np.column_stack((ones, t, bend_basis(t, np.exp(u), np.exp(v))))
        coef, res, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        return float(res[0]) if res.size else float(np.sum((y - X @ coef) ** 2))

    u0, v0 = np.log(fit.gamma), np.log(fit.tau)
    f0 = rss_at(u0, v0)
    out = np.empty(2)
    for k, (du, dv) in enumerate(((h, 0.0), (0.0, h))):
        second = (rss_at(u0 + du, v0 + dv) - 2 * f0 + rss_at(u0 - du, v0 - dv)) / h**2
        out[k] = 2.0 * sigma2 / second if second > 0 else np.inf
    return out


def _deflate_cov(cov: np.ndarray, noise_var: np.ndarray,
                 var_floor: float = 0.005, var_cap: float = 1.0) -> np.ndarray:
    """Subtract estimation noise from the diagonal, keeping correlations."""
    sd_old = np.sqrt(np.diag(cov))
    corr = cov[0, 1] / (sd_old[0] * sd_old[1]) if np.all(sd_old > 0) else 0.0
    var = np.clip(np.diag(cov) - np.where(np.isfinite(noise_var), noise_var, 0.0),
                  var_floor, var_cap)
    sd = np.sqrt(var)
    return _spd_or_jitter(
        np.array([[var[0], corr * sd[0] * sd[1]], [corr * sd[0] * sd[1], var[1]]])
    )


def _robust_cov2(points: np.ndarray, sd_floor: float = 0.05, sd_cap: float = 2.0) -> np.ndarray:
    """MAD-based 2x2 covariance with a clipped correlation."""
    med = np.median(points, axis=0)
    dev = points - med
    sd = np.clip(1.4826 * np.median(np.abs(dev), axis=0), sd_floor, sd_cap)
    scaled = dev / sd
    keep = np.all(np.abs(scaled) <= 3.0, axis=1)
    if keep.sum() >= 3:
        corr = np.corrcoef(points[keep].T)[0, 1]
        if not np.isfinite(corr):
            corr = 0.0
    else:
        corr = 0.0
    corr = float(np.clip(corr, -0.9, 0.9))
    cov = np.array(
        [[sd[0] ** 2, corr * sd[0] * sd[1]], [corr * sd[0] * sd[1], sd[1] ** 2]]
    )
    return _spd_or_jitter(cov)


def _spd_or_jitter(mat: np.ndarray, jitter: float = 1e-8) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    mat = 0.5 * (mat + mat.T)
    if is_spd(mat):
        return mat
    return mat + jitter * np.eye(mat.shape[0])
