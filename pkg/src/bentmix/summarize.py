"""Posterior summaries: population medians/SDs, CTPs, and fitted curves."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .model import PopulationParams, bend_basis, cable_values
from .sampler import ChainOutput

__all__ = [
    "DerivedDraw",
    "derive_per_draw",
    "derive_draws",
    "summarize_population",
    "FittedCurve",
    "fitted_individual",
    "fitted_population",
    "curves_to_csv",
    "render_svg",
]


@dataclass(frozen=True)
class DerivedDraw:
    """Population quantities derived from one posterior draw.

    Medians (M) and standard deviations (S) come from the lognormal transition
    laws; ``ctp_g`` is None for draws whose cable slope never changes sign.
    """

    M_gamma: float
    M_tau: float
    M_tauA: float
    S_gamma: float
    S_tau: float
    S_tauA: float
    ctp_g: Optional[float]
    ctp_a: float
    outgoing_slope: float
    sd_beta0: float
    sd_beta1: float
    sd_beta2: float
    sd_outgoing: float
    corr_beta01: float
    corr_beta02: float
    corr_beta12: float
    corr_gamma_onset: float


def _lognormal_sd(mu: float, var: float) -> float:
    return float(np.sqrt(np.exp(2.0 * mu + var) * np.expm1(var)))


def _ctp_gradual(mu1, mu2, M_gamma, M_tau):
    """Vectorized CTP of the gradual population; NaN when undefined."""
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    defined = (mu2 != 0.0) & (np.sign(mu1) != np.sign(mu1 + mu2))
    safe_mu2 = np.where(mu2 == 0.0, 1.0, mu2)
    value = M_tau - M_gamma - 2.0 * mu1 * M_gamma / safe_mu2
    return np.where(defined, value, np.nan)


def _corr_gamma_onset(mu_alpha, Sigma_alpha):
    """corr(gamma, tau - gamma) under the bivariate lognormal, vectorized.

    Uses exact lognormal moments: with (log gamma, log tau) jointly normal,
    cov(gamma, tau) = E[gamma] E[tau] (exp(S12) - 1) and similarly for the
    variances.
    """
    mg = mu_alpha[..., 0]
    mt = mu_alpha[..., 1]
    s11 = Sigma_alpha[..., 0, 0]
    s22 = Sigma_alpha[..., 1, 1]
    s12 = Sigma_alpha[..., 0, 1]
    eg = np.exp(mg + 0.5 * s11)
    et = np.exp(mt + 0.5 * s22)
    var_g = eg**2 * np.expm1(s11)
    var_t = et**2 * np.expm1(s22)
    cov_gt = eg * et * np.expm1(s12)
    var_onset = var_t + var_g - 2.0 * cov_gt
    denom = np.sqrt(np.maximum(var_g, 0.0) * np.maximum(var_onset, 1e-300))
    return np.clip((cov_gt - var_g) / denom, -1.0, 1.0)


def derive_per_draw(pop: PopulationParams) -> DerivedDraw:
    """Derived quantities for a single population draw."""
    mu1, mu2 = float(pop.mu_beta[1]), float(pop.mu_beta[2])
    M_gamma = float(np.exp(pop.mu_alpha[0]))
    M_tau = float(np.exp(pop.mu_alpha[1]))
    M_tauA = float(np.exp(pop.mu_tauA))
    ctp = float(_ctp_gradual(mu1, mu2, M_gamma, M_tau))
    sd = np.sqrt(np.diag(pop.Sigma_beta))
    Sb = pop.Sigma_beta
    return DerivedDraw(
        M_gamma=M_gamma,
        M_tau=M_tau,
        M_tauA=M_tauA,
        S_gamma=_lognormal_sd(pop.mu_alpha[0], pop.Sigma_alpha[0, 0]),
        S_tau=_lognormal_sd(pop.mu_alpha[1], pop.Sigma_alpha[1, 1]),
        S_tauA=_lognormal_sd(pop.mu_tauA, pop.sigma2_tauA),
        ctp_g=None if np.isnan(ctp) else ctp,
        ctp_a=M_tauA,
        outgoing_slope=mu1 + mu2,
        sd_beta0=float(sd[0]),
        sd_beta1=float(sd[1]),
        sd_beta2=float(sd[2]),
        sd_outgoing=float(np.sqrt(Sb[1, 1] + Sb[2, 2] + 2.0 * Sb[1, 2])),
        corr_beta01=float(Sb[0, 1] / (sd[0] * sd[1])),
        corr_beta02=float(Sb[0, 2] / (sd[0] * sd[2])),
        corr_beta12=float(Sb[1, 2] / (sd[1] * sd[2])),
        corr_gamma_onset=float(
            _corr_gamma_onset(pop.mu_alpha, pop.Sigma_alpha)
        ),
    )


def derive_draws(chain: ChainOutput) -> Dict[str, np.ndarray]:
    """Vectorized :func:`derive_per_draw` over a whole chain."""
    M_gamma = np.exp(chain.mu_alpha[:, 0])
    M_tau = np.exp(chain.mu_alpha[:, 1])
    M_tauA = np.exp(chain.mu_tauA)
    s11 = chain.Sigma_alpha[:, 0, 0]
    s22 = chain.Sigma_alpha[:, 1, 1]
    sd = np.sqrt(np.stack([chain.Sigma_beta[:, j, j] for j in range(3)], axis=1))
    Sb = chain.Sigma_beta
    return {
        "M_gamma": M_gamma,
        "M_tau": M_tau,
        "M_tauA": M_tauA,
        "S_gamma": np.sqrt(np.exp(2 * chain.mu_alpha[:, 0] + s11) * np.expm1(s11)),
        "S_tau": np.sqrt(np.exp(2 * chain.mu_alpha[:, 1] + s22) * np.expm1(s22)),
        "S_tauA": np.sqrt(
            np.exp(2 * chain.mu_tauA + chain.sigma2_tauA) * np.expm1(chain.sigma2_tauA)
        ),
        "ctp_g": _ctp_gradual(chain.mu_beta[:, 1], chain.mu_beta[:, 2], M_gamma, M_tau),
        "ctp_a": M_tauA,
        "outgoing_slope": chain.mu_beta[:, 1] + chain.mu_beta[:, 2],
        "sd_beta0": sd[:, 0],
        "sd_beta1": sd[:, 1],
        "sd_beta2": sd[:, 2],
        "sd_outgoing": np.sqrt(Sb[:, 1, 1] + Sb[:, 2, 2] + 2 * Sb[:, 1, 2]),
        "corr_beta01": Sb[:, 0, 1] / (sd[:, 0] * sd[:, 1]),
        "corr_beta02": Sb[:, 0, 2] / (sd[:, 0] * sd[:, 2]),
        "corr_beta12": Sb[:, 1, 2] / (sd[:, 1] * sd[:, 2]),
        "corr_gamma_onset": _corr_gamma_onset(chain.mu_alpha, chain.Sigma_alpha),
    }


def _entry(draws: np.ndarray) -> dict:
    draws = np.asarray(draws, dtype=float)
    finite = np.isfinite(draws)
    if not np.all(finite):
        # non-finite draws only occur for parameters the fit leaves
        # unidentified (e.g. an always-empty population's spread)
        if not np.any(finite):
            return {"mean": None, "median": None, "ci95": [None, None]}
        draws = draws[finite]
    return {
        "mean": float(draws.mean()),
        "median": float(np.median(draws)),
        "ci95": [float(np.quantile(draws, 0.025)), float(np.quantile(draws, 0.975))],
    }


# Parameters whose point estimate is conventionally the posterior median
# (heavily right-skewed variance-type posteriors); everything else uses the
# posterior mean.  Both are always reported.
_MEDIAN_PREFERRED = {
    "sigma2_tauA", "SigmaB.1.1", "SigmaB.2.2", "SigmaB.3.3",
    "SigmaA.1.1", "SigmaA.2.2",
    "sd_beta0", "sd_beta1", "sd_beta2", "sd_outgoing",
    "S_gamma", "S_tau", "S_tauA",
}


def summarize_population(chain: ChainOutput, time_factor: float = 1.0) -> dict:
    """Posterior report for population-level and derived quantities.

    Every entry carries the posterior mean, median and equal-tailed 95%
    interval, plus which of mean/median is the conventional point estimate.
    ``time_factor`` rescales time-dimension quantities for presentation
    (e.g. 0.25 to turn 15-second steps into minutes).  Draws with an
    undefined gradual CTP are excluded from that summary and their fraction
    reported.
    """
    if chain.n_draws == 0:
        raise ValueError("chain holds no draws")
    with np.errstate(over="ignore", invalid="ignore"):
        derived = derive_draws(chain)
    tf = float(time_factor)

    params = {
        "omega": chain.omega,
        "mu0": chain.mu_beta[:, 0],
        "mu1": chain.mu_beta[:, 1],
        "mu2": chain.mu_beta[:, 2],
        "mu_gamma": chain.mu_alpha[:, 0],
        "mu_tau": chain.mu_alpha[:, 1],
        "mu_tauA": chain.mu_tauA,
        "sigma2_tauA": chain.sigma2_tauA,
        "SigmaB.1.1": chain.Sigma_beta[:, 0, 0],
        "SigmaB.1.2": chain.Sigma_beta[:, 0, 1],
        "SigmaB.1.3": chain.Sigma_beta[:, 0, 2],
        "SigmaB.2.2": chain.Sigma_beta[:, 1, 1],
        "SigmaB.2.3": chain.Sigma_beta[:, 1, 2],
        "SigmaB.3.3": chain.Sigma_beta[:, 2, 2],
        "SigmaA.1.1": chain.Sigma_alpha[:, 0, 0],
        "SigmaA.1.2": chain.Sigma_alpha[:, 0, 1],
        "SigmaA.2.2": chain.Sigma_alpha[:, 1, 1],
        "outgoing_slope": derived["outgoing_slope"],
        "sd_beta0": derived["sd_beta0"],
        "sd_beta1": derived["sd_beta1"],
        "sd_beta2": derived["sd_beta2"],
        "sd_outgoing": derived["sd_outgoing"],
        "corr_beta01": derived["corr_beta01"],
        "corr_beta02": derived["corr_beta02"],
        "corr_beta12": derived["corr_beta12"],
        "corr_gamma_onset": derived["corr_gamma_onset"],
    }
    for k in range(chain.p):
        params[f"phi.{k + 1}"] = chain.phi[:, k]
    # time-dimension derived quantities, rescaled for presentation
    for name in ("M_gamma", "M_tau", "M_tauA", "S_gamma", "S_tau", "S_tauA"):
        params[name] = derived[name] * tf
    params["transition_start"] = (derived["M_tau"] - derived["M_gamma"]) * tf
    params["transition_end"] = (derived["M_tau"] + derived["M_gamma"]) * tf
    params["ctp_a"] = derived["ctp_a"] * tf

    report = {
        "n_draws": chain.n_draws,
        "variant": chain.variant,
        "p": chain.p,
        "time_factor": tf,
        "stationarity_proportion": chain.stationarity_proportion,
        "parameters": {},
        "individuals": {},
    }
    for name, draws in params.items():
        entry = _entry(draws)
        entry["estimate"] = "median" if name in _MEDIAN_PREFERRED else "mean"
        report["parameters"][name] = entry

    ctp = derived["ctp_g"] * tf
    defined = ~np.isnan(ctp)
    ctp_entry = {
        "undefined_fraction": float(1.0 - defined.mean()),
        "estimate": "mean",
    }
    if np.any(defined):
        ctp_entry.update(_entry(ctp[defined]))
    report["parameters"]["ctp_g"] = ctp_entry

    for i, pid in enumerate(chain.ids):
        report["individuals"][pid] = {
            "p_gradual": float(chain.indicator[:, i].mean()),
            "sigma2": _entry(chain.sigma2[:, i]),
            "tau": _entry(chain.tau[:, i] * tf),
            "alpha_accept_rate": float(chain.alpha_accept_rate[i])
            if np.isfinite(chain.alpha_accept_rate[i]) else None,
        }
    return report


# ---------------------------------------------------------------------------
# Fitted curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FittedCurve:
    """Pointwise posterior mean and equal-tailed band over a time grid."""

    times: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    label: str = ""


def _curve_from_values(times, values, label, level=0.95) -> FittedCurve:
    alpha = 0.5 * (1.0 - level)
    return FittedCurve(
        times=np.asarray(times, dtype=float),
        mean=values.mean(axis=0),
        lo=np.quantile(values, alpha, axis=0),
        hi=np.quantile(values, 1.0 - alpha, axis=0),
        label=label,
    )


def fitted_individual(chain: ChainOutput, i: int, times, level: float = 0.95) -> FittedCurve:
    """Posterior fitted curve for one individual.

    Each retained draw contributes its own cable, including that draw's bend
    width (zero whenever the draw labels the individual abrupt), so the band
    reflects within-label and between-label uncertainty together.
    """
    t = np.asarray(times, dtype=float)
    values = cable_values(
        t[None, :],
        chain.beta[:, i, 0, None],
        chain.beta[:, i, 1, None],
        chain.beta[:, i, 2, None],
        chain.gamma[:, i, None],
        chain.tau[:, i, None],
    )
    return _curve_from_values(t, values, chain.ids[i], level)


def fitted_population(chain: ChainOutput, times, level: float = 0.95) -> Dict[str, FittedCurve]:
    """Fitted population curves for the gradual (G) and abrupt (A) groups.

    Per draw, the G curve evaluates the cable at the population coefficient
    means with the lognormal median transition (M_gamma, M_tau); the A curve
    uses a zero width at M_tauA.  Both share the draw's incoming line, and the
    bands propagate population-parameter uncertainty only.
    """
    t = np.asarray(times, dtype=float)
    mu = chain.mu_beta
    g_vals = cable_values(
        t[None, :],
        mu[:, 0, None],
        mu[:, 1, None],
        mu[:, 2, None],
        np.exp(chain.mu_alpha[:, 0, None]),
        np.exp(chain.mu_alpha[:, 1, None]),
    )
    a_vals = cable_values(
        t[None, :],
        mu[:, 0, None],
        mu[:, 1, None],
        mu[:, 2, None],
        0.0,
        np.exp(chain.mu_tauA[:, None]),
    )
    return {
        "G": _curve_from_values(t, g_vals, "G", level),
        "A": _curve_from_values(t, a_vals, "A", level),
    }


def curves_to_csv(curves: Dict[str, FittedCurve], path) -> None:
    """Tidy CSV: time, mean, lo95, hi95, population."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("time,mean,lo95,hi95,population\n")
        for label, curve in curves.items():
            for k in range(curve.times.shape[0]):
                fh.write(
                    f"{curve.times[k]!r},{curve.mean[k]!r},"
                    f"{curve.lo[k]!r},{curve.hi[k]!r},{label}\n"
                )


def render_svg(curves: Dict[str, FittedCurve], path, width=640, height=420) -> None:
    """Minimal static SVG rendering of the curves and their bands."""
    all_t = np.concatenate([c.times for c in curves.values()])
    all_v = np.concatenate(
        [np.concatenate((c.lo, c.hi)) for c in curves.values()]
    )
    t0, t1 = float(all_t.min()), float(all_t.max())
    v0, v1 = float(all_v.min()), float(all_v.max())
    t1 = t1 if t1 > t0 else t0 + 1.0
    v1 = v1 if v1 > v0 else v0 + 1.0
    pad = 40

    def sx(t):
        return pad + (t - t0) / (t1 - t0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - v0) / (v1 - v0) * (height - 2 * pad)

    def polyline(ts, vs, color, dash=""):
        pts = " ".join(f"{sx(t):.2f},{sy(v):.2f}" for t, v in zip(ts, vs))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5"'
            f'{extra} points="{pts}"/>'
        )

    palette = {"G": "#000000", "A": "#888888"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for label, curve in curves.items():
        color = palette.get(label, "#3366aa")
        parts.append(polyline(curve.times, curve.mean, color))
        parts.append(polyline(curve.times, curve.lo, color, dash="4 3"))
        parts.append(polyline(curve.times, curve.hi, color, dash="4 3"))
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))


def report_to_json(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
