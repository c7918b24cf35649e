"""Metropolis-within-Gibbs engine for the mixture bent-cable model.

One sweep updates, in a fixed order: every individual's cable coefficients
(conjugate normal), every individual's bend geometry (random-walk Metropolis
on log coordinates), every individual's population label (a reversible
between-model move), every innovation precision, and then the population
parameters, mixing weight and AR coefficients.  The order is fixed for
bit-reproducibility, not validity.

Internally all individuals are stored in zero-padded arrays so each update
is one batched numpy operation; padded rows contribute exactly zero to every
sufficient statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .data import LongitudinalDataset, warn_if_unequal_spacing
from .model import ar_stationary, bend_basis
from .priors import Hyperparameters, grid_profile_fit, _spd_or_jitter

__all__ = [
    "SamplerError",
    "NumericalError",
    "ChainSettings",
    "SamplerState",
    "ChainOutput",
    "BentCableSampler",
    "run_chain",
    "VARIANTS",
]

VARIANTS = ("flexible", "g-only", "a-only")

_LOG_2PI = float(np.log(2.0 * np.pi))
# Reject bend proposals outside exp(+-50): far past any data scale, and it
# keeps exp() finite without perturbing the target measurably.
_LOG_BOX = 50.0


class SamplerError(RuntimeError):
    """Chain-level failure."""


class NumericalError(SamplerError):
    """Raised when linear algebra rescues fail too often to trust the chain."""


@dataclass(frozen=True)
class ChainSettings:
    """MCMC run controls.

    Adaptation of the Metropolis step sizes happens every ``adapt_every``
    iterations during burn-in only; the kernel used for retained draws is
    frozen.
    """

    iters: int = 20000
    burnin: int = 5000
    thin: int = 1
    seed: int = 0
    adapt_every: int = 100
    adapt_target: float = 0.3
    step_init: float = 0.25

    def __post_init__(self) -> None:
        if self.iters <= self.burnin:
            raise ValueError("iters must exceed burnin")
        if self.burnin < 0 or self.thin < 1 or self.adapt_every < 1:
            raise ValueError("invalid chain settings")
        if not (0.0 < self.adapt_target < 1.0):
            raise ValueError("adapt_target must be in (0, 1)")

    @property
    def n_draws(self) -> int:
        return (self.iters - self.burnin) // self.thin


@dataclass
class SamplerState:
    """Current values of every sampled quantity, arrays over individuals."""

    beta: np.ndarray        # (m, 3)
    gamma: np.ndarray       # (m,), exactly 0 where indicator == 0
    tau: np.ndarray         # (m,)
    indicator: np.ndarray   # (m,) in {0, 1}
    sigma2: np.ndarray      # (m,)
    mu_beta: np.ndarray     # (3,)
    Sigma_beta: np.ndarray  # (3, 3)
    mu_alpha: np.ndarray    # (2,)
    Sigma_alpha: np.ndarray # (2, 2)
    mu_tauA: float
    sigma2_tauA: float
    omega: float
    phi: np.ndarray         # (p,)

    def copy(self) -> "SamplerState":
        return SamplerState(
            beta=self.beta.copy(),
            gamma=self.gamma.copy(),
            tau=self.tau.copy(),
            indicator=self.indicator.copy(),
            sigma2=self.sigma2.copy(),
            mu_beta=self.mu_beta.copy(),
            Sigma_beta=self.Sigma_beta.copy(),
            mu_alpha=self.mu_alpha.copy(),
            Sigma_alpha=self.Sigma_alpha.copy(),
            mu_tauA=float(self.mu_tauA),
            sigma2_tauA=float(self.sigma2_tauA),
            omega=float(self.omega),
            phi=self.phi.copy(),
        )

    def check_indicator_consistency(self) -> None:
        bad = ((self.indicator == 0) & (self.gamma != 0.0)) | (
            (self.indicator == 1) & (self.gamma <= 0.0)
        )
        if np.any(bad):
            raise SamplerError(
                f"indicator/gamma inconsistency for individuals {np.where(bad)[0]}"
            )


@dataclass
class ChainOutput:
    """Thinned draws plus chain-level diagnostics."""

    ids: List[str]
    p: int
    variant: str
    seed: int
    settings: ChainSettings
    omega: np.ndarray
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_alpha: np.ndarray
    Sigma_alpha: np.ndarray
    mu_tauA: np.ndarray
    sigma2_tauA: np.ndarray
    phi: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    indicator: np.ndarray
    sigma2: np.ndarray
    deviance: np.ndarray
    alpha_accept_rate: np.ndarray
    indicator_flips: np.ndarray
    stationarity_proportion: Optional[float]
    final_state: Optional[SamplerState] = None

    @property
    def n_draws(self) -> int:
        return int(self.omega.shape[0])

    @property
    def m(self) -> int:
        return len(self.ids)

    # -- persistence ---------------------------------------------------

    def column_header(self) -> List[str]:
        cols = [
            "iter", "deviance", "omega", "mu0", "mu1", "mu2",
            "SigmaB.1.1", "SigmaB.1.2", "SigmaB.1.3",
            "SigmaB.2.2", "SigmaB.2.3", "SigmaB.3.3",
            "mu_gamma", "mu_tau",
            "SigmaA.1.1", "SigmaA.1.2", "SigmaA.2.2",
            "mu_tauA", "sigma2_tauA",
        ]
        cols += [f"phi.{k + 1}" for k in range(self.p)]
        for pid in self.ids:
            cols += [
                f"beta0.{pid}", f"beta1.{pid}", f"beta2.{pid}",
                f"gamma.{pid}", f"tau.{pid}", f"I.{pid}", f"sigma2.{pid}",
            ]
        return cols

    def save_csv(self, path) -> None:
        """Flattened draws, one row per retained iteration.

        Floats are written with ``repr`` so files round-trip bit-exactly.
        """
        S = self.n_draws
        header = self.column_header()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for s in range(S):
                row = [
                    str(s + 1),
                    repr(float(self.deviance[s])),
                    repr(float(self.omega[s])),
                    repr(float(self.mu_beta[s, 0])),
                    repr(float(self.mu_beta[s, 1])),
                    repr(float(self.mu_beta[s, 2])),
                    repr(float(self.Sigma_beta[s, 0, 0])),
                    repr(float(self.Sigma_beta[s, 0, 1])),
                    repr(float(self.Sigma_beta[s, 0, 2])),
                    repr(float(self.Sigma_beta[s, 1, 1])),
                    repr(float(self.Sigma_beta[s, 1, 2])),
                    repr(float(self.Sigma_beta[s, 2, 2])),
                    repr(float(self.mu_alpha[s, 0])),
                    repr(float(self.mu_alpha[s, 1])),
                    repr(float(self.Sigma_alpha[s, 0, 0])),
                    repr(float(self.Sigma_alpha[s, 0, 1])),
                    repr(float(self.Sigma_alpha[s, 1, 1])),
                    repr(float(self.mu_tauA[s])),
                    repr(float(self.sigma2_tauA[s])),
                ]
                row += [repr(float(v)) for v in self.phi[s]]
                for i in range(self.m):
                    row += [
                        repr(float(self.beta[s, i, 0])),
                        repr(float(self.beta[s, i, 1])),
                        repr(float(self.beta[s, i, 2])),
                        repr(float(self.gamma[s, i])),
                        repr(float(self.tau[s, i])),
                        str(int(self.indicator[s, i])),
                        repr(float(self.sigma2[s, i])),
                    ]
                fh.write(",".join(row) + "\n")

    def meta_dict(self) -> dict:
        return {
            "ids": list(self.ids),
            "p": self.p,
            "variant": self.variant,
            "seed": self.seed,
            "settings": {
                "iters": self.settings.iters,
                "burnin": self.settings.burnin,
                "thin": self.settings.thin,
                "seed": self.settings.seed,
                "adapt_every": self.settings.adapt_every,
                "adapt_target": self.settings.adapt_target,
                "step_init": self.settings.step_init,
            },
            "alpha_accept_rate": self.alpha_accept_rate.tolist(),
            "indicator_flips": self.indicator_flips.tolist(),
            "stationarity_proportion": self.stationarity_proportion,
        }

    @classmethod
    def load_csv(cls, path, meta: Optional[dict] = None) -> "ChainOutput":
        """Rebuild a chain from its CSV (and optionally its meta mapping)."""
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            raw = np.loadtxt(fh, delimiter=",", ndmin=2)
        if raw.size == 0:
            raise SamplerError(f"chain file {path} holds no draws")
        col = {name: k for k, name in enumerate(header)}
        ids = [c.split(".", 1)[1] for c in header if c.startswith("beta0.")]
        p = sum(1 for c in header if c.startswith("phi."))
        S, m = raw.shape[0], len(ids)
        Sb = np.empty((S, 3, 3))
        for (a, b) in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)):
            Sb[:, a, b] = Sb[:, b, a] = raw[:, col[f"SigmaB.{a + 1}.{b + 1}"]]
        Sa = np.empty((S, 2, 2))
        for (a, b) in ((0, 0), (0, 1), (1, 1)):
            Sa[:, a, b] = Sa[:, b, a] = raw[:, col[f"SigmaA.{a + 1}.{b + 1}"]]
        def per_id(prefix):
            return np.column_stack([raw[:, col[f"{prefix}.{pid}"]] for pid in ids])
        meta = meta or {}
        settings = meta.get("settings")
        settings = ChainSettings(**settings) if settings else ChainSettings(
            iters=S + 1, burnin=0, thin=1
        )
        beta = np.stack([per_id("beta0"), per_id("beta1"), per_id("beta2")], axis=2)
        return cls(
            ids=ids,
            p=p,
            variant=meta.get("variant", "flexible"),
            seed=meta.get("seed", settings.seed),
            settings=settings,
            omega=raw[:, col["omega"]],
            mu_beta=np.column_stack([raw[:, col[f"mu{j}"]] for j in range(3)]),
            Sigma_beta=Sb,
            mu_alpha=np.column_stack([raw[:, col["mu_gamma"]], raw[:, col["mu_tau"]]]),
            Sigma_alpha=Sa,
            mu_tauA=raw[:, col["mu_tauA"]],
            sigma2_tauA=raw[:, col["sigma2_tauA"]],
            phi=np.column_stack([raw[:, col[f"phi.{k + 1}"]] for k in range(p)])
            if p else np.zeros((S, 0)),
            beta=beta,
            gamma=per_id("gamma"),
            tau=per_id("tau"),
            indicator=per_id("I").astype(np.int8),
            sigma2=per_id("sigma2"),
            deviance=raw[:, col["deviance"]],
            alpha_accept_rate=np.asarray(meta.get("alpha_accept_rate", np.full(m, np.nan))),
            indicator_flips=np.asarray(meta.get("indicator_flips", np.zeros(m, int))),
            stationarity_proportion=meta.get("stationarity_proportion"),
        )


# ---------------------------------------------------------------------------
# Linear-algebra helpers
# ---------------------------------------------------------------------------


def _chol_jittered(mat: np.ndarray) -> Optional[np.ndarray]:
    """Cholesky with a single trace-scaled jitter retry; None if hopeless."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    bump = 1e-10 * max(float(np.trace(mat)), 1.0)
    try:
        return np.linalg.cholesky(mat + bump * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        return None


def _wishart_draw(rng: np.random.Generator, df: float, inv_scale_chol: np.ndarray) -> np.ndarray:
    """Draw W(df, scale) by Bartlett where ``inv_scale_chol`` is chol(scale^-1).

    With M = scale^-1 = L L', the factor C = L^-T satisfies C C' = scale.
    """
    d = inv_scale_chol.shape[0]
    A = np.zeros((d, d))
    for i in range(d):
        A[i, i] = math.sqrt(rng.chisquare(df - i))
    idx = np.tril_indices(d, k=-1)
    A[idx] = rng.standard_normal(len(idx[0]))
    C = np.linalg.solve(inv_scale_chol.T, np.eye(d))
    CA = C @ A
    return CA @ CA.T


def _precision_draw(rng: np.random.Generator, prec: np.ndarray, lin: np.ndarray):
    """Draw from N(prec^-1 lin, prec^-1); None when prec is not SPD."""
    L = _chol_jittered(prec)
    if L is None:
        return None
    mean = np.linalg.solve(prec, lin)
    return mean + np.linalg.solve(L.T, rng.standard_normal(prec.shape[0]))


# ---------------------------------------------------------------------------
# The engine
# ---------------------------------------------------------------------------


class BentCableSampler:
    """Bound to one dataset + hyperparameters; owns per-sweep caches.

    The object holds the padded data arrays and the current bend-basis and
    AR-design caches.  ``set_state`` installs a state and rebuilds the caches;
    ``sweep`` advances the installed state in place.
    """

    def __init__(
        self,
        dataset: LongitudinalDataset,
        hyper: Hyperparameters,
        p: int,
        variant: str = "flexible",
        step_init: float = 0.25,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if hyper.p != p:
            raise ValueError(
                f"hyperparameters are sized for AR({hyper.p}), requested AR({p})"
            )
        for prof in dataset.profiles:
            if prof.n <= p:
                raise ValueError(
                    f"profile {prof.id!r} has {prof.n} observations; AR({p}) needs more"
                )
        self.dataset = dataset
        self.hyper = hyper
        self.p = int(p)
        self.variant = variant
        m = dataset.m
        self.m = m
        ns = np.array(dataset.n, dtype=int)
        self.n_obs = ns
        self.n_eff = ns - p
        nmax = int(ns.max())
        self.nmax = nmax

        self.T = np.zeros((m, nmax))
        self.Y = np.zeros((m, nmax))
        self.mask = np.zeros((m, nmax))
        for i, prof in enumerate(dataset.profiles):
            self.T[i, : prof.n] = prof.times
            self.T[i, prof.n :] = prof.times[-1]  # keep bend_basis finite on pads
            self.Y[i, : prof.n] = prof.responses
            self.mask[i, : prof.n] = 1.0
        self.maskp = self.mask[:, p:]

        # hyperparameter precomputations
        h = hyper
        self._H1_inv = np.linalg.inv(h.H1)
        self._H1_inv_h1 = self._H1_inv @ h.h1
        self._H2_inv = np.linalg.inv(h.H2)
        self._H2_inv_h2 = self._H2_inv @ h.h2
        if p > 0:
            self._H3_inv = np.linalg.inv(h.H3)
            self._H3_inv_h3 = self._H3_inv @ h.h3
        self._a1_inv = 1.0 / h.a1
        self._nu1_A1 = h.nu1 * h.A1
        self._nu2_A2 = h.nu2 * h.A2

        # Metropolis step scales (log coordinates), adapted during burn-in
        self.log_step = np.full(m, np.log(step_init))
        self._adapt_accepts = np.zeros(m)
        self._adapt_attempts = 0

        self.chol_failures = 0
        self.state: Optional[SamplerState] = None

    # -- state installation and caches ----------------------------------

    def set_state(self, state: SamplerState) -> None:
        state.check_indicator_consistency()
        self.state = state
        self._refresh_population_cache()
        self._refresh_ar_design()
        self._refresh_bend()

    def set_responses(self, responses: List[np.ndarray]) -> None:
        """Swap the response series (used by joint-distribution tests)."""
        for i, y in enumerate(responses):
            self.Y[i, : self.n_obs[i]] = y
        self._refresh_ar_design()

    def _refresh_population_cache(self) -> None:
        st = self.state
        self._Sb_inv = np.linalg.inv(st.Sigma_beta)
        self._Sa_inv = np.linalg.inv(st.Sigma_alpha)
        sign, logdet = np.linalg.slogdet(st.Sigma_alpha)
        self._Sa_logdet = float(logdet)

    def _refresh_ar_design(self) -> None:
        p, st = self.p, self.state
        if p == 0:
            self.z = self.Y * self.mask
            self.x = self.T * self.mask
            c0 = 1.0
        else:
            z = self.Y[:, p:].copy()
            x = self.T[:, p:].copy()
            for k in range(1, p + 1):
                z -= st.phi[k - 1] * self.Y[:, p - k : self.nmax - k]
                x -= st.phi[k - 1] * self.T[:, p - k : self.nmax - k]
            self.z = z * self.maskp
            self.x = x * self.maskp
            c0 = 1.0 - float(st.phi.sum())
        self.c0col = c0 * self.maskp
        if self.state is not None and hasattr(self, "qfull"):
            self.r = self._r_from_q(self.qfull)

    def _refresh_bend(self) -> None:
        st = self.state
        self.qfull = bend_basis(self.T, st.gamma[:, None], st.tau[:, None])
        self.r = self._r_from_q(self.qfull)

    def _r_from_q(self, qfull: np.ndarray) -> np.ndarray:
        p = self.p
        if p == 0:
            return qfull * self.mask
        r = qfull[:, p:].copy()
        for k in range(1, p + 1):
            r -= self.state.phi[k - 1] * qfull[:, p - k : self.nmax - k]
        return r * self.maskp

    def _ssr(self, beta: np.ndarray, r: np.ndarray) -> np.ndarray:
        resid = (
            self.z
            - beta[:, 0, None] * self.c0col
            - beta[:, 1, None] * self.x
            - beta[:, 2, None] * r
        )
        return np.einsum("ij,ij->i", resid, resid)

    def deviance(self) -> float:
        """Conditional deviance (-2 log likelihood) at the current state."""
        st = self.state
        ssr = self._ssr(st.beta, self.r)
        return float(
            np.sum(self.n_eff * (_LOG_2PI + np.log(st.sigma2)) + ssr / st.sigma2)
        )

    # -- individual-level updates ----------------------------------------

    def update_betas(self, rng: np.random.Generator) -> None:
        st = self.state
        X = np.stack((self.c0col, self.x, self.r), axis=2)
        XtX = np.einsum("mij,mik->mjk", X, X)
        Xtz = np.einsum("mij,mi->mj", X, self.z)
        inv_s2 = 1.0 / st.sigma2
        prec = XtX * inv_s2[:, None, None] + self._Sb_inv[None, :, :]
        lin = Xtz * inv_s2[:, None] + (self._Sb_inv @ st.mu_beta)[None, :]
        try:
            L = np.linalg.cholesky(prec)
            mean = np.linalg.solve(prec, lin[:, :, None])[:, :, 0]
            eta = rng.standard_normal((self.m, 3))
            st.beta = mean + np.linalg.solve(np.transpose(L, (0, 2, 1)), eta[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            eta = rng.standard_normal((self.m, 3))
            for i in range(self.m):
                draw = _precision_draw_given(prec[i], lin[i], eta[i])
                if draw is None:
                    self.chol_failures += 1
                else:
                    st.beta[i] = draw

    def _alpha_prior_quad(self, log_gamma, log_tau, indicator):
        """-2 log prior kernel of the bend coordinates, per individual."""
        st = self.state
        a, b, c = self._Sa_inv[0, 0], self._Sa_inv[0, 1], self._Sa_inv[1, 1]
        dg = log_gamma - st.mu_alpha[0]
        dt = log_tau - st.mu_alpha[1]
        quad_g = a * dg * dg + 2.0 * b * dg * dt + c * dt * dt
        quad_a = (log_tau - st.mu_tauA) ** 2 / st.sigma2_tauA
        return np.where(indicator == 1, quad_g, quad_a)

    def update_alphas(self, rng: np.random.Generator) -> np.ndarray:
        """Random-walk Metropolis on (log gamma, log tau) or log tau alone.

        Returns the per-individual acceptance mask.
        """
        st = self.state
        grad = st.indicator == 1
        lg = np.where(grad, np.log(np.where(grad, st.gamma, 1.0)), 0.0)
        lt = np.log(st.tau)
        step = np.exp(self.log_step)
        eps = rng.standard_normal((self.m, 2)) * step[:, None]
        lg_prop = lg + eps[:, 0]
        lt_prop = lt + eps[:, 1]
        in_box = (np.abs(lt_prop) < _LOG_BOX) & (~grad | (np.abs(lg_prop) < _LOG_BOX))

        gamma_prop = np.where(grad, np.exp(np.clip(lg_prop, -_LOG_BOX, _LOG_BOX)), 0.0)
        tau_prop = np.exp(np.clip(lt_prop, -_LOG_BOX, _LOG_BOX))
        q_prop = bend_basis(self.T, gamma_prop[:, None], tau_prop[:, None])
        r_prop = self._r_from_q(q_prop)

        ssr_cur = self._ssr(st.beta, self.r)
        ssr_prop = self._ssr(st.beta, r_prop)
        quad_cur = self._alpha_prior_quad(lg, lt, st.indicator)
        quad_prop = self._alpha_prior_quad(lg_prop, lt_prop, st.indicator)
        log_ratio = -0.5 * ((ssr_prop - ssr_cur) / st.sigma2 + quad_prop - quad_cur)

        accept = in_box & (np.log(rng.random(self.m)) < log_ratio)
        if np.any(accept):
            st.gamma = np.where(accept & grad, gamma_prop, st.gamma)
            st.tau = np.where(accept, tau_prop, st.tau)
            self.qfull[accept] = q_prop[accept]
            self.r[accept] = r_prop[accept]
        self._adapt_accepts += accept
        self._adapt_attempts += 1
        return accept

    def update_indicators(
        self, rng: np.random.Generator, protect_nonempty: bool = False
    ) -> np.ndarray:
        """One reversible between-population proposal per individual.

        An abrupt individual proposes a bend width drawn from the gradual
        population's marginal log-width slice, keeping its transition centre;
        a gradual one proposes collapsing the width to zero.  The acceptance
        ratio combines the likelihood change, the mixing-weight odds, and the
        exact prior/proposal density correction, so detailed balance holds
        with respect to the joint posterior.  Returns the flip mask.

        ``protect_nonempty`` cancels flips that would empty either population;
        it is a burn-in-only warm-up aid (an emptied population's location and
        scale revert to their vague priors, whose draws are so diffuse that
        re-entry can stall for thousands of sweeps) and must be off for
        retained draws.
        """
        st = self.state
        if self.variant != "flexible":
            return np.zeros(self.m, dtype=bool)
        to_g = st.indicator == 0
        grad = ~to_g
        mu_g = st.mu_alpha[0]
        s11 = st.Sigma_alpha[0, 0]
        lt = np.log(st.tau)

        u_new = mu_g + math.sqrt(s11) * rng.standard_normal(self.m)
        lg_cur = np.where(grad, np.log(np.where(grad, st.gamma, 1.0)), 0.0)
        u_used = np.where(to_g, u_new, lg_cur)
        in_box = np.abs(u_used) < _LOG_BOX

        gamma_prop = np.where(to_g, np.exp(np.clip(u_used, -_LOG_BOX, _LOG_BOX)), 0.0)
        q_prop = bend_basis(self.T, gamma_prop[:, None], st.tau[:, None])
        r_prop = self._r_from_q(q_prop)
        ssr_cur = self._ssr(st.beta, self.r)
        ssr_prop = self._ssr(st.beta, r_prop)

        # log N2((u, v); mu_alpha, Sigma_alpha) - log N(u; mu_gamma, S11)
        # - log N(v; mu_tauA, sigma2_tauA); the 2*pi powers cancel.
        a, b, c = self._Sa_inv[0, 0], self._Sa_inv[0, 1], self._Sa_inv[1, 1]
        dg = u_used - mu_g
        dt = lt - st.mu_alpha[1]
        log_n2 = -0.5 * (self._Sa_logdet + a * dg * dg + 2 * b * dg * dt + c * dt * dt)
        log_slice = -0.5 * (math.log(s11) + dg * dg / s11)
        dta = lt - st.mu_tauA
        log_na = -0.5 * (math.log(st.sigma2_tauA) + dta * dta / st.sigma2_tauA)

        with np.errstate(divide="ignore"):
            log_odds = math.log(st.omega) - math.log1p(-st.omega) if 0 < st.omega < 1 else (
                np.inf if st.omega >= 1 else -np.inf
            )
        direction = np.where(to_g, 1.0, -1.0)
        log_ratio = (
            -0.5 * (ssr_prop - ssr_cur) / st.sigma2
            + direction * (log_odds + log_n2 - log_slice - log_na)
        )
        accept = in_box & (np.log(rng.random(self.m)) < log_ratio)
        if protect_nonempty and np.any(accept):
            ind_new = np.where(accept, 1 - st.indicator, st.indicator)
            if not np.any(ind_new == 0):
                accept &= ~to_g
            if not np.any(ind_new == 1):
                accept &= to_g
        if np.any(accept):
            st.indicator = np.where(accept, 1 - st.indicator, st.indicator)
            st.gamma = np.where(accept, gamma_prop, st.gamma)
            self.qfull[accept] = q_prop[accept]
            self.r[accept] = r_prop[accept]
        return accept

    def update_sigma2(self, rng: np.random.Generator) -> None:
        st = self.state
        ssr = self._ssr(st.beta, self.r)
        shape = 0.5 * (self.n_eff + self.hyper.d0)
        rate = 0.5 * (ssr + self.hyper.d1)
        # floor keeps near-improper prior draws representable in float64
        st.sigma2 = 1.0 / np.maximum(rng.gamma(shape, 1.0 / rate), 1e-300)

    # -- population-level updates ------------------------------------------

    def update_mu_beta(self, rng: np.random.Generator) -> None:
        st = self.state
        prec = self.m * self._Sb_inv + self._H1_inv
        lin = self._Sb_inv @ st.beta.sum(axis=0) + self._H1_inv_h1
        draw = _precision_draw(rng, prec, lin)
        if draw is None:
            self.chol_failures += 1
        else:
            st.mu_beta = draw

    def update_Sigma_beta(self, rng: np.random.Generator) -> None:
        st = self.state
        dev = st.beta - st.mu_beta
        inv_scale = dev.T @ dev + self._nu1_A1
        L = _chol_jittered(inv_scale)
        if L is None:
            self.chol_failures += 1
            return
        prec = _wishart_draw(rng, self.m + self.hyper.nu1, L)
        cov = np.linalg.inv(prec)
        st.Sigma_beta = 0.5 * (cov + cov.T)
        self._Sb_inv = 0.5 * (prec + prec.T)

    def update_mu_alpha(self, rng: np.random.Generator) -> None:
        st = self.state
        grad = st.indicator == 1
        m_g = int(grad.sum())
        xi_sum = np.zeros(2)
        if m_g:
            xi_sum[0] = np.log(st.gamma[grad]).sum()
            xi_sum[1] = np.log(st.tau[grad]).sum()
        prec = m_g * self._Sa_inv + self._H2_inv
        lin = self._Sa_inv @ xi_sum + self._H2_inv_h2
        draw = _precision_draw(rng, prec, lin)
        if draw is None:
            self.chol_failures += 1
        else:
            st.mu_alpha = draw

    def update_Sigma_alpha(self, rng: np.random.Generator) -> None:
        st = self.state
        grad = st.indicator == 1
        m_g = int(grad.sum())
        S = np.zeros((2, 2))
        if m_g:
            xi = np.column_stack((np.log(st.gamma[grad]), np.log(st.tau[grad])))
            dev = xi - st.mu_alpha
            S = dev.T @ dev
        L = _chol_jittered(S + self._nu2_A2)
        if L is None:
            self.chol_failures += 1
            return
        prec = _wishart_draw(rng, m_g + self.hyper.nu2, L)
        cov = np.linalg.inv(prec)
        st.Sigma_alpha = 0.5 * (cov + cov.T)
        self._Sa_inv = 0.5 * (prec + prec.T)
        sign, logdet = np.linalg.slogdet(st.Sigma_alpha)
        self._Sa_logdet = float(logdet)

    def update_mu_tauA(self, rng: np.random.Generator) -> None:
        st = self.state
        abrupt = st.indicator == 0
        m_a = int(abrupt.sum())
        kappa_sum = float(np.log(st.tau[abrupt]).sum()) if m_a else 0.0
        prec = m_a / st.sigma2_tauA + self._a1_inv
        mean = (kappa_sum / st.sigma2_tauA + self._a1_inv * self.hyper.a0) / prec
        st.mu_tauA = float(mean + rng.standard_normal() / math.sqrt(prec))

    def update_sigma2_tauA(self, rng: np.random.Generator) -> None:
        st = self.state
        abrupt = st.indicator == 0
        m_a = int(abrupt.sum())
        ss = float(((np.log(st.tau[abrupt]) - st.mu_tauA) ** 2).sum()) if m_a else 0.0
        shape = 0.5 * (m_a + self.hyper.b0)
        rate = 0.5 * (ss + self.hyper.b1)
        st.sigma2_tauA = float(1.0 / max(rng.gamma(shape, 1.0 / rate), 1e-300))

    def update_omega(self, rng: np.random.Generator) -> None:
        st = self.state
        m_g = int((st.indicator == 1).sum())
        st.omega = float(rng.beta(m_g + self.hyper.c0, (self.m - m_g) + self.hyper.c1))

    def update_phi(self, rng: np.random.Generator) -> bool:
        """Draw the AR coefficients; returns the stationarity flag.

        The draw is kept whether or not it is stationary; the flag feeds the
        chain-level stationarity proportion.
        """
        st = self.state
        p = self.p
        if p == 0:
            return True
        eps = (
            self.Y
            - st.beta[:, 0, None]
            - st.beta[:, 1, None] * self.T
            - st.beta[:, 2, None] * self.qfull
        ) * self.mask
        W = np.stack(
            [eps[:, p - k : self.nmax - k] for k in range(1, p + 1)], axis=2
        ) * self.maskp[:, :, None]
        target = eps[:, p:]
        inv_s2 = 1.0 / st.sigma2
        prec = np.einsum("mij,mik,m->jk", W, W, inv_s2) + self._H3_inv
        lin = np.einsum("mij,mi,m->j", W, target, inv_s2) + self._H3_inv_h3
        draw = _precision_draw(rng, prec, lin)
        if draw is None:
            self.chol_failures += 1
        else:
            st.phi = draw
            self._refresh_ar_design()
        return ar_stationary(st.phi)

    # -- sweep driver -------------------------------------------------------

    def sweep(self, rng: np.random.Generator, protect_nonempty: bool = False):
        """One full scan over all conditionals; returns (alpha_accept_mask,
        indicator_flip_mask, phi_stationary).

        A currently-empty population's location/scale parameters are frozen
        instead of redrawn: under vague hyperpriors the prior draws are so
        extreme they block re-entry for thousands of sweeps.  Freezing keeps
        the exact posterior invariant (the identity kernel is invariant, and
        neither kernel moves the state across the empty/non-empty boundary).
        """
        st = self.state
        self.update_betas(rng)
        alpha_acc = self.update_alphas(rng)
        flips = self.update_indicators(rng, protect_nonempty)
        self.update_sigma2(rng)
        self.update_mu_beta(rng)
        self.update_Sigma_beta(rng)
        m_g = int((st.indicator == 1).sum())
        if m_g >= 1:
            self.update_mu_alpha(rng)
            self.update_Sigma_alpha(rng)
        if self.m - m_g >= 1:
            self.update_mu_tauA(rng)
            self.update_sigma2_tauA(rng)
        self.update_omega(rng)
        stationary = self.update_phi(rng)
        return alpha_acc, flips, stationary

    def adapt_step(self, target: float) -> None:
        """Robbins-Monro nudge of the log step scales toward ``target``."""
        if self._adapt_attempts == 0:
            return
        rates = self._adapt_accepts / self._adapt_attempts
        self.log_step = np.clip(self.log_step + (rates - target), np.log(1e-8), np.log(10.0))
        self._adapt_accepts[:] = 0.0
        self._adapt_attempts = 0

    # -- initialization ------------------------------------------------------

    def init_state(self) -> SamplerState:
        """Deterministic warm start from coarse grid fits of each profile."""
        ds = self.dataset
        t_lo, t_hi = ds.time_range()
        span = max(t_hi - t_lo, 1e-12)
        width_floor = 0.02 * span

        betas, gammas, taus, sig2 = [], [], [], []
        for prof in ds.profiles:
            fit = grid_profile_fit(prof.times, prof.responses)
            betas.append(fit.beta)
            gammas.append(fit.gamma)
            taus.append(max(fit.tau, 1e-6))
            dof = max(prof.n - 5, 1)
            sig2.append(max(fit.rss / dof, 1e-12))
        beta = np.asarray(betas)
        gamma = np.asarray(gammas)
        tau = np.asarray(taus)
        sigma2 = np.asarray(sig2)

        if self.variant == "g-only":
            indicator = np.ones(self.m, dtype=np.int8)
            gamma = np.maximum(gamma, width_floor)
        elif self.variant == "a-only":
            indicator = np.zeros(self.m, dtype=np.int8)
            gamma = np.zeros(self.m)
        else:
            indicator = (gamma > width_floor).astype(np.int8)
            gamma = np.where(indicator == 1, np.maximum(gamma, 1e-12), 0.0)

        if self.m > 1:
            cov = np.cov(beta.T)
            # relative ridge: few profiles give rank-deficient covariances
            ridge = max(1e-6 * float(np.trace(cov)) / 3.0, 1e-8)
            Sigma_beta = _spd_or_jitter(cov + ridge * np.eye(3))
        else:
            Sigma_beta = np.eye(3)
        if not np.all(np.isfinite(Sigma_beta)):
            Sigma_beta = np.eye(3)
        mu_beta = beta.mean(axis=0)

        grad = indicator == 1
        if grad.sum() >= 2:
            xi = np.column_stack((np.log(gamma[grad]), np.log(tau[grad])))
            mu_alpha = xi.mean(axis=0)
            Sigma_alpha = _bounded_cov(np.cov(xi.T))
        else:
            mu_alpha = np.array([np.log(max(width_floor, 1e-6)), np.log(tau.mean())])
            Sigma_alpha = 0.25 * np.eye(2)
        abrupt = ~grad
        if abrupt.sum() >= 1:
            kappa = np.log(tau[abrupt])
            mu_tauA = float(kappa.mean())
            sigma2_tauA = float(max(kappa.var(), 1e-4)) if abrupt.sum() > 1 else 0.25
        else:
            mu_tauA = float(np.log(tau.mean()))
            sigma2_tauA = 0.25

        omega = float(np.clip(grad.mean(), 0.02, 0.98))
        state = SamplerState(
            beta=beta,
            gamma=gamma,
            tau=tau,
            indicator=indicator,
            sigma2=sigma2,
            mu_beta=mu_beta,
            Sigma_beta=Sigma_beta,
            mu_alpha=mu_alpha,
            Sigma_alpha=Sigma_alpha,
            mu_tauA=mu_tauA,
            sigma2_tauA=sigma2_tauA,
            omega=omega,
            phi=np.zeros(self.p),
        )
        return state


def _precision_draw_given(prec, lin, eta):
    L = _chol_jittered(prec)
    if L is None:
        return None
    mean = np.linalg.solve(prec, lin)
    return mean + np.linalg.solve(L.T, eta)


def _bounded_cov(cov: np.ndarray, lo: float = 1e-3, hi: float = 0.5) -> np.ndarray:
    """Clamp a 2x2 covariance's variances into [lo, hi], keeping correlations.

    Warm-start covariances from coarse per-profile fits can be wildly inflated
    by misclassified profiles; starting the chain with a huge transition
    spread seeds a metastable everything-is-gradual labeling.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    var = np.clip(np.diag(cov), lo, hi)
    sd_old = np.sqrt(np.maximum(np.diag(cov), 1e-300))
    corr = cov / np.outer(sd_old, sd_old)
    corr = np.clip(corr, -0.95, 0.95)
    np.fill_diagonal(corr, 1.0)
    sd = np.sqrt(var)
    return _spd_or_jitter(corr * np.outer(sd, sd))


# ---------------------------------------------------------------------------
# Chain driver
# ---------------------------------------------------------------------------


def run_chain(
    dataset: LongitudinalDataset,
    hyper: Hyperparameters,
    p: int,
    settings: ChainSettings,
    variant: str = "flexible",
    init_state: Optional[SamplerState] = None,
    check_consistency: bool = False,
) -> ChainOutput:
    """Run one chain and return its thinned draws and diagnostics.

    Given identical inputs and seed the output is bit-identical.  A chain
    aborts if more than 0.1% of iterations needed a failed linear-algebra
    rescue.
    """
    warn_if_unequal_spacing(dataset, p)
    engine = BentCableSampler(dataset, hyper, p, variant, step_init=settings.step_init)
    rng = np.random.default_rng(settings.seed)
    state = init_state.copy() if init_state is not None else engine.init_state()
    engine.set_state(state)
    m = engine.m

    S = settings.n_draws
    out_omega = np.empty(S)
    out_mu_beta = np.empty((S, 3))
    out_Sigma_beta = np.empty((S, 3, 3))
    out_mu_alpha = np.empty((S, 2))
    out_Sigma_alpha = np.empty((S, 2, 2))
    out_mu_tauA = np.empty(S)
    out_s2_tauA = np.empty(S)
    out_phi = np.empty((S, p))
    out_beta = np.empty((S, m, 3))
    out_gamma = np.empty((S, m))
    out_tau = np.empty((S, m))
    out_ind = np.empty((S, m), dtype=np.int8)
    out_sigma2 = np.empty((S, m))
    out_dev = np.empty(S)

    alpha_accepts = np.zeros(m)
    alpha_attempts = 0
    flips = np.zeros(m, dtype=int)
    stationary_count = 0
    post_sweeps = 0
    failures_before = engine.chol_failures
    snap = 0

    guard = m > 1 and variant == "flexible"
    for it in range(1, settings.iters + 1):
        burning = it <= settings.burnin
        alpha_acc, flip_mask, stationary = engine.sweep(
            rng, protect_nonempty=burning and guard
        )
        if check_consistency:
            state.check_indicator_consistency()
        if burning:
            if it % settings.adapt_every == 0:
                engine.adapt_step(settings.adapt_target)
        else:
            post_sweeps += 1
            alpha_accepts += alpha_acc
            alpha_attempts += 1
            flips += flip_mask
            stationary_count += bool(stationary)
            since = it - settings.burnin
            if since % settings.thin == 0 and snap < S:
                out_omega[snap] = state.omega
                out_mu_beta[snap] = state.mu_beta
                out_Sigma_beta[snap] = state.Sigma_beta
                out_mu_alpha[snap] = state.mu_alpha
                out_Sigma_alpha[snap] = state.Sigma_alpha
                out_mu_tauA[snap] = state.mu_tauA
                out_s2_tauA[snap] = state.sigma2_tauA
                out_phi[snap] = state.phi
                out_beta[snap] = state.beta
                out_gamma[snap] = state.gamma
                out_tau[snap] = state.tau
                out_ind[snap] = state.indicator
                out_sigma2[snap] = state.sigma2
                out_dev[snap] = engine.deviance()
                snap += 1
        if it % 1000 == 0:
            _check_failure_budget(engine.chol_failures - failures_before, it)
    _check_failure_budget(engine.chol_failures - failures_before, settings.iters)

    return ChainOutput(
        ids=dataset.ids,
        p=p,
        variant=variant,
        seed=settings.seed,
        settings=settings,
        omega=out_omega,
        mu_beta=out_mu_beta,
        Sigma_beta=out_Sigma_beta,
        mu_alpha=out_mu_alpha,
        Sigma_alpha=out_Sigma_alpha,
        mu_tauA=out_mu_tauA,
        sigma2_tauA=out_s2_tauA,
        phi=out_phi,
        beta=out_beta,
        gamma=out_gamma,
        tau=out_tau,
        indicator=out_ind,
        sigma2=out_sigma2,
        deviance=out_dev,
        alpha_accept_rate=alpha_accepts / max(alpha_attempts, 1),
        indicator_flips=flips,
        stationarity_proportion=(
            stationary_count / post_sweeps if p > 0 and post_sweeps else None
        ),
        final_state=state,
    )


def _check_failure_budget(failures: int, iters_done: int) -> None:
    # Each sweep performs ~12 decompositions; budget 0.1% of iterations.
    if failures > max(0.001 * iters_done, 2):
        raise NumericalError(
            f"{failures} linear-algebra rescues in {iters_done} iterations; "
            "the posterior is numerically ill-conditioned"
        )
