"""Deviance computation, DIC, and the multi-order comparison protocol."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .data import LongitudinalDataset, ReducedView, reduce_for_dic
from .model import conditional_loglik_arrays
from .priors import Hyperparameters
from .sampler import ChainOutput, ChainSettings, run_chain

__all__ = [
    "DicReport",
    "ModelComparison",
    "conditional_deviance",
    "compute_dic",
    "plug_in_estimates",
    "compare_models",
]


@dataclass(frozen=True)
class DicReport:
    """DIC decomposition for one (AR order, variant) fit."""

    p: int
    variant: str
    dbar: float
    d_at_mean: float

    @property
    def pd(self) -> float:
        return self.dbar - self.d_at_mean

    @property
    def dic(self) -> float:
        return self.dbar + self.pd

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "variant": self.variant,
            "dbar": self.dbar,
            "d_at_mean": self.d_at_mean,
            "pd": self.pd,
            "dic": self.dic,
        }


def conditional_deviance(dataset, beta, gamma, tau, sigma2, phi) -> float:
    """-2 times the conditional log likelihood at the given parameters."""
    profiles = dataset.profile_pairs()
    return -2.0 * conditional_loglik_arrays(profiles, beta, gamma, tau, sigma2, phi)


def plug_in_estimates(chain: ChainOutput):
    """Posterior plug-ins for the deviance-at-the-mean term.

    Cable coefficients, innovation variances and AR coefficients use plain
    posterior means.  Each individual's label is plugged at its posterior
    mode; its bend width is the mean over gradual draws (zero for a modal
    abrupt individual) and its transition centre the mean conditional on the
    modal label.  Mixture posteriors are bimodal across labels, so
    unconditional means would average incompatible geometries.
    """
    S, m = chain.gamma.shape
    beta_hat = chain.beta.mean(axis=0)
    sigma2_hat = chain.sigma2.mean(axis=0)
    phi_hat = chain.phi.mean(axis=0) if chain.p else np.zeros(0)
    grad_frac = chain.indicator.mean(axis=0)
    modal = (grad_frac >= 0.5).astype(int)
    gamma_hat = np.zeros(m)
    tau_hat = np.empty(m)
    for i in range(m):
        sel = chain.indicator[:, i] == modal[i]
        if not np.any(sel):  # degenerate: fall back to all draws
            sel = np.ones(S, dtype=bool)
        tau_hat[i] = chain.tau[sel, i].mean()
        if modal[i] == 1:
            gamma_hat[i] = chain.gamma[sel, i].mean()
    return beta_hat, gamma_hat, tau_hat, sigma2_hat, phi_hat, modal


def compute_dic(chain: ChainOutput, dataset: LongitudinalDataset) -> DicReport:
    """DIC from a chain's deviance trace and its plug-in deviance.

    ``dataset`` must be the (possibly reduced) data the chain was fit on.
    """
    if chain.n_draws == 0:
        raise ValueError("chain holds no draws")
    dbar = float(chain.deviance.mean())
    beta_hat, gamma_hat, tau_hat, sigma2_hat, phi_hat, _ = plug_in_estimates(chain)
    d_hat = conditional_deviance(dataset, beta_hat, gamma_hat, tau_hat, sigma2_hat, phi_hat)
    return DicReport(p=chain.p, variant=chain.variant, dbar=dbar, d_at_mean=d_hat)


@dataclass
class ModelComparison:
    """Ranked DIC reports plus the winner refit on the full data."""

    reports: List[DicReport]
    winner: DicReport
    winner_chain: Optional[ChainOutput] = None


def _fit_one(args):
    dataset, hyper, p, settings, variant = args
    chain = run_chain(dataset, hyper.with_ar_order(p), p, settings, variant=variant)
    return chain


def compare_models(
    dataset: LongitudinalDataset,
    hyper: Hyperparameters,
    p_list: Sequence[int],
    variants: Sequence[str],
    settings: ChainSettings,
    refit_winner: bool = True,
    workers: int = 1,
) -> ModelComparison:
    """Fit every (p, variant) pair on a common response block and rank by DIC.

    Each fit drops the first ``max(p_list) - p`` observations per profile so
    all likelihoods score exactly the same observations; this is asserted
    before ranking.  The winner is refit on the full dataset, since the
    reduction exists only to make the criteria comparable.
    """
    p_list = sorted(set(int(p) for p in p_list))
    if not p_list:
        raise ValueError("p_list is empty")
    p_max = p_list[-1]
    views = {p: reduce_for_dic(dataset, p_max, p) for p in p_list}
    _assert_common_response_block(list(views.values()))

    jobs = []
    for p in p_list:
        for k, variant in enumerate(variants):
            job_settings = ChainSettings(
                iters=settings.iters,
                burnin=settings.burnin,
                thin=settings.thin,
                seed=settings.seed + 1000 * p + k,
                adapt_every=settings.adapt_every,
                adapt_target=settings.adapt_target,
                step_init=settings.step_init,
            )
            jobs.append((views[p].dataset, hyper, p, job_settings, variant))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_fit_one, jobs))
    else:
        chains = [_fit_one(job) for job in jobs]

    reports = [
        compute_dic(chain, job[0]) for chain, job in zip(chains, jobs)
    ]
    reports.sort(key=lambda rep: rep.dic)
    winner = reports[0]
    winner_chain = None
    if refit_winner:
        winner_chain = run_chain(
            dataset,
            hyper.with_ar_order(winner.p),
            winner.p,
            settings,
            variant=winner.variant,
        )
    return ModelComparison(reports=reports, winner=winner, winner_chain=winner_chain)


def _assert_common_response_block(views: List[ReducedView]) -> None:
    ref = views[0].random_index_sets()
    for view in views[1:]:
        if view.random_index_sets() != ref:
            raise AssertionError(
                "reduced views do not share one response block; refusing to compare"
            )
