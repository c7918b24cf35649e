import numpy as np
import pytest

import bentmix.sampler as sampler_mod
from bentmix.data import LongitudinalDataset, Profile
from bentmix.model import bent_cable, BentCableCoefs, TransitionCoefs
from bentmix.priors import default_hyperparameters
from bentmix.sampler import (
    BentCableSampler,
    ChainSettings,
    NumericalError,
    SamplerState,
    _precision_draw,
    _wishart_draw,
    run_chain,
)

BIG = 1e8


def _dataset(m=3, n=20, gamma=4.0, tau=10.0, noise=0.4, seed=0):
    rng = np.random.default_rng(seed)
    profiles = []
    for i in range(m):
        t = np.arange(n, dtype=float)
        y = bent_cable(t, BentCableCoefs(10.0 + i, 0.5, -1.0), TransitionCoefs(gamma, tau))
        profiles.append(Profile(id=f"p{i}", times=t, responses=y + rng.normal(0, noise, n)))
    return LongitudinalDataset(profiles=tuple(profiles))


def _engine(ds, p=0, variant="flexible", **overrides):
    hyper = default_hyperparameters(p, np.eye(3), 0.1 * np.eye(2))
    if overrides:
        hyper = hyper.override(overrides)
    eng = BentCableSampler(ds, hyper, p, variant)
    eng.set_state(eng.init_state())
    return eng


class FakeRNG:
    """Records distribution calls; returns neutral values."""

    def __init__(self):
        self.calls = []

    def gamma(self, shape, scale):
        self.calls.append(("gamma", np.asarray(shape, dtype=float), np.asarray(scale, dtype=float)))
        return np.ones_like(np.asarray(shape, dtype=float))

    def beta(self, a, b):
        self.calls.append(("beta", float(a), float(b)))
        return 0.5

    def standard_normal(self, size=None):
        self.calls.append(("standard_normal", size))
        return 0.0 if size is None else np.zeros(size)

    def random(self, size=None):
        self.calls.append(("random", size))
        return 0.5 if size is None else np.full(size, 0.5)

    def chisquare(self, df):
        self.calls.append(("chisquare", float(df)))
        return float(df)


class TestConjugateFormulas:
    def test_one_dim_precision_weighting(self):
        # scalar prior N(0,1), one observation y=2 with unit noise -> N(1, 0.5)
        rng = np.random.default_rng(0)
        draws = np.array(
            [
                _precision_draw(rng, np.array([[2.0]]), np.array([2.0]))[0]
                for _ in range(20000)
            ]
        )
        assert draws.mean() == pytest.approx(1.0, abs=0.02)
        assert draws.var() == pytest.approx(0.5, rel=0.05)

    def test_beta_update_flat_prior_limit_matches_gls(self):
        ds = _dataset()
        eng = _engine(ds)
        st = eng.state
        st.Sigma_beta = 1e8 * np.eye(3)
        eng._Sb_inv = np.linalg.inv(st.Sigma_beta)
        rng = np.random.default_rng(1)
        draws = []
        keep = st.beta.copy()
        for _ in range(4000):
            st.beta = keep.copy()
            eng.update_betas(rng)
            draws.append(st.beta.copy())
        mean = np.mean(draws, axis=0)
        X = np.stack((eng.c0col, eng.x, eng.r), axis=2)
        for i in range(ds.m):
            gls = np.linalg.lstsq(X[i], eng.z[i], rcond=None)[0]
            assert mean[i] == pytest.approx(gls, abs=0.05)

    def test_beta_update_no_data_limit_matches_prior(self):
        ds = _dataset()
        eng = _engine(ds)
        st = eng.state
        st.sigma2 = np.full(ds.m, 1e12)  # likelihood carries no information
        st.mu_beta = np.array([3.0, -1.0, 2.0])
        st.Sigma_beta = np.diag([0.5, 0.2, 0.1])
        eng._Sb_inv = np.linalg.inv(st.Sigma_beta)
        rng = np.random.default_rng(2)
        draws = []
        for _ in range(6000):
            eng.update_betas(rng)
            draws.append(st.beta[0].copy())
        draws = np.asarray(draws)
        assert draws.mean(axis=0) == pytest.approx(st.mu_beta, abs=0.05)
        assert np.var(draws, axis=0) == pytest.approx(np.diag(st.Sigma_beta), rel=0.1)

    def test_sigma2_gamma_parameters(self):
        # residuals (1,1,1,1), p=0, vague d -> G(2, 2) i.e. scale 1/2
        t = np.arange(4.0)
        profiles = (
            Profile("a", t, np.ones(4)),
            Profile("b", t, np.ones(4)),
        )
        ds = LongitudinalDataset(profiles=profiles)
        hyper = default_hyperparameters(0, np.eye(3), np.eye(2)).override(
            {"d0": 1e-12, "d1": 1e-12}
        )
        eng = BentCableSampler(ds, hyper, 0)
        state = eng.init_state()
        state.beta = np.zeros((2, 3))  # residuals equal the responses
        eng.set_state(state)
        fake = FakeRNG()
        eng.update_sigma2(fake)
        kind, shape, scale = fake.calls[0]
        assert kind == "gamma"
        assert shape == pytest.approx([2.0, 2.0])
        assert 1.0 / scale == pytest.approx([2.0, 2.0])

    def test_sigma2_tauA_prior_when_population_empty(self):
        ds = _dataset()
        eng = _engine(ds, b0=1e-4, b1=1e-4)
        st = eng.state
        st.indicator = np.ones(ds.m, dtype=np.int8)
        st.gamma = np.maximum(st.gamma, 0.5)
        fake = FakeRNG()
        eng.update_sigma2_tauA(fake)
        kind, shape, scale = fake.calls[0]
        assert shape == pytest.approx(5e-5)
        assert 1.0 / scale == pytest.approx(5e-5)

    def test_mu_tauA_prior_when_population_empty(self):
        ds = _dataset()
        eng = _engine(ds, a0=3.25, a1=4.0)
        st = eng.state
        st.indicator = np.ones(ds.m, dtype=np.int8)
        st.gamma = np.maximum(st.gamma, 0.5)
        fake = FakeRNG()  # standard_normal -> 0 gives the conditional mean
        eng.update_mu_tauA(fake)
        assert st.mu_tauA == pytest.approx(3.25, rel=1e-9)

    def test_mu_beta_tight_data_limit(self):
        ds = _dataset()
        eng = _engine(ds, H1=(1e12 * np.eye(3)).tolist())
        st = eng.state
        b = np.array([2.0, -0.5, 1.5])
        st.beta = np.tile(b, (ds.m, 1))
        fake = FakeRNG()
        eng.update_mu_beta(fake)
        assert st.mu_beta == pytest.approx(b, rel=1e-6)

    def test_wishart_df_formulas(self, monkeypatch):
        ds = _dataset(m=5)
        eng = _engine(ds)
        seen = []

        def spy(rng, df, chol):
            seen.append(df)
            return np.eye(chol.shape[0])

        monkeypatch.setattr(sampler_mod, "_wishart_draw", spy)
        rng = np.random.default_rng(0)
        eng.update_Sigma_beta(rng)
        st = eng.state
        st.indicator = np.zeros(ds.m, dtype=np.int8)
        st.gamma = np.zeros(ds.m)
        eng.update_Sigma_alpha(rng)  # empty gradual population -> prior df
        assert seen[0] == 5 + eng.hyper.nu1
        assert seen[1] == eng.hyper.nu2

    def test_omega_beta_parameters(self):
        ds = _dataset(m=20)
        eng = _engine(ds)
        st = eng.state
        st.indicator = np.array([1] * 8 + [0] * 12, dtype=np.int8)
        st.gamma = np.where(st.indicator == 1, 1.0, 0.0)
        fake = FakeRNG()
        eng.update_omega(fake)
        assert ("beta", 9.0, 13.0) in fake.calls

    def test_wishart_prior_mean_matches_convention(self):
        # E[precision] under W(nu1, (nu1 A1)^-1) is A1^-1
        A1 = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, -0.1], [0.0, -0.1, 0.5]])
        nu1 = 3.0
        L = np.linalg.cholesky(nu1 * A1)
        rng = np.random.default_rng(123)
        total = np.zeros((3, 3))
        n = 100000
        for _ in range(n):
            total += _wishart_draw(rng, nu1, L)
        mean = total / n
        target = np.linalg.inv(A1)
        assert np.all(np.abs(mean - target) <= 0.02 * np.abs(target) + 1e-3)


class TestMetropolisMoves:
    def test_identity_proposal_always_accepted(self):
        ds = _dataset()
        eng = _engine(ds)
        eng.log_step = np.full(ds.m, -np.inf)  # zero step: proposal == current
        rng = np.random.default_rng(0)
        acc = eng.update_alphas(rng)
        assert np.all(acc)

    def test_acceptance_depends_only_on_kernel_differences(self):
        # shifting both kernel evaluations by a constant leaves decisions alone
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        ratio = np.random.default_rng(0).normal(size=200)
        a = np.log(rng1.random(200)) < ratio
        b = np.log(rng2.random(200)) < ((ratio + 123.4) - 123.4)
        assert np.array_equal(a, b)

    def test_noiseless_profile_concentrates_at_truth(self):
        gamma, tau = 6.0, 25.0
        ds = _dataset(m=2, n=80, gamma=gamma, tau=tau, noise=1e-6)
        hyper = default_hyperparameters(0, np.eye(3), 0.5 * np.eye(2))
        chain = run_chain(
            ds, hyper, 0, ChainSettings(iters=2000, burnin=500, seed=3)
        )
        tau_mode = np.median(chain.tau[:, 0])
        gamma_mode = np.median(chain.gamma[:, 0])
        assert abs(tau_mode - tau) < 0.1
        assert abs(gamma_mode - gamma) < 0.1

    def test_pinned_mixing_weight_locks_labels(self):
        ds = _dataset(m=4)
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2)).override(
            {"c0": 1e12, "c1": 1e-12}
        )
        eng = BentCableSampler(ds, hyper, 0)
        state = eng.init_state()
        state.indicator = np.ones(4, dtype=np.int8)
        state.gamma = np.maximum(state.gamma, 0.5)
        state.omega = 1.0 - 1e-15
        eng.set_state(state)
        rng = np.random.default_rng(0)
        for _ in range(200):
            eng.sweep(rng)
        assert np.all(eng.state.indicator == 1)

    def test_flat_likelihood_indicator_fraction_approaches_omega(self):
        ds = _dataset(m=8, n=12, noise=0.3)
        s22 = 0.04
        hyper = default_hyperparameters(0, np.eye(3), np.eye(2)).override(
            {
                "d0": 2 * BIG, "d1": 2 * BIG * 1e6,     # sigma2 pinned huge
                "h2": [0.0, 2.0], "H2": (1e-10 * np.eye(2)).tolist(),
                "nu2": BIG, "A2": [[0.09, 0.0], [0.0, s22]],
                "a0": 2.0, "a1": 1e-10,
                "b0": 2 * BIG, "b1": 2 * BIG * s22,     # matched tau laws
                "c0": 0.7 * BIG, "c1": 0.3 * BIG,       # omega pinned at 0.7
            }
        )
        eng = BentCableSampler(ds, hyper, 0)
        state = eng.init_state()
        state.mu_alpha = np.array([0.0, 2.0])
        state.Sigma_alpha = np.array([[0.09, 0.0], [0.0, s22]])
        state.mu_tauA = 2.0
        state.sigma2_tauA = s22
        state.omega = 0.7
        state.sigma2 = np.full(8, 1e6)
        state.tau = np.full(8, np.exp(2.0))
        state.gamma = np.where(state.indicator == 1, 1.0, 0.0)
        eng.set_state(state)
        rng = np.random.default_rng(42)
        frac = []
        for sweep in range(4000):
            eng.sweep(rng)
            if sweep >= 500:
                frac.append(eng.state.indicator.mean())
        assert np.mean(frac) == pytest.approx(0.7, abs=0.05)


class TestRunChain:
    def test_bit_identical_repeat(self):
        ds = _dataset()
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        settings = ChainSettings(iters=400, burnin=100, seed=9)
        a = run_chain(ds, hyper, 0, settings)
        b = run_chain(ds, hyper, 0, settings)
        for name in ("omega", "mu_beta", "beta", "gamma", "tau", "sigma2", "deviance"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_draw_count_with_thinning(self):
        ds = _dataset()
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        chain = run_chain(ds, hyper, 0, ChainSettings(iters=1000, burnin=300, thin=7, seed=1))
        assert chain.n_draws == (1000 - 300) // 7

    def test_indicator_consistency_every_sweep(self):
        ds = _dataset(m=4)
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        chain = run_chain(
            ds, hyper, 0, ChainSettings(iters=500, burnin=100, seed=2),
            check_consistency=True,
        )
        grad = chain.indicator == 1
        assert np.all(chain.gamma[grad] > 0)
        assert np.all(chain.gamma[~grad] == 0.0)

    def test_degenerate_priors_pin_the_chain(self):
        ds = _dataset(m=2, n=10)
        mu_b = [5.0, 0.2, -0.4]
        hyper = default_hyperparameters(0, np.eye(3), np.eye(2)).override(
            {
                "h1": mu_b, "H1": (1e-12 * np.eye(3)).tolist(),
                "nu1": BIG, "A1": (1e-10 * np.eye(3)).tolist(),
                "h2": [0.5, 2.0], "H2": (1e-12 * np.eye(2)).tolist(),
                "nu2": BIG, "A2": (1e-10 * np.eye(2)).tolist(),
                "a0": 2.0, "a1": 1e-12,
                "b0": 2 * BIG, "b1": 2 * BIG * 1e-10,
                "d0": 2 * BIG, "d1": 2 * BIG * 0.5,
                "c0": BIG, "c1": BIG,
            }
        )
        eng = BentCableSampler(ds, hyper, 0)
        state = eng.init_state()
        state.beta = np.tile(mu_b, (2, 1))
        state.mu_beta = np.array(mu_b)
        state.Sigma_beta = 1e-10 * np.eye(3)
        state.mu_alpha = np.array([0.5, 2.0])
        state.Sigma_alpha = 1e-10 * np.eye(2)
        state.mu_tauA = 2.0
        state.sigma2_tauA = 1e-10
        state.gamma = np.where(state.indicator == 1, np.exp(0.5), 0.0)
        state.tau = np.full(2, np.exp(2.0))
        state.sigma2 = np.full(2, 0.5)
        state.omega = 0.5
        chain = run_chain(
            ds, hyper, 0, ChainSettings(iters=400, burnin=100, seed=4), init_state=state
        )
        assert np.allclose(chain.mu_beta, mu_b, atol=1e-3)
        assert np.allclose(chain.mu_alpha, [0.5, 2.0], atol=1e-3)
        assert np.allclose(chain.sigma2, 0.5, atol=2e-3)

    def test_order_zero_has_no_ar_coefficients(self):
        ds = _dataset()
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        chain = run_chain(ds, hyper, 0, ChainSettings(iters=300, burnin=100, seed=0))
        assert chain.phi.shape == (200, 0)
        assert chain.stationarity_proportion is None

    def test_order_one_reports_stationarity(self):
        ds = _dataset(n=30)
        hyper = default_hyperparameters(1, np.eye(3), 0.1 * np.eye(2))
        chain = run_chain(ds, hyper, 1, ChainSettings(iters=300, burnin=100, seed=0))
        assert 0.0 <= chain.stationarity_proportion <= 1.0

    def test_adaptation_happens_only_during_burnin(self, monkeypatch):
        calls = []
        original = BentCableSampler.adapt_step

        def spy(self, target):
            calls.append(target)
            return original(self, target)

        monkeypatch.setattr(BentCableSampler, "adapt_step", spy)
        ds = _dataset()
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        run_chain(ds, hyper, 0, ChainSettings(iters=600, burnin=250, seed=0, adapt_every=50))
        assert len(calls) == 250 // 50

    def test_hyper_order_mismatch_rejected(self):
        ds = _dataset()
        hyper = default_hyperparameters(2, np.eye(3), 0.1 * np.eye(2))
        with pytest.raises(ValueError, match="AR"):
            run_chain(ds, hyper, 1, ChainSettings(iters=200, burnin=50, seed=0))

    def test_csv_round_trip(self, tmp_path):
        ds = _dataset(n=25)
        hyper = default_hyperparameters(1, np.eye(3), 0.1 * np.eye(2))
        chain = run_chain(ds, hyper, 1, ChainSettings(iters=260, burnin=60, seed=7))
        path = tmp_path / "draws.csv"
        chain.save_csv(path)
        again = sampler_mod.ChainOutput.load_csv(path, chain.meta_dict())
        for name in (
            "omega", "mu_beta", "Sigma_beta", "mu_alpha", "Sigma_alpha",
            "mu_tauA", "sigma2_tauA", "phi", "beta", "gamma", "tau",
            "sigma2", "deviance",
        ):
            assert np.array_equal(getattr(chain, name), getattr(again, name)), name
        assert np.array_equal(chain.indicator, again.indicator)
        assert again.ids == chain.ids
        assert again.variant == chain.variant

    def test_variant_fixes_labels(self):
        ds = _dataset(m=4)
        hyper = default_hyperparameters(0, np.eye(3), 0.1 * np.eye(2))
        g = run_chain(ds, hyper, 0, ChainSettings(iters=300, burnin=100, seed=1),
                      variant="g-only")
        assert np.all(g.indicator == 1)
        a = run_chain(ds, hyper, 0, ChainSettings(iters=300, burnin=100, seed=1),
                      variant="a-only")
        assert np.all(a.indicator == 0)
        assert np.all(a.gamma == 0.0)
