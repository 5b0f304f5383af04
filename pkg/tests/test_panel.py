import numpy as np
import pytest
from scipy.special import expit

from psbayes import (
    Dataset,
    MhConfig,
    PanelDataset,
    ResponseModel,
    RngHandle,
    bps_sample,
    cumulative_propensity,
    fit_joint,
    panel_bps,
    panel_fit,
    panel_obps,
    wave_scores,
)
from psbayes.panel import wave_design, wave_score_terms
from psbayes.propensity import response_score
from psbayes.simlab import PanelSimConfig, gen_panel


@pytest.fixture
def small_panel():
    return gen_panel(PanelSimConfig(n=300, waves=3), RngHandle(17)).panel


class TestWaveScores:
    def test_t2_full_response_equals_single_wave_score(self):
        gen = np.random.default_rng(0)
        n = 80
        x = gen.normal(size=(n, 1))
        y = gen.normal(size=(n, 2)) + 1.0
        pds = PanelDataset(x, y, np.ones((n, 2), dtype=np.int8))
        phi = np.array([0.2, -0.3, 0.1])
        got = wave_scores(pds, phi)
        # equivalent cross-sectional score on predictors (1, x, y1)
        model = ResponseModel(link="logit", x_cols=(0, 1))
        expected = response_score(
            model, np.column_stack([x, y[:, 0]]), np.ones(n), phi=phi
        )
        assert np.max(np.abs(got - expected)) < 1e-14

    def test_zero_at_wave_mle(self, small_panel):
        fit = panel_fit(small_panel)
        assert np.max(np.abs(wave_scores(small_panel, np.concatenate(fit.phis)))) <= 1e-8

    def test_hand_built_panel_arithmetic(self):
        x = np.array([[0.5], [-1.0], [2.0], [0.0]])
        delta = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0], [1, 1, 1]], dtype=np.int8)
        y = np.where(delta == 1, np.arange(12, dtype=float).reshape(4, 3) / 3.0, np.nan)
        pds = PanelDataset(x, y, delta)
        phi = np.concatenate([[0.1, 0.2, -0.3], [0.4, -0.1, 0.05]])
        got = wave_score_terms(pds, phi)
        # plain loops, wave by wave, unit by unit
        expected = np.zeros((4, 6))
        for i in range(4):
            for t in (2, 3):
                dstar = int(np.prod(delta[i, : t - 1]))
                lag = y[i, t - 2] if np.isfinite(y[i, t - 2]) else 0.0
                z = np.array([1.0, x[i, 0], lag])
                ph = phi[(t - 2) * 3:(t - 1) * 3]
                pi = 1.0 / (1.0 + np.exp(-float(z @ ph)))
                expected[i, (t - 2) * 3:(t - 1) * 3] = dstar * (delta[i, t - 1] - pi) * z
        assert np.max(np.abs(got - expected)) < 1e-12


class TestCumulativePropensity:
    def test_t2_reduces_to_single_wave(self, small_panel):
        fit = panel_fit(small_panel)
        pds2 = PanelDataset(small_panel.x, small_panel.y[:, :2], small_panel.delta[:, :2])
        fit2 = panel_fit(pds2)
        pi = cumulative_propensity(pds2, fit2.phis[0])
        z = wave_design(pds2, 2)
        direct = expit(z @ fit2.phis[0])
        assert np.max(np.abs(pi - direct)) < 1e-12

    def test_all_near_one(self, small_panel):
        phis = np.concatenate([[40.0, 0.0, 0.0], [40.0, 0.0, 0.0]])
        pi = cumulative_propensity(small_panel, phis)
        assert np.max(np.abs(pi - 1.0)) < 1e-5

    def test_matches_direct_product(self, small_panel):
        gen = np.random.default_rng(2)
        phis = gen.normal(scale=0.3, size=6)
        pi = cumulative_propensity(small_panel, phis)
        direct = np.ones(small_panel.n)
        for t in (2, 3):
            z = wave_design(small_panel, t)
            direct *= expit(z @ phis[(t - 2) * 3:(t - 1) * 3])
        assert np.max(np.abs(pi - direct)) < 1e-12


class TestPanelBps:
    def test_zero_shift_returns_point_estimate(self, small_panel):
        fit = panel_fit(small_panel)
        draws = panel_bps(small_panel, 20, RngHandle(3), mvn_override=lambda s: np.zeros(7))
        assert np.max(np.abs(draws.draws - fit.zeta_hat[None, :])) < 1e-6

    def test_full_retention_theta_is_plain_mean(self):
        gen = np.random.default_rng(5)
        n = 60
        y = gen.normal(size=(n, 3)) + 2.0
        pds = PanelDataset(gen.normal(size=(n, 1)), y, np.ones((n, 3), dtype=np.int8))
        fit = panel_fit(pds)
        assert fit.theta_hat == pytest.approx(float(y[:, 2].mean()), abs=0)
        assert fit.separation

    def test_t2_equals_cross_sectional_bps(self):
        sim = gen_panel(PanelSimConfig(n=400, waves=2), RngHandle(23))
        pds = sim.panel
        # cross-sectional view: covariates (x, y1), outcome y2
        x_cross = np.column_stack([pds.x, pds.y[:, 0]])
        ds = Dataset(x_cross, pds.y[:, 1], pds.delta[:, 1])
        model = ResponseModel(link="logit", x_cols=(0, 1))
        pfit = panel_fit(pds)
        cfit = fit_joint(ds, model)
        assert np.max(np.abs(pfit.zeta_hat - cfit.zeta_hat)) < 1e-7
        pd_draws = panel_bps(pds, 50, RngHandle(9), fit=pfit)
        cd_draws = bps_sample(ds, model, 50, RngHandle(9), fit=cfit)
        assert np.max(np.abs(pd_draws.draws - cd_draws.draws)) < 1e-6

    def test_delta_star_used_not_delta(self):
        # a unit that returns after dropout contributes nothing after the gap
        x = np.array([[0.0], [1.0], [0.2], [-0.4]])
        delta = np.array([[1, 0, 1], [1, 1, 1], [1, 1, 0], [1, 1, 1]], dtype=np.int8)
        y = np.where(delta == 1, 1.0 + np.arange(12, dtype=float).reshape(4, 3) / 5.0, np.nan)
        pds = PanelDataset(x, y, delta)
        fit = panel_fit(pds)
        # drop the returning value entirely: identical fit
        y2 = y.copy()
        delta2 = delta.copy()
        delta2[0, 2] = 0
        y2[0, 2] = np.nan
        fit2 = panel_fit(PanelDataset(x, y2, delta2))
        assert np.max(np.abs(fit.zeta_hat - fit2.zeta_hat)) < 1e-12

    def test_reproducible(self, small_panel):
        a = panel_bps(small_panel, 40, RngHandle(1))
        b = panel_bps(small_panel, 40, RngHandle(1))
        assert (a.draws == b.draws).all()


class TestPanelObps:
    def test_zero_step_degenerates(self, small_panel):
        from psbayes import DegenerateChain

        cfg = MhConfig(burn_in=30, keep=50, proposal_cov=1e-14 * np.eye(8))
        with pytest.raises(DegenerateChain) as err:
            panel_obps(small_panel, cfg, RngHandle(2))
        assert err.value.diagnostics.acceptance_rate > 0.99

    def test_mu_x_centers_on_sample_mean(self, small_panel):
        cfg = MhConfig(burn_in=400, keep=1200)
        draws, diag = panel_obps(small_panel, cfg, RngHandle(4))
        mu = draws.column("mu_x_0")
        assert 0.01 <= diag.acceptance_rate <= 0.99
        assert abs(mu.mean() - small_panel.x[:, 0].mean()) < 3 * mu.std()

    def test_system_dimensions(self, small_panel):
        from psbayes.panel import panel_augmented_system

        sys_ = panel_augmented_system(small_panel)
        assert sys_.p == 1 + 6 + 1
        assert sys_.q == 6 + 1 + 2
