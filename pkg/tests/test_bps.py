import numpy as np
import pytest

from psbayes import (
    Dataset,
    ResponseModel,
    RngHandle,
    Separation,
    TooFewDraws,
    TooManyFailures,
    bps_sample,
    fit_joint,
    hpd,
    ps_taylor,
    summarize,
)
from psbayes.simlab import StudyOneConfig, gen_sim1


class TestFitJoint:
    def test_full_response_boundary(self):
        gen = np.random.default_rng(2)
        ds = Dataset(gen.normal(size=(40, 1)), gen.normal(size=40), np.ones(40, dtype=int))
        fit = fit_joint(ds, ResponseModel(link="logit", x_cols=(0,)))
        assert fit.separation
        assert fit.theta_hat == pytest.approx(float(ds.y.mean()), abs=0)

    def test_consistency_large_n(self):
        sample = gen_sim1(StudyOneConfig("m1", "R1", 100_000, 1), RngHandle(1))
        fit = fit_joint(sample.dataset, ResponseModel(link="logit", x_cols=(0, 1)))
        assert abs(fit.phi_hat[0] - 0.1) < 0.05
        assert abs(fit.phi_hat[1] - 0.4) < 0.05
        assert abs(fit.phi_hat[2]) < 0.05
        assert not fit.separation

    def test_mean_estimate_unbiased_over_reps(self):
        # theta_true = 8 exactly (2*2 + 3*8 - 20); 500 light replications
        model = ResponseModel(link="logit", x_cols=(0, 1))
        ests = []
        for r in range(500):
            sample = gen_sim1(StudyOneConfig("m1", "R1", 500, 1), RngHandle(77, r))
            ests.append(fit_joint(sample.dataset, model).theta_hat)
        ests = np.asarray(ests)
        mc_se = ests.std(ddof=1) / np.sqrt(len(ests))
        assert abs(ests.mean() - 8.0) < 3 * mc_se

    def test_two_step_equals_joint_root(self, mar_dataset, mar_model):
        from psbayes.propensity import mar_system

        fit = fit_joint(mar_dataset, mar_model)
        system = mar_system(mar_dataset, mar_model)
        assert np.max(np.abs(system.u(fit.zeta_hat))) <= 1e-8


class TestBpsSample:
    def test_step2_identity_at_zero_shift(self, mar_dataset, mar_model):
        fit = fit_joint(mar_dataset, mar_model)
        draws = bps_sample(
            mar_dataset, mar_model, 25, RngHandle(5),
            mvn_override=lambda stream: np.zeros(4),
        )
        assert np.max(np.abs(draws.draws - fit.zeta_hat[None, :])) < 1e-6

    def test_separation_refuses_to_sample(self):
        gen = np.random.default_rng(2)
        ds = Dataset(gen.normal(size=(30, 1)), gen.normal(size=30), np.ones(30, dtype=int))
        with pytest.raises(Separation):
            bps_sample(ds, ResponseModel(link="logit", x_cols=(0,)), 10, RngHandle(0))

    def test_reproducible_and_thread_free(self, mar_dataset, mar_model):
        a = bps_sample(mar_dataset, mar_model, 60, RngHandle(8))
        b = bps_sample(mar_dataset, mar_model, 60, RngHandle(8))
        assert (a.draws == b.draws).all()

    def test_seed_schedules_agree_within_mc_error(self, mar_dataset, mar_model):
        a = bps_sample(mar_dataset, mar_model, 2000, RngHandle(1))
        b = bps_sample(mar_dataset, mar_model, 2000, RngHandle(2))
        ta, tb = a.column("theta"), b.column("theta")
        mc = ta.std() / np.sqrt(ta.size)
        assert abs(np.median(ta) - np.median(tb)) < 5 * mc
        assert abs(ta.std() - tb.std()) / ta.std() < 0.1

    def test_posterior_sd_matches_taylor_se(self):
        # calibration: ratio within 10%, median over 20 quick replications
        model = ResponseModel(link="logit", x_cols=(0, 1))
        ratios = []
        for r in range(20):
            sample = gen_sim1(StudyOneConfig("m1", "R1", 500, 1), RngHandle(123, r))
            fit = fit_joint(sample.dataset, model)
            draws = bps_sample(sample.dataset, model, 2000, RngHandle(9, r), fit=fit)
            se = ps_taylor(sample.dataset, model, fit=fit).se
            ratios.append(draws.column("theta").std() / se)
        assert 0.9 < np.median(ratios) < 1.1

    def test_too_many_failures(self, mar_dataset, mar_model):
        with pytest.raises(TooManyFailures):
            bps_sample(
                mar_dataset, mar_model, 30, RngHandle(5),
                mvn_override=lambda stream: np.full(4, 1e12),
            )

    def test_failed_draws_counted_and_replaced(self, mar_dataset, mar_model):
        # failure on the first attempt of one draw: huge shift then zeros
        calls = {"n": 0}

        def flaky(stream):
            calls["n"] += 1
            return np.full(4, 1e12) if calls["n"] == 3 else np.zeros(4)

        draws = bps_sample(mar_dataset, mar_model, 10, RngHandle(5), mvn_override=flaky)
        assert draws.failed_draw_count == 1
        assert draws.m == 10


class TestHpd:
    def test_uniform_order_statistics_tie_rule(self):
        interval = hpd(np.arange(1.0, 101.0), 0.95)
        assert (interval.lower, interval.upper) == (1.0, 95.0)

    def test_standard_normal_quantiles(self):
        draws = RngHandle(3).generator.standard_normal(100_000)
        interval = hpd(draws, 0.95)
        assert abs(interval.lower + 1.96) < 0.05
        assert abs(interval.upper - 1.96) < 0.05

    def test_degenerate_constant(self):
        interval = hpd(np.full(50, 2.5), 0.95)
        assert interval.lower == interval.upper == 2.5

    def test_too_few(self):
        with pytest.raises(TooFewDraws):
            hpd(np.arange(19.0), 0.95)

    def test_minimal_width_against_full_scan(self):
        gen = np.random.default_rng(8)
        for _ in range(20):
            draws = gen.gamma(2.0, size=200)  # skewed: HPD != equal-tail
            interval = hpd(draws, 0.9)
            s = np.sort(draws)
            n_in = int(np.ceil(0.9 * 200))
            widths = [s[i + n_in - 1] - s[i] for i in range(200 - n_in + 1)]
            assert interval.width == pytest.approx(min(widths))

    def test_level_validation(self):
        with pytest.raises(ValueError):
            hpd(np.arange(30.0), 1.5)


class TestSummarize:
    def _draws(self, matrix):
        from psbayes.bps import PosteriorDraws

        return PosteriorDraws(
            draws=np.asarray(matrix, dtype=float),
            layout={"theta": slice(0, 1)},
            columns=("theta",),
            seed=0,
            stream_id=0,
            method="test",
        )

    def test_repeated_value(self):
        s = summarize(self._draws(np.full((25, 1), 3.25)))
        assert s["theta"].median == s["theta"].mean == 3.25
        assert s["theta"].sd == 0.0

    def test_symmetric_two_point(self):
        vals = np.array([-1.0, 1.0] * 20)[:, None]
        s = summarize(self._draws(vals))
        assert s["theta"].median == 0.0  # even-count midpoint convention
        assert s["theta"].sd == pytest.approx(1.0)

    def test_posterior_summary_shape(self, mar_dataset, mar_model):
        draws = bps_sample(mar_dataset, mar_model, 50, RngHandle(5))
        s = summarize(draws)
        assert set(s) == {"phi_0", "phi_1", "phi_2", "theta"}
        assert s["theta"].hpd.lower <= s["theta"].median <= s["theta"].hpd.upper
