"""Acceptance suite: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (run with ``pytest -s`` to see them live).
Monte Carlo cells are shared across criteria within the session; setting
PSBAYES_MC_CACHE to a directory additionally persists them between runs
(fresh CI runs recompute everything).
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from psbayes import (
    MhConfig,
    ResponseModel,
    RngHandle,
    bps_sample,
    fit_joint,
    hpd,
    panel_bps,
    panel_obps,
    ps_taylor,
)
from psbayes.simlab import (
    PanelSimConfig,
    StudyOneConfig,
    gen_panel,
    gen_sim1,
    run_study,
)

N_JOBS = min(2, os.cpu_count() or 1)
# The criteria are stated at 500 replications; the env knob exists only for
# quick smoke runs and is reflected in every printed line.
REPS = int(os.environ.get("PSBAYES_ACCEPT_REPS", "500"))
PANEL_REPS = int(os.environ.get("PSBAYES_ACCEPT_PANEL_REPS", "300"))
_session_cache = {}

SIM1_SPOTS = {"ps": 1.83, "bps": 1.84, "ops": 1.78, "obps": 1.78}
TABLE2_CC_BIAS = {("R1", "m1"): -0.16, ("R1", "m2"): -0.18, ("R1", "m3"): -1.13,
                  ("R2", "m1"): -0.14, ("R2", "m2"): -0.14, ("R2", "m3"): -0.95}
TABLE2_REL_STD = {
    ("R1", "m1"): {"kc": 1.10, "fi": 1.09, "bda": 1.10},
    ("R1", "m2"): {"kc": 1.11, "fi": 1.10, "bda": 1.11},
    ("R1", "m3"): {"kc": 1.03, "fi": 1.04, "bda": 1.04},
    ("R2", "m1"): {"kc": 1.09, "fi": 1.08, "bda": 1.09},
    ("R2", "m2"): {"kc": 1.09, "fi": 1.08, "bda": 1.09},
    ("R2", "m3"): {"kc": 1.02, "fi": 1.03, "bda": 1.03},
}


def _cell(study, mechanism, mean_fn, methods, seed, reps=REPS, n=500):
    key = f"s{study}_{mechanism}_{mean_fn}_{'-'.join(methods)}_r{reps}_n{n}_seed{seed}"
    if key in _session_cache:
        return _session_cache[key]
    cache_dir = os.environ.get("PSBAYES_MC_CACHE")
    if cache_dir:
        path = Path(cache_dir) / f"{key}.json"
        if path.exists():
            payload = json.loads(path.read_text())
            _session_cache[key] = payload
            return payload
    report = run_study(
        study, mechanism, mean_fn, list(methods), reps=reps, n=n,
        seed=seed, n_jobs=N_JOBS,
    )
    payload = report.to_dict(include_per_rep=True)
    _session_cache[key] = payload
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        (Path(cache_dir) / f"{key}.json").write_text(json.dumps(payload))
    return payload


def _estimates(payload, method):
    vals = [r["estimate"] for r in payload["per_rep"] if r["method"] == method]
    return np.asarray(vals, dtype=float)


def _report(line, ok):
    verdict = "PASS" if ok else "FAIL"
    print(f"[acceptance] {verdict}: {line}")
    return ok


STUDY1_METHODS = ("ps", "bps", "ops", "obps")
STUDY1_CELLS = [(mech, mean) for mech in ("R1", "R2", "R3", "R4") for mean in ("m1", "m2", "m3")]
STUDY2_CELLS = [(mech, mean) for mech in ("R1", "R2") for mean in ("m1", "m2", "m3")]


def _study1_cell(mech, mean):
    seed = 1000 + 17 * STUDY1_CELLS.index((mech, mean))
    return _cell(1, mech, mean, STUDY1_METHODS, seed)


def _study2_cell(mech, mean):
    seed = 5000 + 29 * STUDY2_CELLS.index((mech, mean))
    return _cell(2, mech, mean, ("cc", "kc", "fi", "bda"), seed)


class TestCriterion1Table1:
    def test_coverage_all_cells(self):
        failures = []
        for mech, mean in STUDY1_CELLS:
            payload = _study1_cell(mech, mean)
            for method in STUDY1_METHODS:
                cov = payload["methods"][method]["coverage"]
                if not 0.92 <= cov <= 0.98:
                    failures.append(f"{mech}/{mean} {method} coverage {cov:.3f}")
        ok = _report(
            "criterion 1 (coverage): PS/BPS/OPS/OBPS coverage in [0.92, 0.98] "
            f"across 12 cells at reps={REPS}"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures

    def test_spot_ci_lengths_r1_m1(self):
        payload = _study1_cell("R1", "m1")
        failures = []
        for method, ref in SIM1_SPOTS.items():
            length = payload["methods"][method]["mean_ci_length"]
            if abs(length - ref) / ref > 0.05:
                failures.append(f"{method} length {length:.3f} vs {ref} "
                                f"({100 * (length / ref - 1):+.1f}%)")
        ok = _report(
            "criterion 1 (spot lengths R1/m1): PS/BPS within 5% of 1.83/1.84, "
            "OPS/OBPS within 5% of 1.78"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures


class TestCriterion2Efficiency:
    def test_calibrated_methods_shorter_by_ten_percent(self):
        payload = _study1_cell("R2", "m2")
        len_ps = payload["methods"]["ps"]["mean_ci_length"]
        len_ops = payload["methods"]["ops"]["mean_ci_length"]
        len_obps = payload["methods"]["obps"]["mean_ci_length"]
        ok = _report(
            f"criterion 2 (efficiency R2/m2): OPS {len_ops:.3f} and OBPS {len_obps:.3f} "
            f"at least 10% below PS {len_ps:.3f}",
            len_ops <= 0.90 * len_ps and len_obps <= 0.90 * len_ps,
        )
        assert ok

    def test_ops_never_less_efficient_than_ps(self):
        # MC-variance ratio <= 1.05 in every study-1 cell (shared samples)
        worst = -np.inf
        for mech, mean in STUDY1_CELLS:
            payload = _study1_cell(mech, mean)
            var_ops = np.nanvar(_estimates(payload, "ops"), ddof=1)
            var_ps = np.nanvar(_estimates(payload, "ps"), ddof=1)
            worst = max(worst, var_ops / var_ps)
        ok = _report(
            f"efficiency invariant: var(OPS)/var(PS) <= 1.05 in all cells "
            f"(worst {worst:.3f})",
            worst <= 1.05,
        )
        assert ok

    def test_obps_tracks_ops_point_estimates(self):
        payload = _study1_cell("R2", "m2")
        obps = _estimates(payload, "obps")
        ops = _estimates(payload, "ops")
        mask = np.isfinite(obps) & np.isfinite(ops)
        mad = np.abs(obps[mask] - ops[mask]).mean()
        sd = np.nanstd(ops, ddof=1)
        ok = _report(
            f"asymptotic equivalence: mean |OBPS - OPS| = {mad:.4f} "
            f"< 0.3 x MC sd {sd:.4f}",
            mad < 0.3 * sd,
        )
        assert ok


class TestCriterion3Table2:
    def test_cc_bias_matches_reference(self):
        failures = []
        for mech, mean in STUDY2_CELLS:
            payload = _study2_cell(mech, mean)
            bias = payload["methods"]["cc"]["bias"]
            ref = TABLE2_CC_BIAS[(mech, mean)]
            if abs(bias - ref) > 0.03:
                failures.append(f"{mech}/{mean} CC bias {bias:+.3f} vs {ref:+.2f}")
        ok = _report(
            "criterion 3 (CC bias within ±0.03 of reference in all six cells)"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures

    def test_corrected_methods_nearly_unbiased(self):
        failures = []
        for mech, mean in STUDY2_CELLS:
            payload = _study2_cell(mech, mean)
            for method in ("kc", "fi", "bda"):
                bias = payload["methods"][method]["bias"]
                if abs(bias) > 0.03:
                    failures.append(f"{mech}/{mean} {method} bias {bias:+.3f}")
        ok = _report(
            "criterion 3 (|bias| <= 0.03 for KC/FI/BDA in all six cells)"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures

    def test_relative_std_matches_reference(self):
        failures = []
        for mech, mean in STUDY2_CELLS:
            payload = _study2_cell(mech, mean)
            for method in ("kc", "fi", "bda"):
                rel = payload["methods"][method]["relative_std"]
                ref = TABLE2_REL_STD[(mech, mean)][method]
                if abs(rel - ref) > 0.05:
                    failures.append(f"{mech}/{mean} {method} rel_std {rel:.3f} vs {ref:.2f}")
        ok = _report(
            "criterion 3 (relative std of KC/FI/BDA within ±0.05 of reference)"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures


class TestCriterion4BdaCoverage:
    def test_hpd_coverage_in_all_cells(self):
        failures = []
        for mech, mean in STUDY2_CELLS:
            payload = _study2_cell(mech, mean)
            cov = payload["methods"]["bda"]["coverage"]
            if not 0.92 <= cov <= 0.97:
                failures.append(f"{mech}/{mean} coverage {cov:.3f}")
        ok = _report(
            "criterion 4 (BDA 95% HPD coverage in [0.92, 0.97] in all six cells)"
            + (f"; violations: {failures}" if failures else ""),
            not failures,
        )
        assert ok, failures


class TestCriterion5Calibration:
    def test_posterior_sd_over_taylor_se(self):
        model = ResponseModel(link="logit", x_cols=(0, 1))
        ratios = []
        for r in range(50):
            sample = gen_sim1(StudyOneConfig("m1", "R1", 500, 1), RngHandle(9100, r))
            fit = fit_joint(sample.dataset, model)
            draws = bps_sample(sample.dataset, model, 2000, RngHandle(9200, r), fit=fit)
            ratios.append(draws.column("theta").std() / ps_taylor(sample.dataset, model, fit=fit).se)
        med = float(np.median(ratios))
        ok = _report(
            f"criterion 5 (calibration): median posterior-sd/Taylor-se over 50 reps = "
            f"{med:.3f} in [0.9, 1.1]",
            0.9 <= med <= 1.1,
        )
        assert ok

    def test_posterior_normality_moments_large_n(self):
        model = ResponseModel(link="logit", x_cols=(0, 1))
        sample = gen_sim1(StudyOneConfig("m1", "R1", 2000, 1), RngHandle(9301))
        draws = bps_sample(sample.dataset, model, 4000, RngHandle(9302))
        theta = draws.column("theta")
        std = (theta - theta.mean()) / theta.std()
        skew = float(np.mean(std**3))
        exkurt = float(np.mean(std**4) - 3.0)
        ok = _report(
            f"criterion 5 (normality at n=2000): |skew| = {abs(skew):.3f} < 0.15, "
            f"|excess kurtosis| = {abs(exkurt):.3f} < 0.3",
            abs(skew) < 0.15 and abs(exkurt) < 0.3,
        )
        assert ok


class TestCriterion6OracleSuite:
    def test_oracle_and_property_bundle_under_60s(self, mar_dataset, mar_model):
        import _oracles as oracles

        from psbayes import Dataset, fit_joint, moment_covariance
        from psbayes.nmar import _fi_weights
        from psbayes.obps import obps_sample
        from psbayes.propensity import mar_system, response_probabilities, response_score

        started = time.perf_counter()
        checks = []

        # score vs finite-difference gradient of the likelihood (1e-5)
        z = mar_model.design(mar_dataset.x)
        gen = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            phi = gen.normal(scale=0.4, size=3)
            s = response_score(mar_model, mar_dataset.x, mar_dataset.delta, phi=phi)
            fd = np.empty(3)
            for j in range(3):
                e = np.zeros(3)
                e[j] = 1e-6
                fd[j] = (
                    oracles.logistic_loglik(z, mar_dataset.delta, phi + e)
                    - oracles.logistic_loglik(z, mar_dataset.delta, phi - e)
                ) / 2e-6
            worst = max(worst, float(np.max(np.abs(s - fd))))
        checks.append(("gradient check", worst < 1e-5))

        # generic vs block moment covariance (1e-12)
        fit = fit_joint(mar_dataset, mar_model)
        sig = moment_covariance(mar_system(mar_dataset, mar_model), fit.zeta_hat)
        block = oracles.block_sigma_by_hand(
            mar_dataset.x, mar_dataset.y, mar_dataset.delta, fit.phi_hat, fit.theta_hat
        )
        checks.append(("sigma block equality", float(np.max(np.abs(sig.matrix - block))) < 1e-12))

        # two-step inversion identity at zero shift (1e-6)
        draws0 = bps_sample(mar_dataset, mar_model, 20, RngHandle(1),
                            mvn_override=lambda s: np.zeros(4))
        checks.append(
            ("zero-shift identity", float(np.max(np.abs(draws0.draws - fit.zeta_hat))) < 1e-6)
        )

        # weighted-ratio root identity
        pi = response_probabilities(mar_model, mar_dataset.x, phi=fit.phi_hat)
        w = mar_dataset.delta / pi
        yf = np.where(mar_dataset.delta == 1, mar_dataset.y, 0.0)
        checks.append(("weighted-ratio root",
                       abs(fit.theta_hat - (w @ yf) / w.sum()) < 1e-10))

        # fractional weights normalize exactly (1e-12)
        wmat = _fi_weights(np.array([0.2, -0.3]), gen.normal(size=(300, 2)), 15, 20)
        checks.append(("fi weight normalization",
                       float(np.max(np.abs(wmat.sum(axis=1) - 1))) < 1e-12))

        # tilted-normal closed form vs SIR oracle (3 x MC se)
        from psbayes import OutcomeModel, predict_nonrespondent_density

        out = OutcomeModel(np.array([0.4, 1.1]), 0.9, (0,))
        resp = ResponseModel(link="logit", x_cols=(), use_y=True)
        dens = predict_nonrespondent_density(out, resp, [0.3], phi=[0.1, 0.25])
        sir_mean, ys, ws = oracles.sir_tilted_mean(out.mean(np.array([[0.3]]))[0], 0.9, -0.25,
                                                   np.random.default_rng(5))
        mc_se = float(np.sqrt(np.sum(ws**2 * (ys - sir_mean) ** 2)))
        checks.append(("tilted vs SIR", abs(dens.mean() - sir_mean) < 3 * mc_se))

        # MH replay bit-exactness
        cfg = MhConfig(burn_in=100, keep=200, record_trace=True)
        d, diag = obps_sample(mar_dataset, mar_model, cfg, RngHandle(3))
        t = diag.trace
        lk = t["initial_log_kernel"]
        replay_ok = True
        for i in range(t["uniforms"].size):
            expected = np.log(t["uniforms"][i]) < t["log_kernels"][i] - lk
            replay_ok &= bool(t["accepted"][i]) == bool(expected)
            if expected:
                lk = t["log_kernels"][i]
        checks.append(("mh replay", replay_ok))

        # panel T=2 equals the cross-sectional sampler
        sim = gen_panel(PanelSimConfig(n=300, waves=2), RngHandle(6))
        pds = sim.panel
        ds = Dataset(np.column_stack([pds.x, pds.y[:, 0]]), pds.y[:, 1], pds.delta[:, 1])
        model2 = ResponseModel(link="logit", x_cols=(0, 1))
        pd_draws = panel_bps(pds, 40, RngHandle(7))
        cd_draws = bps_sample(ds, model2, 40, RngHandle(7))
        checks.append(("panel equivalence",
                       float(np.max(np.abs(pd_draws.draws - cd_draws.draws))) < 1e-6))

        elapsed = time.perf_counter() - started
        failures = [name for name, good in checks if not good]
        ok = _report(
            f"criterion 6 (oracle/property bundle): 8 checks in {elapsed:.1f}s (< 60s)"
            + (f"; violations: {failures}" if failures else ""),
            not failures and elapsed < 60.0,
        )
        assert ok, (failures, elapsed)


class TestCriterion7Panel:
    def test_panel_bps_synthetic_truth_coverage(self):
        cfg = PanelSimConfig(n=500, waves=3)
        theta_true = cfg.theta_true()
        covered = 0
        reps = PANEL_REPS
        for r in range(reps):
            sim = gen_panel(cfg, RngHandle(7000, r))
            draws = panel_bps(sim.panel, 1000, RngHandle(7100, r))
            interval = hpd(draws.column("theta"), 0.95)
            covered += interval.lower <= theta_true <= interval.upper
        coverage = covered / reps
        ok = _report(
            f"criterion 7 (panel coverage): BPS HPD coverage {coverage:.3f} "
            f"in [0.92, 0.98] over {reps} reps",
            0.92 <= coverage <= 0.98,
        )
        assert ok

    def test_panel_obps_no_wider_than_bps(self):
        cfg = PanelSimConfig(n=500, waves=3)
        sds_bps, sds_obps = [], []
        for r in range(40):
            sim = gen_panel(cfg, RngHandle(7500, r))
            bps_draws = panel_bps(sim.panel, 1000, RngHandle(7600, r))
            obps_draws, _ = panel_obps(sim.panel, MhConfig(), RngHandle(7700, r))
            sds_bps.append(bps_draws.column("theta").std())
            sds_obps.append(obps_draws.column("theta").std())
        ratio = float(np.mean(sds_obps) / np.mean(sds_bps))
        ok = _report(
            f"criterion 7 (panel efficiency): posterior sd OBPS/BPS = {ratio:.3f} <= 1.05",
            ratio <= 1.05,
        )
        assert ok
