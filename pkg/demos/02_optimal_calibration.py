"""Over-identified estimation: covariate calibration via GMM and MH sampling.

Adds the fully observed covariate means as extra estimating equations.  The
parameter-to-moment map is no longer one-to-one, so the posterior comes from
a random-walk Metropolis chain under the Gaussian pseudo-likelihood; the
point estimator is asymptotically the two-stage GMM minimizer.  Efficiency
gains are largest when the outcome is strongly covariate-driven and response
is low, so this demo uses the low-response quadratic design.

Run: python3 demos/02_optimal_calibration.py
"""

from psbayes import MhConfig, ResponseModel, RngHandle, obps_sample, ops_gmm, ps_taylor, summarize
from psbayes.simlab import StudyOneConfig, gen_sim1

sample = gen_sim1(StudyOneConfig("m2", "R2", n=500, reps=1), RngHandle(3))
ds = sample.dataset
print(f"n = {ds.n}, response rate {ds.delta.mean():.0%}, target mean = 8")

model = ResponseModel(link="logit", x_cols=(0, 1))
ps = ps_taylor(ds, model)
print(f"\nPS  (just-identified): {ps.theta_hat:.3f} +- {ps.se:.3f}, CI width {ps.ci_length:.3f}")

ops = ops_gmm(ds, model)
print(f"GMM (calibrated):      {ops.theta_hat:.3f} +- {ops.se:.3f}, CI width {ops.ci_length:.3f}")
print(f"GMM objective dropped {ops.extras['anchor_objective']:.2e} -> {ops.extras['objective']:.2e}")

draws, diag = obps_sample(ds, model, MhConfig(burn_in=2000, keep=2000), RngHandle(11))
stats = summarize(draws)["theta"]
print(f"\nMH posterior (burn 2000, keep 2000, acceptance {diag.acceptance_rate:.2f}):")
print(f"  median {stats.median:.3f}, sd {stats.sd:.4f}, "
      f"95% HPD width {stats.hpd.width:.3f}")

mu = summarize(draws)["mu_x_0"]
print(f"  calibrated mu_x[0]: median {mu.median:.3f} "
      f"(sample mean {ds.x[:, 0].mean():.3f})")

print(f"\nCI width: PS {ps.ci_length:.3f} vs GMM {ops.ci_length:.3f} vs "
      f"MH HPD {stats.hpd.width:.3f}")
print("calibration shortens the interval; the Bayesian chain tracks the GMM answer")
