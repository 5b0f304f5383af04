"""Frequentist baseline estimators: propensity-weighted mean with Taylor
(sandwich) variance, two-stage GMM for the calibration-augmented system,
complete-case and full-sample means, and the Kott-Chang calibration
estimator for outcome-dependent response.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import least_squares

from .bps import JointFit, fit_joint
from .data import Dataset
from .errors import EmptyRespondents, NoConvergence, Separation, SingularJacobian
from .numerics import DEFAULT_SOLVER, SolverConfig, numeric_jacobian, psd_cholesky, solve_root
from .propensity import (
    EstimatingSystem,
    MomentCovariance,
    ResponseModel,
    augmented_system,
    mar_system,
    mean_functional,
    moment_covariance,
    response_probabilities,
)

Z_95 = 1.96
_BOUNDARY = 50.0


@dataclass(frozen=True)
class FreqEstimate:
    """Point estimate with standard error and the 1.96-sigma interval."""

    theta_hat: float
    se: float
    method: str
    ci: tuple = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be non-negative")
        ci = (self.theta_hat - Z_95 * self.se, self.theta_hat + Z_95 * self.se)
        object.__setattr__(self, "ci", ci)

    @property
    def ci_length(self) -> float:
        return self.ci[1] - self.ci[0]


def sandwich_variance(system: EstimatingSystem, sigma: MomentCovariance, zeta_hat) -> np.ndarray:
    """A^-1 Sigma A'^-1 / n with A the numeric Jacobian of the stacked sample
    equations at the root (just-identified systems only)."""
    if not system.just_identified:
        raise ValueError("sandwich form needs a just-identified system")
    A = numeric_jacobian(system.u, np.asarray(zeta_hat, dtype=float))
    if np.linalg.cond(A) > 1e12:
        raise SingularJacobian("estimating-equation Jacobian is numerically singular")
    Ainv_S = np.linalg.solve(A, sigma.matrix)
    return np.linalg.solve(A, Ainv_S.T).T / system.n


def ps_taylor(
    ds: Dataset,
    model: ResponseModel,
    u_fn: Callable = mean_functional,
    cfg: SolverConfig = DEFAULT_SOLVER,
    fit: Optional[JointFit] = None,
) -> FreqEstimate:
    """Propensity-weighted mean with linearization variance.

    The variance is the theta diagonal entry of the sandwich built from the
    joint (score, weighted outcome) system, so phi-estimation uncertainty is
    propagated automatically.
    """
    if fit is None:
        fit = fit_joint(ds, model, u_fn, cfg)
    if fit.separation:
        raise Separation("propensity fit sits at a likelihood boundary")
    system = mar_system(ds, model, u_fn)
    sigma = moment_covariance(system, fit.zeta_hat)
    v = sandwich_variance(system, sigma, fit.zeta_hat)
    return FreqEstimate(fit.theta_hat, float(np.sqrt(v[-1, -1])), "ps")


def gmm_objective(system: EstimatingSystem, w_inv: np.ndarray, zeta) -> float:
    """Quadratic form U' W^-1 U at ``zeta``."""
    u = system.u(zeta)
    return float(u @ w_inv @ u)


def ops_gmm(
    ds: Dataset,
    model: ResponseModel,
    u_fn: Callable = mean_functional,
    cfg: SolverConfig = DEFAULT_SOLVER,
    system: Optional[EstimatingSystem] = None,
) -> FreqEstimate:
    """Two-stage GMM on the calibration-augmented system.

    Stage 1 anchors at the just-identified fit (phi from the score, theta from
    the weighted mean, mu_x from the sample mean) and freezes W as the plug-in
    moment covariance there; stage 2 minimizes U' W^-1 U by damped
    Gauss-Newton.  The standard error comes from (G' W^-1 G)^-1 / n.
    """
    fit = fit_joint(ds, model, u_fn, cfg)
    if fit.separation:
        raise Separation("propensity fit sits at a likelihood boundary")
    if system is None:
        system = augmented_system(ds, model, u_fn)
        anchor = np.concatenate([ds.x.mean(axis=0), fit.zeta_hat])
    else:
        anchor = fit.zeta_hat
    w = moment_covariance(system, anchor)
    L = psd_cholesky(w.matrix)
    eye = np.eye(system.q)
    w_inv = np.linalg.solve(L.T, np.linalg.solve(L, eye))

    # Minimize ||L^-1 U||^2 = U' W^-1 U by Levenberg-Marquardt (damped
    # Newton on the quadratic form's gradient); plain fixed-W Gauss-Newton
    # zigzags on the curved cells of the quadratic outcome designs.
    def whitened(zeta):
        return np.linalg.solve(L, system.u(zeta))

    sol = least_squares(whitened, anchor, method="lm", xtol=1e-12, ftol=1e-12,
                        gtol=1e-10, max_nfev=2000)
    zeta = sol.x
    obj = gmm_objective(system, w_inv, zeta)
    G = numeric_jacobian(system.u, zeta)
    grad_norm = float(np.max(np.abs(G.T @ w_inv @ system.u(zeta))))
    if not (sol.success or grad_norm <= 1e-6):
        raise NoConvergence(f"GMM minimization stalled with gradient {grad_norm:.2e}")

    v = np.linalg.inv(G.T @ w_inv @ G) / system.n
    theta_idx = system.layout["theta"].start
    return FreqEstimate(
        float(zeta[theta_idx]),
        float(np.sqrt(v[theta_idx, theta_idx])),
        "ops",
        extras={"zeta_hat": zeta, "objective": obj, "anchor_objective": gmm_objective(system, w_inv, anchor)},
    )


def complete_case(ds: Dataset) -> FreqEstimate:
    """Respondent mean, ignoring the response mechanism entirely."""
    mask = ds.delta == 1
    if not mask.any():
        raise EmptyRespondents("no respondents")
    y = ds.y[mask]
    se = float(y.std() / np.sqrt(y.size))
    return FreqEstimate(float(y.mean()), se, "cc")


def full_sample(ds: Dataset) -> FreqEstimate:
    """Benchmark mean of a fully observed sample; rejects missing outcomes."""
    if not ds.delta.all():
        raise ValueError("full-sample estimator requires zero missing outcomes")
    se = float(ds.y.std() / np.sqrt(ds.n))
    return FreqEstimate(float(ds.y.mean()), se, "full")


def kott_chang(
    ds: Dataset,
    response_in_y: Optional[ResponseModel] = None,
    cfg: SolverConfig = DEFAULT_SOLVER,
) -> FreqEstimate:
    """Calibration estimator for outcome-dependent (nonignorable) response.

    The response probability is logistic in y alone; the fully observed
    covariates act as instruments through the calibration equations
    n^-1 sum {delta_i/pi(y_i) - 1}(1, x_i')' = 0, and theta solves the
    weighted mean equation.  Just-identified when dim(phi) = d + 1.
    """
    if response_in_y is None:
        response_in_y = ResponseModel(link="logit", x_cols=(), use_y=True)
    if ds.n_respondents == 0:
        raise EmptyRespondents("no respondents")
    k = response_in_y.n_params
    d = ds.d
    if k != d + 1:
        raise ValueError(f"calibration needs dim(phi) = d + 1 = {d + 1}, got {k}")
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    ones_x = np.column_stack([np.ones(ds.n), ds.x])

    if ds.delta.all():
        # Calibration drives pi to 1: likelihood boundary, theta degenerates
        # to the plain mean.
        return FreqEstimate(
            float(ds.y.mean()),
            float(ds.y.std() / np.sqrt(ds.n)),
            "kc",
            extras={"separation": True},
        )

    def terms(zeta):
        phi, theta = zeta[:k], zeta[k]
        pi = response_probabilities(response_in_y, ds.x, y_filled, phi)
        w = ds.delta / pi
        calib = (w - 1.0)[:, None] * ones_x
        outcome = (w * (y_filled - theta))[:, None]
        return np.hstack([calib, outcome])

    system = EstimatingSystem(
        [terms], {"phi": slice(0, k), "theta": slice(k, k + 1)}, ds.n, k + 1, q=d + 2
    )

    def monitor(zeta):
        if np.max(np.abs(zeta[:k])) > _BOUNDARY:
            raise Separation("calibration drove phi past the likelihood boundary")

    start = np.concatenate([np.zeros(k), [ds.y[ds.delta == 1].mean()]])
    zeta_hat = solve_root(system.u, start, cfg, monitor=monitor)
    sigma = moment_covariance(system, zeta_hat)
    v = sandwich_variance(system, sigma, zeta_hat)
    return FreqEstimate(
        float(zeta_hat[k]),
        float(np.sqrt(v[k, k])),
        "kc",
        extras={"phi_hat": zeta_hat[:k]},
    )
