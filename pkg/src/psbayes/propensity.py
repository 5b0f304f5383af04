"""Parametric response-probability models, their scores, and stacked
estimating systems with the plug-in moment covariance.

A :class:`ResponseModel` describes which predictors enter the linear index
(intercept is prepended unless disabled) and through which link.  Estimating
systems stack per-unit contribution blocks; their uncentered outer product is
the plug-in covariance used both for frequentist sandwiches and for posterior
sampling.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, ndtr

from . import _fastpath as _fast
from .data import Dataset
from .errors import MissingPredictor, NotPSD
from .numerics import DEFAULT_SOLVER, SolverConfig, solve_root

PROB_FLOOR = 1e-6

_floor_lock = threading.Lock()
_floor_events = 0


def floor_event_count() -> int:
    """How many probability evaluations were clipped into (1e-6, 1-1e-6)."""
    return _floor_events


def reset_floor_events() -> None:
    global _floor_events
    with _floor_lock:
        _floor_events = 0


def _record_floor(k: int) -> None:
    global _floor_events
    if k:
        with _floor_lock:
            _floor_events += k


@dataclass(frozen=True)
class ResponseModel:
    """Link + predictor selection for Pr(delta=1 | predictors).

    ``x_cols`` are covariate column indices entering the index; ``use_y``
    additionally includes the outcome (the nonignorable case).  ``phi`` may
    bind parameter values; evaluation functions accept an explicit ``phi``
    that takes precedence.
    """

    link: str = "logit"
    x_cols: tuple = ()
    use_y: bool = False
    intercept: bool = True
    phi: Optional[tuple] = None

    def __post_init__(self):
        if self.link not in ("logit", "probit"):
            raise ValueError(f"unknown link {self.link!r}")
        if not (self.intercept or self.x_cols or self.use_y):
            raise ValueError("predictor list must be nonempty")
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        if self.phi is not None:
            object.__setattr__(self, "phi", tuple(float(v) for v in self.phi))

    @property
    def n_params(self) -> int:
        return int(self.intercept) + len(self.x_cols) + int(self.use_y)

    def with_phi(self, phi) -> "ResponseModel":
        return ResponseModel(self.link, self.x_cols, self.use_y, self.intercept, tuple(phi))

    def design(self, x: np.ndarray, y: Optional[np.ndarray] = None) -> np.ndarray:
        """Row-wise predictor matrix (n, n_params)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = []
        if self.intercept:
            cols.append(np.ones(x.shape[0]))
        for j in self.x_cols:
            cols.append(x[:, j])
        if self.use_y:
            if y is None:
                raise MissingPredictor("model includes y but no outcome was supplied")
            y = np.asarray(y, dtype=float)
            if not np.all(np.isfinite(y)):
                raise MissingPredictor("model includes y but some outcomes are unobserved")
            cols.append(y)
        return np.column_stack(cols)

    def _resolve_phi(self, phi) -> np.ndarray:
        if phi is None:
            phi = self.phi
        if phi is None:
            raise ValueError("no parameter vector bound or supplied")
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        if phi.size != self.n_params:
            raise ValueError(f"phi has {phi.size} entries, model needs {self.n_params}")
        return phi


def _link_cdf(link: str, eta: np.ndarray) -> np.ndarray:
    return expit(eta) if link == "logit" else ndtr(eta)


def response_probabilities(
    model: ResponseModel,
    x: np.ndarray,
    y: Optional[np.ndarray] = None,
    phi=None,
) -> np.ndarray:
    """pi(phi; row) for every row, floored into (1e-6, 1-1e-6).

    Flooring keeps inverse weights finite; each clipped evaluation bumps the
    module floor counter surfaced in CLI diagnostics.
    """
    phi = model._resolve_phi(phi)
    z = model.design(x, y)
    raw = _link_cdf(model.link, z @ phi)
    clipped = (raw < PROB_FLOOR) | (raw > 1.0 - PROB_FLOOR)
    _record_floor(int(np.count_nonzero(clipped)))
    return np.clip(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)


def response_probability(model: ResponseModel, x_row, y=None, phi=None) -> float:
    """Scalar convenience wrapper around :func:`response_probabilities`."""
    x = np.atleast_2d(np.asarray(x_row, dtype=float))
    yv = None if y is None else np.atleast_1d(float(y))
    return float(response_probabilities(model, x, yv, phi)[0])


def response_score_terms(
    model: ResponseModel,
    x: np.ndarray,
    delta: np.ndarray,
    y: Optional[np.ndarray] = None,
    phi=None,
) -> np.ndarray:
    """Per-unit Bernoulli-likelihood score s(phi; row, delta), shape (n, k).

    For the logit link this is the familiar residual form (delta - pi) z; the
    probit link uses {delta - Phi(eta)} phi_pdf(eta) / [Phi(1-Phi)] z.
    """
    phi = model._resolve_phi(phi)
    z = model.design(x, y)
    eta = z @ phi
    delta = np.asarray(delta, dtype=float)
    if model.link == "logit":
        resid = delta - expit(eta)
    else:
        cdf = np.clip(ndtr(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)
        pdf = np.exp(-0.5 * eta**2) / np.sqrt(2.0 * np.pi)
        resid = (delta - cdf) * pdf / (cdf * (1.0 - cdf))
    return resid[:, None] * z


def response_score(model, x, delta, y=None, phi=None) -> np.ndarray:
    """Mean score vector, the likelihood-derived estimating function for phi."""
    return response_score_terms(model, x, delta, y, phi).mean(axis=0)


def response_score_jacobian(
    model: ResponseModel,
    x: np.ndarray,
    delta: np.ndarray,
    y: Optional[np.ndarray] = None,
    phi=None,
) -> Optional[np.ndarray]:
    """Analytic Jacobian of the mean score, or None when only the numeric
    fallback applies (probit).  Logit: -n^-1 Z' diag(pi(1-pi)) Z."""
    if model.link != "logit":
        return None
    phi = model._resolve_phi(phi)
    z = model.design(x, y)
    p = expit(z @ phi)
    w = p * (1.0 - p)
    return -(z * w[:, None]).T @ z / z.shape[0]


def score_closures(model: ResponseModel, x, delta, y=None):
    """(score, jac) closures over a prebuilt design matrix.

    Solver-facing fast path: the design matrix is assembled once and reused
    across Newton iterations and posterior draws.  ``jac`` is None for links
    without an analytic form (probit), signalling the numeric fallback.
    """
    z = model.design(x, y)
    delta = np.asarray(delta, dtype=float)
    n = z.shape[0]
    if model.link == "logit":

        def score(phi):
            return (delta - expit(z @ phi)) @ z / n

        def jac(phi):
            p = expit(z @ phi)
            w = p * (1.0 - p)
            return -(z * w[:, None]).T @ z / n

        return score, jac

    def score(phi):
        eta = z @ phi
        cdf = np.clip(ndtr(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)
        pdf = np.exp(-0.5 * eta**2) / np.sqrt(2.0 * np.pi)
        return ((delta - cdf) * pdf / (cdf * (1.0 - cdf))) @ z / n

    return score, None


def newton_logit(
    z: np.ndarray,
    resp: np.ndarray,
    phi0: np.ndarray,
    cfg: SolverConfig = DEFAULT_SOLVER,
    target: Optional[np.ndarray] = None,
    eligible: Optional[np.ndarray] = None,
    monitor: Optional[Callable] = None,
    boundary: Optional[float] = None,
) -> np.ndarray:
    """Fused damped Newton for the (shifted) logistic score.

    Solves ((eligible * (resp - expit(z phi))) @ z) / n = target with the same
    tolerance, backtracking, and singularity semantics as
    :func:`numerics.solve_root`; it exists because posterior samplers re-solve
    this one system thousands of times per dataset.  ``boundary`` raises
    :class:`Separation` once any coefficient leaves [-boundary, boundary];
    when numba is importable the iteration runs compiled (same math, asserted
    equal in the tests).
    """
    from .errors import NoConvergence, Separation, SingularJacobian
    from .numerics import MAX_CONDITION, condition_estimate

    n = z.shape[0]
    k = z.shape[1]
    if _fast.HAVE_NUMBA and monitor is None:
        el_arr = np.ones(n) if eligible is None else np.ascontiguousarray(eligible, dtype=float)
        tgt_arr = np.zeros(k) if target is None else np.ascontiguousarray(target, dtype=float)
        try:
            phi, status = _fast.newton_logit_core(
                np.ascontiguousarray(z, dtype=float),
                np.ascontiguousarray(resp, dtype=float),
                el_arr,
                tgt_arr,
                np.ascontiguousarray(phi0, dtype=float),
                cfg.tolerance,
                cfg.max_iterations,
                cfg.step_damping,
                -1.0 if boundary is None else float(boundary),
            )
        except np.linalg.LinAlgError:
            raise SingularJacobian("logistic-score Jacobian is singular") from None
        if status == 0:
            return phi
        if status == 3:
            raise Separation("coefficients crossed the likelihood-boundary guard")
        if status == 1:
            raise NoConvergence("logistic Newton hit the iteration cap")
        pr = expit(z @ phi)
        w = pr * (1.0 - pr) * (el_arr if eligible is not None else 1.0)
        J = -(z * np.atleast_1d(w)[:, None]).T @ z / n
        if condition_estimate(J) > MAX_CONDITION:
            raise SingularJacobian("logistic-score Jacobian is numerically singular")
        raise NoConvergence("logistic Newton backtracking stalled")

    if boundary is not None:
        user_monitor = monitor

        def monitor(p, _b=float(boundary), _m=user_monitor):
            if np.max(np.abs(p)) > _b:
                raise Separation("coefficients crossed the likelihood-boundary guard")
            if _m is not None:
                _m(p)

    el = None if eligible is None else eligible
    resp_w = resp if el is None else el * resp
    resp_el = resp_w @ z / n
    tgt = 0.0 if target is None else target
    phi = np.asarray(phi0, dtype=float).copy()

    def residual(p_vec):
        pr = expit(z @ p_vec)
        if el is not None:
            pr = el * pr
        return resp_el - pr @ z / n - tgt

    def classify(J, msg):
        # Singularity is diagnosed lazily: the happy path never pays for a
        # condition estimate.
        if condition_estimate(J) > MAX_CONDITION:
            raise SingularJacobian("logistic-score Jacobian is numerically singular")
        raise NoConvergence(msg)

    fx = residual(phi)
    norm = np.max(np.abs(fx))
    for _ in range(cfg.max_iterations):
        if norm <= cfg.tolerance:
            return phi
        pr = expit(z @ phi)
        w = pr * (1.0 - pr)
        if el is not None:
            w = el * w
        J = -(z * w[:, None]).T @ z / n
        try:
            step = np.linalg.solve(J, -fx)
        except np.linalg.LinAlgError:
            raise SingularJacobian("logistic-score Jacobian is singular") from None
        if not np.all(np.isfinite(step)):
            classify(J, "non-finite Newton step")
        scale = 1.0
        for _ in range(31):
            cand = phi + scale * step
            f_try = residual(cand)
            norm_try = np.max(np.abs(f_try))
            if np.isfinite(norm_try) and norm_try < norm:
                break
            scale *= cfg.step_damping
        else:
            classify(J, "logistic Newton backtracking stalled")
        phi, fx, norm = cand, f_try, norm_try
        if monitor is not None:
            monitor(phi)
    if norm <= cfg.tolerance:
        return phi
    raise NoConvergence(f"logistic Newton hit the iteration cap (residual {norm:.3e})")


def fit_response_phi(
    model: ResponseModel,
    x: np.ndarray,
    delta: np.ndarray,
    y: Optional[np.ndarray] = None,
    phi0=None,
    cfg: SolverConfig = DEFAULT_SOLVER,
    monitor: Optional[Callable] = None,
) -> np.ndarray:
    """Maximum-likelihood phi by Newton on the score (warm start ``phi0``)."""
    k = model.n_params
    start = np.zeros(k) if phi0 is None else np.asarray(phi0, dtype=float)
    score, jac = score_closures(model, x, delta, y)
    return solve_root(score, start, cfg, jac=jac, monitor=monitor)


def mean_functional(theta, x, y) -> np.ndarray:
    """Default estimating function U(theta; x, y) = y - theta."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return np.asarray(y, dtype=float)[:, None] - theta[None, :]


def ipw_moment_terms(
    ds: Dataset,
    model: ResponseModel,
    phi,
    theta,
    u_fn: Callable = mean_functional,
) -> np.ndarray:
    """Per-unit delta/pi * U(theta; x, y), zero for nonrespondents; (n, t)."""
    pi = response_probabilities(model, ds.x, None, phi)
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    u = np.atleast_2d(u_fn(theta, ds.x, y_filled))
    if u.shape[0] != ds.n:
        u = u.T
    w = ds.delta / pi
    return w[:, None] * u


def ipw_moment(ds, model, phi, theta, u_fn=mean_functional) -> np.ndarray:
    """Inverse-propensity-weighted estimating equation for theta (mean form).

    With the default mean functional its root in theta is the ratio estimator
    sum(w y) / sum(w), w = delta/pi.
    """
    return ipw_moment_terms(ds, model, phi, theta, u_fn).mean(axis=0)


def calibration_terms(ds: Dataset, model: ResponseModel, phi, mu_x) -> np.ndarray:
    """Per-unit stack of delta/pi (x - mu_x) and (x - mu_x); shape (n, 2d)."""
    mu_x = np.atleast_1d(np.asarray(mu_x, dtype=float))
    pi = response_probabilities(model, ds.x, None, phi)
    dev = ds.x - mu_x[None, :]
    w = ds.delta / pi
    return np.hstack([w[:, None] * dev, dev])


def calibration_moments(ds, model, phi, mu_x) -> np.ndarray:
    """Mean auxiliary moments: weighted and unweighted covariate deviations."""
    return calibration_terms(ds, model, phi, mu_x).mean(axis=0)


@dataclass(frozen=True)
class MomentCovariance:
    """Plug-in covariance of sqrt(n) U_n: the uncentered per-unit outer
    product n^-1 sum g_i g_i', with the parameter point it was built at."""

    matrix: np.ndarray
    evaluated_at: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if not np.allclose(m, m.T, atol=1e-12):
            raise NotPSD("moment covariance is not symmetric")
        m = 0.5 * (m + m.T)
        eigs = np.linalg.eigvalsh(m)
        if eigs.size and eigs[0] < -1e-10 * max(eigs[-1], 1.0):
            raise NotPSD("moment covariance has a materially negative eigenvalue")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "evaluated_at", np.asarray(self.evaluated_at, dtype=float))


class EstimatingSystem:
    """Stacked vector estimating function U_n over a parameter vector.

    ``terms`` are callables mapping the full parameter vector to per-unit
    contribution blocks of shape (n, q_j); ``layout`` names slices of the
    parameter vector.  Systems are immutable and close over their dataset, so
    evaluation is pure and thread-safe.
    """

    def __init__(self, terms: Sequence[Callable], layout: dict, n: int, p: int,
                 q: Optional[int] = None):
        self.terms = tuple(terms)
        self.layout = dict(layout)
        self.n = n
        self.p = p
        if q is None:
            probe = np.zeros(p)
            q = sum(t(probe).shape[1] for t in self.terms)
        self.q = q
        if self.q < self.p:
            raise ValueError("system is under-identified (q < p)")

    @property
    def just_identified(self) -> bool:
        return self.q == self.p

    def unit_matrix(self, zeta) -> np.ndarray:
        """(n, q) matrix of per-unit contributions g_i(zeta)."""
        zeta = np.asarray(zeta, dtype=float)
        return np.hstack([t(zeta) for t in self.terms])

    def u(self, zeta) -> np.ndarray:
        """Sample mean U_n(zeta), shape (q,)."""
        return self.unit_matrix(zeta).mean(axis=0)

    def split(self, zeta, name: str) -> np.ndarray:
        return np.asarray(zeta, dtype=float)[self.layout[name]]


def moment_covariance(system: EstimatingSystem, zeta_hat) -> MomentCovariance:
    """n^-1 sum_i g_i(zeta_hat) g_i(zeta_hat)'.

    For the response-score + weighted-outcome system this reduces exactly to
    the block matrix with entries n^-1 sum s s', the delta/pi cross term, and
    n^-1 sum delta pi^-2 U^2 (delta^2 = delta).
    """
    zeta_hat = np.asarray(zeta_hat, dtype=float)
    g = system.unit_matrix(zeta_hat)
    return MomentCovariance(g.T @ g / system.n, zeta_hat)


def mar_system(ds: Dataset, model: ResponseModel, u_fn: Callable = mean_functional,
               theta_dim: int = 1) -> EstimatingSystem:
    """Just-identified system (score, weighted outcome) over (phi, theta)."""
    if model.use_y:
        raise MissingPredictor("MAR system requires a response model without y")
    k = model.n_params
    layout = {"phi": slice(0, k), "theta": slice(k, k + theta_dim)}

    def score_block(zeta):
        return response_score_terms(model, ds.x, ds.delta, None, zeta[:k])

    def outcome_block(zeta):
        return ipw_moment_terms(ds, model, zeta[:k], zeta[k:], u_fn)

    return EstimatingSystem([score_block, outcome_block], layout, ds.n, k + theta_dim)


def augmented_system(ds: Dataset, model: ResponseModel,
                     u_fn: Callable = mean_functional) -> EstimatingSystem:
    """Over-identified system adding covariate-calibration moments.

    Parameter order (mu_x, phi, theta); equation order (score, weighted
    outcome, weighted calibration, mean deviation).
    """
    if model.use_y:
        raise MissingPredictor("calibration system requires a response model without y")
    d, k = ds.d, model.n_params
    layout = {"mu_x": slice(0, d), "phi": slice(d, d + k), "theta": slice(d + k, d + k + 1)}

    def score_block(zeta):
        return response_score_terms(model, ds.x, ds.delta, None, zeta[d:d + k])

    def outcome_block(zeta):
        return ipw_moment_terms(ds, model, zeta[d:d + k], zeta[d + k:], u_fn)

    def calib_block(zeta):
        return calibration_terms(ds, model, zeta[d:d + k], zeta[:d])

    return EstimatingSystem([score_block, outcome_block, calib_block], layout, ds.n, d + k + 1)
