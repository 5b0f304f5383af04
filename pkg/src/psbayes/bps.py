"""Two-step posterior sampler for propensity-score estimation and posterior
summaries (HPD intervals, per-parameter statistics).

Each posterior draw perturbs the stacked estimating equations by a Gaussian
vector scaled with the plug-in moment covariance, then inverts the equations
back to the parameter scale.  Draws are exact i.i.d. samples from the
approximate posterior, so no MCMC machinery is involved in the
just-identified case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import EmptyRespondents, NoConvergence, NonFiniteEvaluation, Separation, SingularJacobian, TooFewDraws, TooManyFailures
from .numerics import DEFAULT_SOLVER, RngHandle, SolverConfig, psd_cholesky, solve_root
from .propensity import (
    PROB_FLOOR,
    MomentCovariance,
    ResponseModel,
    fit_response_phi,
    ipw_moment,
    mar_system,
    mean_functional,
    moment_covariance,
    newton_logit,
    response_probabilities,
    score_closures,
)

SEPARATION_THRESHOLD = 50.0


@dataclass(frozen=True)
class HpdInterval:
    """Shortest interval containing the requested posterior mass."""

    lower: float
    upper: float
    level: float

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass
class PosteriorDraws:
    """Matrix of posterior draws plus enough metadata to reproduce them."""

    draws: np.ndarray
    layout: dict
    columns: tuple
    seed: int
    stream_id: int
    method: str
    failed_draw_count: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        """1-d draws for a named scalar parameter (layout slice or column)."""
        if name in self.layout:
            sl = self.layout[name]
            block = self.draws[:, sl]
            if block.shape[1] != 1:
                raise ValueError(f"{name!r} is not scalar; slice it directly")
            return block[:, 0]
        if name in self.columns:
            return self.draws[:, self.columns.index(name)]
        raise KeyError(name)


@dataclass(frozen=True)
class JointFit:
    """Root of the stacked estimating equations with boundary diagnostics.

    ``separation`` marks a response-model likelihood without an interior
    maximum (e.g. every unit responded); the returned phi then sits at the
    clamp point and theta falls back to the unweighted respondent mean, which
    is exact in the all-respondent case.
    """

    zeta_hat: np.ndarray
    layout: dict
    separation: bool = False

    @property
    def phi_hat(self) -> np.ndarray:
        return self.zeta_hat[self.layout["phi"]]

    @property
    def theta_hat(self) -> float:
        return float(self.zeta_hat[self.layout["theta"]][0])


def _hajek_theta(ds: Dataset, model: ResponseModel, phi, eta2: float = 0.0) -> float:
    """Root in theta of the weighted mean equation shifted by eta2."""
    pi = response_probabilities(model, ds.x, None, phi)
    w = ds.delta / pi
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    return float((np.dot(w, y_filled) - ds.n * eta2) / w.sum())


def fit_joint(
    ds: Dataset,
    model: ResponseModel,
    u_fn: Callable = mean_functional,
    cfg: SolverConfig = DEFAULT_SOLVER,
) -> JointFit:
    """Two-step point fit: ML phi from the response score, then theta from the
    weighted outcome equation.  Identical to the joint root because the score
    block does not involve theta.
    """
    if ds.n_respondents == 0:
        raise EmptyRespondents("cannot fit a response model without respondents")
    k = model.n_params
    separation = bool(ds.delta.all())
    iterates = []

    def monitor(phi):
        iterates.append(phi.copy())
        if np.max(np.abs(phi)) > SEPARATION_THRESHOLD:
            raise Separation("phi diverged past the likelihood boundary")

    try:
        phi_hat = fit_response_phi(model, ds.x, ds.delta, cfg=cfg, monitor=monitor)
    except Separation:
        separation = True
        phi_hat = iterates[-1]
    except (SingularJacobian, NoConvergence):
        if separation:  # all respondents: boundary, not a solver defect
            phi_hat = iterates[-1] if iterates else np.zeros(k)
        else:
            raise
    if np.max(np.abs(phi_hat)) > SEPARATION_THRESHOLD:
        separation = True

    if separation and ds.delta.all():
        theta_hat = float(ds.y.mean())
    elif u_fn is mean_functional:
        theta_hat = _hajek_theta(ds, model, phi_hat)
    else:
        theta_hat = float(
            solve_root(
                lambda t: ipw_moment(ds, model, phi_hat, t, u_fn),
                np.atleast_1d(ds.y[ds.delta == 1].mean()),
                cfg,
            )[0]
        )
    zeta = np.concatenate([phi_hat, [theta_hat]])
    layout = {"phi": slice(0, k), "theta": slice(k, k + 1)}
    return JointFit(zeta, layout, separation)


def _batched_logit_inversion(z, delta, targets, phi0, cfg):
    """Invert the shifted logistic score for many targets at once.

    Plain Newton over all rows simultaneously (the shifts are O(n^-1/2), so
    warm-started full steps converge in a few iterations); rows whose residual
    fails to shrink are flagged for the damped serial solver.  Returns
    (solutions, ok_mask).
    """
    m, k = targets.shape
    n = z.shape[0]
    zz_flat = (z[:, :, None] * z[:, None, :]).reshape(n, k * k)
    base = delta @ z / n
    phi = np.tile(phi0, (m, 1))
    done = np.zeros(m, dtype=bool)
    bad = np.zeros(m, dtype=bool)
    prev = np.full(m, np.inf)
    for _ in range(cfg.max_iterations):
        lin = z @ phi.T
        p = expit(lin)
        resid = base[None, :] - (p.T @ z) / n - targets
        norms = np.abs(resid).max(axis=1)
        done |= norms <= cfg.tolerance
        worse = ~done & ~bad & ~(norms < prev)
        bad |= worse | ~np.isfinite(norms)
        active = ~done & ~bad
        if not active.any():
            break
        prev = norms
        w = p * (1.0 - p)
        jac = -(zz_flat.T @ w).T.reshape(m, k, k)
        try:
            step = np.linalg.solve(jac[active] * (1.0 / n), -resid[active][:, :, None])
        except np.linalg.LinAlgError:
            bad |= active
            break
        phi[active] += step[:, :, 0]
    else:
        bad |= ~done
    return phi, done & ~bad


def bps_sample(
    ds: Dataset,
    model: ResponseModel,
    m_draws: int,
    rng: RngHandle,
    u_fn: Callable = mean_functional,
    cfg: SolverConfig = DEFAULT_SOLVER,
    fit: Optional[JointFit] = None,
    sigma: Optional[MomentCovariance] = None,
    mvn_override: Optional[Callable] = None,
    max_failure_fraction: float = 0.05,
) -> PosteriorDraws:
    """Independent posterior draws for (phi, theta) under the MAR model.

    Per draw: a Gaussian perturbation of the estimating equations is sampled
    on its own RNG substream, then the perturbed equations are solved warm-
    started at the point fit.  The moment covariance is computed once at the
    fit and reused for every draw.  A draw whose solve fails is rejected and
    resampled on a fresh substream (keeping draws i.i.d.), counted in
    ``failed_draw_count``; more than ``max_failure_fraction`` of attempts
    failing aborts with :class:`TooManyFailures`.

    ``mvn_override`` replaces the perturbation sampler (tests use it to pin
    eta*=0 and check that every draw reproduces the point fit).
    """
    if fit is None:
        fit = fit_joint(ds, model, u_fn, cfg)
    if fit.separation:
        raise Separation("cannot anchor the sampler at a likelihood boundary")
    system = mar_system(ds, model, u_fn)
    if sigma is None:
        sigma = moment_covariance(system, fit.zeta_hat)
    k = model.n_params
    chol = psd_cholesky(sigma.matrix / ds.n)
    phi_hat = fit.phi_hat
    fast = model.link == "logit" and u_fn is mean_functional
    z = model.design(ds.x)
    delta_f = ds.delta.astype(float)
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    if not fast:
        score, jac = score_closures(model, ds.x, ds.delta)

    draws = np.empty((m_draws, system.p))
    failures = 0
    if fast and mvn_override is None and m_draws > 8:
        # Batch path: one RNG substream per draw as ever, but the score
        # inversions run as one stacked Newton; stragglers fall back to the
        # serial damped solver below (attempt 0 re-reads the same substream).
        etas = np.empty((m_draws, system.q))
        for m in range(m_draws):
            etas[m] = chol @ rng.child(m, 0).generator.standard_normal(system.q)
        phi_all, ok = _batched_logit_inversion(z, delta_f, etas[:, :k], phi_hat, cfg)
        if ok.any():
            pi_ok = np.clip(expit(z @ phi_all[ok].T), PROB_FLOOR, 1.0 - PROB_FLOOR)
            w_ok = delta_f[:, None] / pi_ok
            draws[ok, :k] = phi_all[ok]
            draws[ok, k] = (y_filled @ w_ok - ds.n * etas[ok, k]) / w_ok.sum(axis=0)
        todo = np.flatnonzero(~ok)
    else:
        todo = np.arange(m_draws)
    for m in todo:
        for attempt in range(1000):
            stream = rng.child(m, attempt)
            if mvn_override is None:
                eta = chol @ stream.generator.standard_normal(system.q)
            else:
                eta = np.asarray(mvn_override(stream), dtype=float)
            try:
                if fast:
                    phi_star = newton_logit(z, delta_f, phi_hat, cfg, target=eta[:k])
                    pi = np.clip(expit(z @ phi_star), PROB_FLOOR, 1.0 - PROB_FLOOR)
                    w = delta_f / pi
                    theta_star = (w @ y_filled - ds.n * eta[k]) / w.sum()
                else:
                    phi_star = solve_root(
                        lambda p: score(p) - eta[:k], phi_hat, cfg, jac=jac
                    )
                    if u_fn is mean_functional:
                        theta_star = _hajek_theta(ds, model, phi_star, eta[k])
                    else:
                        theta_star = float(
                            solve_root(
                                lambda t: ipw_moment(ds, model, phi_star, t, u_fn) - eta[k:],
                                np.atleast_1d(fit.theta_hat),
                                cfg,
                            )[0]
                        )
            except (NoConvergence, SingularJacobian, NonFiniteEvaluation):
                failures += 1
                attempts = m_draws + failures
                if failures >= 5 and failures > max_failure_fraction * attempts:
                    raise TooManyFailures(
                        f"{failures} failed draws out of {attempts} attempts"
                    ) from None
                continue
            draws[m, :k] = phi_star
            draws[m, k] = theta_star
            break
        else:
            raise TooManyFailures("a single draw failed 1000 times")

    total_attempts = m_draws + failures
    if failures >= 5 and failures > max_failure_fraction * total_attempts:
        raise TooManyFailures(f"{failures} failed draws out of {total_attempts} attempts")
    columns = tuple(f"phi_{j}" for j in range(k)) + ("theta",)
    return PosteriorDraws(
        draws=draws,
        layout=dict(fit.layout),
        columns=columns,
        seed=rng.seed,
        stream_id=rng.stream_id,
        method="bps",
        failed_draw_count=failures,
    )


def hpd(draws, level: float = 0.95) -> HpdInterval:
    """Shortest window of consecutive order statistics holding ceil(level*M)
    draws; ties broken toward the lowest start index.

    This is the unimodal-density shortcut for HPD regions computed from
    posterior samples; it needs at least 20 draws to be meaningful.
    """
    draws = np.asarray(draws, dtype=float).ravel()
    m = draws.size
    if m < 20:
        raise TooFewDraws(f"need at least 20 draws, got {m}")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    s = np.sort(draws)
    n_in = int(np.ceil(level * m))
    widths = s[n_in - 1 :] - s[: m - n_in + 1]
    i = int(np.argmin(widths))
    return HpdInterval(float(s[i]), float(s[i + n_in - 1]), level)


@dataclass(frozen=True)
class ParameterSummary:
    median: float
    mean: float
    sd: float
    hpd: HpdInterval


def summarize(draws: PosteriorDraws, level: float = 0.95) -> dict:
    """Per-parameter median/mean/sd and HPD interval.

    The median is the point estimator (midpoint of the central order
    statistics for even draw counts); sd uses the population convention.
    """
    out = {}
    for j, name in enumerate(draws.columns):
        col = draws.draws[:, j]
        out[name] = ParameterSummary(
            median=float(np.median(col)),
            mean=float(col.mean()),
            sd=float(col.std()),
            hpd=hpd(col, level),
        )
    return out
