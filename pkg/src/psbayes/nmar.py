"""Nonignorable-nonresponse machinery: respondents' outcome model, the
exponentially tilted prediction density for nonrespondents, fractional-
imputation EM, and posterior sampling by data augmentation.

Sign convention, fixed globally: pi(phi; x1, y) = {1 + exp(-(1, x1', y) phi)}^-1,
so the response odds O = Pr(delta=0|.)/Pr(delta=1|.) equal exp(-(1, x1', y) phi)
and the y-tilt coefficient of log O is c = -phi_y.  Every odds evaluation is
asserted against the direct (1-pi)/pi ratio in the test suite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .bps import PosteriorDraws
from .data import Dataset
from .errors import (
    NoConvergence,
    NonFiniteEvaluation,
    NonFiniteTilt,
    NotPSD,
    Separation,
    SingularJacobian,
    TooManyFailures,
    WeightDegeneracyWarning,
)
from .numerics import DEFAULT_SOLVER, RngHandle, SolverConfig, psd_cholesky, solve_root
from .propensity import ResponseModel, _link_cdf, newton_logit, score_closures

# An NMAR response model is a ResponseModel with use_y=True whose x_cols name
# the covariates allowed into the response index; covariates left out act as
# response instruments.
NmarResponseModel = ResponseModel

_TILT_CAP = 1e8
_GH_NODES = 64


@dataclass(frozen=True)
class OutcomeModel:
    """Normal linear model for y | x, delta=1: coefficients ``beta`` over
    (1, x[cols]) and residual variance ``sigma2``."""

    beta: np.ndarray
    sigma2: float
    x_cols: tuple = (0,)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        if not self.sigma2 > 0:
            raise ValueError("residual variance must be positive")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    def design(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.column_stack([np.ones(x.shape[0])] + [x[:, j] for j in self.x_cols])

    def mean(self, x: np.ndarray) -> np.ndarray:
        return self.design(x) @ self.beta


def fit_outcome_model(ds: Dataset, x_cols: Optional[tuple] = None) -> OutcomeModel:
    """OLS on respondents with the maximum-likelihood variance (RSS/r)."""
    if x_cols is None:
        x_cols = tuple(range(ds.d))
    mask = ds.delta == 1
    z = np.column_stack([np.ones(int(mask.sum()))] + [ds.x[mask, j] for j in x_cols])
    y = ds.y[mask]
    beta, *_ = np.linalg.lstsq(z, y, rcond=None)
    rss = float(((y - z @ beta) ** 2).sum())
    return OutcomeModel(beta, rss / y.size, x_cols)


def outcome_score_terms(out: OutcomeModel, x, y, beta=None, sigma2=None) -> np.ndarray:
    """Per-unit normal-likelihood score in (beta, sigma2); shape (n, dim+1)."""
    beta = out.beta if beta is None else np.asarray(beta, dtype=float)
    s2 = out.sigma2 if sigma2 is None else float(sigma2)
    z = out.design(x)
    resid = np.asarray(y, dtype=float) - z @ beta
    s_beta = resid[:, None] * z / s2
    s_var = -0.5 / s2 + resid**2 / (2.0 * s2**2)
    return np.column_stack([s_beta, s_var])


def odds(model: NmarResponseModel, x_row, y, phi=None) -> float:
    """Response odds Pr(delta=0|x1,y) / Pr(delta=1|x1,y).

    For the logit link this is exactly exp(-(1, x1', y) phi), unfloored, so
    the y-dependence factorizes as exp(-phi_y y).
    """
    return float(odds_values(model, np.atleast_2d(x_row), np.atleast_1d(float(y)), phi)[0])


def odds_values(model: NmarResponseModel, x, y, phi=None) -> np.ndarray:
    phi_v = model._resolve_phi(phi)
    z = model.design(x, np.asarray(y, dtype=float))
    eta = z @ phi_v
    if model.link == "logit":
        return np.exp(-eta)
    p = _link_cdf(model.link, eta)
    return (1.0 - p) / p


def tilt_coefficient(model: NmarResponseModel, phi=None) -> float:
    """y-slope of log O; zero when the model excludes y.  Logit link only."""
    if not model.use_y:
        return 0.0
    if model.link != "logit":
        raise ValueError("log-odds are linear in y only under the logit link")
    return -float(model._resolve_phi(phi)[-1])


class NonrespondentDensity:
    """Prediction density f(y | x, delta=0) for one covariate row.

    Logit response + normal outcome gives the exact exponentially tilted
    normal N(mu + c sigma^2, sigma^2); other links fall back to deterministic
    Gauss-Hermite moments and sampling-importance-resampling draws against
    the respondents' density.
    """

    def __init__(self, out: OutcomeModel, resp: NmarResponseModel, x_row, phi=None,
                 sir_proposals: int = 200):
        self.out = out
        self.resp = resp
        self.x_row = np.atleast_2d(np.asarray(x_row, dtype=float))
        self.mu = float(out.mean(self.x_row)[0])
        self.sigma2 = out.sigma2
        self.sir_proposals = sir_proposals
        self.closed_form = resp.link == "logit" or not resp.use_y
        if self.closed_form:
            c = tilt_coefficient(resp, phi)
            shift = c * self.sigma2
            if not np.isfinite(shift) or abs(shift) > _TILT_CAP:
                raise NonFiniteTilt(f"tilt shift {shift!r} exceeds the overflow guard")
            self.c = c
            self.tilted_mean = self.mu + shift
        else:
            self._phi = resp._resolve_phi(phi)
            t, w = np.polynomial.hermite.hermgauss(_GH_NODES)
            nodes = self.mu + np.sqrt(2.0 * self.sigma2) * t
            o = odds_values(resp, np.repeat(self.x_row, _GH_NODES, axis=0), nodes, self._phi)
            wts = w / np.sqrt(np.pi) * o
            norm = wts.sum()
            if not np.isfinite(norm) or norm <= 0:
                raise NonFiniteTilt("odds normalizer is not finite")
            self._norm = norm
            self.tilted_mean = float((wts * nodes).sum() / norm)
            self._second = float((wts * nodes**2).sum() / norm)

    def mean(self) -> float:
        return self.tilted_mean

    def sd(self) -> float:
        if self.closed_form:
            return float(np.sqrt(self.sigma2))
        return float(np.sqrt(max(self._second - self.tilted_mean**2, 0.0)))

    def pdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        base = np.exp(-0.5 * (y - self.mu) ** 2 / self.sigma2) / np.sqrt(2 * np.pi * self.sigma2)
        if self.closed_form:
            tilt = np.exp(self.c * (y - self.mu) - 0.5 * self.c**2 * self.sigma2)
            return base * tilt
        o = odds_values(self.resp, np.repeat(self.x_row, y.size, axis=0), y.ravel(), self._phi)
        return (base * o.reshape(y.shape)) / self._norm

    def draw(self, rng: RngHandle, size: int = 1) -> np.ndarray:
        gen = rng.generator
        if self.closed_form:
            return self.tilted_mean + np.sqrt(self.sigma2) * gen.standard_normal(size)
        out = np.empty(size)
        for i in range(size):
            props = self.mu + np.sqrt(self.sigma2) * gen.standard_normal(self.sir_proposals)
            w = odds_values(self.resp, np.repeat(self.x_row, self.sir_proposals, axis=0),
                            props, self._phi)
            w = w / w.sum()
            out[i] = props[gen.choice(self.sir_proposals, p=w)]
        return out


def predict_nonrespondent_density(out: OutcomeModel, resp: NmarResponseModel, x_row,
                                  phi=None, sir_proposals: int = 200) -> NonrespondentDensity:
    """f(y | x, delta=0) = f1(y|x) O(x1, y) / E{O | x, delta=1} as an object
    with mean/sd/pdf/draw."""
    return NonrespondentDensity(out, resp, x_row, phi, sir_proposals)


@dataclass(frozen=True)
class FractionalImputation:
    """b weighted imputed values per nonrespondent; weights sum to one."""

    row_index: np.ndarray
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.size and (np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12):
            raise ValueError("fractional weights must be nonnegative and sum to 1 per unit")


@dataclass
class FiResult:
    phi_hat: np.ndarray
    theta_fi: float
    gamma: OutcomeModel
    imputation: FractionalImputation
    iterations: int
    separation: bool = False


def _fi_weights(phi: np.ndarray, z_imp: np.ndarray, n_mis: int, b: int) -> np.ndarray:
    """Row-normalized weights proportional to O(phi; y*_ij) = exp(-z phi)."""
    log_o = -(z_imp @ phi).reshape(n_mis, b)
    log_o -= log_o.max(axis=1, keepdims=True)
    w = np.exp(log_o)
    w /= w.sum(axis=1, keepdims=True)
    return w


def fi_em(
    ds: Dataset,
    resp0: NmarResponseModel,
    b: int = 20,
    cfg: SolverConfig = DEFAULT_SOLVER,
    rng: Optional[RngHandle] = None,
    outcome_cols: Optional[tuple] = None,
) -> FiResult:
    """Fractional-imputation EM for the outcome-dependent response model.

    Imputed values are drawn once from the respondents' outcome model and
    reused across iterations; each E-step renormalizes their weights by the
    current response odds, and each M-step solves the weighted response score.
    The final mean estimate mixes observed and fractionally imputed outcomes.
    """
    if b < 2:
        raise ValueError("imputation size b must be at least 2")
    if resp0.link != "logit" or not resp0.use_y:
        raise ValueError("fractional imputation needs a logit response model in y")
    if rng is None:
        rng = RngHandle(0)
    gamma = fit_outcome_model(ds, outcome_cols)
    mis = np.flatnonzero(ds.delta == 0)
    n_mis = mis.size

    if n_mis == 0:
        imputation = FractionalImputation(mis, np.empty((0, b)), np.empty((0, b)))
        separation = False
        iterates = []

        def monitor(p):
            iterates.append(p.copy())
            if np.max(np.abs(p)) > 50.0:
                raise Separation("response fit diverged")

        score, jac = score_closures(resp0, ds.x, ds.delta, ds.y)
        try:
            phi_hat = solve_root(score, np.zeros(resp0.n_params), cfg, jac=jac,
                                 monitor=monitor)
        except (Separation, SingularJacobian, NoConvergence):
            separation = True
            phi_hat = iterates[-1] if iterates else np.zeros(resp0.n_params)
        return FiResult(phi_hat, float(ds.y.mean()), gamma, imputation, 0, separation)

    # One-shot draws from the respondents' model, shared by every iteration.
    mu_mis = gamma.mean(ds.x[mis])
    y_star = mu_mis[:, None] + gamma.sigma * rng.generator.standard_normal((n_mis, b))

    x_imp = np.repeat(ds.x[mis], b, axis=0)
    z_imp = resp0.design(x_imp, y_star.ravel())
    resp_mask = ds.delta == 1
    z_resp = resp0.design(ds.x[resp_mask], ds.y[resp_mask])
    n, k = ds.n, resp0.n_params

    phi = np.zeros(k) if resp0.phi is None else np.asarray(resp0.phi, dtype=float)
    weights = _fi_weights(phi, z_imp, n_mis, b)
    iterations = 0
    for iterations in range(1, 501):
        w_flat = weights.ravel()

        def score(p):
            pr = expit(z_resp @ p)
            pi_imp = expit(z_imp @ p)
            return ((1.0 - pr) @ z_resp - (w_flat * pi_imp) @ z_imp) / n

        def jac(p):
            pr = expit(z_resp @ p)
            wi = pr * (1.0 - pr)
            pim = expit(z_imp @ p)
            wim = w_flat * pim * (1.0 - pim)
            return -((z_resp * wi[:, None]).T @ z_resp + (z_imp * wim[:, None]).T @ z_imp) / n

        phi_new = solve_root(score, phi, cfg, jac=jac)
        done = np.max(np.abs(phi_new - phi)) < 1e-8
        phi = phi_new
        weights = _fi_weights(phi, z_imp, n_mis, b)
        if done:
            break
    else:
        raise NoConvergence("fractional-imputation EM hit 500 iterations")

    degenerate = (weights.max(axis=1) > 1.0 - 1e-6).mean()
    if degenerate > 0.10:
        warnings.warn(
            f"{degenerate:.0%} of nonrespondents have all weight on one draw",
            WeightDegeneracyWarning,
        )
    theta = float((np.where(resp_mask, ds.y, 0.0).sum() + (weights * y_star).sum()) / n)
    return FiResult(phi, theta, gamma, FractionalImputation(mis, y_star, weights), iterations)


@dataclass(frozen=True)
class DaConfig:
    """Data-augmentation chain lengths and the failed-redraw ceiling."""

    burn_in: int = 2000
    keep: int = 2000
    max_failure_fraction: float = 0.05

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 1:
            raise ValueError("need burn_in >= 0 and keep >= 1")


def _geweke_z(chain: np.ndarray) -> float:
    """First-10% vs last-50% mean comparison (rough stationarity check)."""
    n = chain.size
    a, b = chain[: max(n // 10, 2)], chain[n // 2 :]
    denom = np.sqrt(a.var() / a.size + b.var() / b.size)
    return float((a.mean() - b.mean()) / denom) if denom > 0 else 0.0


def bda_sample(
    ds: Dataset,
    resp0: NmarResponseModel,
    cfg: DaConfig = DaConfig(),
    rng: Optional[RngHandle] = None,
    outcome_cols: Optional[tuple] = None,
    solver: SolverConfig = DEFAULT_SOLVER,
) -> PosteriorDraws:
    """Posterior sampling under nonignorable nonresponse by data augmentation.

    Alternates an I-step (redraw every missing outcome from the tilted
    prediction density at the current parameters) with a P-step (solve the
    completed-data estimating equations, perturb them by a Gaussian vector
    scaled with their per-unit outer-product covariance, and invert).  The
    respondents' outcome fit is unaffected by imputation, so its block is
    computed once.  Failed P-step inversions are redrawn and counted.
    """
    if rng is None:
        rng = RngHandle(0)
    if outcome_cols is None:
        outcome_cols = tuple(range(ds.d))
    gamma0 = fit_outcome_model(ds, outcome_cols)
    gen = rng.generator

    resp_mask = ds.delta == 1
    mis = np.flatnonzero(~resp_mask)
    n, r = ds.n, int(resp_mask.sum())
    g_dim = gamma0.beta.size + 1
    k = resp0.n_params
    q = g_dim + k + 1

    z_out_r = gamma0.design(ds.x[resp_mask])
    y_r = ds.y[resp_mask]
    ztz_inv = np.linalg.inv(z_out_r.T @ z_out_r)
    beta_ols = gamma0.beta
    rss_ols = gamma0.sigma2 * r

    # Respondent outcome-score block of the per-unit moment matrix is fixed
    # at the anchor gamma-hat for the whole chain.
    s1_fixed = np.zeros((n, g_dim))
    s1_fixed[resp_mask] = outcome_score_terms(gamma0, ds.x[resp_mask], y_r)

    z2 = resp0.design(ds.x, np.zeros(n))  # y column refreshed each iteration
    y_col = k - 1 if resp0.use_y else None
    delta_f = ds.delta.astype(float)
    logit_resp = resp0.link == "logit"

    # Chain state.
    beta_c, sigma2_c = beta_ols.copy(), gamma0.sigma2
    phi_c = np.zeros(k) if resp0.phi is None else np.asarray(resp0.phi, dtype=float)
    y_full = np.where(resp_mask, ds.y, 0.0).copy()
    mu_mis_design = gamma0.design(ds.x[mis]) if mis.size else None

    total = cfg.burn_in + cfg.keep
    kept = np.empty((cfg.keep, q))
    g = np.empty((n, q))
    failures = 0
    phi_warm = phi_c.copy()
    # Zero missing means every unit responded: the response likelihood has no
    # interior maximum, so phi is pinned and only (gamma, theta) are redrawn.
    boundary = mis.size == 0

    for t in range(total):
        # I-step: impute from the tilted prediction density.
        if mis.size:
            if logit_resp or not resp0.use_y:
                c = -phi_c[y_col] if y_col is not None else 0.0
                shift = c * sigma2_c
                if not np.isfinite(shift) or abs(shift) > _TILT_CAP:
                    raise NonFiniteTilt("tilt shift overflowed during the I-step")
                mu_mis = mu_mis_design @ beta_c + shift
                y_full[mis] = mu_mis + np.sqrt(sigma2_c) * gen.standard_normal(mis.size)
            else:
                om = OutcomeModel(beta_c, sigma2_c, outcome_cols)
                for idx in mis:
                    dens = NonrespondentDensity(om, resp0, ds.x[idx], phi_c)
                    y_full[idx] = dens.draw(rng.child(t, int(idx)), 1)[0]

        # P-step anchor on the completed data.
        if y_col is not None:
            z2[:, y_col] = y_full
        if not logit_resp:
            score, jac = score_closures(resp0, ds.x, ds.delta, y_full)
        try:
            if logit_resp:
                phi_hat = newton_logit(z2, delta_f, phi_warm, solver, boundary=50.0)
            else:
                phi_hat = solve_root(score, phi_warm, solver, jac=jac,
                                     monitor=_boundary_monitor)
        except Separation:
            if mis.size:
                raise
            boundary = True  # no-missing degenerate case: pin phi
            phi_hat = phi_warm
        phi_warm = phi_hat
        theta_hat = y_full.mean()

        g[:, :g_dim] = s1_fixed
        if logit_resp:
            g[:, g_dim:g_dim + k] = (delta_f - expit(z2 @ phi_hat))[:, None] * z2
        else:
            from .propensity import response_score_terms

            g[:, g_dim:g_dim + k] = response_score_terms(resp0, ds.x, ds.delta, y_full, phi_hat)
        g[:, -1] = y_full - theta_hat
        chol = psd_cholesky(g.T @ g / n**2)  # Sigma-hat / n in one factor

        # Perturb and invert; redraw on failure.
        for _ in range(1000):
            eta = chol @ gen.standard_normal(q)
            try:
                beta_c, sigma2_c = _outcome_inverse(
                    ztz_inv, beta_ols, rss_ols, r, n, eta[:g_dim])
                if boundary:
                    phi_c = phi_hat
                elif logit_resp:
                    phi_c = newton_logit(z2, delta_f, phi_hat, solver,
                                         target=eta[g_dim:g_dim + k])
                else:
                    phi_c = solve_root(lambda p: score(p) - eta[g_dim:g_dim + k],
                                       phi_hat, solver, jac=jac)
                theta_c = theta_hat - eta[-1]
            except (NoConvergence, SingularJacobian, NonFiniteEvaluation, NotPSD):
                failures += 1
                if failures >= 5 and failures > cfg.max_failure_fraction * (t + 1 + failures):
                    raise TooManyFailures(
                        f"{failures} failed P-step draws by iteration {t}") from None
                continue
            break
        else:
            raise TooManyFailures("a single P-step draw failed 1000 times")

        if t >= cfg.burn_in:
            kept[t - cfg.burn_in] = np.concatenate([beta_c, [sigma2_c], phi_c, [theta_c]])

    layout = {
        "gamma": slice(0, g_dim),
        "phi": slice(g_dim, g_dim + k),
        "theta": slice(g_dim + k, g_dim + k + 1),
    }
    columns = (
        tuple(f"beta_{j}" for j in range(g_dim - 1)) + ("sigma2",)
        + tuple(f"phi_{j}" for j in range(k)) + ("theta",)
    )
    theta_chain = kept[:, -1]
    return PosteriorDraws(
        draws=kept,
        layout=layout,
        columns=columns,
        seed=rng.seed,
        stream_id=rng.stream_id,
        method="bda",
        failed_draw_count=failures,
        diagnostics={"geweke_z_theta": _geweke_z(theta_chain), "boundary_phi": boundary},
    )


def _boundary_monitor(p):
    if np.max(np.abs(p)) > 50.0:
        raise Separation("response fit diverged past the likelihood boundary")


def _outcome_inverse(ztz_inv, beta_ols, rss_ols, r, n, eta_gamma):
    """Closed-form solve of the perturbed normal score.

    With eta = (eta_beta, eta_v), beta(s) = beta_ols - n s (Z'Z)^-1 eta_beta
    and the variance solves (n^2 C - 2 n eta_v) s^2 - r s + RSS = 0 where
    C = eta_beta' (Z'Z)^-1 eta_beta; the root continuous in eta at RSS/r is
    taken.  A negative discriminant or nonpositive variance rejects the draw.
    """
    eta_b, eta_v = eta_gamma[:-1], eta_gamma[-1]
    c = float(eta_b @ ztz_inv @ eta_b)
    a = n**2 * c - 2.0 * n * eta_v
    if abs(a) < 1e-14:
        s = rss_ols / r
    else:
        disc = r**2 - 4.0 * a * rss_ols
        if disc < 0:
            raise NonFiniteEvaluation("no real variance root for this draw")
        s = (r - np.sqrt(disc)) / (2.0 * a)
    if not np.isfinite(s) or s <= 0:
        raise NonFiniteEvaluation("perturbed variance root is not positive")
    beta = beta_ols - n * s * (ztz_inv @ eta_b)
    return beta, float(s)
