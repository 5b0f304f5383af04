"""Sequential propensity estimation for panel attrition: wave-by-wave
response models on (baseline covariates, lagged outcome), cumulative product
propensities, and posterior sampling for the final-wave mean.

Only the cumulative response indicator enters any estimator, so intermittent
returns after a dropout never contribute; the wave-t score is restricted to
units still in the panel at wave t-1.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.special import expit

from .bps import PosteriorDraws
from .data import PanelDataset
from .errors import DegenerateChain, NoConvergence, NonFiniteEvaluation, Separation, SingularJacobian, TooManyFailures
from .numerics import DEFAULT_SOLVER, RngHandle, SolverConfig, psd_cholesky, solve_root
from .obps import RW_SCALE, MhConfig, MhDiagnostics, metropolis_chain
from .propensity import EstimatingSystem, PROB_FLOOR, moment_covariance, newton_logit


def wave_design(pds: PanelDataset, t: int) -> np.ndarray:
    """Predictor matrix (1, x, y_{t-1}) for wave t (2-based); lagged outcomes
    of dropped-out units are zero-filled and always multiplied by delta_star."""
    lag = np.where(pds.delta_star[:, t - 2] == 1, pds.y[:, t - 2], 0.0)
    return np.column_stack([np.ones(pds.n), pds.x, lag])


def wave_param_count(pds: PanelDataset) -> int:
    return pds.d + 2


def _split_wave_phis(pds: PanelDataset, phis) -> list:
    k = wave_param_count(pds)
    phis = np.asarray(phis, dtype=float).ravel()
    expected = k * (pds.waves - 1)
    if phis.size != expected:
        raise ValueError(f"need {expected} wave parameters, got {phis.size}")
    return [phis[i * k:(i + 1) * k] for i in range(pds.waves - 1)]


def wave_score_terms(pds: PanelDataset, phis) -> np.ndarray:
    """Per-unit stacked wave scores delta*_{t-1} {delta_t - pi_t} z_t."""
    blocks = []
    for t, phi in enumerate(_split_wave_phis(pds, phis), start=2):
        z = wave_design(pds, t)
        eligible = pds.delta_star[:, t - 2].astype(float)
        resid = eligible * (pds.delta[:, t - 1] - expit(z @ phi))
        blocks.append(resid[:, None] * z)
    return np.hstack(blocks)


def wave_scores(pds: PanelDataset, phis) -> np.ndarray:
    """Mean stacked score vector across waves 2..T."""
    return wave_score_terms(pds, phis).mean(axis=0)


def cumulative_propensity(pds: PanelDataset, phis) -> np.ndarray:
    """pi_i = prod_{t=2..T} pi_it; meaningful where delta*_T = 1."""
    pi = np.ones(pds.n)
    for t, phi in enumerate(_split_wave_phis(pds, phis), start=2):
        z = wave_design(pds, t)
        pi *= np.clip(expit(z @ phi), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return pi


def _fit_wave(pds: PanelDataset, t: int, cfg: SolverConfig):
    """(phi_t, boundary flag); a wave with no dropouts has no interior ML
    maximum, in which case phi is clamped at the last Newton iterate."""
    z = wave_design(pds, t)
    eligible = pds.delta_star[:, t - 2].astype(float)
    resp = pds.delta[:, t - 1].astype(float)
    n = pds.n
    iterates = []

    def score(phi):
        return (eligible * (resp - expit(z @ phi))) @ z / n

    def jac(phi):
        p = expit(z @ phi)
        w = eligible * p * (1.0 - p)
        return -(z * w[:, None]).T @ z / n

    def monitor(phi):
        iterates.append(phi.copy())
        if np.max(np.abs(phi)) > 50.0:
            raise Separation(f"wave-{t} response fit diverged")

    boundary = bool(np.all(resp[eligible == 1] == 1))
    try:
        phi = solve_root(score, np.zeros(z.shape[1]), cfg, jac=jac, monitor=monitor)
    except (Separation, SingularJacobian, NoConvergence):
        if not (boundary or iterates):
            raise
        boundary = True
        phi = iterates[-1] if iterates else np.zeros(z.shape[1])
    return phi, boundary or np.max(np.abs(phi)) > 50.0


class PanelFit:
    """Wave-by-wave ML response fits plus the weighted final-wave mean."""

    def __init__(self, phis: list, theta_hat: float, layout: dict, separation: bool = False):
        self.phis = phis
        self.theta_hat = theta_hat
        self.layout = layout
        self.separation = separation
        self.zeta_hat = np.concatenate([*phis, [theta_hat]])


def _theta_root(pds: PanelDataset, pi: np.ndarray, eta: float = 0.0) -> float:
    w = pds.delta_star[:, -1] / pi
    y_final = np.where(pds.delta_star[:, -1] == 1, pds.y[:, -1], 0.0)
    return float((w @ y_final - pds.n * eta) / w.sum())


def panel_fit(pds: PanelDataset, cfg: SolverConfig = DEFAULT_SOLVER) -> PanelFit:
    """Sequential fit: each wave's response parameters by restricted ML, then
    the final-wave mean weighted by the inverse cumulative propensity."""
    if pds.waves < 2:
        raise ValueError("need at least two waves for attrition modelling")
    fits = [_fit_wave(pds, t, cfg) for t in range(2, pds.waves + 1)]
    phis = [phi for phi, _ in fits]
    separation = any(flag for _, flag in fits)
    if pds.delta_star[:, -1].all():
        theta_hat = float(pds.y[:, -1].mean())  # full retention: plain mean
    else:
        pi = cumulative_propensity(pds, np.concatenate(phis))
        theta_hat = _theta_root(pds, pi)
    k = wave_param_count(pds)
    layout = {"phi": slice(0, k * (pds.waves - 1)),
              "theta": slice(k * (pds.waves - 1), k * (pds.waves - 1) + 1)}
    for t in range(2, pds.waves + 1):
        layout[f"phi_{t}"] = slice((t - 2) * k, (t - 1) * k)
    return PanelFit(phis, theta_hat, layout, separation)


def panel_system(pds: PanelDataset) -> EstimatingSystem:
    """Stacked wave scores plus the weighted final-wave mean equation."""
    k = wave_param_count(pds)
    p = k * (pds.waves - 1) + 1
    layout = {"phi": slice(0, p - 1), "theta": slice(p - 1, p)}

    def score_block(zeta):
        return wave_score_terms(pds, zeta[:p - 1])

    def theta_block(zeta):
        pi = cumulative_propensity(pds, zeta[:p - 1])
        w = pds.delta_star[:, -1] / pi
        y_final = np.where(pds.delta_star[:, -1] == 1, pds.y[:, -1], 0.0)
        return (w * (y_final - zeta[p - 1]))[:, None]

    return EstimatingSystem([score_block, theta_block], layout, pds.n, p, q=p)


def panel_bps(
    pds: PanelDataset,
    m_draws: int,
    rng: RngHandle,
    cfg: SolverConfig = DEFAULT_SOLVER,
    fit: Optional[PanelFit] = None,
    mvn_override=None,
    max_failure_fraction: float = 0.05,
) -> PosteriorDraws:
    """Posterior draws of (phi_2..phi_T, theta) for the final-wave mean.

    Per draw: perturb the stacked wave scores, re-solve each wave warm-started
    at its fit, rebuild the cumulative propensities, and invert the weighted
    mean equation.  Mirrors the cross-sectional sampler; with T=2 and a fully
    observed first wave the two coincide exactly.
    """
    if fit is None:
        fit = panel_fit(pds, cfg)
    system = panel_system(pds)
    sigma = moment_covariance(system, fit.zeta_hat)
    chol = psd_cholesky(sigma.matrix / pds.n)
    k = wave_param_count(pds)
    waves = pds.waves

    solvers = []
    for t in range(2, waves + 1):
        z = wave_design(pds, t)
        eligible = pds.delta_star[:, t - 2].astype(float)
        resp = pds.delta[:, t - 1].astype(float)
        solvers.append((z, resp, eligible))

    draws = np.empty((m_draws, system.p))
    failures = 0
    for m in range(m_draws):
        for attempt in range(1000):
            stream = rng.child(m, attempt)
            if mvn_override is None:
                eta = chol @ stream.generator.standard_normal(system.q)
            else:
                eta = np.asarray(mvn_override(stream), dtype=float)
            try:
                phis = []
                for i, (z, resp, eligible) in enumerate(solvers):
                    phis.append(newton_logit(z, resp, fit.phis[i], cfg,
                                             target=eta[i * k:(i + 1) * k],
                                             eligible=eligible))
                pi = cumulative_propensity(pds, np.concatenate(phis))
                theta_star = _theta_root(pds, pi, eta[-1])
            except (NoConvergence, SingularJacobian, NonFiniteEvaluation):
                failures += 1
                if failures >= 5 and failures > max_failure_fraction * (m + 1 + failures):
                    raise TooManyFailures(f"{failures} failed panel draws") from None
                continue
            draws[m] = np.concatenate([*phis, [theta_star]])
            break
        else:
            raise TooManyFailures("a single panel draw failed 1000 times")

    columns = tuple(
        f"phi{t}_{j}" for t in range(2, waves + 1) for j in range(k)
    ) + ("theta",)
    return PosteriorDraws(
        draws=draws,
        layout=dict(fit.layout),
        columns=columns,
        seed=rng.seed,
        stream_id=rng.stream_id,
        method="panel_bps",
        failed_draw_count=failures,
    )


def panel_augmented_system(pds: PanelDataset) -> EstimatingSystem:
    """Panel system plus covariate-calibration moments over (mu_x, phis, theta)."""
    d, k = pds.d, wave_param_count(pds)
    n_phi = k * (pds.waves - 1)
    p = d + n_phi + 1
    layout = {"mu_x": slice(0, d), "phi": slice(d, d + n_phi),
              "theta": slice(d + n_phi, p)}

    def score_block(zeta):
        return wave_score_terms(pds, zeta[d:d + n_phi])

    def theta_block(zeta):
        pi = cumulative_propensity(pds, zeta[d:d + n_phi])
        w = pds.delta_star[:, -1] / pi
        y_final = np.where(pds.delta_star[:, -1] == 1, pds.y[:, -1], 0.0)
        return (w * (y_final - zeta[-1]))[:, None]

    def calib_block(zeta):
        pi = cumulative_propensity(pds, zeta[d:d + n_phi])
        w = pds.delta_star[:, -1] / pi
        dev = pds.x - zeta[:d][None, :]
        return np.hstack([w[:, None] * dev, dev])

    return EstimatingSystem(
        [score_block, theta_block, calib_block], layout, pds.n, p, q=n_phi + 1 + 2 * d
    )


def panel_obps(
    pds: PanelDataset,
    cfg: MhConfig,
    rng: RngHandle,
    solver: SolverConfig = DEFAULT_SOLVER,
):
    """Random-walk MH over (mu_x, phi_2..phi_T, theta) with the calibration-
    augmented panel system; proposal defaults to a pilot posterior covariance
    from :func:`panel_bps` (plus the mean block) scaled by 2.38^2/p.
    Returns ``(PosteriorDraws, MhDiagnostics)``."""
    fit = panel_fit(pds, solver)
    d = pds.d
    anchor = np.concatenate([pds.x.mean(axis=0), fit.zeta_hat])
    system = panel_augmented_system(pds)
    sigma = moment_covariance(system, anchor)
    L = psd_cholesky(sigma.matrix)
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(system.q)))

    if cfg.proposal_cov is not None:
        v = np.asarray(cfg.proposal_cov, dtype=float)
    else:
        pilot = panel_bps(pds, cfg.pilot_draws, rng.child(0), solver, fit=fit)
        xbar = pds.x.mean(axis=0)
        mu_rows = np.empty((cfg.pilot_draws, d))
        sub = sigma.matrix[-d:, -d:] / pds.n  # unweighted-calibration block
        chol_mu = psd_cholesky(sub)
        for m in range(cfg.pilot_draws):
            mu_rows[m] = xbar - chol_mu @ rng.child(0, m, 7).generator.standard_normal(d)
        pilots = np.hstack([mu_rows, pilot.draws])
        v = np.cov(pilots, rowvar=False) * (RW_SCALE**2 / system.p)
    prop_chol = psd_cholesky(v)

    n = pds.n

    def log_kernel(psi):
        u = system.u(psi)
        val = -0.5 * n * float(u @ sigma_inv @ u)
        if not np.isfinite(val):
            raise NonFiniteEvaluation("pseudo-likelihood not finite")
        return val

    kept, diag = metropolis_chain(log_kernel, anchor, prop_chol, cfg, rng.child(1))
    if not 0.01 <= diag.acceptance_rate <= 0.99:
        raise DegenerateChain(
            f"acceptance rate {diag.acceptance_rate:.3f} outside [0.01, 0.99]",
            draws=kept,
            diagnostics=diag,
        )
    k = wave_param_count(pds)
    columns = tuple(f"mu_x_{j}" for j in range(d)) + tuple(
        f"phi{t}_{j}" for t in range(2, pds.waves + 1) for j in range(k)
    ) + ("theta",)
    draws = PosteriorDraws(
        draws=kept,
        layout=dict(system.layout),
        columns=columns,
        seed=rng.seed,
        stream_id=rng.stream_id,
        method="panel_obps",
        diagnostics={"acceptance_rate": diag.acceptance_rate, "chain_length": diag.chain_length},
    )
    return draws, diag
