"""Random-walk Metropolis-Hastings sampling under the Gaussian pseudo-
likelihood of an over-identified estimating system.

The kernel is -(n/2) U'(psi) S^-1 U(psi) with the moment covariance S frozen
at a consistent anchor, so determinant terms cancel in the acceptance ratio;
an exact variant that re-evaluates S(psi) per candidate is available behind a
flag.  The proposal covariance defaults to a pilot posterior covariance of
the just-identified subsystem scaled by 2.38^2/p.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _fastpath as _fast
from .bps import PosteriorDraws, fit_joint
from .data import Dataset
from .errors import DegenerateChain, NonFiniteEvaluation, NotPSD, Separation
from .numerics import DEFAULT_SOLVER, RngHandle, SolverConfig, psd_cholesky, solve_root
from .propensity import (
    PROB_FLOOR,
    EstimatingSystem,
    ResponseModel,
    _link_cdf,
    augmented_system,
    moment_covariance,
    newton_logit,
    score_closures,
)

RW_SCALE = 2.38


@dataclass(frozen=True)
class MhConfig:
    """Random-walk MH knobs.  ``proposal_cov=None`` selects the data-driven
    choice (pilot posterior covariance times 2.38^2/p)."""

    burn_in: int = 2000
    keep: int = 2000
    thin: int = 1
    proposal_cov: Optional[np.ndarray] = None
    pilot_draws: int = 200
    exact_kernel: bool = False
    record_trace: bool = False

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, keep >= 1, thin >= 1")


@dataclass
class MhDiagnostics:
    acceptance_rate: float
    chain_length: int
    seed: int
    trace: Optional[dict] = None


def log_pseudo_likelihood(system: EstimatingSystem, psi, sigma_inv: np.ndarray) -> float:
    """-(n/2) U'(psi) S^-1 U(psi); the log of the MH ratio kernel.

    Always <= 0 when S^-1 is PSD, zero exactly at a root of the stacked
    equations, and linear in n for a fixed value of U.
    """
    u = system.u(np.asarray(psi, dtype=float))
    val = -0.5 * system.n * float(u @ sigma_inv @ u)
    if not np.isfinite(val):
        raise NonFiniteEvaluation("pseudo-likelihood evaluated to a non-finite value")
    return val


def metropolis_chain(
    log_kernel: Callable[[np.ndarray], float],
    psi0: np.ndarray,
    proposal_chol: np.ndarray,
    cfg: MhConfig,
    rng: RngHandle,
):
    """Shared random-walk MH loop (flat prior, symmetric proposal).

    Returns (kept draws, diagnostics).  The optional trace logs proposals,
    uniforms, kernel values, and accept flags for every iteration so a replay
    can re-derive each decision bit-exactly.
    """
    psi = np.asarray(psi0, dtype=float).copy()
    lk = log_kernel(psi)
    gen = rng.generator
    total = cfg.burn_in + cfg.keep * cfg.thin
    kept = np.empty((cfg.keep, psi.size))
    accept_post = 0
    k = 0
    trace = (
        {"proposals": np.empty((total, psi.size)), "uniforms": np.empty(total),
         "log_kernels": np.empty(total), "accepted": np.zeros(total, dtype=bool),
         "initial": psi.copy(), "initial_log_kernel": lk}
        if cfg.record_trace
        else None
    )
    for t in range(total):
        step = proposal_chol @ gen.standard_normal(psi.size)
        cand = psi + step
        try:
            lk_cand = log_kernel(cand)
        except NonFiniteEvaluation:
            lk_cand = -np.inf
        u = gen.uniform()
        accept = np.log(u) < lk_cand - lk
        if trace is not None:
            trace["proposals"][t] = cand
            trace["uniforms"][t] = u
            trace["log_kernels"][t] = lk_cand
            trace["accepted"][t] = accept
        if accept:
            psi, lk = cand, lk_cand
        if t >= cfg.burn_in:
            accept_post += bool(accept)
            if (t - cfg.burn_in) % cfg.thin == cfg.thin - 1:
                kept[k] = psi
                k += 1
    rate = accept_post / max(cfg.keep * cfg.thin, 1)
    diag = MhDiagnostics(acceptance_rate=rate, chain_length=total, seed=rng.seed, trace=trace)
    return kept, diag


def _fast_augmented_u(ds: Dataset, model: ResponseModel):
    """Stacked-equation evaluator with the design matrix prebuilt.

    Same math as the term-by-term system (asserted in tests); used in the MH
    loop where the generic path's per-call assembly would dominate runtime.
    Mean functional only.
    """
    z = model.design(ds.x)
    delta = ds.delta.astype(float)
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    x = ds.x
    n, d, k = ds.n, ds.d, model.n_params
    logit = model.link == "logit"

    if _fast.HAVE_NUMBA:
        z_c = np.ascontiguousarray(z)
        x_c = np.ascontiguousarray(x)

        def u_compiled(psi):
            return _fast.augmented_u_core(
                z_c, delta, y_filled, x_c,
                np.ascontiguousarray(psi[:d]),
                np.ascontiguousarray(psi[d:d + k]),
                float(psi[d + k]), logit, PROB_FLOOR,
            )

        return u_compiled

    def u(psi):
        mu, phi, theta = psi[:d], psi[d:d + k], psi[d + k]
        eta = z @ phi
        raw = _link_cdf(model.link, eta)
        pi = np.clip(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)
        if logit:
            resid = delta - raw
        else:
            pdf = np.exp(-0.5 * eta**2) / np.sqrt(2.0 * np.pi)
            resid = (delta - pi) * pdf / (pi * (1.0 - pi))
        w = delta / pi
        dev = x - mu
        return np.concatenate([
            resid @ z / n,
            [(w * (y_filled - theta)).mean()],
            (w[:, None] * dev).mean(axis=0),
            dev.mean(axis=0),
        ])

    return u


def _pilot_proposal(
    ds: Dataset,
    model: ResponseModel,
    anchor: np.ndarray,
    sigma: np.ndarray,
    cfg: MhConfig,
    rng: RngHandle,
    solver: SolverConfig,
) -> np.ndarray:
    """Proposal covariance from a pilot run of the just-identified subsystem.

    The subsystem drops the weighted-calibration block, so each pilot draw is
    a direct two-step inversion (score shift for phi, weighted-mean shift for
    theta, mean shift for mu_x); their covariance estimates the posterior
    spread, scaled by the usual 2.38^2/p random-walk factor.
    """
    d, k = ds.d, model.n_params
    keep_idx = np.r_[np.arange(k + 1), np.arange(k + 1 + d, k + 1 + 2 * d)]
    sub_sigma = sigma[np.ix_(keep_idx, keep_idx)]
    chol = psd_cholesky(sub_sigma / ds.n)
    z = model.design(ds.x)
    delta_f = ds.delta.astype(float)
    logit = model.link == "logit"
    if not logit:
        score, jac = score_closures(model, ds.x, ds.delta)
    y_filled = np.where(ds.delta == 1, ds.y, 0.0)
    xbar = ds.x.mean(axis=0)
    phi_hat = anchor[d:d + k]

    pilots = np.empty((cfg.pilot_draws, d + k + 1))
    got = 0
    for m in range(4 * cfg.pilot_draws):
        stream = rng.child(m)
        eta = chol @ stream.generator.standard_normal(k + 1 + d)
        try:
            if logit:
                phi_star = newton_logit(z, delta_f, phi_hat, solver, target=eta[:k])
            else:
                phi_star = solve_root(lambda p: score(p) - eta[:k], phi_hat, solver, jac=jac)
        except Exception:
            continue
        pi = np.clip(_link_cdf(model.link, z @ phi_star), PROB_FLOOR, 1 - PROB_FLOOR)
        w = ds.delta / pi
        theta_star = (w @ y_filled - ds.n * eta[k]) / w.sum()
        mu_star = xbar - eta[k + 1:]
        pilots[got] = np.concatenate([mu_star, phi_star, [theta_star]])
        got += 1
        if got == cfg.pilot_draws:
            break
    if got < max(10, cfg.pilot_draws // 4):
        raise NotPSD("pilot run failed to produce enough draws for a proposal")
    cov = np.cov(pilots[:got], rowvar=False)
    p = d + k + 1
    return cov * (RW_SCALE**2 / p)


def obps_sample(
    ds: Dataset,
    model: ResponseModel,
    cfg: MhConfig,
    rng: RngHandle,
    solver: SolverConfig = DEFAULT_SOLVER,
):
    """Posterior draws of (mu_x, phi, theta) for the calibration-augmented
    system via random-walk MH.

    Initialized at the root of the just-identified subsystem; the moment
    covariance is frozen there for the kernel.  Raises
    :class:`DegenerateChain` when the post-burn-in acceptance rate falls
    outside [0.01, 0.99] (rescale the proposal covariance).
    Returns ``(PosteriorDraws, MhDiagnostics)``.
    """
    fit = fit_joint(ds, model, cfg=solver)
    if fit.separation:
        raise Separation("cannot anchor the sampler at a likelihood boundary")
    d, k = ds.d, model.n_params
    anchor = np.concatenate([ds.x.mean(axis=0), fit.zeta_hat])
    system = augmented_system(ds, model)
    sigma = moment_covariance(system, anchor)
    L = psd_cholesky(sigma.matrix)
    eye = np.eye(system.q)
    sigma_inv = np.linalg.solve(L.T, np.linalg.solve(L, eye))

    if cfg.proposal_cov is not None:
        v = np.asarray(cfg.proposal_cov, dtype=float)
    else:
        v = _pilot_proposal(ds, model, anchor, sigma.matrix, cfg, rng.child(0), solver)
    prop_chol = psd_cholesky(v)

    u_eval = _fast_augmented_u(ds, model)
    n = ds.n

    if cfg.exact_kernel:

        def log_kernel(psi):
            sig = moment_covariance(system, psi).matrix
            try:
                Ls = psd_cholesky(sig)
            except NotPSD:
                raise NonFiniteEvaluation("moment covariance not PSD at candidate")
            u = u_eval(psi)
            half = np.linalg.solve(Ls, u)
            logdet = 2.0 * np.log(np.diag(Ls)).sum()
            return -0.5 * logdet - 0.5 * n * float(half @ half)

    else:

        def log_kernel(psi):
            u = u_eval(psi)
            val = -0.5 * n * float(u @ sigma_inv @ u)
            if not np.isfinite(val):
                raise NonFiniteEvaluation("pseudo-likelihood not finite")
            return val

    kept, diag = metropolis_chain(log_kernel, anchor, prop_chol, cfg, rng.child(1))
    if not 0.01 <= diag.acceptance_rate <= 0.99:
        raise DegenerateChain(
            f"acceptance rate {diag.acceptance_rate:.3f} outside [0.01, 0.99]; "
            "rescale the proposal covariance",
            draws=kept,
            diagnostics=diag,
        )
    columns = tuple(f"mu_x_{j}" for j in range(d)) + tuple(f"phi_{j}" for j in range(k)) + ("theta",)
    draws = PosteriorDraws(
        draws=kept,
        layout=dict(system.layout),
        columns=columns,
        seed=rng.seed,
        stream_id=rng.stream_id,
        method="obps",
        diagnostics={"acceptance_rate": diag.acceptance_rate, "chain_length": diag.chain_length},
    )
    return draws, diag
