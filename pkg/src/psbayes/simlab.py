"""Monte Carlo lab: data generators for the two simulation designs and the
replication harness computing bias, relative std, coverage, and CI length.

Scale convention: the generator writings e ~ N(0, sqrt(|x1|+1)) and
x ~ N(0, 0.5) read their second argument as a *variance* by default; pass
``scale_convention="sd"`` to flip.  The calibration run comparing both against
the reference CI lengths is recorded in the README (variance wins, and the
constant c3 keeping E(y) level across outcome designs is derived from the
chosen convention at call time, never hard-coded).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit, ndtr

from .bps import bps_sample, hpd
from .data import Dataset, PanelDataset
from .errors import PsBayesError
from .frequentist import complete_case, full_sample, kott_chang, ops_gmm, ps_taylor
from .nmar import DaConfig, bda_sample, fi_em
from .numerics import RngHandle
from .obps import MhConfig, obps_sample
from .propensity import ResponseModel

SIM1_MECHANISMS = {
    "R1": ("logit", (0.1, 0.4)),
    "R2": ("logit", (-1.2, 0.15)),
    "R3": ("probit", (0.0, 0.28)),
    "R4": ("probit", (-0.7, 0.1)),
}
SIM2_MECHANISMS = {
    "R1": ("logit", (0.8, -0.2)),
    "R2": ("probit", (0.5, -0.1)),
}
SIM1_MEAN_FNS = ("m1", "m2", "m3")
_SIM1_MU = (2.0, 8.0)
_SIM1_VAR = (4.0, 8.0)

METHODS = ("full", "cc", "ps", "bps", "ops", "obps", "kc", "fi", "bda")


class SimulatedSample(NamedTuple):
    """A generated dataset plus the complete outcomes and the target value."""

    dataset: Dataset
    y_complete: np.ndarray
    theta_true: float


def _bernoulli(gen, link: str, eta: np.ndarray) -> np.ndarray:
    p = expit(eta) if link == "logit" else ndtr(eta)
    return (gen.uniform(size=eta.size) < p).astype(np.int8)


def sim1_c3() -> float:
    """Constant aligning the third outcome design's mean with the others:
    8 - 24 - 0.1 E exp(0.1 x1 - 0.2), lognormal moment at x1 ~ N(2, 4)."""
    return 8.0 - 24.0 - 0.1 * float(np.exp(0.1 * 2.0 - 0.2 + 0.5 * 0.01 * 4.0))


@dataclass(frozen=True)
class StudyOneConfig:
    """Covariate-driven (ignorable) response design."""

    mean_fn: str = "m1"
    mechanism: str = "R1"
    n: int = 500
    reps: int = 2000
    scale_convention: str = "variance"

    def __post_init__(self):
        if self.mean_fn not in SIM1_MEAN_FNS:
            raise ValueError(f"mean_fn must be one of {SIM1_MEAN_FNS}")
        if self.mechanism not in SIM1_MECHANISMS:
            raise ValueError(f"mechanism must be one of {tuple(SIM1_MECHANISMS)}")
        if self.scale_convention not in ("variance", "sd"):
            raise ValueError("scale_convention must be 'variance' or 'sd'")


@dataclass(frozen=True)
class StudyTwoConfig:
    """Outcome-driven (nonignorable) response design."""

    mean_fn: str = "m1"
    mechanism: str = "R1"
    n: int = 500
    reps: int = 2000
    scale_convention: str = "variance"

    def __post_init__(self):
        if self.mean_fn not in SIM1_MEAN_FNS:
            raise ValueError(f"mean_fn must be one of {SIM1_MEAN_FNS}")
        if self.mechanism not in SIM2_MECHANISMS:
            raise ValueError(f"mechanism must be one of {tuple(SIM2_MECHANISMS)}")
        if self.scale_convention not in ("variance", "sd"):
            raise ValueError("scale_convention must be 'variance' or 'sd'")


def gen_sim1(cfg: StudyOneConfig, rng: RngHandle) -> SimulatedSample:
    """Two Gaussian covariates, three outcome designs, response on x1 only.

    The fitted response model always uses (1, x1, x2) with a logit link, so
    the probit mechanisms probe misspecification.  E(y) = 8 in every design.
    """
    gen = rng.generator
    n = cfg.n
    x1 = _SIM1_MU[0] + np.sqrt(_SIM1_VAR[0]) * gen.standard_normal(n)
    x2 = _SIM1_MU[1] + np.sqrt(_SIM1_VAR[1]) * gen.standard_normal(n)
    if cfg.mean_fn == "m1":
        m = 2.0 * x1 + 3.0 * x2 - 20.0
    elif cfg.mean_fn == "m2":
        m = 0.5 * (x1 - 2.0) ** 2 + x2 - 2.0
    else:
        m = 0.1 * np.exp(0.1 * x1 - 0.2) + 3.0 * x2 + sim1_c3()
    scale = np.sqrt(np.abs(x1) + 1.0)
    sd = np.sqrt(scale) if cfg.scale_convention == "variance" else scale
    y = m + sd * gen.standard_normal(n)
    link, (p0, p1) = SIM1_MECHANISMS[cfg.mechanism]
    delta = _bernoulli(gen, link, p0 + p1 * x1)
    ds = Dataset(np.column_stack([x1, x2]), np.where(delta == 1, y, np.nan), delta)
    return SimulatedSample(ds, y, 8.0)


def sim2_theta_true(cfg: StudyTwoConfig) -> float:
    x_var = 0.5 if cfg.scale_convention == "variance" else 0.25
    if cfg.mean_fn == "m2":
        return -1.25 + 0.5 * x_var
    return -1.0


def gen_sim2(cfg: StudyTwoConfig, rng: RngHandle) -> SimulatedSample:
    """Single covariate, unit-variance errors, response depending on y."""
    gen = rng.generator
    n = cfg.n
    x_sd = np.sqrt(0.5) if cfg.scale_convention == "variance" else 0.5
    x = x_sd * gen.standard_normal(n)
    if cfg.mean_fn == "m1":
        m = -1.0 + 2.0 * x
    elif cfg.mean_fn == "m2":
        m = -1.25 + 2.0 * x + 0.5 * x**2
    else:
        m = -1.0 + 8.0 * np.sin(x)
    y = m + gen.standard_normal(n)
    link, (p0, p1) = SIM2_MECHANISMS[cfg.mechanism]
    delta = _bernoulli(gen, link, p0 + p1 * y)
    ds = Dataset(x[:, None], np.where(delta == 1, y, np.nan), delta)
    return SimulatedSample(ds, y, sim2_theta_true(cfg))


@dataclass(frozen=True)
class PanelSimConfig:
    """Linear-AR panel with logistic attrition on (1, x, lagged y)."""

    n: int = 500
    waves: int = 3
    x_dim: int = 1
    intercept: float = 0.5
    ar_coef: float = 0.6
    x_coef: float = 1.0
    resid_sd: float = 1.0
    wave_phi: tuple = (1.0, 0.3, -0.2)
    monotone: bool = True

    def theta_true(self) -> float:
        mean = self.intercept
        for _ in range(self.waves - 1):
            mean = self.intercept + self.ar_coef * mean
        return mean


class SimulatedPanel(NamedTuple):
    panel: PanelDataset
    y_complete: np.ndarray
    theta_true: float


def gen_panel(cfg: PanelSimConfig, rng: RngHandle) -> SimulatedPanel:
    """Synthetic attrition panel: wave 1 fully observed; wave-t response is
    Bernoulli with a logit index on (1, x, y_{t-1}).  ``monotone=False``
    lets dropped units return (those cells are kept but ignored by the
    cumulative-response machinery)."""
    gen = rng.generator
    n, T = cfg.n, cfg.waves
    x = gen.standard_normal((n, cfg.x_dim))
    xc = x @ (cfg.x_coef * np.ones(cfg.x_dim))
    y = np.empty((n, T))
    y[:, 0] = cfg.intercept + xc + cfg.resid_sd * gen.standard_normal(n)
    for t in range(1, T):
        y[:, t] = (cfg.intercept + cfg.ar_coef * y[:, t - 1] + xc
                   + cfg.resid_sd * gen.standard_normal(n))
    delta = np.ones((n, T), dtype=np.int8)
    phi = np.asarray(cfg.wave_phi, dtype=float)
    if phi.size != cfg.x_dim + 2:
        raise ValueError(f"wave_phi needs {cfg.x_dim + 2} entries")
    alive = np.ones(n, dtype=bool)
    for t in range(1, T):
        eta = phi[0] + x @ phi[1:-1] + phi[-1] * y[:, t - 1]
        raw = gen.uniform(size=n) < expit(eta)
        delta[:, t] = raw if not cfg.monotone else (raw & alive)
        alive &= delta[:, t] == 1
    pds = PanelDataset(x, np.where(delta == 1, y, np.nan), delta)
    return SimulatedPanel(pds, y, cfg.theta_true())


@dataclass
class MethodReport:
    """Aggregates for one estimator over the replications."""

    method: str
    bias: float
    mc_sd: float
    relative_std: float
    coverage: float
    coverage_mc_se: float
    mean_ci_length: float
    reps_used: int
    failed_reps: int
    retries: int


@dataclass
class McReport:
    study: int
    mechanism: str
    mean_fn: str
    n: int
    reps: int
    seed: int
    theta_true: float
    methods: dict
    per_rep: list = field(default_factory=list, repr=False)

    def to_dict(self, include_per_rep: bool = False) -> dict:
        out = {
            "study": self.study,
            "mechanism": self.mechanism,
            "mean_fn": self.mean_fn,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "theta_true": self.theta_true,
            "methods": {k: asdict(v) for k, v in self.methods.items()},
        }
        if include_per_rep:
            out["per_rep"] = self.per_rep
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(**kwargs), indent=2, allow_nan=True)

    def write_rep_csv(self, path) -> None:
        """Flat per-replication results for external plotting."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["study", "mechanism", "mean_fn", "rep", "method",
                 "estimate", "lower", "upper", "covered"]
            )
            for row in self.per_rep:
                writer.writerow(
                    [self.study, self.mechanism, self.mean_fn, row["rep"], row["method"],
                     row["estimate"], row["lower"], row["upper"], row["covered"]]
                )


def _study1_model() -> ResponseModel:
    return ResponseModel(link="logit", x_cols=(0, 1))


def _sim2_response() -> ResponseModel:
    return ResponseModel(link="logit", x_cols=(), use_y=True)


def _mar_model_for(ds: Dataset) -> ResponseModel:
    return ResponseModel(link="logit", x_cols=tuple(range(ds.d)))


def run_method(
    method: str,
    ds: Dataset,
    y_complete: Optional[np.ndarray],
    rng: RngHandle,
    m_draws: int = 2000,
    mh_config: Optional[MhConfig] = None,
    da_config: Optional[DaConfig] = None,
    fi_size: int = 20,
    level: float = 0.95,
    model: Optional[ResponseModel] = None,
):
    """(estimate, lower, upper) for one estimator on one dataset.

    Bayesian methods report the posterior median and HPD bounds; FI reports a
    point estimate only (NaN interval).
    """
    method = method.lower()
    if method == "full":
        if y_complete is None:
            raise ValueError("full-sample benchmark needs the complete outcomes")
        est = full_sample(Dataset(ds.x, y_complete, np.ones(ds.n, dtype=np.int8)))
        return est.theta_hat, est.ci[0], est.ci[1]
    if method == "cc":
        est = complete_case(ds)
        return est.theta_hat, est.ci[0], est.ci[1]
    if model is None:
        model = _mar_model_for(ds)
    if method == "ps":
        est = ps_taylor(ds, model)
        return est.theta_hat, est.ci[0], est.ci[1]
    if method == "ops":
        est = ops_gmm(ds, model)
        return est.theta_hat, est.ci[0], est.ci[1]
    if method == "bps":
        draws = bps_sample(ds, model, m_draws, rng)
        theta = draws.column("theta")
        interval = hpd(theta, level)
        return float(np.median(theta)), interval.lower, interval.upper
    if method == "obps":
        draws, _ = obps_sample(ds, model, mh_config or MhConfig(), rng)
        theta = draws.column("theta")
        interval = hpd(theta, level)
        return float(np.median(theta)), interval.lower, interval.upper
    if method == "kc":
        est = kott_chang(ds)
        return est.theta_hat, est.ci[0], est.ci[1]
    if method == "fi":
        res = fi_em(ds, _sim2_response(), b=fi_size, rng=rng)
        return res.theta_fi, np.nan, np.nan
    if method == "bda":
        draws = bda_sample(ds, _sim2_response(), da_config or DaConfig(), rng)
        theta = draws.column("theta")
        interval = hpd(theta, level)
        return float(np.median(theta)), interval.lower, interval.upper
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def _one_rep(study, mechanism, mean_fn, methods, n, seed, rep, m_draws,
             mh_config, da_config, fi_size, level, scale_convention):
    base = RngHandle(seed, rep)
    if study == 1:
        cfg = StudyOneConfig(mean_fn, mechanism, n, 1, scale_convention)
        sample = gen_sim1(cfg, base.child(0))
        model = _study1_model()
    else:
        cfg = StudyTwoConfig(mean_fn, mechanism, n, 1, scale_convention)
        sample = gen_sim2(cfg, base.child(0))
        model = None
    out = {}
    for mi, method in enumerate(methods):
        result, retries = (np.nan, np.nan, np.nan), 0
        for attempt in range(3):
            try:
                result = run_method(
                    method, sample.dataset, sample.y_complete,
                    base.child(10 + mi, attempt), m_draws,
                    mh_config, da_config, fi_size, level, model,
                )
                break
            except (PsBayesError, np.linalg.LinAlgError, ValueError):
                retries += 1
        out[method] = (*result, retries)
    return out


def run_study(
    study: int,
    mechanism: str,
    mean_fn: str,
    methods: Sequence[str],
    reps: int,
    n: int = 500,
    seed: int = 0,
    n_jobs: int = 1,
    m_draws: int = 2000,
    mh_config: Optional[MhConfig] = None,
    da_config: Optional[DaConfig] = None,
    fi_size: int = 20,
    level: float = 0.95,
    scale_convention: str = "variance",
) -> McReport:
    """Replicated comparison of estimators on one simulation cell.

    Each replication r owns the RNG stream keyed (seed, r): data on one
    substream, each method attempt on another, so results are identical for a
    fixed seed no matter how many workers run (`n_jobs` follows joblib).  A
    method failing three fresh-stream attempts is recorded as a failed rep,
    never silently dropped.  The full-sample benchmark is always computed so
    relative std is well-defined.
    """
    if study not in (1, 2):
        raise ValueError("study must be 1 or 2")
    if reps < 1:
        raise ValueError("reps must be positive")
    methods = [m.lower() for m in methods]
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    run_methods = list(dict.fromkeys(methods + ["full"]))

    if study == 1:
        theta_true = 8.0
        StudyOneConfig(mean_fn, mechanism, n, reps, scale_convention)  # validate
    else:
        theta_true = sim2_theta_true(StudyTwoConfig(mean_fn, mechanism, n, reps, scale_convention))

    results = Parallel(n_jobs=n_jobs)(
        delayed(_one_rep)(study, mechanism, mean_fn, tuple(run_methods), n, seed, r,
                          m_draws, mh_config, da_config, fi_size, level, scale_convention)
        for r in range(reps)
    )

    per_rep = []
    arrays = {m: np.full((reps, 3), np.nan) for m in run_methods}
    retries = dict.fromkeys(run_methods, 0)
    for r, res in enumerate(results):
        for m in run_methods:
            est, lo, hi, tr = res[m]
            arrays[m][r] = (est, lo, hi)
            retries[m] += tr
            covered = bool(lo <= theta_true <= hi) if np.isfinite(lo) else None
            per_rep.append({"rep": r, "method": m, "estimate": est,
                            "lower": lo, "upper": hi, "covered": covered})

    full_sd = float(np.nanstd(arrays["full"][:, 0], ddof=1))
    reports = {}
    for m in run_methods:
        est, lo, hi = arrays[m].T
        ok = np.isfinite(est)
        used = int(ok.sum())
        has_ci = np.isfinite(lo) & np.isfinite(hi)
        mc_sd = float(np.std(est[ok], ddof=1)) if used > 1 else np.nan
        if has_ci.any():
            covered = (lo[has_ci] <= theta_true) & (theta_true <= hi[has_ci])
            coverage = float(covered.mean())
            mean_len = float((hi[has_ci] - lo[has_ci]).mean())
        else:
            coverage, mean_len = np.nan, np.nan
        reports[m] = MethodReport(
            method=m,
            bias=float(est[ok].mean() - theta_true) if used else np.nan,
            mc_sd=mc_sd,
            relative_std=mc_sd / full_sd if full_sd > 0 else np.nan,
            coverage=coverage,
            coverage_mc_se=float(np.sqrt(0.95 * 0.05 / reps)),
            mean_ci_length=mean_len,
            reps_used=used,
            failed_reps=int(reps - used),
            retries=int(retries[m]),
        )
    return McReport(study, mechanism, mean_fn, n, reps, seed, theta_true, reports, per_rep)
