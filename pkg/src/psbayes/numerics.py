"""Shared numerical kernels: damped Newton root finding, multivariate-normal
sampling, central-difference Jacobians, and deterministic RNG streams.

All routines are pure given their inputs except :class:`RngHandle`, which owns
a private generator; concurrency is achieved by giving each task its own
handle, never by sharing one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NoConvergence, NonFiniteEvaluation, NotPSD, SingularJacobian

MAX_CONDITION = 1e12
_MAX_BACKTRACKS = 30


@dataclass(frozen=True)
class SolverConfig:
    """Newton solver knobs. ``tolerance`` is a sup-norm bound on the residual."""

    max_iterations: int = 100
    tolerance: float = 1e-8
    step_damping: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.step_damping <= 1:
            raise ValueError("step_damping must lie in (0, 1]")


DEFAULT_SOLVER = SolverConfig()


@dataclass
class RngHandle:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Two handles built with the same key produce byte-identical draw sequences
    regardless of platform, run, or how many other streams exist, which is what
    makes Monte Carlo replications parallelizable without losing
    reproducibility.  ``child(*path)`` derives an independent substream (e.g.
    one per posterior draw) from the key alone, not from consumed state.
    """

    seed: int
    stream_id: int = 0
    _path: tuple = ()
    _gen: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = np.random.SeedSequence(
                entropy=self.seed, spawn_key=(self.stream_id, *self._path)
            )
            self._gen = np.random.Generator(np.random.Philox(key))
        return self._gen

    def child(self, *path: int) -> "RngHandle":
        """Independent substream; deterministic in (seed, stream_id, path)."""
        return RngHandle(self.seed, self.stream_id, self._path + tuple(path))


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    Step size is ``1e-6 * max(1, |x_j|)`` per coordinate.  Exact (to roundoff)
    for affine maps.  Raises :class:`NonFiniteEvaluation` if any probe point
    evaluates to NaN/inf.
    """
    x = np.asarray(x, dtype=float)
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"non-finite evaluation near x[{j}] = {x[j]!r}")
        cols.append((fp - fm) / (2.0 * h[j]))
    return np.column_stack(cols)


def condition_estimate(J: np.ndarray) -> float:
    """1-norm condition estimate ||J||_1 ||J^-1||_1 (cheap for small systems)."""
    try:
        J_inv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        return np.inf
    return float(np.abs(J).sum(axis=0).max() * np.abs(J_inv).sum(axis=0).max())


def solve_root(
    f: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: SolverConfig = DEFAULT_SOLVER,
    jac: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    monitor: Optional[Callable[[np.ndarray], None]] = None,
) -> np.ndarray:
    """Solve ``f(x) = 0`` by damped Newton with residual-norm backtracking.

    The Jacobian is central-differenced unless an analytic ``jac`` is supplied
    (hot paths pass one; results are identical within solver tolerance).  When
    a full Newton step does not reduce the sup-norm of the residual, the step
    is shrunk by ``cfg.step_damping`` up to 30 times.  A non-finite residual at
    a trial point counts as "did not decrease" and triggers the same shrink,
    so the solver can back away from invalid regions (e.g. negative variance).

    ``monitor`` is invoked with every accepted iterate; callers use it to
    detect divergence (e.g. likelihood-boundary drift) by raising from inside.
    """
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if not np.all(np.isfinite(x)):
        raise NonFiniteEvaluation("starting point is not finite")

    def residual(z):
        return np.atleast_1d(np.asarray(f(z), dtype=float))

    fx = residual(x)
    if not np.all(np.isfinite(fx)):
        raise NonFiniteEvaluation("f(x0) is not finite")
    norm = np.max(np.abs(fx))

    for _ in range(cfg.max_iterations):
        if norm <= cfg.tolerance:
            return x
        J = jac(x) if jac is not None else numeric_jacobian(f, x)
        J = np.atleast_2d(np.asarray(J, dtype=float))
        if not np.all(np.isfinite(J)):
            raise NonFiniteEvaluation("Jacobian is not finite")
        if condition_estimate(J) > MAX_CONDITION:
            raise SingularJacobian(f"Jacobian condition exceeds {MAX_CONDITION:.0e}")
        step = np.linalg.solve(J, -fx)

        scale = 1.0
        for _ in range(_MAX_BACKTRACKS + 1):
            x_try = x + scale * step
            f_try = residual(x_try)
            if np.all(np.isfinite(f_try)):
                norm_try = np.max(np.abs(f_try))
                if norm_try < norm:
                    break
            scale *= cfg.step_damping
        else:
            raise NoConvergence("backtracking failed to reduce the residual")

        x, fx, norm = x_try, f_try, norm_try
        if monitor is not None:
            monitor(x)

    if norm <= cfg.tolerance:
        return x
    raise NoConvergence(
        f"no root after {cfg.max_iterations} iterations (residual {norm:.3e})"
    )


def psd_cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of ``cov``, ridge-repaired if slightly indefinite.

    The repair adds ``1e-10 * trace/p`` to the diagonal; anything that still
    fails is genuinely not PSD and raises :class:`NotPSD`.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.size and not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    p = cov.shape[0]
    eps = 1e-10 * np.trace(cov) / p
    if eps <= 0:
        raise NotPSD("covariance has non-positive trace and failed Cholesky")
    try:
        return np.linalg.cholesky(cov + eps * np.eye(p))
    except np.linalg.LinAlgError:
        raise NotPSD("covariance is not PSD even after ridge repair") from None


def sample_mvn(
    mean: np.ndarray,
    cov: np.ndarray,
    rng: RngHandle,
    size: Optional[int] = None,
) -> np.ndarray:
    """Draw from N(mean, cov) via Cholesky; ``size=None`` returns one vector.

    A zero covariance degenerates to the mean.  Draws consume ``rng`` state,
    so repeated calls on one handle continue its stream.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    L = psd_cholesky(cov)
    n = 1 if size is None else size
    z = rng.generator.standard_normal((n, mean.size))
    out = mean + z @ L.T
    return out[0] if size is None else out
