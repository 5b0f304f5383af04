"""Dataset containers and CSV ingestion.

Cross-sectional files carry columns ``x1..xd, y, delta``; a missing outcome is
an *empty* y cell (never a NaN sentinel) so files stay human-auditable.  Panel
files are long format ``id, t, x1..xd, y, delta``.  The intercept is never
stored in either layout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRespondents, InconsistentMissingness, ParseError


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (fully observed), outcome ``y`` (NaN where missing),
    and response indicators ``delta`` with ``delta[i] == 1`` iff ``y[i]`` is
    observed.  Instances are immutable and safe to share across workers.
    """

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float)
        delta = np.asarray(self.delta, dtype=np.int8)
        if x.shape[0] != y.shape[0] or y.shape[0] != delta.shape[0]:
            raise ValueError("x, y, delta must agree on the number of rows")
        if x.shape[0] < 1:
            raise ValueError("dataset needs at least one row")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        if not np.all((delta == 0) | (delta == 1)):
            raise ValueError("delta must be 0/1")
        observed = np.isfinite(y)
        if np.any(observed != (delta == 1)):
            raise InconsistentMissingness("delta=1 rows must have finite y and vice versa")
        for arr in (x, y, delta):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", delta)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n_respondents(self) -> int:
        return int(self.delta.sum())


@dataclass(frozen=True)
class PanelDataset:
    """Baseline covariates plus T waves of outcomes with attrition indicators.

    ``delta_star[:, t] = prod_{k<=t} delta[:, k]`` (cumulative response); it is
    non-increasing along waves by construction, and estimators only ever read
    ``delta_star``, so intermittent returns after a dropout are kept in the
    data but never used.
    """

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        delta = np.atleast_2d(np.asarray(self.delta, dtype=np.int8))
        if not (x.shape[0] == y.shape[0] == delta.shape[0]):
            raise ValueError("x, y, delta must agree on the number of units")
        if y.shape != delta.shape:
            raise ValueError("y and delta must agree on the number of waves")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        observed = np.isfinite(y)
        if np.any(observed != (delta == 1)):
            raise InconsistentMissingness("delta=1 cells must have finite y and vice versa")
        delta_star = np.cumprod(delta, axis=1).astype(np.int8)
        for arr in (x, y, delta, delta_star):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "delta_star", delta_star)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def waves(self) -> int:
        return self.y.shape[1]


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"cannot parse {cell!r} as a number", row=row, column=col) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value {cell!r}", row=row, column=col)
    return v


def _check_header(header, expected, path):
    if header is None:
        raise ParseError(f"{path}: empty file")
    if [h.strip() for h in header] != expected:
        raise ParseError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")


def read_csv(path) -> Dataset:
    """Load a cross-sectional dataset, enforcing the missingness contract.

    Raises :class:`InconsistentMissingness` when a y cell disagrees with its
    delta flag, and :class:`ParseError` (with row/column) on malformed cells.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        d = len(header) - 2
        if d < 1:
            raise ParseError(f"{path}: need at least columns x1, y, delta")
        _check_header(header, [f"x{j + 1}" for j in range(d)] + ["y", "delta"], path)
        xs, ys, deltas = [], [], []
        for i, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 2:
                raise ParseError(f"expected {d + 2} fields, got {len(rec)}", row=i)
            xs.append([_parse_float(rec[j], i, f"x{j + 1}") for j in range(d)])
            delta_cell = rec[d + 1].strip()
            if delta_cell not in ("0", "1"):
                raise ParseError(f"delta must be 0 or 1, got {delta_cell!r}", row=i, column="delta")
            delta = int(delta_cell)
            y_cell = rec[d].strip()
            if delta == 1:
                if y_cell == "":
                    raise InconsistentMissingness("y absent with delta=1", row=i, column="y")
                ys.append(_parse_float(y_cell, i, "y"))
            else:
                if y_cell != "":
                    raise InconsistentMissingness("y present with delta=0", row=i, column="y")
                ys.append(np.nan)
            deltas.append(delta)
    if not deltas:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(ys), np.array(deltas))


def write_csv(ds: Dataset, path) -> None:
    """Inverse of :func:`read_csv`; ``read_csv(write_csv(ds))`` round-trips."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(ds.d)] + ["y", "delta"])
        for i in range(ds.n):
            y_cell = "" if ds.delta[i] == 0 else repr(float(ds.y[i]))
            writer.writerow([repr(float(v)) for v in ds.x[i]] + [y_cell, int(ds.delta[i])])


def respondent_subset(ds: Dataset) -> Dataset:
    """Rows with delta=1 only; raises :class:`EmptyRespondents` if none."""
    mask = ds.delta == 1
    if not mask.any():
        raise EmptyRespondents("dataset has no respondents")
    return Dataset(ds.x[mask], ds.y[mask], ds.delta[mask])


def read_panel_csv(path) -> PanelDataset:
    """Load a long-format panel (``id, t, x1..xd, y, delta``).

    Waves must be 1..T; baseline covariates must repeat identically across a
    unit's rows.  Missing cells for (id, t) pairs absent from the file are
    treated as delta=0.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file")
        d = len(header) - 4
        if d < 1:
            raise ParseError(f"{path}: need at least columns id, t, x1, y, delta")
        _check_header(header, ["id", "t"] + [f"x{j + 1}" for j in range(d)] + ["y", "delta"], path)
        rows = {}
        covs = {}
        max_t = 0
        for i, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 4:
                raise ParseError(f"expected {d + 4} fields, got {len(rec)}", row=i)
            uid = rec[0].strip()
            try:
                t = int(rec[1])
            except ValueError:
                raise ParseError(f"wave index {rec[1]!r} is not an integer", row=i, column="t") from None
            if t < 1:
                raise ParseError(f"wave index must be >= 1, got {t}", row=i, column="t")
            max_t = max(max_t, t)
            xrow = tuple(_parse_float(rec[2 + j], i, f"x{j + 1}") for j in range(d))
            if uid in covs and covs[uid] != xrow:
                raise ParseError(f"unit {uid!r} has conflicting covariates", row=i)
            covs[uid] = xrow
            delta_cell = rec[d + 3].strip()
            if delta_cell not in ("0", "1"):
                raise ParseError(f"delta must be 0 or 1, got {delta_cell!r}", row=i, column="delta")
            delta = int(delta_cell)
            y_cell = rec[d + 2].strip()
            if delta == 1:
                if y_cell == "":
                    raise InconsistentMissingness("y absent with delta=1", row=i, column="y")
                y = _parse_float(y_cell, i, "y")
            else:
                if y_cell != "":
                    raise InconsistentMissingness("y present with delta=0", row=i, column="y")
                y = np.nan
            rows[(uid, t)] = (y, delta)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    index = {uid: r for r, uid in enumerate(covs)}  # first-appearance order
    n, T = len(index), max_t
    x = np.array([covs[u] for u in index])
    y = np.full((n, T), np.nan)
    delta = np.zeros((n, T), dtype=np.int8)
    for (uid, t), (yv, dv) in rows.items():
        y[index[uid], t - 1] = yv
        delta[index[uid], t - 1] = dv
    return PanelDataset(x, y, delta)


def write_panel_csv(pds: PanelDataset, path) -> None:
    """Long-format inverse of :func:`read_panel_csv` (ids are row numbers)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "t"] + [f"x{j + 1}" for j in range(pds.d)] + ["y", "delta"])
        for i in range(pds.n):
            for t in range(pds.waves):
                y_cell = "" if pds.delta[i, t] == 0 else repr(float(pds.y[i, t]))
                writer.writerow(
                    [i + 1, t + 1] + [repr(float(v)) for v in pds.x[i]] + [y_cell, int(pds.delta[i, t])]
                )
