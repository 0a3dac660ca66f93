"""Dataset representation, validation and stratum construction."""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import (
    DegenerateBins,
    EmptyStratumArm,
    MissingValue,
    NonBinaryValue,
    RaggedCovariates,
    UnknownColumn,
    ValidationError,
)


@dataclass(frozen=True)
class Observation:
    a: int
    y: int
    v: dict[str, float]
    s: int
    cluster: Any = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated study data held as column arrays.

    ``s`` holds stratum codes ``1..n_strata``; ``v`` is an ``(n, k)`` float
    array whose columns are named by ``columns``. Rows without a cluster id
    are their own cluster.
    """

    a: np.ndarray
    y: np.ndarray
    s: np.ndarray
    v: np.ndarray
    columns: tuple[str, ...]
    cluster: np.ndarray | None = None
    n_strata: int = 0
    stratum_labels: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("a", "y", "s", "v"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if self.cluster is not None:
            self.cluster.setflags(write=False)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def counts(self) -> dict[tuple[int, int], int]:
        """Row counts per (stratum, arm) cell."""
        out = {}
        for s in range(1, self.n_strata + 1):
            for a in (0, 1):
                out[(s, a)] = int(np.sum((self.s == s) & (self.a == a)))
        return out

    def column(self, name: str) -> np.ndarray:
        try:
            return self.v[:, self.columns.index(name)]
        except ValueError:
            raise UnknownColumn(f"unknown covariate column {name!r}") from None

    def cluster_ids(self) -> np.ndarray:
        """Integer cluster codes ``0..n_clusters-1`` (rows are singletons if no ids)."""
        if self.cluster is None:
            return np.arange(self.n)
        _, codes = np.unique(self.cluster, return_inverse=True)
        return codes.reshape(-1)

    def take(self, idx: np.ndarray, cluster: np.ndarray | None = None) -> "Dataset":
        """Row subset/resample. Stratum coding is preserved, not re-validated."""
        cl = cluster if cluster is not None else (None if self.cluster is None else self.cluster[idx])
        return replace(
            self,
            a=self.a[idx],
            y=self.y[idx],
            s=self.s[idx],
            v=self.v[idx],
            cluster=cl,
        )

    def with_column(self, name: str, values: np.ndarray) -> "Dataset":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        if name in self.columns:
            v = self.v.copy()
            v[:, self.columns.index(name)] = values[:, 0]
            return replace(self, v=v)
        return replace(self, v=np.hstack([self.v, values]), columns=self.columns + (name,))

    def with_strata(self, s: np.ndarray, labels: Sequence[str] | None = None) -> "Dataset":
        s = np.asarray(s, dtype=np.int64)
        k = int(s.max())
        labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(1, k + 1))
        return replace(self, s=s, n_strata=len(labels), stratum_labels=labels)


def _as_binary(x, name):
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any():
        raise MissingValue(f"{name} has missing values")
    if not np.isin(x, (0.0, 1.0)).all():
        bad = x[~np.isin(x, (0.0, 1.0))][0]
        raise NonBinaryValue(f"{name} must be 0/1, found {bad:g}")
    return x.astype(np.int64)


def make_dataset(
    a,
    y,
    s=None,
    v=None,
    columns: Sequence[str] = (),
    cluster=None,
    n_strata: int | None = None,
    stratum_labels: Sequence[str] | None = None,
    require_cells: bool = True,
) -> Dataset:
    """Validate column arrays and build a :class:`Dataset`.

    ``s`` may be omitted when the stratum will be constructed later with
    :func:`construct_stratum`; in that case the cell check is skipped.
    """
    a = _as_binary(a, "treatment")
    y = _as_binary(y, "outcome")
    n = a.shape[0]
    if n == 0:
        raise ValidationError("dataset is empty")
    if y.shape[0] != n:
        raise RaggedCovariates("treatment and outcome have different lengths")
    if v is None:
        v = np.zeros((n, 0))
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if v.shape[0] != n or v.shape[1] != len(columns):
        raise RaggedCovariates(f"covariate block has shape {v.shape}, expected ({n}, {len(columns)})")
    if np.isnan(v).any():
        raise MissingValue("covariates contain missing values")
    if cluster is not None:
        cluster = np.asarray(cluster)
        if cluster.shape[0] != n:
            raise RaggedCovariates("cluster ids have the wrong length")
    if s is None:
        return Dataset(a, y, np.ones(n, dtype=np.int64), v, tuple(columns), cluster, 0, ())
    s = np.asarray(s, dtype=float)
    if np.isnan(s).any():
        raise MissingValue("stratum has missing values")
    if (s != np.round(s)).any() or s.min() < 1:
        raise ValidationError("stratum labels must be integers 1..|S|")
    s = s.astype(np.int64)
    k = int(n_strata if n_strata is not None else s.max())
    if k < 2:
        raise ValidationError("need at least two strata")
    labels = tuple(stratum_labels) if stratum_labels is not None else tuple(str(i) for i in range(1, k + 1))
    ds = Dataset(a, y, s, v, tuple(columns), cluster, k, labels)
    if require_cells:
        check_cells(ds)
    return ds


def check_cells(ds: Dataset) -> None:
    for (s, a), c in ds.counts.items():
        if c == 0:
            raise EmptyStratumArm(f"no observations with S={s} ({ds.stratum_labels[s - 1]}), A={a}")


def validate_dataset(rows: Sequence[Observation]) -> Dataset:
    """Validate a row sequence and return the column-backed dataset."""
    if len(rows) == 0:
        raise ValidationError("dataset is empty")
    names = tuple(rows[0].v.keys())
    for i, r in enumerate(rows):
        if r.a not in (0, 1):
            raise NonBinaryValue(f"row {i}: treatment {r.a!r} not in {{0,1}}")
        if r.y not in (0, 1):
            raise NonBinaryValue(f"row {i}: outcome {r.y!r} not in {{0,1}}")
        if tuple(r.v.keys()) != names:
            raise RaggedCovariates(f"row {i}: covariates {tuple(r.v)} differ from {names}")
    v = np.array([[r.v[c] for c in names] for r in rows], dtype=float).reshape(len(rows), len(names))
    has_cluster = any(r.cluster is not None for r in rows)
    cluster = np.array([r.cluster if r.cluster is not None else f"__row{i}" for i, r in enumerate(rows)]) if has_cluster else None
    return make_dataset(
        [r.a for r in rows],
        [r.y for r in rows],
        [r.s for r in rows],
        v,
        names,
        cluster,
    )


# ---------------------------------------------------------------------------
# stratum construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StratumSpec:
    """How to build S. ``mode`` is ``"column"``, ``"quantile"`` or ``"cross"``."""

    mode: str
    columns: tuple[str, ...]
    k: int = 4

    @classmethod
    def existing(cls, column: str) -> "StratumSpec":
        return cls("column", (column,))

    @classmethod
    def quantile_bins(cls, column: str, k: int = 4) -> "StratumSpec":
        return cls("quantile", (column,), k)

    @classmethod
    def factor_cross(cls, *columns: str) -> "StratumSpec":
        return cls("cross", tuple(columns))


@dataclass
class StratumMapping:
    """Reusable result of :func:`construct_stratum` (bin edges or level table)."""

    spec: StratumSpec
    labels: tuple[str, ...]
    edges: np.ndarray | None = None
    level_codes: dict[tuple, int] = field(default_factory=dict)
    level_values: tuple[tuple, ...] = ()

    def apply(self, table: dict[str, np.ndarray]) -> np.ndarray:
        if self.spec.mode == "quantile":
            x = np.asarray(_get(table, self.spec.columns[0]), dtype=float)
            # values equal to an edge go to the lower bin
            return np.searchsorted(self.edges, x, side="left") + 1
        cols = [np.asarray(_get(table, c)) for c in self.spec.columns]
        keys = list(zip(*[_norm(c) for c in cols]))
        try:
            return np.array([self.level_codes[k] for k in keys], dtype=np.int64)
        except KeyError as e:
            raise ValidationError(f"unseen stratum level {e.args[0]}") from None


def _get(table, name):
    try:
        return table[name]
    except KeyError:
        raise UnknownColumn(f"unknown column {name!r}") from None


def _norm(col):
    col = np.asarray(col)
    if col.dtype.kind == "f" and np.all(col == np.round(col)):
        return [str(int(x)) for x in col]
    return [str(x) for x in col]


def _level_sort_key(x: str):
    try:
        return (0, float(x), x)
    except ValueError:
        return (1, 0.0, x)


def quantile_edges(x: np.ndarray, k: int) -> np.ndarray:
    """Inner edges of ``k`` equal-probability bins (type-7 empirical quantiles)."""
    x = np.asarray(x, dtype=float)
    edges = np.quantile(x, np.arange(1, k) / k)
    if len(np.unique(x)) < k or np.any(np.diff(edges) <= 0):
        raise DegenerateBins(f"cannot form {k} distinct quantile bins")
    codes = np.searchsorted(edges, x, side="left") + 1
    if len(np.unique(codes)) < k:
        raise DegenerateBins(f"quantile bins are not all occupied (k={k})")
    return edges


def construct_stratum(table: dict[str, np.ndarray], spec: StratumSpec) -> tuple[np.ndarray, StratumMapping]:
    """Compute stratum codes ``1..L`` for every row of ``table``.

    ``table`` maps column names to arrays (raw, possibly string-valued). The
    returned mapping reproduces the same assignment on new data.
    """
    if spec.mode == "column":
        col = _norm(_get(table, spec.columns[0]))
        levels = sorted(set(col), key=_level_sort_key)
        codes = {(lv,): i + 1 for i, lv in enumerate(levels)}
        mapping = StratumMapping(spec, tuple(levels), level_codes=codes, level_values=tuple((lv,) for lv in levels))
    elif spec.mode == "quantile":
        x = np.asarray(_get(table, spec.columns[0]), dtype=float)
        edges = quantile_edges(x, spec.k)
        mapping = StratumMapping(spec, tuple(f"q{i}" for i in range(1, spec.k + 1)), edges=edges)
    elif spec.mode == "cross":
        cols = [_norm(_get(table, c)) for c in spec.columns]
        per = [sorted(set(c), key=_level_sort_key) for c in cols]
        combos = list(itertools.product(*per))
        codes = {c: i + 1 for i, c in enumerate(combos)}
        mapping = StratumMapping(spec, tuple("/".join(c) for c in combos), level_codes=codes, level_values=tuple(combos))
    else:
        raise ValidationError(f"unknown stratum mode {spec.mode!r}")
    return mapping.apply(table), mapping


def stratify(ds: Dataset, spec: StratumSpec, extra: dict[str, np.ndarray] | None = None) -> tuple[Dataset, StratumMapping]:
    """Assign strata to a dataset from its covariate columns (plus optional raw columns)."""
    table = {c: ds.v[:, j] for j, c in enumerate(ds.columns)}
    if extra:
        table.update(extra)
    s, mapping = construct_stratum(table, spec)
    out = ds.with_strata(s, mapping.labels)
    check_cells(out)
    return out, mapping


def cell_counts(ds: Dataset) -> Counter:
    return Counter(zip(ds.s.tolist(), ds.a.tolist()))
