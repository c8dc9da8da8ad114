"""Rectangular unit-level data: covariates, ordinal treatment, outcome."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyLevel, SchemaMismatch

COLUMN_KINDS = ("numeric", "ordinal", "binary")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Units with covariates ``x`` (n x p), treatment ``t`` in 1..Z and outcome ``y``.

    ``y`` may be ``None`` for design-phase work, where outcomes are
    deliberately kept out of sight.
    """

    ids: np.ndarray
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray | None
    n_levels: int
    columns: tuple[str, ...] = ()
    kinds: tuple[str, ...] = ()
    level_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        t = np.asarray(self.t)
        if t.size and not np.all(np.equal(np.mod(t, 1), 0)):
            raise SchemaMismatch("treatment levels must be integers")
        t = t.astype(np.int64)
        n, p = x.shape
        if ids.shape != (n,) or t.shape != (n,):
            raise SchemaMismatch("ids, x and t must have the same number of rows")
        if len(np.unique(ids)) != n:
            raise SchemaMismatch("unit ids must be unique")
        if self.n_levels < 2:
            raise SchemaMismatch("need at least two treatment levels")
        if n and (t.min() < 1 or t.max() > self.n_levels):
            raise SchemaMismatch(f"treatment labels must lie in 1..{self.n_levels}")
        if not np.all(np.isfinite(x)):
            raise SchemaMismatch("covariates contain missing or non-finite values")
        y = self.y
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape != (n,):
                raise SchemaMismatch("outcome length does not match")
            if not np.all(np.isfinite(y)):
                raise SchemaMismatch("outcome contains missing or non-finite values")
            y = _frozen(y)
        columns = tuple(self.columns) or tuple(f"x{j + 1}" for j in range(p))
        kinds = tuple(self.kinds) or ("numeric",) * p
        if len(columns) != p or len(kinds) != p:
            raise SchemaMismatch("column names/kinds must match covariate arity")
        bad = [k for k in kinds if k not in COLUMN_KINDS]
        if bad:
            raise SchemaMismatch(f"unknown column kind(s): {bad}")
        labels = tuple(self.level_labels) or tuple(str(z) for z in range(1, self.n_levels + 1))
        if len(labels) != self.n_levels:
            raise SchemaMismatch("level_labels must have one entry per level")
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "columns", columns)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "level_labels", labels)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def Z(self) -> int:
        return self.n_levels

    def level_counts(self) -> np.ndarray:
        return np.bincount(self.t, minlength=self.Z + 1)[1:]

    def require_all_levels(self) -> None:
        counts = self.level_counts()
        for level, c in enumerate(counts, start=1):
            if c == 0:
                raise EmptyLevel(level)

    def resolve(self, columns: Iterable[int | str] | None) -> list[int]:
        """Map a column selection (names or indices, ``None`` = all) to indices."""
        if columns is None:
            return list(range(self.p))
        out = []
        for c in columns:
            if isinstance(c, str):
                if c not in self.columns:
                    raise SchemaMismatch(f"unknown column {c!r}")
                out.append(self.columns.index(c))
            else:
                c = int(c)
                if not 0 <= c < self.p:
                    raise SchemaMismatch(f"column index {c} out of range")
                out.append(c)
        return out

    def continuous_columns(self) -> list[int]:
        return [j for j, k in enumerate(self.kinds) if k == "numeric"]

    def subset(self, mask_or_index: np.ndarray) -> "Dataset":
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return Dataset(
            ids=self.ids[idx],
            x=self.x[idx],
            t=self.t[idx],
            y=None if self.y is None else self.y[idx],
            n_levels=self.Z,
            columns=self.columns,
            kinds=self.kinds,
            level_labels=self.level_labels,
        )

    def resample(self, index: np.ndarray) -> "Dataset":
        """Rows drawn by position (with repetition); ids are renumbered 0..n-1."""
        index = np.asarray(index)
        return Dataset(
            ids=np.arange(index.size),
            x=self.x[index],
            t=self.t[index],
            y=None if self.y is None else self.y[index],
            n_levels=self.Z,
            columns=self.columns,
            kinds=self.kinds,
            level_labels=self.level_labels,
        )

    def replace(self, *, t: np.ndarray | None = None, y: np.ndarray | None = None) -> "Dataset":
        return Dataset(
            ids=self.ids,
            x=self.x,
            t=self.t if t is None else t,
            y=self.y if y is None else y,
            n_levels=self.Z,
            columns=self.columns,
            kinds=self.kinds,
            level_labels=self.level_labels,
        )

    def select_columns(self, columns: Sequence[int | str]) -> "Dataset":
        idx = self.resolve(columns)
        return Dataset(
            ids=self.ids,
            x=self.x[:, idx],
            t=self.t,
            y=self.y,
            n_levels=self.Z,
            columns=tuple(self.columns[j] for j in idx),
            kinds=tuple(self.kinds[j] for j in idx),
            level_labels=self.level_labels,
        )
