"""Dataset container, CSV exchange, and seeded splitting."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ParameterError, ParseError, SchemaError

AUX_COLUMNS = ("true_ite", "risk", "cost", "sensitive", "true_label")

_FEATURE_RE = re.compile(r"^x(\d+)$")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Covariates, binary treatment, outcome and optional named auxiliary columns.

    Arrays are copied and made read-only on construction, so a dataset can be
    shared freely between workers.
    """

    features: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    aux: Mapping[str, np.ndarray] = field(default_factory=dict)
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ParameterError(f"features must be a non-empty n x d matrix, got shape {X.shape}")
        n = X.shape[0]
        a = np.asarray(self.treatment, dtype=float).ravel()
        y = np.asarray(self.outcome, dtype=float).ravel()
        if a.shape[0] != n or y.shape[0] != n:
            raise ParameterError("treatment and outcome must have one entry per row")
        bad = np.flatnonzero((a != 0) & (a != 1))
        if bad.size:
            raise DomainError(f"treatment must be 0/1; row {int(bad[0])} has {a[bad[0]]!r}", row=int(bad[0]))
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ParameterError("features and outcome must be finite")
        aux = {}
        for name, col in dict(self.aux).items():
            col = np.asarray(col, dtype=float).ravel()
            if col.shape[0] != n:
                raise ParameterError(f"aux column {name!r} has length {col.shape[0]}, expected {n}")
            aux[name] = _frozen(col)
        names = self.feature_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
        elif len(names) != X.shape[1]:
            raise ParameterError("feature_names length does not match the number of features")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "treatment", _frozen(a.astype(np.int8), dtype=np.int8))
        object.__setattr__(self, "outcome", _frozen(y))
        object.__setattr__(self, "aux", aux)
        object.__setattr__(self, "feature_names", tuple(names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.features[idx],
            self.treatment[idx],
            self.outcome[idx],
            {k: v[idx] for k, v in self.aux.items()},
            self.feature_names,
        )

    def require_both_arms(self, min_per_arm: int = 1) -> None:
        n1 = int(self.treatment.sum())
        n0 = self.n - n1
        if min(n0, n1) < min_per_arm:
            from .errors import FitError

            raise FitError(
                f"need at least {min_per_arm} sample(s) per arm, got control={n0}, treated={n1}"
            )

    def equals(self, other: "Dataset", rtol: float = 0.0) -> bool:
        if self.feature_names != other.feature_names or set(self.aux) != set(other.aux):
            return False
        pairs = [(self.features, other.features), (self.treatment, other.treatment),
                 (self.outcome, other.outcome)]
        pairs += [(self.aux[k], other.aux[k]) for k in self.aux]
        return all(a.shape == b.shape and np.allclose(a, b, rtol=rtol, atol=0.0) for a, b in pairs)


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray


# ---------------------------------------------------------------------------
# CSV


def _resolve_schema(header: Sequence[str], schema: Mapping | None) -> tuple[list[str], str, str, dict]:
    schema = dict(schema or {})
    treat = schema.get("treatment", "a")
    outcome = schema.get("outcome", "y")
    features = schema.get("features")
    if features is None:
        found = [(int(m.group(1)), h) for h in header if (m := _FEATURE_RE.match(h))]
        features = [h for _, h in sorted(found)]
        if not features:
            raise SchemaError("no feature columns named x1..xd found and none declared in schema")
    aux = dict(schema.get("aux", {}))
    if schema.get("auto_aux", True):
        for name in AUX_COLUMNS:
            if name in header and name not in aux:
                aux[name] = name
    needed = list(features) + [treat, outcome] + list(aux.values())
    missing = [c for c in needed if c not in header]
    if missing:
        raise SchemaError(f"column(s) {missing} declared in schema are absent from the file")
    return list(features), treat, outcome, aux


def load_csv(path, schema: Mapping | None = None, delimiter: str = ",") -> Dataset:
    """Read a dataset from a headered CSV file.

    ``schema`` may name ``features`` (list), ``treatment``, ``outcome`` and an
    ``aux`` mapping ``{aux_name: column}``. Without a feature list, columns named
    ``x1..xd`` are used in numeric order. Known auxiliary columns present in the
    header are attached automatically unless ``auto_aux`` is false.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        features, treat, outcome, aux = _resolve_schema(header, schema)
        col_of = {h: j for j, h in enumerate(header)}
        wanted = features + [treat, outcome] + list(aux.values())
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            vals = []
            for name in wanted:
                j = col_of[name]
                cell = row[j].strip() if j < len(row) else ""
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"non-numeric value {cell!r} at line {lineno}, column {name!r}",
                        row=lineno, column=name,
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"non-finite value at line {lineno}, column {name!r}",
                                     row=lineno, column=name)
                vals.append(v)
            t = vals[len(features)]
            if t not in (0.0, 1.0):
                raise DomainError(
                    f"treatment column {treat!r} must be 0 or 1; line {lineno} has {row[col_of[treat]]!r}",
                    row=lineno, column=treat,
                )
            rows.append(vals)
    if not rows:
        raise SchemaError(f"{path} contains no data rows")
    M = np.asarray(rows, dtype=float)
    d = len(features)
    aux_cols = {k: M[:, d + 2 + i] for i, k in enumerate(aux)}
    return Dataset(M[:, :d], M[:, d], M[:, d + 1], aux_cols, tuple(features))


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(ds: Dataset, path, delimiter: str = ",", treatment_name: str = "a",
              outcome_name: str = "y", extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write ``ds`` with 17 significant digits so a reload is exact."""
    extra = dict(extra or {})
    header = list(ds.feature_names) + [treatment_name, outcome_name] + list(ds.aux) + list(extra)
    cols = [ds.features[:, j] for j in range(ds.d)] + [ds.treatment, ds.outcome]
    cols += [ds.aux[k] for k in ds.aux] + [np.asarray(v, dtype=float) for v in extra.values()]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            w.writerow([str(int(c[i])) if c is ds.treatment else _fmt(c[i]) for c in cols])


# ---------------------------------------------------------------------------
# splitting


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_indices(n: int, test_fraction: float, seed: int) -> SplitIndices:
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_train = _round_half_up(n * (1.0 - test_fraction))
    if n < 2 or n_train < 1 or n_train >= n:
        raise ParameterError(f"cannot split n={n} rows into two non-empty parts at {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndices(np.sort(perm[:n_train]), np.sort(perm[n_train:]))


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    sp = split_indices(ds.n, test_fraction, seed)
    return ds.subset(sp.train), ds.subset(sp.test)


def kfold_indices(n: int, k: int, seed: int) -> list[SplitIndices]:
    """Shuffled k-fold partition; the first ``n % k`` test parts get one extra row."""
    if k < 2 or k > n:
        raise ParameterError(f"k must satisfy 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, k)
    folds = []
    for i, test in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        folds.append(SplitIndices(np.sort(train), np.sort(test)))
    return folds
