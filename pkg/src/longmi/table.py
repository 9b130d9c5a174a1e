"""Columnar dataset with an explicit missingness mask.

Values live in one float64 matrix. Continuous cells hold their value;
binary and categorical cells hold the 0-based index of their level.
Masked cells hold NaN and are flagged in a parallel boolean mask
(True = missing). Datasets are immutable: every operation returns a new
one, so sharing across threads is safe.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateTimePoint,
    MalformedWideName,
    MissingInFactor,
    UnknownColumn,
    UnknownLevel,
    UnknownStub,
)

KINDS = ("continuous", "binary", "categorical")
ROLES = ("unit-id", "cluster-id", "time", "analysis", "auxiliary")


@dataclass(frozen=True)
class ColumnSpec:
    """Name, measurement kind and role of one column."""

    name: str
    kind: str
    role: str = "analysis"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.kind == "binary":
            if self.levels is None:
                object.__setattr__(self, "levels", ("0", "1"))
            elif len(self.levels) != 2:
                raise ValueError(f"binary column {self.name!r} needs exactly 2 levels")
        elif self.kind == "categorical":
            if self.levels is None or len(self.levels) < 2:
                raise ValueError(f"categorical column {self.name!r} needs >= 2 levels")
        elif self.levels is not None:
            raise ValueError(f"continuous column {self.name!r} cannot declare levels")
        if self.levels is not None and len(set(self.levels)) != len(self.levels):
            raise ValueError(f"duplicate levels on {self.name!r}")

    @property
    def n_levels(self) -> int:
        return 0 if self.levels is None else len(self.levels)

    def level_index(self, label: str) -> int:
        try:
            return self.levels.index(label)
        except (ValueError, AttributeError):
            raise UnknownLevel(f"{label!r} is not a level of {self.name!r}") from None


@dataclass(frozen=True)
class ReshapeMap:
    """How long and wide layouts correspond.

    ``stubs`` are the time-varying variables (wide columns are named
    ``stub.t``), ``times`` the ordered wave values, ``time_fixed`` the
    unit-constant variables carried through unchanged.
    """

    stubs: tuple[str, ...]
    times: tuple[int, ...]
    time_fixed: tuple[str, ...] = ()
    time_col: str = "time"

    def __post_init__(self):
        object.__setattr__(self, "stubs", tuple(self.stubs))
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        object.__setattr__(self, "time_fixed", tuple(self.time_fixed))
        if set(self.stubs) & set(self.time_fixed):
            raise ValueError("stubs and time-fixed names overlap")
        if len(set(self.times)) != len(self.times):
            raise ValueError("duplicate time values")

    def wide_name(self, stub: str, t: int) -> str:
        return f"{stub}.{t}"

    def parse_wide_name(self, name: str) -> tuple[str, int]:
        stem, dot, suffix = name.rpartition(".")
        if dot and stem in self.stubs:
            try:
                t = int(suffix)
            except ValueError:
                raise MalformedWideName(f"{name!r} has no integer time suffix") from None
            if t not in self.times:
                raise MalformedWideName(f"{name!r} uses undeclared time {t}")
            return stem, t
        if name in self.stubs:
            raise MalformedWideName(f"stub column {name!r} lacks a time suffix")
        raise UnknownStub(f"{name!r} is neither a declared stub.time nor time-fixed")


class Dataset:
    """Immutable typed table with missingness mask.

    ``values`` is (n_rows, n_cols) float64 with NaN at masked cells;
    ``mask`` is boolean with True marking a missing cell.
    """

    def __init__(
        self,
        columns: Sequence[ColumnSpec],
        values: np.ndarray,
        mask: np.ndarray | None = None,
        shape_kind: str = "long",
        validate: bool = True,
    ):
        columns = tuple(columns)
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(columns):
            raise ValueError("values must be (n_rows, n_cols)")
        if mask is None:
            mask = np.isnan(values)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError("mask shape mismatch")
        values = values.copy()
        values[mask] = np.nan
        values.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        if shape_kind not in ("wide", "long"):
            raise ValueError("shape_kind must be 'wide' or 'long'")
        self.columns = columns
        self.values = values
        self.mask = mask
        self.shape_kind = shape_kind
        self._index = {c.name: i for i, c in enumerate(columns)}
        if len(self._index) != len(columns):
            raise ValueError("duplicate column names")
        if validate:
            self._validate()

    # -- construction ----------------------------------------------------

    @classmethod
    def build(
        cls,
        columns: Sequence[ColumnSpec],
        data: Mapping[str, Sequence],
        shape_kind: str = "long",
    ) -> "Dataset":
        """Assemble from per-column sequences; NaN marks missing."""
        cols = tuple(columns)
        n = len(next(iter(data.values()))) if data else 0
        values = np.full((n, len(cols)), np.nan)
        for j, c in enumerate(cols):
            arr = np.asarray(data[c.name], dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"column {c.name!r} has wrong length")
            values[:, j] = arr
        return cls(cols, values, shape_kind=shape_kind)

    def _validate(self):
        unit_cols = [c for c in self.columns if c.role == "unit-id"]
        if len(unit_cols) != 1:
            raise ValueError("exactly one unit-id column required")
        if sum(c.role == "time" for c in self.columns) > 1:
            raise ValueError("at most one time column allowed")
        for c in self.columns:
            j = self._index[c.name]
            if c.role in ("unit-id", "cluster-id", "time") and self.mask[:, j].any():
                raise ValueError(f"{c.role} column {c.name!r} has missing cells")
            if c.levels is not None:
                vals = self.values[~self.mask[:, j], j]
                if vals.size and (
                    (vals != np.round(vals)).any()
                    or vals.min() < 0
                    or vals.max() > len(c.levels) - 1
                ):
                    raise UnknownLevel(f"out-of-range level code in {c.name!r}")
        unit = self.values[:, self._index[unit_cols[0].name]]
        # stacked multiply-imputed files repeat units once per imputation
        key = [unit]
        if "Imputation" in self._index:
            key.insert(0, self.values[:, self._index["Imputation"]])
        if self.shape_kind == "wide":
            if len(np.unique(np.column_stack(key), axis=0)) != len(unit):
                raise ValueError("unit-id not unique in wide shape")
        else:
            tcols = [c for c in self.columns if c.role == "time"]
            if tcols:
                key.append(self.values[:, self._index[tcols[0].name]])
                pairs = np.column_stack(key)
                if len(np.unique(pairs, axis=0)) != len(pairs):
                    raise DuplicateTimePoint("duplicate (unit, time) rows")

    # -- accessors --------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def col_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def col_index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownColumn(f"no column named {name!r}") from None

    def spec(self, name: str) -> ColumnSpec:
        return self.columns[self.col_index(name)]

    def column(self, name: str) -> np.ndarray:
        """Values of one column (read-only view), NaN where masked."""
        return self.values[:, self.col_index(name)]

    def column_mask(self, name: str) -> np.ndarray:
        return self.mask[:, self.col_index(name)]

    def unit_col(self) -> str:
        return next(c.name for c in self.columns if c.role == "unit-id")

    def time_col(self) -> str | None:
        return next((c.name for c in self.columns if c.role == "time"), None)

    def roles(self, *roles: str) -> list[str]:
        return [c.name for c in self.columns if c.role in roles]

    # -- derivation -------------------------------------------------------

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            self.columns,
            self.values[rows],
            self.mask[rows],
            shape_kind=self.shape_kind,
            validate=False,
        )

    def with_columns(
        self,
        columns: Sequence[ColumnSpec],
        values: np.ndarray,
        mask: np.ndarray | None = None,
        shape_kind: str | None = None,
        validate: bool = False,
    ) -> "Dataset":
        return Dataset(
            columns,
            values,
            mask,
            shape_kind=shape_kind or self.shape_kind,
            validate=validate,
        )

    def completed(self, values: np.ndarray) -> "Dataset":
        """Same schema with every cell filled (all-false mask)."""
        if np.isnan(values).any():
            raise ValueError("completed values still contain NaN")
        return Dataset(
            self.columns,
            values,
            np.zeros_like(self.mask),
            shape_kind=self.shape_kind,
            validate=False,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.columns != other.columns or self.shape_kind != other.shape_kind:
            return False
        if self.values.shape != other.values.shape:
            return False
        if (self.mask != other.mask).any():
            return False
        a, b = self.values[~self.mask], other.values[~other.mask]
        return bool(np.array_equal(a, b))


# ---------------------------------------------------------------------------
# reshaping
# ---------------------------------------------------------------------------


def _classify_wide_columns(d: Dataset, m: ReshapeMap):
    """Split wide columns into carried-through and (stub, time) ones."""
    fixed, varying = [], []
    carried = set(m.time_fixed) | {
        c.name for c in d.columns if c.role in ("unit-id", "cluster-id")
    }
    for c in d.columns:
        if c.name in carried:
            fixed.append(c.name)
        else:
            varying.append((c.name, *m.parse_wide_name(c.name)))
    return fixed, varying


def reshape_long_to_wide(d: Dataset, m: ReshapeMap) -> Dataset:
    """One row per unit; stub columns become ``stub.t`` per wave.

    Units missing an entire wave row come out with every cell of that
    wave masked, so mildly unbalanced input is representable in wide
    form (a warning is emitted because wide-format imputers assume
    aligned waves).
    """
    if d.shape_kind != "long":
        raise ValueError("input is not long-shaped")
    tcol = d.time_col()
    if tcol is None:
        raise ValueError("long dataset needs a time column")
    carried = [
        c
        for c in d.columns
        if c.role in ("unit-id", "cluster-id") or c.name in m.time_fixed
    ]
    for c in d.columns:
        if c.name == tcol or c in carried:
            continue
        if c.name not in m.stubs:
            raise UnknownStub(f"time-varying column {c.name!r} not in reshape map")
    for s in m.stubs:
        d.col_index(s)  # raises UnknownColumn for bad maps

    unit = d.column(d.unit_col())
    times = d.column(tcol).astype(int)
    units, first_rows = np.unique(unit, return_index=True)
    order = np.argsort(first_rows, kind="stable")
    units = units[order]
    unit_pos = {u: i for i, u in enumerate(units)}
    time_pos = {t: i for i, t in enumerate(m.times)}
    n_u, n_t = len(units), len(m.times)

    seen = np.zeros((n_u, n_t), dtype=bool)
    out_cols: list[ColumnSpec] = [
        ColumnSpec(c.name, c.kind, c.role, c.levels) for c in carried
    ]
    stub_specs = {s: d.spec(s) for s in m.stubs}
    for t in m.times:
        for s in m.stubs:
            sp = stub_specs[s]
            out_cols.append(ColumnSpec(m.wide_name(s, t), sp.kind, sp.role, sp.levels))
    values = np.full((n_u, len(out_cols)), np.nan)
    mask = np.ones((n_u, len(out_cols)), dtype=bool)

    carried_idx = [d.col_index(c.name) for c in carried]
    stub_idx = [d.col_index(s) for s in m.stubs]
    n_fixed = len(carried)
    for r in range(d.n_rows):
        t = int(times[r])
        if t not in time_pos:
            raise MalformedWideName(f"time value {t} not in reshape map")
        ui, ti = unit_pos[unit[r]], time_pos[t]
        if seen[ui, ti]:
            raise DuplicateTimePoint(f"unit {unit[r]:g} repeats time {t}")
        seen[ui, ti] = True
        values[ui, :n_fixed] = d.values[r, carried_idx]
        mask[ui, :n_fixed] = d.mask[r, carried_idx]
        dest = n_fixed + ti * len(m.stubs)
        values[ui, dest : dest + len(m.stubs)] = d.values[r, stub_idx]
        mask[ui, dest : dest + len(m.stubs)] = d.mask[r, stub_idx]

    if not seen.all():
        warnings.warn(
            "unbalanced long input: absent waves materialized as missing cells",
            stacklevel=2,
        )
    return Dataset(out_cols, values, mask, shape_kind="wide")


def reshape_wide_to_long(d: Dataset, m: ReshapeMap) -> Dataset:
    """Inverse of :func:`reshape_long_to_wide` on balanced data.

    Output column order is canonical: carried-through columns in wide
    order, then the time column, then stubs in map order.
    """
    if d.shape_kind != "wide":
        raise ValueError("input is not wide-shaped")
    fixed_names, varying = _classify_wide_columns(d, m)
    by_cell = {(s, t): name for name, s, t in varying}
    for s in m.stubs:
        for t in m.times:
            if (s, t) not in by_cell:
                raise UnknownStub(f"wide input lacks column {m.wide_name(s, t)!r}")

    out_cols = [d.spec(nm) for nm in fixed_names]
    out_cols.append(ColumnSpec(m.time_col, "continuous", "time"))
    for s in m.stubs:
        sp = d.spec(m.wide_name(s, m.times[0]))
        out_cols.append(ColumnSpec(s, sp.kind, sp.role, sp.levels))

    n_u = d.n_rows
    n = n_u * len(m.times)
    values = np.full((n, len(out_cols)), np.nan)
    mask = np.zeros((n, len(out_cols)), dtype=bool)
    fixed_idx = [d.col_index(nm) for nm in fixed_names]
    k = len(fixed_names)
    for ti, t in enumerate(m.times):
        rows = slice(ti, n, len(m.times))
        values[rows, :k] = d.values[:, fixed_idx]
        mask[rows, :k] = d.mask[:, fixed_idx]
        values[rows, k] = t
        for sj, s in enumerate(m.stubs):
            src = d.col_index(by_cell[(s, t)])
            values[rows, k + 1 + sj] = d.values[:, src]
            mask[rows, k + 1 + sj] = d.mask[:, src]
    return Dataset(out_cols, values, mask, shape_kind="long")


# ---------------------------------------------------------------------------
# column surgery
# ---------------------------------------------------------------------------


def dummy_expand(d: Dataset, col: str, drop_first: bool = True) -> Dataset:
    """Replace a discrete column by 0/1 indicator columns.

    Categorical columns use their declared level order; id-like numeric
    columns use sorted observed values. With ``drop_first`` the first
    level becomes the all-zero reference row.
    """
    j = d.col_index(col)
    sp = d.columns[j]
    if d.mask[:, j].any():
        raise MissingInFactor(f"{col!r} has masked cells")
    x = d.values[:, j]
    if sp.levels is not None:
        codes = x.astype(int)
        labels = list(sp.levels)
    else:
        uniq = np.unique(x)
        codes = np.searchsorted(uniq, x)
        labels = [f"{v:g}" for v in uniq]
    start = 1 if drop_first else 0
    new_specs = [
        ColumnSpec(f"{col}_{labels[k]}", "binary", "auxiliary")
        for k in range(start, len(labels))
    ]
    ind = np.zeros((d.n_rows, len(new_specs)))
    for out_k, k in enumerate(range(start, len(labels))):
        ind[:, out_k] = codes == k

    cols = list(d.columns[:j]) + new_specs + list(d.columns[j + 1 :])
    values = np.concatenate(
        [d.values[:, :j], ind, d.values[:, j + 1 :]], axis=1
    )
    mask = np.concatenate(
        [d.mask[:, :j], np.zeros_like(ind, dtype=bool), d.mask[:, j + 1 :]], axis=1
    )
    return d.with_columns(cols, values, mask)


def cluster_aggregate(d: Dataset, group: str, variables: Sequence[str]) -> Dataset:
    """Per-group means of the given columns over non-missing cells.

    Output has one row per group (order of first appearance); a group
    with no observed cells for a variable gets a masked cell.
    """
    g = d.column(group)
    if d.column_mask(group).any():
        raise ValueError(f"group column {group!r} has missing cells")
    sorted_groups, first_rows, sorted_codes = np.unique(
        g, return_index=True, return_inverse=True
    )
    appearance = np.argsort(np.argsort(first_rows, kind="stable"))
    groups = sorted_groups[np.argsort(first_rows, kind="stable")]
    codes = appearance[sorted_codes]

    cols = [ColumnSpec(group, d.spec(group).kind, "unit-id", d.spec(group).levels)]
    out = [groups]
    masks = [np.zeros(len(groups), dtype=bool)]
    for v in variables:
        x = d.column(v)
        miss = d.column_mask(v)
        sums = np.zeros(len(groups))
        counts = np.zeros(len(groups))
        np.add.at(sums, codes[~miss], x[~miss])
        np.add.at(counts, codes[~miss], 1.0)
        with np.errstate(invalid="ignore"):
            mean = sums / counts
        cols.append(ColumnSpec(v, "continuous", "analysis"))
        out.append(mean)
        masks.append(counts == 0)
    values = np.column_stack(out)
    mask = np.column_stack(masks)
    return Dataset(cols, values, mask, shape_kind="wide", validate=False)


def available_case_filter(d: Dataset, model_vars: Sequence[str]) -> Dataset:
    """Keep exactly the rows fully observed on ``model_vars``."""
    idx = [d.col_index(v) for v in model_vars]
    keep = ~d.mask[:, idx].any(axis=1)
    return d.take(keep)


def incomplete_fraction(
    d: Dataset, shape_kind: str, m: ReshapeMap | None = None
) -> float:
    """Fraction of records with >= 1 masked analysis-variable cell.

    When the requested shape differs from the dataset's, a reshape map
    is required to recount in the other layout.
    """
    if d.shape_kind != shape_kind:
        if m is None:
            raise ValueError("reshape map needed to change record shape")
        d = (
            reshape_long_to_wide(d, m)
            if shape_kind == "wide"
            else reshape_wide_to_long(d, m)
        )
    idx = [i for i, c in enumerate(d.columns) if c.role == "analysis"]
    if not idx or d.n_rows == 0:
        return 0.0
    return float(d.mask[:, idx].any(axis=1).mean())


# ---------------------------------------------------------------------------
# CSV + sidecar I/O
# ---------------------------------------------------------------------------

MISSING_TOKEN = "NA"


def _format_cell(spec: ColumnSpec, value: float, masked: bool) -> str:
    if masked:
        return MISSING_TOKEN
    if spec.levels is not None:
        return spec.levels[int(value)]
    if float(value).is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(float(value))


def sidecar_path(csv_path: str) -> str:
    stem, _ = os.path.splitext(csv_path)
    return stem + ".meta.json"


def write_csv(d: Dataset, path: str) -> None:
    """Write data plus a JSON metadata sidecar, atomically."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(d.col_names)
        for r in range(d.n_rows):
            w.writerow(
                _format_cell(c, d.values[r, j], d.mask[r, j])
                for j, c in enumerate(d.columns)
            )
    os.replace(tmp, path)
    meta = {
        "shape": d.shape_kind,
        "columns": [
            {"name": c.name, "kind": c.kind, "role": c.role,
             "levels": list(c.levels) if c.levels else None}
            for c in d.columns
        ],
    }
    tmp = sidecar_path(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    os.replace(tmp, sidecar_path(path))


def read_csv(path: str, meta_path: str | None = None) -> Dataset:
    """Read a CSV written by :func:`write_csv` (empty cell == NA)."""
    meta_path = meta_path or sidecar_path(path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    specs = [
        ColumnSpec(
            c["name"], c["kind"], c["role"],
            tuple(c["levels"]) if c.get("levels") else None,
        )
        for c in meta["columns"]
    ]
    by_name = {s.name: s for s in specs}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if set(header) != set(by_name):
            raise ValueError("CSV header does not match sidecar metadata")
        ordered = [by_name[h] for h in header]
        rows = list(reader)
    values = np.full((len(rows), len(ordered)), np.nan)
    for r, row in enumerate(rows):
        for j, (spec, tok) in enumerate(zip(ordered, row)):
            tok = tok.strip()
            if tok in ("", MISSING_TOKEN):
                continue
            if spec.levels is not None:
                values[r, j] = spec.level_index(tok)
            else:
                values[r, j] = float(tok)
    return Dataset(ordered, values, shape_kind=meta["shape"])
