"""Dataset construction: synthetic generation, schema-driven CSV loading, splits.

A schema lists columns with a role (feature / sensitive / label), an encoding
(continuous / binary / categorical with declared levels), and for features an
optional alpha/beta group used by the generative backends. Loading produces a
Dataset holding the encoded float64 feature matrix, integer sensitive levels,
and the label vector; categorical features become one-hot blocks in declared
level order.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import yaml

from .scm import synthetic_scm

log = logging.getLogger(__name__)

SCHEMA_FORMAT = 1

ROLES = ("feature", "sensitive", "label")
ENCODINGS = ("continuous", "binary", "categorical")


class DataError(Exception):
    pass


class SchemaError(DataError):
    pass


class MissingColumn(DataError):
    pass


class UnknownLevel(DataError):
    pass


class ParseError(DataError):
    pass


class EmptyPartition(DataError):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str
    encoding: str
    levels: tuple[str, ...] | None = None
    group: str | None = None  # alpha | beta | None

    def __post_init__(self):
        if self.role not in ROLES:
            raise SchemaError(f"column {self.name!r}: unknown role {self.role!r}")
        if self.encoding not in ENCODINGS:
            raise SchemaError(f"column {self.name!r}: unknown encoding {self.encoding!r}")
        if self.encoding == "categorical" and (not self.levels or len(self.levels) < 2):
            raise SchemaError(f"column {self.name!r}: categorical needs >= 2 levels")
        if self.encoding == "binary" and self.levels is not None and len(self.levels) != 2:
            raise SchemaError(f"column {self.name!r}: binary declares exactly 2 levels")
        if self.group is not None and self.group not in ("alpha", "beta"):
            raise SchemaError(f"column {self.name!r}: unknown group {self.group!r}")

    @property
    def width(self) -> int:
        if self.encoding == "categorical":
            return len(self.levels)
        return 1


@dataclass(frozen=True)
class Schema:
    columns: tuple[ColumnSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        if sum(c.role == "sensitive" for c in self.columns) != 1:
            raise SchemaError("schema needs exactly one sensitive column")
        if sum(c.role == "label" for c in self.columns) != 1:
            raise SchemaError("schema needs exactly one label column")
        sens = self.sensitive
        if sens.encoding == "continuous":
            raise SchemaError("sensitive column must be binary or categorical")
        groups = {c.group for c in self.features}
        if groups != {None} and None in groups:
            ungrouped = [c.name for c in self.features if c.group is None]
            raise SchemaError(
                f"feature groups must cover all features or none; ungrouped: {ungrouped}"
            )

    @property
    def features(self) -> tuple[ColumnSpec, ...]:
        return tuple(c for c in self.columns if c.role == "feature")

    @property
    def sensitive(self) -> ColumnSpec:
        return next(c for c in self.columns if c.role == "sensitive")

    @property
    def label(self) -> ColumnSpec:
        return next(c for c in self.columns if c.role == "label")

    @property
    def sensitive_levels(self) -> int:
        sens = self.sensitive
        return len(sens.levels) if sens.levels else 2

    @property
    def task(self) -> str:
        return "regression" if self.label.encoding == "continuous" else "classification"

    @property
    def grouped(self) -> bool:
        return all(c.group is not None for c in self.features)


def schema_from_file(path) -> Schema:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a mapping at top level")
    if doc.get("format") != SCHEMA_FORMAT:
        raise SchemaError(f"{path}: expected format: {SCHEMA_FORMAT}, got {doc.get('format')!r}")
    cols = []
    for entry in doc.get("columns", []):
        try:
            cols.append(
                ColumnSpec(
                    name=str(entry["name"]),
                    role=str(entry["role"]),
                    encoding=str(entry["encoding"]),
                    levels=tuple(str(v) for v in entry["levels"]) if "levels" in entry else None,
                    group=entry.get("group"),
                )
            )
        except KeyError as exc:
            raise SchemaError(f"{path}: column entry missing key {exc}: {entry!r}") from exc
    return Schema(tuple(cols))


@dataclass(frozen=True)
class FeatureBlock:
    """Where one schema feature lives inside the encoded matrix."""

    name: str
    start: int
    stop: int
    encoding: str
    levels: tuple[str, ...] | None
    group: str | None

    @property
    def cols(self) -> np.ndarray:
        return np.arange(self.start, self.stop)


def _blocks(schema: Schema) -> tuple[FeatureBlock, ...]:
    out, at = [], 0
    for c in schema.features:
        out.append(FeatureBlock(c.name, at, at + c.width, c.encoding, c.levels, c.group))
        at += c.width
    return tuple(out)


@dataclass
class Dataset:
    """Encoded samples: features X, sensitive levels a, labels y.

    ``exogenous`` carries generator noise for synthetic data (used by
    backends that cannot abduct). ``standardization`` maps column names
    (``__label__`` for the label) to (mean, std) once applied.
    """

    X: np.ndarray
    a: np.ndarray
    y: np.ndarray
    schema: Schema
    blocks: tuple[FeatureBlock, ...]
    exogenous: np.ndarray | None = None
    exogenous_names: tuple[str, ...] = ()
    standardization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.X.shape[0]
        if self.a.shape[0] != n or self.y.shape[0] != n:
            raise DataError("row counts disagree across feature/sensitive/label blocks")
        width = sum(c.width for c in self.schema.features)
        if self.X.shape[1] != width:
            raise DataError(f"encoded width {self.X.shape[1]} != schema width {width}")
        if self.exogenous is not None and self.exogenous.shape[0] != n:
            raise DataError("exogenous rows disagree with feature rows")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def task(self) -> str:
        return self.schema.task

    def block(self, name: str) -> FeatureBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise MissingColumn(f"no feature column named {name!r}")

    def group_cols(self, group: str) -> np.ndarray:
        cols = [b.cols for b in self.blocks if b.group == group]
        return np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)

    @property
    def alpha_cols(self) -> np.ndarray:
        return self.group_cols("alpha")

    @property
    def beta_cols(self) -> np.ndarray:
        return self.group_cols("beta")

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            X=self.X[idx],
            a=self.a[idx],
            y=self.y[idx],
            schema=self.schema,
            blocks=self.blocks,
            exogenous=None if self.exogenous is None else self.exogenous[idx],
            exogenous_names=self.exogenous_names,
            standardization=dict(self.standardization),
        )

    def decode_features(self, X: np.ndarray | None = None) -> list[dict]:
        """Invert the encoding (and any standardization) back to raw values."""
        X = self.X if X is None else np.asarray(X, dtype=np.float64)
        rows = []
        for i in range(X.shape[0]):
            row = {}
            for b in self.blocks:
                chunk = X[i, b.start:b.stop]
                if b.encoding == "continuous":
                    v = float(chunk[0])
                    if b.name in self.standardization:
                        mean, std = self.standardization[b.name]
                        v = v * std + mean
                    row[b.name] = v
                elif b.encoding == "binary":
                    bit = int(chunk[0] >= 0.5)
                    row[b.name] = b.levels[bit] if b.levels else str(bit)
                else:
                    row[b.name] = b.levels[int(np.argmax(chunk))]
            rows.append(row)
        return rows


def _encode_cell(col: ColumnSpec, raw: str, row_no: int):
    if col.encoding == "continuous":
        try:
            return float(raw)
        except ValueError as exc:
            raise ParseError(
                f"row {row_no}: column {col.name!r}: cannot parse {raw!r} as a number"
            ) from exc
    if col.levels:
        if raw not in col.levels:
            raise UnknownLevel(
                f"row {row_no}: column {col.name!r}: value {raw!r} not in declared levels {list(col.levels)}"
            )
        return col.levels.index(raw)
    # binary without declared levels: numeric 0/1
    try:
        v = float(raw)
    except ValueError as exc:
        raise ParseError(
            f"row {row_no}: column {col.name!r}: cannot parse {raw!r} as 0/1"
        ) from exc
    if v not in (0.0, 1.0):
        raise UnknownLevel(f"row {row_no}: column {col.name!r}: value {raw!r} is not 0 or 1")
    return int(v)


def load_csv(path, schema: Schema) -> Dataset:
    """Read a comma-delimited UTF-8 file with header into an encoded Dataset.

    Rows with any empty cell in a schema column are dropped (count logged);
    non-schema columns are ignored.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file, header row required")
        missing = [c.name for c in schema.columns if c.name not in reader.fieldnames]
        if missing:
            raise MissingColumn(f"{path}: columns {missing} not found in header")
        raw_rows = []
        dropped = 0
        for row_no, record in enumerate(reader, start=2):
            cells = {c.name: record.get(c.name) for c in schema.columns}
            if any(v is None or v == "" for v in cells.values()):
                dropped += 1
                continue
            raw_rows.append((row_no, cells))
    if dropped:
        log.warning("%s: dropped %d rows with missing cells", path, dropped)
    if not raw_rows:
        raise DataError(f"{path}: no usable rows")

    n = len(raw_rows)
    blocks = _blocks(schema)
    X = np.zeros((n, sum(c.width for c in schema.features)))
    a = np.zeros(n, dtype=np.int64)
    y = np.zeros(n)
    feature_cols = {c.name: c for c in schema.features}
    for i, (row_no, cells) in enumerate(raw_rows):
        for b in blocks:
            col = feature_cols[b.name]
            v = _encode_cell(col, cells[b.name], row_no)
            if col.encoding == "categorical":
                X[i, b.start + int(v)] = 1.0
            else:
                X[i, b.start] = float(v)
        a[i] = int(_encode_cell(schema.sensitive, cells[schema.sensitive.name], row_no))
        y[i] = float(_encode_cell(schema.label, cells[schema.label.name], row_no))
    return Dataset(X=X, a=a, y=y, schema=schema, blocks=blocks)


SYNTHETIC_SCHEMA = Schema(
    (
        ColumnSpec("X", "feature", "continuous"),
        ColumnSpec("A", "sensitive", "binary"),
        ColumnSpec("Y", "label", "continuous"),
    )
)


def generate_synthetic(n: int = 3000, seed: int = 0) -> Dataset:
    """Draw the benchmark dataset and keep its generator noise alongside.

    The noise columns (U1, U2) are retained because the generator is not
    invertible from (x, a); downstream consumers that need an exogenous
    assignment read it from here.
    """
    if n < 1:
        raise DataError(f"need n >= 1, got {n}")
    scm = synthetic_scm()
    rng = np.random.default_rng(seed)
    u = scm.sample_exogenous(n, rng)
    values = scm.simulate(u)
    exog_names = scm.feature_exogenous_names
    return Dataset(
        X=values["X"][:, None],
        a=values["A"].astype(np.int64),
        y=values["Y"],
        schema=SYNTHETIC_SCHEMA,
        blocks=_blocks(SYNTHETIC_SCHEMA),
        exogenous=np.column_stack([u[name] for name in exog_names]),
        exogenous_names=exog_names,
    )


def split(dataset: Dataset, fractions: Mapping[str, float], seed: int) -> dict[str, Dataset]:
    """Seeded shuffle, then contiguous cuts in train/validation/test order."""
    order = [k for k in ("train", "validation", "test") if k in fractions]
    if set(fractions) - set(order):
        raise DataError(f"unknown split names {sorted(set(fractions) - set(order))}")
    fracs = [float(fractions[k]) for k in order]
    if any(not 0.0 < f < 1.0 for f in fracs):
        raise DataError(f"split fractions must lie in (0, 1), got {dict(fractions)}")
    if abs(sum(fracs) - 1.0) > 1e-6:
        raise DataError(f"split fractions must sum to 1, got {sum(fracs)}")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    bounds = np.round(np.cumsum(fracs) * dataset.n).astype(int)
    bounds[-1] = dataset.n
    out, start = {}, 0
    for name, stop in zip(order, bounds):
        if stop <= start:
            raise EmptyPartition(f"split {name!r} would be empty at n={dataset.n}")
        out[name] = dataset.subset(perm[start:stop])
        start = stop
    return out


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Center/scale continuous columns (label too, for regression) on train stats."""
    params: dict[str, tuple[float, float]] = {}
    for b in train.blocks:
        if b.encoding != "continuous":
            continue
        col = train.X[:, b.start]
        mean, std = float(col.mean()), float(col.std())
        if std == 0.0:
            log.warning("column %r is constant on the training split; leaving scale 1", b.name)
            std = 1.0
        params[b.name] = (mean, std)
    if train.task == "regression":
        mean, std = float(train.y.mean()), float(train.y.std())
        if std == 0.0:
            std = 1.0
        params["__label__"] = (mean, std)

    def apply(ds: Dataset) -> Dataset:
        X = ds.X.copy()
        for b in ds.blocks:
            if b.name in params:
                mean, std = params[b.name]
                X[:, b.start] = (X[:, b.start] - mean) / std
        y = ds.y
        if "__label__" in params:
            mean, std = params["__label__"]
            y = (y - mean) / std
        return replace(ds, X=X, y=y, standardization={**ds.standardization, **params})

    return tuple(apply(ds) for ds in (train, *others))


def sensitive_onehot(a: np.ndarray, levels: int) -> np.ndarray:
    """Drop-first one-hot of sensitive levels: binary becomes a single column."""
    a = np.asarray(a, dtype=np.int64)
    out = np.zeros((a.shape[0], levels - 1))
    for lvl in range(1, levels):
        out[:, lvl - 1] = (a == lvl).astype(np.float64)
    return out


def onehot(a: np.ndarray, levels: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    out = np.zeros((a.shape[0], levels))
    out[np.arange(a.shape[0]), a] = 1.0
    return out
