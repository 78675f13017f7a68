"""Tabular schema, dataset container, CSV ingestion and preprocessing.

Records are stored column-wise in a single float array: categorical columns
hold the index of the value in the feature's domain, numerical columns hold
the value itself. The label is always the last column.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .errors import DataError, SchemaError

logger = logging.getLogger(__name__)

MAX_BINARY_FEATURES = 14
MISSING_TOKENS = frozenset({"", "?", "NA", "N/A", "NaN", "nan", "null"})
BINARY_DOMAIN = ("0", "1")

CATEGORICAL = "categorical"
NUMERICAL = "numerical"


class Provenance(enum.Enum):
    RAW = "raw"
    PERTURBED = "perturbed"
    RECONSTRUCTED_SAMPLED = "reconstructed-sampled"


def format_real(x: float) -> str:
    """Round to at most two decimals and print without trailing zeros padding.

    ``2062.934 -> '2062.93'``, ``245.1 -> '245.1'``, ``500 -> '500.0'``.
    """
    r = round(float(x), 2)
    if r == 0:
        r = 0.0
    return repr(r)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class FeatureSpec:
    """One column of a table.

    A categorical feature carries an ordered, duplicate-free ``domain``; a
    numerical feature carries public clipping bounds ``lower < upper``.
    ``phrasing`` maps a value (or binary bucket ``"0"``/``"1"``) to the text
    the serializer substitutes, either a plain string or a dict of variants
    (``{"text": "male", "subj": "He"}``).
    """

    name: str
    kind: str
    domain: tuple[str, ...] | None = None
    lower: float | None = None
    upper: float | None = None
    integer: bool = False
    phrasing: Mapping[str, Any] = field(default_factory=dict)
    # LDP preprocessing hint: None (default rule), "drop", or a tuple of
    # categorical values collapsed into a single indicator.
    ldp: Any = None

    def __post_init__(self):
        if not self.name:
            raise SchemaError("feature name must be non-empty")
        if self.kind == CATEGORICAL:
            if not self.domain:
                raise SchemaError(f"categorical feature {self.name!r} has an empty domain")
            dom = tuple(str(v) for v in self.domain)
            if len(set(dom)) != len(dom):
                raise SchemaError(f"categorical feature {self.name!r} has duplicate domain values")
            object.__setattr__(self, "domain", dom)
            valid_keys = set(dom)
        elif self.kind == NUMERICAL:
            if self.lower is None or self.upper is None:
                raise SchemaError(f"numerical feature {self.name!r} needs lower and upper bounds")
            if not float(self.lower) < float(self.upper):
                raise SchemaError(
                    f"numerical feature {self.name!r} needs lower < upper, got [{self.lower}, {self.upper}]"
                )
            object.__setattr__(self, "lower", float(self.lower))
            object.__setattr__(self, "upper", float(self.upper))
            valid_keys = set(BINARY_DOMAIN)
        else:
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        phrasing = {str(k): v for k, v in dict(self.phrasing).items()}
        bad = set(phrasing) - valid_keys
        if bad:
            raise SchemaError(f"phrasing keys {sorted(bad)} are not values of feature {self.name!r}")
        object.__setattr__(self, "phrasing", phrasing)
        if isinstance(self.ldp, list):
            object.__setattr__(self, "ldp", tuple(str(v) for v in self.ldp))

    @classmethod
    def categorical(cls, name, domain, phrasing=None, ldp=None):
        return cls(name=name, kind=CATEGORICAL, domain=tuple(domain), phrasing=phrasing or {}, ldp=ldp)

    @classmethod
    def numerical(cls, name, lower, upper, integer=False, phrasing=None, ldp=None):
        return cls(
            name=name, kind=NUMERICAL, lower=lower, upper=upper, integer=integer,
            phrasing=phrasing or {}, ldp=ldp,
        )

    @property
    def is_categorical(self) -> bool:
        return self.kind == CATEGORICAL

    @property
    def is_binary(self) -> bool:
        return self.kind == CATEGORICAL and self.domain == BINARY_DOMAIN

    @property
    def size(self) -> int:
        """Domain size d_i (categorical only)."""
        if not self.is_categorical:
            raise SchemaError(f"feature {self.name!r} is numerical and has no finite domain")
        return len(self.domain)

    def index_of(self, value) -> int:
        try:
            return self.domain.index(str(value))
        except ValueError:
            raise DataError(f"value {value!r} not in domain of {self.name!r}") from None

    def to_config(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        if self.is_categorical:
            out["domain"] = list(self.domain)
        else:
            out["bounds"] = [self.lower, self.upper]
            out["integer"] = self.integer
        if self.phrasing:
            out["phrasing"] = dict(self.phrasing)
        if self.ldp is not None:
            out["ldp"] = list(self.ldp) if isinstance(self.ldp, tuple) else self.ldp
        return out

    @classmethod
    def from_config(cls, cfg: Mapping) -> "FeatureSpec":
        kind = cfg.get("kind")
        if kind == CATEGORICAL:
            return cls.categorical(cfg["name"], cfg["domain"], cfg.get("phrasing"), cfg.get("ldp"))
        if kind == NUMERICAL:
            try:
                lower, upper = cfg["bounds"]
            except (KeyError, ValueError):
                raise SchemaError(f"numerical feature {cfg.get('name')!r} needs bounds: [lower, upper]") from None
            return cls.numerical(
                cfg["name"], lower, upper, bool(cfg.get("integer", False)), cfg.get("phrasing"), cfg.get("ldp")
            )
        raise SchemaError(f"feature {cfg.get('name')!r}: kind must be categorical or numerical")


@dataclass(frozen=True)
class Schema:
    dataset_id: str
    features: tuple[FeatureSpec, ...]
    label: FeatureSpec
    template_id: str = ""
    # Raw GROUP BY declarations keyed by k; parsed by ``gdp.GroupByPlan``.
    group_by: Mapping[int, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if len(self.features) < 1:
            raise SchemaError("schema needs at least one feature")
        if not self.label.is_categorical or len(self.label.domain) != 2:
            raise SchemaError("label must be categorical with exactly two values")
        names = [f.name for f in self.features] + [self.label.name]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        answers = [self.answer_text(v) for v in self.label.domain]
        if sorted(map(str, answers)) != ["No", "Yes"]:
            raise SchemaError("label phrasing must map one value to 'Yes' and the other to 'No'")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def columns(self) -> tuple[FeatureSpec, ...]:
        return self.features + (self.label,)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def positive_label(self) -> str:
        return next(v for v in self.label.domain if self.answer_text(v) == "Yes")

    def answer_text(self, value) -> str:
        """Yes/No text for a label value, defaulting to '1' -> Yes, '0' -> No."""
        value = str(value)
        p = self.label.phrasing.get(value)
        if isinstance(p, Mapping):
            p = p.get("text")
        if p is None:
            p = {"1": "Yes", "0": "No"}.get(value)
        return p

    def label_for_answer(self, answer: str) -> str:
        for v in self.label.domain:
            if self.answer_text(v) == answer:
                return v
        raise SchemaError(f"no label value is phrased as {answer!r}")

    def feature(self, name: str) -> FeatureSpec:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"unknown feature {name!r}")

    def column_index(self, name: str) -> int:
        return self.names.index(name)

    def to_config(self) -> dict:
        out = {
            "dataset_id": self.dataset_id,
            "template_id": self.template_id,
            "features": [f.to_config() for f in self.features],
            "label": self.label.to_config(),
        }
        if self.group_by:
            out["group_by"] = {int(k): v for k, v in self.group_by.items()}
        return out

    @classmethod
    def from_config(cls, cfg: Mapping) -> "Schema":
        try:
            label_cfg = dict(cfg["label"])
            features = cfg["features"]
        except KeyError as exc:
            raise SchemaError(f"schema config missing key {exc}") from None
        label_cfg.setdefault("kind", CATEGORICAL)
        return cls(
            dataset_id=str(cfg.get("dataset_id", "")),
            features=tuple(FeatureSpec.from_config(f) for f in features),
            label=FeatureSpec.from_config(label_cfg),
            template_id=str(cfg.get("template_id", cfg.get("dataset_id", ""))),
            group_by={int(k): v for k, v in (cfg.get("group_by") or {}).items()},
        )


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return Schema.from_config(yaml.safe_load(fh))


def dump_schema(schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(schema.to_config(), fh, sort_keys=False, allow_unicode=True)


@dataclass(frozen=True)
class Record:
    values: tuple
    label: Any
    provenance: Provenance = Provenance.RAW

    def as_dict(self, schema: Schema) -> dict:
        d = {f.name: v for f, v in zip(schema.features, self.values)}
        if self.label is not None:
            d[schema.label.name] = self.label
        return d


@dataclass(frozen=True)
class LoadReport:
    rows_read: int
    rows_dropped: int


class Dataset:
    """Immutable table bound to a schema."""

    def __init__(self, schema: Schema, data, provenance=Provenance.RAW, load_report=None):
        arr = np.array(data, dtype=float).reshape(-1, len(schema.columns))
        arr.setflags(write=False)
        self.schema = schema
        self.data = arr
        self.provenance = Provenance(provenance)
        self.load_report = load_report
        self._validate()

    def _validate(self):
        for j, col in enumerate(self.schema.columns):
            v = self.data[:, j]
            if col.is_categorical:
                if np.any((v < 0) | (v >= col.size) | (v != np.floor(v))):
                    raise DataError(f"column {col.name!r} holds codes outside its domain")
            elif self.provenance is not Provenance.RAW:
                if np.any((v < col.lower) | (v > col.upper)):
                    raise DataError(f"column {col.name!r} holds values outside [{col.lower}, {col.upper}]")

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Dataset({self.schema.dataset_id!r}, N={len(self)}, F={self.schema.n_features}, {self.provenance.value})"

    @classmethod
    def from_records(cls, schema: Schema, records: Sequence, provenance=Provenance.RAW) -> "Dataset":
        """Build from ``Record`` objects or plain ``(values..., label)`` rows."""
        rows = []
        for rec in records:
            if isinstance(rec, Record):
                raw = list(rec.values) + [rec.label]
            else:
                raw = list(rec)
            if len(raw) != len(schema.columns):
                raise DataError(f"record has {len(raw)} values, schema expects {len(schema.columns)}")
            rows.append([_encode(col, v) for col, v in zip(schema.columns, raw)])
        return cls(schema, np.array(rows, dtype=float).reshape(-1, len(schema.columns)), provenance)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.schema.column_index(name)]

    def decode_row(self, i: int) -> Record:
        row = self.data[i]
        vals = tuple(_decode(col, x) for col, x in zip(self.schema.columns, row))
        return Record(vals[:-1], vals[-1], self.provenance)

    @property
    def records(self) -> list[Record]:
        return [self.decode_row(i) for i in range(len(self))]

    def take(self, indices, provenance=None) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.schema, self.data[idx], provenance or self.provenance)

    def with_data(self, data, provenance) -> "Dataset":
        return Dataset(self.schema, data, provenance)


def _encode(col: FeatureSpec, value) -> float:
    if col.is_categorical:
        return float(col.index_of(value))
    return float(value)


def _decode(col: FeatureSpec, x: float):
    if col.is_categorical:
        return col.domain[int(x)]
    if col.integer and float(x).is_integer():
        return int(x)
    return float(x)


def load_csv(path, schema: Schema) -> Dataset:
    """Read a UTF-8 CSV with a header row into a Raw dataset.

    Column order in the file may differ from the schema. Rows with a missing
    cell are dropped and counted in ``dataset.load_report``.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        expected = schema.names
        if sorted(header) != sorted(expected) or len(set(header)) != len(header):
            raise DataError(f"header {header} does not match schema columns {expected}")
        order = [header.index(name) for name in expected]
        rows, dropped, read = [], 0, 0
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            read += 1
            if len(raw) != len(header):
                raise DataError(f"expected {len(header)} cells, found {len(raw)}", row=lineno, column=None)
            cells = [raw[i].strip() for i in order]
            if any(c in MISSING_TOKENS for c in cells):
                dropped += 1
                continue
            row = []
            for col, cell in zip(schema.columns, cells):
                if col.is_categorical:
                    if cell not in col.domain:
                        raise DataError(f"value {cell!r} not in domain {list(col.domain)}", row=lineno, column=col.name)
                    row.append(float(col.domain.index(cell)))
                else:
                    try:
                        row.append(float(cell))
                    except ValueError:
                        raise DataError(f"cannot parse {cell!r} as a number", row=lineno, column=col.name) from None
            rows.append(row)
    if dropped:
        logger.info("dropped %d of %d rows with missing values from %s", dropped, read, path)
    data = np.array(rows, dtype=float).reshape(-1, len(schema.columns))
    return Dataset(schema, data, Provenance.RAW, LoadReport(read, dropped))


def write_csv(dataset: Dataset, path) -> None:
    schema = dataset.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.names)
        for i in range(len(dataset)):
            row = []
            for col, x in zip(schema.columns, dataset.data[i]):
                if col.is_categorical:
                    row.append(col.domain[int(x)])
                else:
                    row.append(repr(float(x)))
            writer.writerow(row)


@dataclass(frozen=True)
class _BinaryColumn:
    source: int
    kind: str  # "threshold" | "onehot" | "group" | "copy"
    threshold: float = 0.0
    values: tuple = ()


class Binarizer:
    """Thresholds and one-hot plan fitted on one dataset, reusable on others."""

    def __init__(self, source: Schema, target: Schema, plan: Sequence[_BinaryColumn]):
        self.source = source
        self.schema = target
        self._plan = tuple(plan)

    @property
    def thresholds(self) -> dict[str, float]:
        return {
            f.name: c.threshold
            for f, c in zip(self.schema.features, self._plan)
            if c.kind == "threshold"
        }

    def transform(self, dataset: Dataset) -> Dataset:
        if dataset.schema != self.source:
            raise SchemaError("dataset schema differs from the one the binarizer was fitted on")
        cols = []
        for c in self._plan:
            x = dataset.data[:, c.source]
            if c.kind == "threshold":
                cols.append((x > c.threshold).astype(float))
            elif c.kind == "copy":
                cols.append(x)
            else:
                spec = self.source.columns[c.source]
                codes = [spec.domain.index(v) for v in c.values]
                cols.append(np.isin(x, codes).astype(float))
        cols.append(dataset.data[:, -1])
        return Dataset(self.schema, np.column_stack(cols), dataset.provenance)


def fit_binarizer(dataset: Dataset) -> Binarizer:
    """Plan the binary encoding of ``dataset``'s schema.

    Numerical features become ``[x > mean(x)]``; categorical features are
    one-hot expanded unless already ``{0, 1}``; an ``ldp`` hint on a feature
    may drop it or collapse chosen values into one indicator.
    """
    if dataset.provenance is not Provenance.RAW:
        raise DataError("binarize expects Raw data")
    src = dataset.schema
    feats: list[FeatureSpec] = []
    plan: list[_BinaryColumn] = []
    for j, f in enumerate(src.features):
        if f.ldp == "drop":
            continue
        if f.is_binary:
            feats.append(f)
            plan.append(_BinaryColumn(j, "copy"))
        elif isinstance(f.ldp, tuple):
            label = " or ".join(f.ldp)
            feats.append(FeatureSpec.categorical(f.name, BINARY_DOMAIN, {"1": label, "0": f"not {label}"}))
            plan.append(_BinaryColumn(j, "group", values=f.ldp))
        elif f.is_categorical:
            for v in f.domain:
                phr = f.phrasing.get(v, v)
                if isinstance(phr, Mapping):
                    phr = phr.get("text", v)
                feats.append(FeatureSpec.categorical(f"{f.name}={v}", BINARY_DOMAIN, {"1": phr, "0": f"not {phr}"}))
                plan.append(_BinaryColumn(j, "onehot", values=(v,)))
        else:
            x = dataset.data[:, j]
            if len(x) == 0 or np.all(x == x[0]):
                warnings.warn(f"numerical feature {f.name!r} is constant; dropped from the binary schema")
                continue
            t = float(np.mean(x))
            shown = format_real(t)
            phr = dict(f.phrasing) or {"0": f"less than or equal to {shown}", "1": f"more than {shown}"}
            feats.append(FeatureSpec.categorical(f.name, BINARY_DOMAIN, phr))
            plan.append(_BinaryColumn(j, "threshold", threshold=t))
    if len(feats) > MAX_BINARY_FEATURES:
        raise SchemaError(
            f"feature limit exceeded: {len(feats)} binary features, at most {MAX_BINARY_FEATURES} allowed"
        )
    target = Schema(src.dataset_id, tuple(feats), src.label, src.template_id, src.group_by)
    return Binarizer(src, target, plan)


def binarize(dataset: Dataset) -> tuple[Dataset, Schema]:
    b = fit_binarizer(dataset)
    return b.transform(dataset), b.schema


def split_train_test(dataset: Dataset, seed) -> tuple[Dataset, Dataset]:
    """Shuffle and split 80/20; train gets floor(0.8 N) records."""
    n = len(dataset)
    if n < 2:
        raise DataError(f"need at least 2 records to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(0.8 * n))
    return dataset.take(np.sort(perm[:n_train])), dataset.take(np.sort(perm[n_train:]))


def subsample_test(test: Dataset, fraction: float, seed) -> Dataset:
    """Keep floor(fraction * |test|) records (at least one), drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return test
    size = max(1, int(math.floor(fraction * len(test) + 1e-9)))
    idx = np.random.default_rng(seed).choice(len(test), size=size, replace=False)
    return test.take(np.sort(idx))
