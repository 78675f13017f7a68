"""Poisson subsampling, GROUP BY partitioning and Laplace-noised aggregates."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .accountant import compose_sequential
from .data import Dataset, FeatureSpec, Schema, round_half_up
from .errors import BudgetError, DataError, EmptyGroupError, SchemaError

_TWO52 = float(2**52)


def laplace_noise(scale: float, rng: np.random.Generator, size=None):
    """Laplace(0, scale) by inverse CDF.

    ``u`` is drawn on the open interval (0, 1) as ``(m + 0.5) / 2**52`` with
    ``m`` a uniform 52-bit integer (exact in float64), then
    ``x = -scale * sgn(u - 1/2) * ln(1 - 2|u - 1/2|)``. A zero scale returns
    exact zeros without touching ``rng``.
    """
    if scale == 0:
        return 0.0 if size is None else np.zeros(size)
    if not scale > 0 or math.isinf(scale):
        raise BudgetError(f"Laplace scale must be finite and positive, got {scale}")
    m = rng.integers(0, 2**52, size=size, dtype=np.int64)
    v = (np.asarray(m, dtype=float) + 0.5) / _TWO52 - 0.5
    x = -scale * np.sign(v) * np.log1p(-2.0 * np.abs(v))
    return float(x) if size is None else x


def _scale(sensitivity: float, budget: float) -> float:
    if math.isinf(budget) and budget > 0:
        return 0.0
    if not budget > 0:
        raise BudgetError(f"budget must be positive, got {budget}")
    return sensitivity / budget


@dataclass(frozen=True)
class BucketRule:
    """Two or more disjoint buckets over one column.

    Either ``groups`` (lists of categorical values) or a numeric
    ``threshold`` with ``op`` ``"le"`` (``<= T`` | ``> T``) or ``"lt"``
    (``< T`` | ``>= T``).
    """

    feature: str
    groups: tuple[tuple[str, ...], ...] = ()
    threshold: float | None = None
    op: str = "le"

    @property
    def count(self) -> int:
        return len(self.groups) if self.threshold is None else 2

    def labels(self) -> list[str]:
        if self.threshold is None:
            return ["|".join(g) for g in self.groups]
        t = f"{self.threshold:g}"
        return [f"<={t}", f">{t}"] if self.op == "le" else [f"<{t}", f">={t}"]

    def masks(self, dataset: Dataset) -> list[np.ndarray]:
        col = dataset.column(self.feature)
        spec = dataset.schema.feature(self.feature)
        if self.threshold is None:
            return [np.isin(col, [spec.index_of(v) for v in g]) for g in self.groups]
        low = col <= self.threshold if self.op == "le" else col < self.threshold
        return [low, ~low]

    def validate(self, spec: FeatureSpec):
        if self.threshold is None:
            if not spec.is_categorical:
                raise SchemaError(f"GROUP BY on numerical {spec.name!r} needs a threshold")
            flat = [v for g in self.groups for v in g]
            if len(flat) != len(set(flat)):
                raise SchemaError(f"GROUP BY buckets on {spec.name!r} overlap")
            if set(flat) != set(spec.domain):
                raise SchemaError(f"GROUP BY buckets on {spec.name!r} must cover its domain {list(spec.domain)}")
            if len(self.groups) < 2:
                raise SchemaError(f"GROUP BY on {spec.name!r} needs at least two buckets")
        else:
            if spec.is_categorical:
                raise SchemaError(f"threshold GROUP BY on categorical {spec.name!r}")
            if self.op not in ("le", "lt"):
                raise SchemaError(f"threshold op must be 'le' or 'lt', got {self.op!r}")


@dataclass(frozen=True)
class GroupByPlan:
    keys: tuple[BucketRule, ...]
    k: int

    def __post_init__(self):
        product = math.prod(r.count for r in self.keys)
        if product != self.k:
            raise SchemaError(f"GROUP BY keys yield {product} buckets, plan declares k={self.k}")

    @classmethod
    def single(cls) -> "GroupByPlan":
        return cls((), 1)

    @classmethod
    def from_config(cls, k: int, keys_cfg: Sequence[Mapping[str, Any]], schema: Schema) -> "GroupByPlan":
        rules = []
        for cfg in keys_cfg:
            if "threshold" in cfg:
                rule = BucketRule(cfg["feature"], threshold=float(cfg["threshold"]), op=cfg.get("op", "le"))
            else:
                groups = tuple(tuple(str(v) for v in g) for g in cfg["buckets"])
                rule = BucketRule(cfg["feature"], groups=groups)
            rule.validate(schema.feature(rule.feature))
            rules.append(rule)
        return cls(tuple(rules), int(k))

    @classmethod
    def for_schema(cls, schema: Schema, k: int) -> "GroupByPlan":
        if k == 1:
            return cls.single()
        if k not in schema.group_by:
            raise SchemaError(f"schema {schema.dataset_id!r} declares no GROUP BY plan for k={k}")
        return cls.from_config(k, schema.group_by[k], schema)

    def bucket_ids(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(r.count) for r in self.keys)))

    def describe(self, bucket_id) -> str:
        return ", ".join(f"{r.feature}{r.labels()[i]}" for r, i in zip(self.keys, bucket_id))


def poisson_subsample(dataset: Dataset, n_target: int, rng: np.random.Generator) -> Dataset:
    """Keep each record independently with probability n_target / N."""
    N = len(dataset)
    if not 1 <= n_target <= N:
        raise DataError(f"n_target must lie in [1, {N}], got {n_target}")
    if n_target == N:
        return dataset
    keep = rng.random(N) < n_target / N
    return dataset.take(np.flatnonzero(keep))


def group_by_partition(subset: Dataset, plan: GroupByPlan) -> list[Dataset]:
    """Split into ``plan.k`` disjoint subsets in bucket-enumeration order."""
    if plan.k == 1:
        return [subset]
    per_key = [r.masks(subset) for r in plan.keys]
    parts, cover = [], np.zeros(len(subset), dtype=int)
    for bucket in plan.bucket_ids():
        mask = np.ones(len(subset), dtype=bool)
        for masks, i in zip(per_key, bucket):
            mask &= masks[i]
        if not mask.any():
            raise EmptyGroupError(bucket, plan.describe(bucket))
        cover += mask
        parts.append(subset.take(np.flatnonzero(mask)))
    if not np.all(cover == 1):
        raise DataError("GROUP BY buckets do not form a partition of the subsample")
    return parts


def dp_count(values: Sequence, xi_half: float, rng: np.random.Generator) -> float:
    """Count plus Laplace(1 / xi_half)."""
    return len(values) + laplace_noise(_scale(1.0, xi_half), rng)


def dp_sum_clipped(values, gamma: float, alpha: float, xi_half: float, rng: np.random.Generator) -> float:
    """Sum of values clipped to [gamma, alpha], plus Laplace((alpha - gamma) / xi_half)."""
    if not gamma < alpha:
        raise DataError(f"need gamma < alpha, got [{gamma}, {alpha}]")
    clipped = np.clip(np.asarray(values, dtype=float), gamma, alpha)
    return float(clipped.sum()) + laplace_noise(_scale(alpha - gamma, xi_half), rng)


def dp_mean_numerical(values, gamma, alpha, xi, rng, integer=False) -> float:
    """Noisy clipped sum over noisy count, each at xi / 2.

    The count is floored at 1, the quotient clamped to [gamma, alpha] and,
    for integer features, rounded half-up. The sum noise is drawn first.
    """
    half = xi / 2
    total = dp_sum_clipped(values, gamma, alpha, half, rng)
    count = dp_count(values, half, rng)
    mean = min(max(total / max(count, 1.0), gamma), alpha)
    if integer:
        mean = float(min(max(round_half_up(mean), math.ceil(gamma)), math.floor(alpha)))
    return mean


def dp_mode_categorical(values, domain: Sequence[str], xi: float, rng: np.random.Generator) -> str:
    """Category with the largest Laplace(1 / xi)-noised count; ties go to the earlier domain value."""
    domain = [str(d) for d in domain]
    if not domain:
        raise SchemaError("domain must be non-empty")
    index = {d: i for i, d in enumerate(domain)}
    counts = np.zeros(len(domain))
    for v in values:
        counts[index[str(v)]] += 1
    noisy = counts + laplace_noise(_scale(1.0, xi), rng, size=len(domain))
    return domain[int(np.argmax(noisy))]


@dataclass(frozen=True)
class AggregateRecord:
    """One DP aggregate per feature plus the DP label.

    ``subset_size`` is the true, non-private size of the subset; it is kept
    for diagnostics only and never serialized.
    """

    values: tuple
    label: str
    subset_size: int = 0


def aggregate_subset(subset: Dataset, budgets: Sequence[float], rng: np.random.Generator) -> AggregateRecord:
    schema = subset.schema
    if len(budgets) != len(schema.columns):
        raise BudgetError(f"need {len(schema.columns)} budgets, got {len(budgets)}")
    out = []
    for j, (col, xi) in enumerate(zip(schema.columns, budgets)):
        x = subset.data[:, j]
        if col.is_categorical:
            vals = [col.domain[int(c)] for c in x]
            out.append(dp_mode_categorical(vals, col.domain, xi, rng))
        else:
            m = dp_mean_numerical(x, col.lower, col.upper, xi, rng, integer=col.integer)
            out.append(int(m) if col.integer else m)
    return AggregateRecord(tuple(out[:-1]), out[-1], len(subset))


def gdp_aggregates(
    dataset: Dataset,
    n_target: int,
    plan: GroupByPlan,
    budgets: Sequence[float],
    rng: np.random.Generator,
    ledger=None,
) -> list[AggregateRecord]:
    """Subsample, partition, aggregate; one AggregateRecord per subset."""
    sample = poisson_subsample(dataset, n_target, rng)
    parts = group_by_partition(sample, plan)
    aggregates = [aggregate_subset(part, budgets, rng) for part in parts]
    if ledger is not None:
        per_subset = compose_sequential(budgets).epsilon
        ledger.record_parallel(f"dp-avg:{plan.k}-subsets", [per_subset] * len(parts), disjoint=True)
        ledger.record_amplification("poisson-subsample", n_target, len(dataset))
    return aggregates


def gdp_demonstrations(dataset, n_target, plan, budgets, rng, template, ledger=None):
    from .serialize import render_demonstration

    aggs = gdp_aggregates(dataset, n_target, plan, budgets, rng, ledger)
    return tuple(render_demonstration(template, a, dataset.schema) for a in aggs)
