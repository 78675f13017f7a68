"""k-ary randomized response, joint frequency reconstruction and sampling.

The collected table is perturbed attribute by attribute. Because each
attribute is perturbed independently, the distortion of the joint
distribution is the Kronecker product of the per-attribute matrices, and its
inverse is the Kronecker product of the per-attribute inverses. We never
build that product: applying each inverse along its own tensor axis gives the
same result in O(cells * sum(d_i)) time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, Provenance, Record, Schema
from .errors import BudgetError, DataError, SchemaError

logger = logging.getLogger(__name__)

MAX_JOINT_CELLS = 2**20
CONDITION_WARNING = 1e8


@dataclass(frozen=True)
class DistortionMatrix:
    """U x U randomized-response matrix; ``p[u, o] = P(report o | true u)``."""

    epsilon: float
    p: np.ndarray

    @property
    def size(self) -> int:
        return self.p.shape[0]

    @property
    def keep_probability(self) -> float:
        return float(self.p[0, 0])

    def inverse(self) -> np.ndarray:
        """Inverse of ``p``; closed form for U = 2, LU solve otherwise."""
        if self.size == 2:
            a, b = self.p[0]
            c, d = self.p[1]
            det = a * d - b * c
            if det == 0:
                raise np.linalg.LinAlgError("singular distortion matrix")
            inv = np.array([[d, -b], [-c, a]]) / det
        else:
            inv = np.linalg.solve(self.p, np.eye(self.size))
        cond = np.linalg.cond(self.p)
        if cond > CONDITION_WARNING:
            logger.warning("distortion matrix at epsilon=%g has condition number %.3g", self.epsilon, cond)
        return inv


def build_distortion_matrix(epsilon_i: float, size: int) -> DistortionMatrix:
    """Optimal k-ary RR matrix: keep with e^eps/(U-1+e^eps), else uniform."""
    if size < 2:
        raise SchemaError(f"randomized response needs a domain of at least 2 values, got {size}")
    if math.isinf(epsilon_i) and epsilon_i > 0:
        p = np.eye(size)
    else:
        if not epsilon_i > 0:
            raise BudgetError(f"budget must be positive, got {epsilon_i}")
        # e^-eps form stays finite for large epsilon
        t = math.exp(-epsilon_i)
        keep = 1.0 / (1.0 + (size - 1) * t)
        off = t / (1.0 + (size - 1) * t)
        p = np.full((size, size), off)
        np.fill_diagonal(p, keep)
    p.setflags(write=False)
    return DistortionMatrix(float(epsilon_i), p)


@dataclass(frozen=True)
class BudgetAllocation:
    """Per-attribute budgets for the features followed by the label."""

    per_feature: tuple[float, ...]

    def __post_init__(self):
        eps = tuple(float(e) for e in self.per_feature)
        object.__setattr__(self, "per_feature", eps)
        if not eps:
            raise BudgetError("allocation needs at least one budget")
        infinite = [math.isinf(e) and e > 0 for e in eps]
        if any(infinite) and not all(infinite):
            raise BudgetError("either all budgets are +inf or none is")
        if not all(infinite) and not all(e > 0 for e in eps):
            raise BudgetError("every per-attribute budget must be positive")

    @property
    def total(self) -> float:
        return math.fsum(self.per_feature)

    @classmethod
    def uniform(cls, epsilon: float, parts: int) -> "BudgetAllocation":
        from .accountant import split_uniform

        return cls(tuple(split_uniform(epsilon, parts)))

    def matrices(self, schema: Schema) -> list[DistortionMatrix]:
        if len(self.per_feature) != len(schema.columns):
            raise BudgetError(
                f"allocation has {len(self.per_feature)} budgets, schema has {len(schema.columns)} attributes"
            )
        return [build_distortion_matrix(e, c.size) for e, c in zip(self.per_feature, schema.columns)]


@dataclass(frozen=True)
class FrequencyTensor:
    """One real value per joint cell, axes ordered as features then label."""

    cells: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        if self.normalized:
            if np.any(self.cells < 0) or abs(self.cells.sum() - 1.0) > 1e-9:
                raise DataError("normalized frequency tensor must be non-negative and sum to 1")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.cells.shape


@dataclass(frozen=True)
class ReconstructedDistribution:
    tensor: FrequencyTensor
    schema: Schema

    @property
    def cells(self) -> np.ndarray:
        return self.tensor.cells


def _check_categorical(schema: Schema):
    for c in schema.columns:
        if not c.is_categorical:
            raise SchemaError(f"feature {c.name!r} is numerical; binarize before randomized response")
    cells = math.prod(c.size for c in schema.columns)
    if cells > MAX_JOINT_CELLS:
        raise SchemaError(f"joint domain has {cells} cells, limit is {MAX_JOINT_CELLS}")


def _check_matrices(schema: Schema, matrices: Sequence[DistortionMatrix]):
    if len(matrices) != len(schema.columns):
        raise SchemaError(f"need {len(schema.columns)} distortion matrices, got {len(matrices)}")
    for c, m in zip(schema.columns, matrices):
        if m.size != c.size:
            raise SchemaError(f"matrix for {c.name!r} is {m.size}x{m.size}, domain size is {c.size}")


def perturb_dataset(dataset: Dataset, matrices: Sequence[DistortionMatrix], rng: np.random.Generator) -> Dataset:
    """Resample every cell from its matrix row (inverse-CDF on one uniform draw)."""
    schema = dataset.schema
    _check_categorical(schema)
    _check_matrices(schema, matrices)
    n = len(dataset)
    out = np.empty_like(dataset.data)
    u = rng.random((n, len(matrices)))
    for j, m in enumerate(matrices):
        codes = dataset.data[:, j].astype(int)
        cdf = np.cumsum(m.p, axis=1)
        cdf[:, -1] = 1.0
        out[:, j] = (u[:, j, None] >= cdf[codes]).sum(axis=1)
    return Dataset(schema, out, Provenance.PERTURBED)


def observed_frequencies(perturbed: Dataset) -> FrequencyTensor:
    """Empirical joint proportions of the collected (perturbed) table."""
    if perturbed.provenance is not Provenance.PERTURBED:
        raise DataError("observed_frequencies only accepts Perturbed data")
    if len(perturbed) == 0:
        raise DataError("cannot tabulate an empty dataset")
    schema = perturbed.schema
    _check_categorical(schema)
    dims = tuple(c.size for c in schema.columns)
    flat = np.ravel_multi_index(tuple(perturbed.data.astype(int).T), dims)
    counts = np.bincount(flat, minlength=math.prod(dims)).astype(float)
    return FrequencyTensor((counts / len(perturbed)).reshape(dims))


def apply_modewise(cells: np.ndarray, operators: Sequence[np.ndarray]) -> np.ndarray:
    """Return ``(M_1 kron ... kron M_m) vec(cells)`` reshaped like ``cells``.

    ``vec`` is the row-major flattening, so axis 0 varies slowest and pairs
    with the leftmost Kronecker factor.
    """
    out = np.asarray(cells, dtype=float)
    for axis, m in enumerate(operators):
        out = np.moveaxis(np.tensordot(m, out, axes=([1], [axis])), 0, axis)
    return out


def estimate_joint(lam: FrequencyTensor, matrices: Sequence[DistortionMatrix]) -> np.ndarray:
    """Unbiased (unclamped) estimate of the true joint proportions.

    Observed proportions satisfy ``lambda = (P_1 kron ... kron P_y)^T pi``;
    RR matrices are symmetric so this matches ``pi = P^-1 lambda``.
    """
    if len(matrices) != lam.cells.ndim:
        raise SchemaError(f"tensor has {lam.cells.ndim} axes, got {len(matrices)} matrices")
    for axis, m in enumerate(matrices):
        if m.size != lam.cells.shape[axis]:
            raise SchemaError(f"axis {axis} has size {lam.cells.shape[axis]}, matrix is {m.size}x{m.size}")
    return apply_modewise(lam.cells, [m.inverse().T for m in matrices])


def project_to_simplex(raw: np.ndarray) -> np.ndarray:
    """Clamp negative cells to zero and renormalize."""
    clipped = np.clip(raw, 0.0, None)
    total = clipped.sum()
    if total <= 0:
        return np.full_like(clipped, 1.0 / clipped.size)
    return clipped / total


def reconstruct_joint(
    lam: FrequencyTensor, matrices: Sequence[DistortionMatrix], schema: Schema
) -> ReconstructedDistribution:
    raw = estimate_joint(lam, matrices)
    dims = tuple(c.size for c in schema.columns)
    if raw.shape != dims:
        raise SchemaError(f"tensor dims {raw.shape} do not match schema domains {dims}")
    return ReconstructedDistribution(FrequencyTensor(project_to_simplex(raw)), schema)


def sample_reconstructed(dist: ReconstructedDistribution, k: int, rng: np.random.Generator) -> list[Record]:
    """Draw ``k`` records i.i.d. (with replacement) from the joint distribution."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    cells = dist.cells
    p = cells.ravel()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    flat = np.searchsorted(cdf, rng.random(k), side="right")
    # zero-probability cells share a cdf value with their predecessor and are never selected
    flat = np.minimum(flat, p.size - 1)
    idx = np.unravel_index(flat, cells.shape)
    cols = dist.schema.columns
    out = []
    for r in range(k):
        vals = tuple(col.domain[int(idx[j][r])] for j, col in enumerate(cols))
        out.append(Record(vals[:-1], vals[-1], Provenance.RECONSTRUCTED_SAMPLED))
    return out


def sample_dataset(dist: ReconstructedDistribution, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` sampled records as a Dataset (used to train the baselines)."""
    p = dist.cells.ravel()
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    flat = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), p.size - 1)
    data = np.column_stack(np.unravel_index(flat, dist.cells.shape)).astype(float)
    return Dataset(dist.schema, data, Provenance.RECONSTRUCTED_SAMPLED)


def ldp_demonstrations(dist: ReconstructedDistribution, k: int, rng: np.random.Generator, template):
    """Sample ``k`` reconstructed records and serialize them with labels."""
    from .serialize import render_demonstration

    records = sample_reconstructed(dist, k, rng)
    return tuple(render_demonstration(template, r, dist.schema) for r in records)


def collect_and_reconstruct(dataset: Dataset, allocation: BudgetAllocation, rng, ledger=None):
    """Perturb once and reconstruct once; the raw input is not retained.

    Returns the reconstructed distribution and the perturbed dataset.
    """
    matrices = allocation.matrices(dataset.schema)
    perturbed = perturb_dataset(dataset, matrices, rng)
    if ledger is not None:
        for col, eps in zip(dataset.schema.columns, allocation.per_feature):
            ledger.record_sequential(f"rr:{col.name}", eps)
    lam = observed_frequencies(perturbed)
    return reconstruct_joint(lam, matrices, perturbed.schema), perturbed
