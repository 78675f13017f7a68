import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import binary_schema, random_binary_dataset
from dptabicl.accountant import SpendLedger
from dptabicl.data import Dataset, FeatureSpec, Provenance, Schema
from dptabicl.errors import BudgetError, DataError, SchemaError
from dptabicl.ldp import (
    MAX_JOINT_CELLS,
    BudgetAllocation,
    FrequencyTensor,
    apply_modewise,
    build_distortion_matrix,
    collect_and_reconstruct,
    estimate_joint,
    observed_frequencies,
    perturb_dataset,
    project_to_simplex,
    reconstruct_joint,
    sample_dataset,
    sample_reconstructed,
)


def test_matrix_entries():
    m = build_distortion_matrix(math.log(3), 2)
    np.testing.assert_allclose(m.p, [[0.75, 0.25], [0.25, 0.75]])
    m = build_distortion_matrix(1.0, 4)
    e = math.e
    np.testing.assert_allclose(np.diag(m.p), e / (3 + e))
    np.testing.assert_allclose(m.p[0, 1], 1 / (3 + e))
    np.testing.assert_allclose(m.p.sum(axis=1), 1.0)


def test_matrix_infinite_budget_is_identity():
    np.testing.assert_array_equal(build_distortion_matrix(math.inf, 3).p, np.eye(3))


@pytest.mark.parametrize("eps", [0.0, -1.0, -math.inf, math.nan])
def test_matrix_rejects_nonpositive(eps):
    with pytest.raises(BudgetError):
        build_distortion_matrix(eps, 2)


def test_matrix_rejects_unary_domain():
    with pytest.raises(SchemaError):
        build_distortion_matrix(1.0, 1)


def test_large_epsilon_stays_finite():
    m = build_distortion_matrix(1000.0, 2)
    np.testing.assert_array_equal(m.p, np.eye(2))
    np.testing.assert_allclose(m.inverse(), np.eye(2))


def test_ill_conditioned_matrix_warns(caplog):
    m = build_distortion_matrix(1e-9, 2)
    with caplog.at_level("WARNING"):
        m.inverse()
    assert "condition number" in caplog.text


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 30), st.integers(2, 6))
def test_inverse_property(eps, size):
    m = build_distortion_matrix(eps, size)
    np.testing.assert_allclose(m.inverse() @ m.p, np.eye(size), atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 50), st.integers(2, 8))
def test_matrix_ratio_bound(eps, size):
    p = build_distortion_matrix(eps, size).p
    ratio = max(p[u, o] / p[v, o] for u in range(size) for v in range(size) for o in range(size))
    assert ratio <= math.exp(eps) * (1 + 1e-9)


def test_allocation_rules():
    with pytest.raises(BudgetError):
        BudgetAllocation((1.0, math.inf))
    with pytest.raises(BudgetError):
        BudgetAllocation((1.0, 0.0))
    a = BudgetAllocation.uniform(4.0, 4)
    assert a.per_feature == (1.0, 1.0, 1.0, 1.0) and a.total == 4.0
    with pytest.raises(BudgetError):
        a.matrices(binary_schema(2))


def kron_oracle(lam_cells, matrices):
    big = np.array([[1.0]])
    for m in matrices:
        big = np.kron(big, m.p)
    # observed = big^T vec(pi)
    return np.linalg.solve(big.T, lam_cells.ravel()).reshape(lam_cells.shape)


@pytest.mark.parametrize("dims", [(2, 2), (3, 2), (2, 4, 2), (3, 3, 2)])
def test_modewise_matches_kronecker(dims):
    rng = np.random.default_rng(sum(dims))
    lam = rng.dirichlet(np.ones(math.prod(dims))).reshape(dims)
    mats = [build_distortion_matrix(rng.uniform(0.3, 3), d) for d in dims]
    ours = estimate_joint(FrequencyTensor(lam), mats)
    np.testing.assert_allclose(ours, kron_oracle(lam, mats), atol=1e-10)


def test_apply_modewise_with_nonsymmetric_operators():
    rng = np.random.default_rng(0)
    dims = (2, 3, 2)
    x = rng.normal(size=dims)
    ops = [rng.normal(size=(d, d)) for d in dims]
    big = np.kron(np.kron(ops[0], ops[1]), ops[2])
    np.testing.assert_allclose(apply_modewise(x, ops), (big @ x.ravel()).reshape(dims), atol=1e-12)


def test_estimate_inverts_expected_observation():
    """Feeding the exact expected observation recovers pi."""
    rng = np.random.default_rng(3)
    dims = (2, 2, 2)
    pi = rng.dirichlet(np.ones(8)).reshape(dims)
    mats = [build_distortion_matrix(1.0, 2) for _ in dims]
    lam = apply_modewise(pi, [m.p.T for m in mats])
    np.testing.assert_allclose(estimate_joint(FrequencyTensor(lam), mats), pi, atol=1e-12)


def test_project_to_simplex():
    out = project_to_simplex(np.array([0.6, -0.2, 0.6]))
    np.testing.assert_allclose(out, [0.5, 0.0, 0.5])
    np.testing.assert_allclose(project_to_simplex(np.array([-1.0, -1.0])), [0.5, 0.5])


def test_perturb_infinite_budget_is_identity():
    ds = random_binary_dataset(500, 3, seed=1)
    mats = BudgetAllocation((math.inf,) * 4).matrices(ds.schema)
    out = perturb_dataset(ds, mats, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, ds.data)
    assert out.provenance is Provenance.PERTURBED


def test_perturb_multiary_transition_frequencies():
    schema = Schema("s", (FeatureSpec.categorical("c", ("a", "b", "c")),), FeatureSpec.categorical("y", ("0", "1")))
    n = 300_000
    ds = Dataset(schema, np.column_stack([np.zeros(n), np.zeros(n)]))
    mats = BudgetAllocation((1.0, 1.0)).matrices(schema)
    out = perturb_dataset(ds, mats, np.random.default_rng(5))
    freq = np.bincount(out.data[:, 0].astype(int), minlength=3) / n
    np.testing.assert_allclose(freq, mats[0].p[0], atol=0.004)


def test_perturb_requires_categorical():
    s = Schema("s", (FeatureSpec.numerical("x", 0, 1),), FeatureSpec.categorical("y", ("0", "1")))
    ds = Dataset(s, [[0.5, 0]])
    with pytest.raises(SchemaError, match="binarize"):
        perturb_dataset(ds, BudgetAllocation.uniform(1.0, 2).matrices(binary_schema(1)), np.random.default_rng())


def test_joint_cell_guard():
    feats = tuple(FeatureSpec.categorical(f"c{i}", tuple("abcd")) for i in range(10))
    s = Schema("s", feats, FeatureSpec.categorical("y", ("0", "1")))
    assert 4**10 * 2 > MAX_JOINT_CELLS
    ds = Dataset(s, np.zeros((1, 11)))
    with pytest.raises(SchemaError, match="limit"):
        perturb_dataset(ds, BudgetAllocation.uniform(1.0, 11).matrices(s), np.random.default_rng())


def test_observed_frequencies_only_accepts_perturbed():
    with pytest.raises(DataError):
        observed_frequencies(random_binary_dataset(10, 2))


def test_observed_frequencies_counts():
    s = binary_schema(1)
    ds = Dataset(s, [[0, 0], [0, 1], [1, 1], [1, 1]], Provenance.PERTURBED)
    np.testing.assert_allclose(observed_frequencies(ds).cells, [[0.25, 0.25], [0.0, 0.5]])


def test_reconstruct_dims_checked():
    lam = FrequencyTensor(np.full((2, 2), 0.25))
    mats = BudgetAllocation.uniform(2.0, 2).matrices(binary_schema(1))
    with pytest.raises(SchemaError):
        reconstruct_joint(lam, mats, binary_schema(2))


def test_sampling_matches_distribution():
    s = binary_schema(1)
    cells = np.array([[0.1, 0.2], [0.0, 0.7]])
    from dptabicl.ldp import ReconstructedDistribution

    dist = ReconstructedDistribution(FrequencyTensor(cells), s)
    recs = sample_reconstructed(dist, 50_000, np.random.default_rng(0))
    assert all(r.provenance is Provenance.RECONSTRUCTED_SAMPLED for r in recs)
    counts = {}
    for r in recs:
        counts[(r.values[0], r.label)] = counts.get((r.values[0], r.label), 0) + 1
    assert ("1", "0") not in counts
    assert abs(counts[("1", "1")] / 50_000 - 0.7) < 0.01
    ds = sample_dataset(dist, 50_000, np.random.default_rng(1))
    assert ds.provenance is Provenance.RECONSTRUCTED_SAMPLED
    assert abs(ds.data[:, 1].mean() - 0.9) < 0.01
    with pytest.raises(ValueError):
        sample_reconstructed(dist, 0, np.random.default_rng())


def test_collect_and_reconstruct_logs_each_attribute():
    ds = random_binary_dataset(2000, 3, seed=2)
    ledger = SpendLedger()
    dist, perturbed = collect_and_reconstruct(ds, BudgetAllocation.uniform(4.0, 4), np.random.default_rng(0), ledger)
    assert [e.op_id for e in ledger.entries] == ["rr:f0", "rr:f1", "rr:f2", "rr:y"]
    ledger.assert_total(4.0)
    assert perturbed.provenance is Provenance.PERTURBED
    assert dist.cells.shape == (2, 2, 2, 2)
    assert abs(dist.cells.sum() - 1) < 1e-12 and dist.cells.min() >= 0


def test_reconstruction_converges_for_large_n():
    rng = np.random.default_rng(11)
    pi = rng.dirichlet(np.ones(8) * 2).reshape(2, 2, 2)
    n = 400_000
    flat = rng.choice(8, size=n, p=pi.ravel())
    data = np.column_stack(np.unravel_index(flat, (2, 2, 2))).astype(float)
    ds = Dataset(binary_schema(2), data)
    alloc = BudgetAllocation.uniform(6.0, 3)
    mats = alloc.matrices(ds.schema)
    perturbed = perturb_dataset(ds, mats, rng)
    est = estimate_joint(observed_frequencies(perturbed), mats)
    empirical = np.bincount(flat, minlength=8).reshape(2, 2, 2) / n
    assert np.max(np.abs(est - empirical)) < 0.01
