import math

import numpy as np
import pytest

from dptabicl.data import Dataset, FeatureSpec, Provenance, Schema
from dptabicl.synthetic import write_synthetic_blood


def binary_schema(n_features: int, dataset_id="toy") -> Schema:
    feats = tuple(FeatureSpec.categorical(f"f{i}", ("0", "1")) for i in range(n_features))
    return Schema(dataset_id, feats, FeatureSpec.categorical("y", ("0", "1")))


def random_binary_dataset(n_rows: int, n_features: int, seed=0, provenance=Provenance.RAW) -> Dataset:
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 2, size=(n_rows, n_features + 1)).astype(float)
    return Dataset(binary_schema(n_features), data, provenance)


@pytest.fixture(scope="session")
def blood_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "blood.csv"
    write_synthetic_blood(path)
    return path


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            lines.append((name, {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}  criterion {name}")
