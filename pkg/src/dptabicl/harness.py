"""Grid runner for the LDP and GDP pipelines.

Seed derivation: every random stream comes from
``numpy.random.SeedSequence(master_seed, spawn_key=keys)`` where ``keys``
names the stream:

* ``(0,)`` train/test split, ``(1,)`` test subsampling;
* ``(2, pipeline, eps_key, k, trial)`` one grid cell, where ``pipeline`` is
  0 for LDP and 1 for GDP and ``eps_key`` is ``round(1000 * eps)`` (or
  ``2**31 - 1`` for +inf);
* ``(cell_seed, query_index)`` per-query LDP demonstration sampling.

The first 32-bit word of the generated state is the seed recorded in the report.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import baselines as bl
from .accountant import SpendLedger, amplify, split_uniform
from .data import Dataset, Provenance, Schema, fit_binarizer, load_csv, load_schema, split_train_test, subsample_test
from .errors import EmptyGroupError, SchemaError
from .gdp import GroupByPlan, gdp_demonstrations
from .ldp import BudgetAllocation, collect_and_reconstruct, ldp_demonstrations, sample_dataset
from .llm import BackendConfig, HTTPBackend, MockBackend, Verdict, complete_many, extract_answer
from .serialize import PromptTemplate, assemble_prompt, builtin_template, load_template, render_query

logger = logging.getLogger(__name__)

INF = math.inf
DEFAULT_EPSILONS = (1.0, 5.0, 10.0, 25.0, 50.0, INF)
DEFAULT_KS = (1, 2, 4, 8)
REPORT_COLUMNS = [
    "dataset", "pipeline", "epsilon", "k", "trial", "seed",
    "accuracy", "tp_rate", "tn_rate", "unparsed", "wall_ms",
]
INCOMPLETE_MARKER = "INCOMPLETE"


def derive_seed(master: int, *keys: int) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def eps_key(eps: float) -> int:
    return 2**31 - 1 if math.isinf(eps) else int(round(eps * 1000))


def parse_epsilon(value) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "infinity", "∞"):
        return INF
    return float(value)


def format_epsilon(eps: float) -> str:
    return "inf" if math.isinf(eps) else f"{eps:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_id: str
    data_path: str
    pipeline: str = "ldp"
    schema_path: str | None = None
    template: str | None = None
    epsilons: tuple = DEFAULT_EPSILONS
    ks: tuple = DEFAULT_KS
    trials: int = 5
    n_target: int | None = None
    test_fraction: float = 1.0
    max_queries: int | None = None
    backend: str = "mock:echo-majority"
    backend_settings: Mapping[str, Any] = field(default_factory=dict)
    allow_live: bool = False
    seed: int = 0
    unparsed: str = "incorrect"
    empty_group_retries: int = 0
    budget_weights: Mapping[str, float] | None = None
    baselines: bool = False
    record_wall_time: bool = True

    def __post_init__(self):
        if self.pipeline not in ("ldp", "gdp"):
            raise SchemaError(f"pipeline must be 'ldp' or 'gdp', got {self.pipeline!r}")
        if self.trials < 1:
            raise SchemaError("trials must be >= 1")
        if not self.epsilons or not self.ks:
            raise SchemaError("epsilon and k grids must be non-empty")
        if self.unparsed not in ("incorrect", "abstain"):
            raise SchemaError("unparsed policy must be 'incorrect' or 'abstain'")
        object.__setattr__(self, "epsilons", tuple(parse_epsilon(e) for e in self.epsilons))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        if any(k < 1 for k in self.ks):
            raise SchemaError("k values must be >= 1")
        if any(not e > 0 for e in self.epsilons):
            raise SchemaError("epsilon values must be positive")

    @classmethod
    def from_mapping(cls, cfg: Mapping, base_dir=None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(cfg) - known
        if unknown:
            raise SchemaError(f"unknown experiment config keys: {sorted(unknown)}")
        cfg = dict(cfg)
        if base_dir is not None:
            for key in ("data_path", "schema_path", "template"):
                v = cfg.get(key)
                if v and not Path(v).is_absolute() and (Path(base_dir) / v).exists():
                    cfg[key] = str(Path(base_dir) / v)
        return cls(**cfg)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(yaml.safe_load(fh) or {}, base_dir=Path(path).parent)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def builtin_schema(dataset_id: str) -> Schema:
    res = resources.files("dptabicl.resources").joinpath("schemas", f"{dataset_id}.yaml")
    if not res.is_file():
        raise SchemaError(f"no built-in schema for dataset {dataset_id!r}")
    return Schema.from_config(yaml.safe_load(res.read_text(encoding="utf-8")))


def resolve_template(name_or_path: str | None, schema: Schema, pipeline: str) -> PromptTemplate:
    if name_or_path and Path(name_or_path).is_file():
        return load_template(name_or_path)
    return builtin_template(name_or_path or f"{schema.template_id}-{pipeline}")


@dataclass(frozen=True)
class PreparedData:
    """Split (and for LDP binarized) data for one experiment.

    ``train`` is the curator's raw table (GDP) or the table each client
    perturbs before collection (LDP); ``test`` holds the query records.
    """

    schema: Schema
    train: Dataset
    test: Dataset
    template: PromptTemplate


def prepare(config: ExperimentConfig) -> PreparedData:
    schema = load_schema(config.schema_path) if config.schema_path else builtin_schema(config.dataset_id)
    raw = load_csv(config.data_path, schema)
    train, test = split_train_test(raw, derive_seed(config.seed, 0))
    test = subsample_test(test, config.test_fraction, derive_seed(config.seed, 1))
    if config.max_queries is not None and len(test) > config.max_queries:
        test = test.take(np.arange(config.max_queries))
    if config.pipeline == "ldp":
        # thresholds come from the raw training split, see the data-model notes in README
        binarizer = fit_binarizer(train)
        train, test = binarizer.transform(train), binarizer.transform(test)
        schema = binarizer.schema
    template = resolve_template(config.template, schema, config.pipeline)
    template.check(schema)
    return PreparedData(schema, train, test, template)


def make_backend(config: ExperimentConfig, schema: Schema):
    spec = config.backend
    if spec.startswith("mock:"):
        rest = spec[len("mock:"):]
        if rest == "oracle":
            return MockBackend("oracle", oracle=lambda rec: schema.answer_text(rec.label))
        return MockBackend.from_spec(rest)
    if spec == "http":
        if not config.allow_live:
            raise SchemaError("live backends are opt-in: set allow_live (CLI --live)")
        return HTTPBackend(BackendConfig.resolve(dict(config.backend_settings)))
    raise SchemaError(f"unknown backend {spec!r}; use mock:<mode> or http")


@dataclass
class TrialRow:
    dataset: str
    pipeline: str
    epsilon: float
    k: int
    trial: int
    seed: int
    accuracy: float
    tp_rate: float
    tn_rate: float
    unparsed: int
    wall_ms: int
    # instrumentation, not written to CSV
    demo_builds: int = 0
    ledger_total: float = 0.0
    n_queries: int = 0

    def csv_row(self) -> list[str]:
        return [
            self.dataset, self.pipeline, format_epsilon(self.epsilon), str(self.k), str(self.trial),
            str(self.seed), f"{self.accuracy:.6f}", f"{self.tp_rate:.6f}", f"{self.tn_rate:.6f}",
            str(self.unparsed), str(self.wall_ms),
        ]


def score(verdicts: Sequence[Verdict], truths: Sequence[str], schema: Schema, policy="incorrect") -> dict:
    """Accuracy, TP and TN rates; rates are fractions of the scored queries."""
    pos = schema.positive_label
    tp = tn = unparsed = 0
    for v, truth in zip(verdicts, truths):
        if v is Verdict.UNPARSED:
            unparsed += 1
            continue
        predicted_pos = v is Verdict.YES
        is_pos = truth == pos
        tp += predicted_pos and is_pos
        tn += (not predicted_pos) and (not is_pos)
    denom = len(verdicts) if policy == "incorrect" else len(verdicts) - unparsed
    if denom == 0:
        return {"accuracy": 0.0, "tp_rate": 0.0, "tn_rate": 0.0, "unparsed": unparsed}
    return {"accuracy": (tp + tn) / denom, "tp_rate": tp / denom, "tn_rate": tn / denom, "unparsed": unparsed}


def _query_and_score(prepared, prompts, backend, config):
    concurrency = getattr(getattr(backend, "config", None), "concurrency", 1)
    completions = complete_many(prompts, backend, concurrency)
    verdicts = [extract_answer(completions[p.query_id].text) for p in prompts]
    truths = [p.query_record.label for p in prompts]
    return score(verdicts, truths, prepared.schema, config.unparsed)


def ldp_allocation(schema: Schema, epsilon: float, weights: Mapping[str, float] | None = None) -> BudgetAllocation:
    """Uniform split over features + label, or proportional to ``weights``."""
    parts = len(schema.columns)
    if not weights or math.isinf(epsilon):
        return BudgetAllocation(tuple(split_uniform(epsilon, parts)))
    w = [float(weights.get(c.name, 1.0)) for c in schema.columns]
    total = math.fsum(w)
    return BudgetAllocation(tuple(epsilon * x / total for x in w))


def run_ldp_trial(prepared: PreparedData, config: ExperimentConfig, epsilon, k, seed, backend) -> TrialRow:
    """Perturb and reconstruct once, then sample fresh demonstrations per query."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    ledger = SpendLedger()
    allocation = ldp_allocation(prepared.schema, epsilon, config.budget_weights)
    dist, perturbed = collect_and_reconstruct(prepared.train, allocation, rng, ledger)
    ledger.assert_total(epsilon)
    assert perturbed.provenance is Provenance.PERTURBED
    schema, template = prepared.schema, prepared.template
    prompts, builds = [], 0
    for qi, rec in enumerate(prepared.test.records):
        qrng = np.random.default_rng(derive_seed(seed, qi))
        demos = ldp_demonstrations(dist, k, qrng, template)
        builds += 1
        prompts.append(assemble_prompt(demos, render_query(template, rec, schema), qi, rec))
    m = _query_and_score(prepared, prompts, backend, config)
    return TrialRow(
        config.dataset_id, "ldp", epsilon, k, 0, seed, m["accuracy"], m["tp_rate"], m["tn_rate"], m["unparsed"],
        _wall(start, config), builds, ledger.total, len(prompts),
    )


def run_ldp_baselines(prepared: PreparedData, config: ExperimentConfig, epsilon, seed) -> list[TrialRow]:
    """LR and GNB trained on N_train records sampled from the reconstruction."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    allocation = ldp_allocation(prepared.schema, epsilon, config.budget_weights)
    dist, _ = collect_and_reconstruct(prepared.train, allocation, rng)
    synthetic = sample_dataset(dist, len(prepared.train), rng)
    rows = []
    for name, model in (
        ("ldp-lr", bl.train_logistic_regression(synthetic, seed=seed)),
        ("ldp-gnb", bl.train_gaussian_nb(synthetic, seed=seed)),
    ):
        m = bl.evaluate(model, prepared.test)
        rows.append(TrialRow(config.dataset_id, name, epsilon, 0, 0, seed, m["accuracy"], m["tp_rate"],
                             m["tn_rate"], 0, _wall(start, config)))
    return rows


def default_n_target(n_train: int) -> int:
    return max(1, n_train // 2)


def run_gdp_trial(prepared: PreparedData, config: ExperimentConfig, epsilon, k, seed, backend) -> TrialRow:
    """One subsample and one demonstration set, reused for every query."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    schema, template = prepared.schema, prepared.template
    N = len(prepared.train)
    n = config.n_target or default_n_target(N)
    plan = GroupByPlan.for_schema(schema, k)
    budgets = split_uniform(epsilon, len(schema.columns))
    for attempt in range(config.empty_group_retries + 1):
        ledger = SpendLedger()
        try:
            demos = gdp_demonstrations(prepared.train, n, plan, budgets, rng, template, ledger)
            break
        except EmptyGroupError as exc:
            if attempt == config.empty_group_retries:
                raise
            logger.warning("%s; resampling (attempt %d)", exc, attempt + 2)
    ledger.assert_total(amplify(epsilon, n, N))
    prompts = [
        assemble_prompt(demos, render_query(template, rec, schema), qi, rec)
        for qi, rec in enumerate(prepared.test.records)
    ]
    m = _query_and_score(prepared, prompts, backend, config)
    return TrialRow(
        config.dataset_id, "gdp", epsilon, k, 0, seed, m["accuracy"], m["tp_rate"], m["tn_rate"], m["unparsed"],
        _wall(start, config), 1, ledger.total, len(prompts),
    )


def _wall(start, config) -> int:
    return int(round((time.perf_counter() - start) * 1000)) if config.record_wall_time else 0


@dataclass(frozen=True)
class Aggregate:
    pipeline: str
    epsilon: float
    k: int
    mean: float
    std: float
    n: int


@dataclass
class TrialReport:
    rows: list[TrialRow]

    @property
    def aggregates(self) -> list[Aggregate]:
        """Mean and population standard deviation of accuracy per (pipeline, eps, k)."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault((r.pipeline, r.epsilon, r.k), []).append(r.accuracy)
        out = []
        for (pipe, eps, k), accs in groups.items():
            a = np.asarray(accs)
            out.append(Aggregate(pipe, eps, k, float(a.mean()), float(a.std()), len(a)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table per pipeline: rows epsilon, columns k, cells mean (std)."""
        lines = []
        aggs = self.aggregates
        for pipe in dict.fromkeys(a.pipeline for a in aggs):
            sub = [a for a in aggs if a.pipeline == pipe]
            ks = sorted({a.k for a in sub})
            epss = list(dict.fromkeys(a.epsilon for a in sub))
            cell = {(a.epsilon, a.k): f"{a.mean:.2f} ({a.std:.2f})" for a in sub}
            header = ["epsilon"] + [f"k={k}" if k else "-" for k in ks]
            table = [header] + [
                [format_epsilon(e)] + [cell.get((e, k), "") for k in ks] for e in epss
            ]
            widths = [max(len(row[i]) for row in table) for i in range(len(header))]
            lines.append(f"[{pipe}]")
            for row in table:
                lines.append("  ".join(c.rjust(wd) for c, wd in zip(row, widths)).rstrip())
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_csv(cls, path) -> "TrialReport":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != REPORT_COLUMNS:
                raise SchemaError(f"{path}: report columns must be {REPORT_COLUMNS}")
            for d in reader:
                rows.append(TrialRow(
                    d["dataset"], d["pipeline"], parse_epsilon(d["epsilon"]), int(d["k"]), int(d["trial"]),
                    int(d["seed"]), float(d["accuracy"]), float(d["tp_rate"]), float(d["tn_rate"]),
                    int(d["unparsed"]), int(d["wall_ms"]),
                ))
        return cls(rows)


def grid_cells(config: ExperimentConfig):
    """(epsilon, k, trial, seed) for every cell, baselines included as k = 0."""
    pipe = 0 if config.pipeline == "ldp" else 1
    for eps in config.epsilons:
        if config.pipeline == "ldp" and config.baselines:
            for t in range(config.trials):
                yield eps, 0, t, derive_seed(config.seed, 2, pipe, eps_key(eps), 0, t)
        for k in config.ks:
            for t in range(config.trials):
                yield eps, k, t, derive_seed(config.seed, 2, pipe, eps_key(eps), k, t)


def run_grid(config: ExperimentConfig, out_dir=None, backend=None, resume: bool = False) -> TrialReport:
    """Run every (epsilon, k, trial) cell.

    With ``out_dir`` rows are appended to ``report.csv`` as they finish and an
    ``INCOMPLETE`` marker names the cell being run; ``resume=True`` skips
    cells already present. ``report.txt`` is written on success.
    """
    prepared = prepare(config)
    backend = backend or make_backend(config, prepared.schema)
    rows: list[TrialRow] = []
    done = set()
    csv_path = marker = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, marker = out_dir / "report.csv", out_dir / INCOMPLETE_MARKER
        if resume and csv_path.exists():
            rows = TrialReport.from_csv(csv_path).rows
            done = {(r.epsilon, r.k, r.trial) for r in rows}
        else:
            csv_path.write_text(",".join(REPORT_COLUMNS) + "\n", encoding="utf-8")
    for eps, k, t, seed in grid_cells(config):
        if (eps, k, t) in done:
            continue
        if marker is not None:
            marker.write_text(f"epsilon={format_epsilon(eps)} k={k} trial={t}\n", encoding="utf-8")
        if k == 0:
            new = run_ldp_baselines(prepared, config, eps, seed)
        elif config.pipeline == "ldp":
            new = [run_ldp_trial(prepared, config, eps, k, seed, backend)]
        else:
            new = [run_gdp_trial(prepared, config, eps, k, seed, backend)]
        for r in new:
            r.trial = t
        rows.extend(new)
        if csv_path is not None:
            with open(csv_path, "a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in new:
                    w.writerow(r.csv_row())
    report = TrialReport(_ordered(rows, config))
    if out_dir is not None:
        csv_path.write_text(report.to_csv(), encoding="utf-8")
        (out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
        marker.unlink(missing_ok=True)
    return report


def _ordered(rows: list[TrialRow], config: ExperimentConfig) -> list[TrialRow]:
    order = {}
    for i, (eps, k, t, _) in enumerate(grid_cells(config)):
        order[(eps, k, t)] = i
    names = {"ldp": 0, "gdp": 0, "ldp-lr": 1, "ldp-gnb": 2}
    return sorted(rows, key=lambda r: (order.get((r.epsilon, r.k, r.trial), len(order)), names.get(r.pipeline, 9)))
