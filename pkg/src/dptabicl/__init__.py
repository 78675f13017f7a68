"""Differentially private few-shot prompting for tabular classification."""

from .accountant import PrivacyBudget, SpendLedger, amplify, compose_parallel, compose_sequential, split_uniform
from .data import (
    Dataset,
    FeatureSpec,
    Provenance,
    Record,
    Schema,
    binarize,
    fit_binarizer,
    load_csv,
    load_schema,
    split_train_test,
    subsample_test,
)
from .errors import (
    BackendError,
    BudgetError,
    DataError,
    DPTabICLError,
    EmptyGroupError,
    MalformedResponseError,
    PrivacyAccountingError,
    RenderError,
    SchemaError,
    TransportError,
)
from .gdp import GroupByPlan, gdp_aggregates, gdp_demonstrations, laplace_noise
from .ldp import (
    BudgetAllocation,
    DistortionMatrix,
    build_distortion_matrix,
    collect_and_reconstruct,
    ldp_demonstrations,
    perturb_dataset,
    reconstruct_joint,
)
from .llm import BackendConfig, HTTPBackend, MockBackend, Verdict, complete, complete_many, extract_answer
from .serialize import Prompt, PromptTemplate, assemble_prompt, builtin_template, render_demonstration, render_query

__version__ = "0.1.0"
