"""Pure-epsilon budget arithmetic and an append-only spend ledger."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Iterable

from .errors import BudgetError, PrivacyAccountingError

INF = math.inf


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if math.isnan(self.epsilon) or self.epsilon < 0:
            raise BudgetError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.delta != 0:
            raise BudgetError("only pure epsilon-DP (delta = 0) is supported")

    def __float__(self):
        return float(self.epsilon)


def _eps(b) -> float:
    return float(b.epsilon) if isinstance(b, PrivacyBudget) else float(b)


def compose_sequential(budgets: Iterable) -> PrivacyBudget:
    eps = [_eps(b) for b in budgets]
    if any(math.isinf(e) for e in eps):
        return PrivacyBudget(INF)
    return PrivacyBudget(math.fsum(eps))


def compose_parallel(budgets: Iterable) -> PrivacyBudget:
    """Budget of one mechanism per disjoint subset: the largest one."""
    eps = [_eps(b) for b in budgets]
    return PrivacyBudget(max(eps, default=0.0))


def amplify(epsilon, n, N) -> PrivacyBudget:
    """Budget after running an epsilon-DP mechanism on a rate n/N Poisson sample.

    ``ln(1 + (n/N)(e^eps - 1))``; returns ``epsilon`` unchanged when n == N.
    """
    eps = _eps(epsilon)
    if n <= 0:
        raise BudgetError(f"sample size must be positive, got {n}")
    if n > N:
        raise BudgetError(f"sample size {n} exceeds population {N}")
    if n == N:
        return PrivacyBudget(eps)
    rate = n / N
    if eps > 700:
        # log1p(rate * expm1(eps)) = eps + log(rate) + O(e^-eps)
        return PrivacyBudget(eps + math.log(rate))
    return PrivacyBudget(math.log1p(rate * math.expm1(eps)))


def split_uniform(epsilon, parts: int) -> list[float]:
    if parts < 1:
        raise BudgetError(f"cannot split a budget into {parts} parts")
    eps = _eps(epsilon)
    return [eps / parts] * parts


@dataclass(frozen=True)
class LedgerEntry:
    op_id: str
    epsilon: float
    kind: str
    running_total: float


class SpendLedger:
    """Append-only record of privacy spend.

    ``sequential`` entries add up; a ``parallel-group`` entry costs the max of
    its members (the caller attests the members ran on disjoint data); an
    ``amplification`` entry rewrites the running total as the budget of
    everything so far run on a Poisson subsample.
    """

    def __init__(self):
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()
        self._total = 0.0

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    @property
    def total(self) -> float:
        with self._lock:
            return self._total

    def _append(self, op_id, eps, kind, total):
        self._total = total
        self._entries.append(LedgerEntry(op_id, eps, kind, total))

    def record_sequential(self, op_id: str, epsilon) -> LedgerEntry:
        eps = PrivacyBudget(_eps(epsilon)).epsilon
        with self._lock:
            self._append(op_id, eps, "sequential", compose_sequential([self._total, eps]).epsilon)
            return self._entries[-1]

    def record_parallel(self, op_id: str, budgets, disjoint: bool) -> LedgerEntry:
        if not disjoint:
            raise PrivacyAccountingError(f"{op_id}: parallel composition requires disjoint inputs")
        eps = compose_parallel(budgets).epsilon
        with self._lock:
            self._append(op_id, eps, "parallel-group", compose_sequential([self._total, eps]).epsilon)
            return self._entries[-1]

    def record_amplification(self, op_id: str, n, N) -> LedgerEntry:
        with self._lock:
            amplified = amplify(self._total, n, N).epsilon
            self._append(op_id, amplified, "amplification", amplified)
            return self._entries[-1]

    def assert_total(self, expected, rel_tol=1e-9, abs_tol=1e-12) -> None:
        expected = _eps(expected)
        total = self.total
        if math.isinf(expected) and math.isinf(total):
            return
        if not math.isclose(total, expected, rel_tol=rel_tol, abs_tol=abs_tol):
            raise PrivacyAccountingError(f"ledger total {total!r} does not match declared budget {expected!r}")

    def export(self) -> str:
        """Tab-separated audit log: op id, epsilon, kind, running total."""
        lines = ["op_id\tepsilon\tkind\trunning_total"]
        for e in self.entries:
            lines.append(f"{e.op_id}\t{e.epsilon!r}\t{e.kind}\t{e.running_total!r}")
        return "\n".join(lines) + "\n"
