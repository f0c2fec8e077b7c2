"""Enumeration budgets shared by the oracle and the view generators."""

import os

DEFAULT_BUDGET = 10**6


class BudgetExceeded(RuntimeError):
    pass


class OracleTooLarge(BudgetExceeded):
    pass


def budget() -> int:
    raw = os.environ.get("TREEPROJ_BUDGET")
    if raw:
        try:
            return int(raw)
        except ValueError:
            pass
    return DEFAULT_BUDGET
