"""Outcome of a Max computation."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class NoSolution:
    status = "NoSolution"


@dataclass(frozen=True)
class Fail:
    reason: str = ""
    status = "Fail"


@dataclass(frozen=True)
class Solution:
    assignment: dict = field(default_factory=dict)
    weight: object = None
    certified: bool = False
    status = "Solution"


SolveOutcome = NoSolution | Fail | Solution
