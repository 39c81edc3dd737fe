"""Small shared report structures used by the verification-style operations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class Check:
    """One named inequality check: pass iff statistic <= bound."""

    name: str
    statistic: float
    bound: float

    @property
    def passed(self) -> bool:
        return bool(self.statistic <= self.bound)

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "bound": self.bound,
            "pass": self.passed,
        }


@dataclass
class Report:
    """A titled bundle of checks plus free-form numbers (constants, samples)."""

    title: str
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, statistic: float, bound: float) -> Check:
        check = Check(name, float(statistic), float(bound))
        self.checks.append(check)
        return check

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "pass": self.passed,
            "checks": {c.name: c.to_dict() for c in self.checks},
            "info": _jsonable(self.info),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def summary_lines(self) -> list:
        out = [f"[{'PASS' if self.passed else 'FAIL'}] {self.title}"]
        for c in self.checks:
            tag = "ok  " if c.passed else "FAIL"
            out.append(f"  {tag} {c.name}: statistic={c.statistic:.6g} bound={c.bound:.6g}")
        return out


def _jsonable(obj):
    import numpy as np

    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and obj != obj:  # NaN -> null
        return None
    return obj
