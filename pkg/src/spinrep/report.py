"""Structured pass/fail/value records for representability checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

SCHEMA_VERSION = 1

PASS = "pass"
FAIL = "fail"
FINITE = "finite-reported"
OUT_OF_RANGE = "out-of-range"

_RANK = {PASS: 0, FINITE: 0, OUT_OF_RANGE: 1, FAIL: 2}


@dataclass
class CheckResult:
    name: str
    status: str
    value: float | None = None
    tolerance: float | None = None
    detail: str | None = None

    def to_dict(self):
        d = {"name": self.name, "status": self.status}
        if self.value is not None:
            d["value"] = float(self.value)
        if self.tolerance is not None:
            d["tolerance"] = float(self.tolerance)
        if self.detail:
            d["detail"] = self.detail
        return d


@dataclass
class RepresentabilityReport:
    """Ordered list of named checks plus an overall verdict."""

    title: str
    checks: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add(self, name, status, value=None, tolerance=None, detail=None):
        if any(c.name == name for c in self.checks):
            raise ValueError(f"duplicate check name {name!r}")
        self.checks.append(CheckResult(name, status, value, tolerance, detail))

    def get(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def overall(self) -> str:
        worst = PASS
        for c in self.checks:
            if _RANK[c.status] > _RANK[worst]:
                worst = c.status
        return worst

    @property
    def passed(self) -> bool:
        return self.overall == PASS

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "title": self.title,
            "overall": self.overall,
            "checks": [c.to_dict() for c in self.checks],
            "extra": self.extra,
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def merged(self, other: "RepresentabilityReport", prefix: str) -> "RepresentabilityReport":
        out = RepresentabilityReport(self.title, list(self.checks), dict(self.extra))
        for c in other.checks:
            out.add(f"{prefix}.{c.name}", c.status, c.value, c.tolerance, c.detail)
        return out
