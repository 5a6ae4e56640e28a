"""Marketplace health metrics and their table / JSON renderings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import UndefinedGiniError

REPORT_SCHEMA = "kmarket-metrics/1"
RATE_FIELDS = (
    "dispute_rate",
    "forfeit_rate",
    "abandonment_rate",
    "settlement_completion_rate",
)


def gini(allocations: Sequence[float]) -> float:
    """Mean absolute difference over twice the mean."""
    x = np.asarray(allocations, dtype=float)
    if x.size == 0:
        raise ValueError("gini needs at least one allocation")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("allocations must be finite and >= 0")
    mean = x.mean()
    if mean == 0:
        raise UndefinedGiniError("gini is undefined when every allocation is zero")
    # sorted form of sum_ij |x_i - x_j| / n^2
    xs = np.sort(x)
    n = xs.size
    ranks = np.arange(1, n + 1)
    mad = 2.0 * np.sum((2 * ranks - n - 1) * xs) / (n * n)
    return float(mad / (2.0 * mean))


@dataclass(frozen=True)
class MetricsReport:
    gini_funding: float
    mean_match_fit: float
    median_time_to_fund: float | None
    dispute_rate: float
    forfeit_rate: float
    abandonment_rate: float
    settlement_completion_rate: float
    teams_formed: int = 0
    proposals_funded: int = 0
    settlements: int = 0

    def __post_init__(self):
        for name in RATE_FIELDS + ("gini_funding", "mean_match_fit"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        if doc.get("schema", REPORT_SCHEMA) != REPORT_SCHEMA:
            raise ValueError(f"unsupported metrics schema {doc.get('schema')!r}")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


def render_table(metrics: MetricsReport) -> str:
    rows = []
    for name, value in asdict(metrics).items():
        if value is None:
            text = "n/a"
        elif isinstance(value, float):
            text = f"{value:.4f}"
        else:
            text = str(value)
        rows.append((name, text))
    width = max(len(n) for n, _ in rows)
    vwidth = max(len(v) for _, v in rows)
    lines = [f"{'metric':<{width}}  {'value':>{vwidth}}", f"{'-' * width}  {'-' * vwidth}"]
    lines += [f"{n:<{width}}  {v:>{vwidth}}" for n, v in rows]
    return "\n".join(lines) + "\n"


def render_structured(metrics: MetricsReport) -> str:
    return json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"


def emit_report(metrics: MetricsReport, format: str = "table", path=None) -> str:
    """Render the report; write it to ``path`` when given, else return it for printing."""
    if format == "table":
        text = render_table(metrics)
    elif format == "structured":
        text = render_structured(metrics)
    else:
        raise ValueError(f"unknown report format {format!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_report(path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
