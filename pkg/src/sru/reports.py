"""Report value types and deterministic CSV/JSON emission."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

from .errors import ContractError

__all__ = ["EffectivenessReport", "RankingReport", "TimingReport", "emit_report"]


@dataclass
class RankingReport:
    """Recall@K and NDCG@K means over all evaluation points."""

    recall: dict[int, float]
    ndcg: dict[int, float]
    evaluation_points: int

    def __post_init__(self):
        for k in self.recall:
            r, n = self.recall[k], self.ndcg[k]
            if not (0.0 <= r <= 1.0 and 0.0 <= n <= 1.0):
                raise ContractError(f"metrics at K={k} outside [0, 1]: recall {r}, ndcg {n}")
            if n > r + 1e-9:
                raise ContractError(f"ndcg@{k}={n} exceeds recall@{k}={r}")

    def as_dict(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "evaluation_points": self.evaluation_points,
        }


@dataclass
class EffectivenessReport:
    """HIT@K of deleted items re-surfacing from the surviving context.

    Lower is better unlearning. Requests whose surviving context was
    empty are excluded from the ratio and counted separately.
    """

    hit: dict[int, float]
    audited_requests: int
    skipped_empty_prefix: int

    def __post_init__(self):
        ks = sorted(self.hit)
        for k in ks:
            if not 0.0 <= self.hit[k] <= 1.0:
                raise ContractError(f"hit@{k}={self.hit[k]} outside [0, 1]")
        for lo, hi in zip(ks, ks[1:]):
            if self.hit[hi] < self.hit[lo] - 1e-12:
                raise ContractError(
                    f"hit@{hi}={self.hit[hi]} below hit@{lo}={self.hit[lo]}"
                )

    def as_dict(self) -> dict:
        return {
            "hit": {str(k): v for k, v in sorted(self.hit.items())},
            "audited_requests": self.audited_requests,
            "skipped_empty_prefix": self.skipped_empty_prefix,
        }


@dataclass
class TimingReport:
    """Wall-clock phases of one unlearning pass, in milliseconds."""

    sub_model_retrain_ms: float = 0.0
    aggregation_retrain_ms: float = 0.0
    total_ms: float = 0.0
    full_retrain_reference_ms: float | None = None
    per_shard_ms: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for phase in (self.sub_model_retrain_ms, self.aggregation_retrain_ms):
            if self.total_ms + 1e-6 < phase:
                raise ContractError("total time is below a component phase")

    @property
    def speedup(self) -> float | None:
        if self.full_retrain_reference_ms is None or self.total_ms == 0.0:
            return None
        return self.full_retrain_reference_ms / self.total_ms

    def as_dict(self) -> dict:
        out = {
            "sub_model_retrain_ms": self.sub_model_retrain_ms,
            "aggregation_retrain_ms": self.aggregation_retrain_ms,
            "total_ms": self.total_ms,
            "per_shard_ms": {str(k): v for k, v in sorted(self.per_shard_ms.items())},
        }
        if self.full_retrain_reference_ms is not None:
            out["full_retrain_reference_ms"] = self.full_retrain_reference_ms
            out["speedup"] = self.speedup
        return out


def _six_digits(value):
    if isinstance(value, float):
        return float(f"{value:.6g}")
    return value


def _rounded(obj):
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return _six_digits(obj)


def _atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".report-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_report(report, fmt: str, path) -> None:
    """Write a report as CSV or JSON with a stable field order.

    Floats are serialized with 6 significant digits; identical reports
    always produce byte-identical files. CSV has one row per metric/K
    pair (the K column is empty for scalar fields).
    """
    data = report.as_dict() if hasattr(report, "as_dict") else dict(report)
    if fmt == "json":
        text = json.dumps(_rounded(data), sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        lines = ["metric,k,value"]
        for metric in sorted(data):
            value = data[metric]
            if isinstance(value, dict):
                for k in sorted(value, key=lambda s: (len(s), s)):
                    lines.append(f"{metric},{k},{_six_digits(value[k])}")
            else:
                lines.append(f"{metric},,{_six_digits(value)}")
        text = "\n".join(lines) + "\n"
    else:
        raise ContractError(f"unknown report format {fmt!r}; use 'csv' or 'json'")
    _atomic_write(path, text)
