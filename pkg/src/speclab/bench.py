"""Benchmark runner: drives decode loops, aggregates traces, writes reports.

Speedup is estimated with a wall-clock-free cost model: one verification
round costs one target pass plus ``draft_cost`` drafter passes, so the
estimate is committed-tokens-per-step / (1 + draft_cost). Per-prompt rngs are
derived from (master seed, prompt index), so results do not depend on
execution order.
"""

from __future__ import annotations

import json
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .models import SAMPLE, TabularModel, Token, generate_autoregressive
from .verification import (
    NUM_CONFIDENCE_BINS,
    DecodeTrace,
    decode_loop,
)


@dataclass(frozen=True)
class CostModel:
    """Cost of one parallel drafter pass relative to one target pass (= 1)."""

    draft_cost: float = 0.1

    def __post_init__(self) -> None:
        if self.draft_cost < 0.0:
            raise ValueError(f"draft_cost must be >= 0, got {self.draft_cost}")


def spearman_correlation(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Spearman rank correlation, or None when undefined (constant input, n < 2)."""
    if len(xs) < 2:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", stats.ConstantInputWarning)
        rho = stats.spearmanr(xs, ys).statistic
    if rho is None or np.isnan(rho):
        return None
    return float(rho)


@dataclass
class BenchReport:
    """Aggregated metrics for one benchmark run."""

    trace: DecodeTrace
    cost: CostModel
    config: dict = field(default_factory=dict)

    @property
    def tau(self) -> float:
        return self.trace.tau

    @property
    def committed_per_step(self) -> float:
        return self.trace.committed_per_step

    @property
    def speedup_estimate(self) -> float:
        return self.committed_per_step / (1.0 + self.cost.draft_cost)

    def position_rows(self) -> list[tuple[int, int, int, float]]:
        rows = []
        for k in range(self.trace.draft_len):
            attempts = int(self.trace.position_attempts[k])
            accepts = int(self.trace.position_accepts[k])
            rate = accepts / attempts if attempts else 0.0
            rows.append((k, attempts, accepts, rate))
        return rows

    def confidence_rows(self) -> list[tuple[float, float, int, int, float]]:
        rows = []
        for b in range(NUM_CONFIDENCE_BINS):
            lo = b / NUM_CONFIDENCE_BINS
            hi = (b + 1) / NUM_CONFIDENCE_BINS
            attempts = int(self.trace.bin_attempts[b])
            accepts = int(self.trace.bin_accepts[b])
            rate = accepts / attempts if attempts else 0.0
            rows.append((lo, hi, attempts, accepts, rate))
        return rows

    @property
    def correlation(self) -> float | None:
        """Spearman correlation between bin center and acceptance rate."""
        centers, rates = [], []
        for lo, hi, attempts, _accepts, rate in self.confidence_rows():
            if attempts > 0:
                centers.append((lo + hi) / 2.0)
                rates.append(rate)
        return spearman_correlation(centers, rates)

    def to_json_dict(self) -> dict:
        out = self.trace.to_json_dict()
        out["speedup_estimate"] = self.speedup_estimate
        out["draft_cost"] = self.cost.draft_cost
        out["correlation"] = self.correlation
        out["position_curve"] = [
            {"k": k, "rate": rate} for k, _attempts, _accepts, rate in self.position_rows()
        ]
        out["confidence_curve"] = [
            {"center": (lo + hi) / 2.0, "rate": rate}
            for lo, hi, _attempts, _accepts, rate in self.confidence_rows()
        ]
        out["config"] = self.config
        return out


def run_bench(
    target: TabularModel,
    drafter: TabularModel,
    *,
    draft_len: int,
    mode: str,
    verify: str,
    num_prompts: int = 64,
    prompt_len: int = 8,
    max_tokens: int = 256,
    seed: int = 0,
    cost: CostModel = CostModel(),
    prompts: Sequence[Sequence[Token]] | None = None,
    config_extra: dict | None = None,
) -> BenchReport:
    """Run the decode loop over one batch of prompts and aggregate the traces.

    Prompts are sampled from the target with per-index seeds unless given
    explicitly. Position attempts are checked to be nonincreasing, which the
    sequential verifier guarantees structurally.
    """
    if prompts is None:
        if num_prompts < 1 or prompt_len < 1:
            raise ValueError("num_prompts and prompt_len must be >= 1")
        prompts = [
            generate_autoregressive(
                target, (), prompt_len, mode=SAMPLE, rng=np.random.default_rng([seed, i, 0])
            )
            for i in range(num_prompts)
        ]
    traces = []
    for i, prompt in enumerate(prompts):
        rng = np.random.default_rng([seed, i, 1])
        _, trace = decode_loop(
            target, drafter, prompt, max_tokens, draft_len, mode=mode, verify=verify, rng=rng
        )
        traces.append(trace)
    merged = DecodeTrace.combine(traces)
    attempts = merged.position_attempts
    if any(attempts[k] < attempts[k + 1] for k in range(len(attempts) - 1)):
        raise RuntimeError("position attempts must be nonincreasing across k")

    config = {
        "vocab": target.vocab.size,
        "target_order": target.order,
        "drafter_order": drafter.order,
        "draft_len": draft_len,
        "mode": mode,
        "verify": verify,
        "num_prompts": len(prompts),
        "prompt_len": len(prompts[0]) if prompts else 0,
        "max_tokens": max_tokens,
        "seed": seed,
        "draft_cost": cost.draft_cost,
    }
    if config_extra:
        config.update(config_extra)
    return BenchReport(trace=merged, cost=cost, config=config)


def write_report_json(report: BenchReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )


def write_position_csv(report: BenchReport, path: str | Path) -> None:
    lines = ["k,attempts,accepts,rate"]
    for k, attempts, accepts, rate in report.position_rows():
        lines.append(f"{k},{attempts},{accepts},{rate!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_confidence_csv(report: BenchReport, path: str | Path) -> None:
    lines = ["bin_lo,bin_hi,attempts,accepts,rate"]
    for lo, hi, attempts, accepts, rate in report.confidence_rows():
        lines.append(f"{lo!r},{hi!r},{attempts},{accepts},{rate!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "tau" not in data or "config" not in data:
        raise ValueError(f"not a benchmark report: {path}")
    return data


def analyze_reports(
    named_reports: Sequence[tuple[str, dict]], baseline: str
) -> list[dict]:
    """Side-by-side comparison rows with deltas against a named baseline run.

    All reports must agree on vocabulary size and target order; mismatches
    are a comparison error.
    """
    if len(named_reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = [name for name, _ in named_reports]
    if baseline not in names:
        raise ValueError(f"baseline {baseline!r} is not among the reports: {names}")
    signatures = {
        (r["config"].get("vocab"), r["config"].get("target_order"))
        for _, r in named_reports
    }
    if len(signatures) != 1:
        raise ValueError(f"reports disagree on vocab/order: {sorted(signatures)}")
    base = dict(named_reports)[baseline]
    rows = []
    for name, rep in named_reports:
        rows.append(
            {
                "run": name,
                "tau": rep["tau"],
                "committed_per_step": rep["committed_per_step"],
                "speedup_estimate": rep["speedup_estimate"],
                "delta_tau": rep["tau"] - base["tau"],
                "delta_speedup": rep["speedup_estimate"] - base["speedup_estimate"],
            }
        )
    return rows


_ANALYZE_COLUMNS = (
    "run",
    "tau",
    "committed_per_step",
    "speedup_estimate",
    "delta_tau",
    "delta_speedup",
)


def format_analysis(rows: Sequence[dict], fmt: str = "markdown") -> str:
    if fmt == "csv":
        lines = [",".join(_ANALYZE_COLUMNS)]
        for row in rows:
            lines.append(",".join(str(row[c]) for c in _ANALYZE_COLUMNS))
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        header = "| " + " | ".join(_ANALYZE_COLUMNS) + " |"
        rule = "|" + "|".join(" --- " for _ in _ANALYZE_COLUMNS) + "|"
        lines = [header, rule]
        for row in rows:
            cells = [str(row["run"])] + [f"{row[c]:.4f}" for c in _ANALYZE_COLUMNS[1:]]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"format must be 'markdown' or 'csv', got {fmt!r}")
