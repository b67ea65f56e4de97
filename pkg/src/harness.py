"""
Verification suites behind the command-line interface.

Each run_* function takes a RunConfig, draws every random instance from
(seed, trial) and returns a SuiteReport. Nothing here prints; main.py owns
the user-facing output.
"""

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, TypeAdapter, ValidationError, field_validator

from src.attention import (
    FAParams,
    LinearMapParams,
    compute_sub_affinities,
    default_mode_order,
    folded_attention,
    init_params,
    oracle_aggregate,
    rank_one_affinity,
    self_attention,
    self_attention_reference,
)
from src.autodiff import attention_inputs, backward, fa_graph, finite_diff_check, record_and_run
from src.cost_model import (
    REFERENCE_SHAPE,
    VARIANTS,
    ShapeSpec,
    cost_fa,
    cost_naive_spatial_channel,
    fit_loglog_slope,
    reduction_summary,
    scaling_table,
    write_table,
)
from src.errors import ConfigurationError, GuardExceededError, MemoryBudgetError
from src.tensor_core import FeatureTensor, count_ops
from src.utils import get_config, random_tensor, trial_rng

logger = logging.getLogger(__name__)

Command = Literal["equivalence", "gradcheck", "cost", "bench", "all"]
COMMANDS: Tuple[str, ...] = ("equivalence", "gradcheck", "cost", "bench", "all")

SLOPE_TOLERANCE = 0.1
REFERENCE_REDUCTION_PCT = 99.99
COUNTER_FALLBACK_SHAPE = (2, 3, 2, 3)
# Inner-loop steps (N^2 x 2C) allowed for the scalar self-attention reference per trial.
EXPLICIT_SA_MAX_STEPS = 10**6
DEFAULT_BENCH_SHAPES = ((4, 4, 4, 4), (8, 8, 8, 8), (8, 64, 64, 8))


class RunConfig(BaseModel):
    """Everything that determines a run. Identical configs give identical numbers."""

    model_config = ConfigDict(frozen=True)

    command: Command = "all"
    shape: Tuple[PositiveInt, PositiveInt, PositiveInt, PositiveInt] = (2, 3, 2, 3)
    trials: PositiveInt = 20
    seed: int = Field(default=42, ge=0, lt=2**64)
    atol: float = Field(default=1e-10, gt=0)
    rtol: float = Field(default=1e-4, gt=0)
    out: Optional[Path] = None
    format: Literal["json", "csv"] = "json"
    reapply_g: bool = False
    budget_bytes: Optional[PositiveInt] = None
    sizes: Tuple[PositiveInt, ...] = (4, 8, 16, 32)
    bench_shapes: Tuple[Tuple[PositiveInt, PositiveInt, PositiveInt, PositiveInt], ...] = DEFAULT_BENCH_SHAPES

    @field_validator("sizes")
    @classmethod
    def _sweep_has_two_sizes(cls, sizes):
        if len(sizes) < 2:
            raise ValueError("the scaling sweep needs at least two sizes")
        return tuple(sorted(sizes))

    @property
    def elements(self) -> int:
        return math.prod(self.shape)

    @property
    def mem_budget_bytes(self) -> int:
        return self.budget_bytes if self.budget_bytes is not None else get_config().mem_budget_bytes


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: float
    seconds: float
    detail: Dict[str, Any] = field(default_factory=dict)
    gating: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "metric": self.metric,
            "seconds": self.seconds,
            "gating": self.gating,
            "detail": self.detail,
        }


@dataclass
class SuiteReport:
    """Results of one suite; passes iff every gating check passes."""

    suite: str
    checks: List[CheckResult] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks if check.gating)

    def add(self, check: CheckResult) -> CheckResult:
        self.checks.append(check)
        logger.info(
            "%s/%s: %s (metric %.3e, %.3fs)",
            self.suite,
            check.name,
            "pass" if check.passed else "FAIL",
            check.metric,
            check.seconds,
        )
        return check

    def to_dict(self) -> Dict[str, Any]:
        return {
            "suite": self.suite,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
            "artifacts": dict(self.artifacts),
        }

    def csv_rows(self) -> List[Dict[str, Any]]:
        return [
            {
                "suite": self.suite,
                "check": check.name,
                "passed": check.passed,
                "metric": check.metric,
                "seconds": check.seconds,
            }
            for check in self.checks
        ]


class _Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
        return False


def _instance(cfg: RunConfig, trial: int) -> Tuple[FeatureTensor, FAParams, np.random.Generator]:
    rng = trial_rng(cfg.seed, trial)
    x = random_tensor(cfg.shape, rng)
    return x, init_params(x.channels, rng, reapply_g=cfg.reapply_g), rng


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _nested_reference(x: FeatureTensor, params: FAParams) -> np.ndarray:
    """Stage-by-stage reference for the reapply_g reading, mixing with tensordot."""
    subs = compute_sub_affinities(x, params)
    w = params.g.weight.data
    y = x.data
    for stage, (p, a) in enumerate(zip(params.resolved_mode_order(x.rank), subs)):
        if stage == 0 or params.reapply_g:
            y = y @ w.T
            if params.g.bias is not None:
                y = y + params.g.bias
        y = np.moveaxis(np.tensordot(a.m.data, y, axes=([1], [p.mode])), 0, p.mode)
    return y + x.data if params.residual else y


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def run_equivalence(cfg: RunConfig) -> SuiteReport:
    """
    Folded attention against its brute-force references, over cfg.trials instances.

    Raises:
        GuardExceededError: If the shape is too large for the brute-force references
    """
    limit = get_config().oracle_max_elements
    if cfg.elements > limit:
        raise GuardExceededError(cfg.elements, limit, "equivalence suite")

    worst = {name: 0.0 for name in ("fa_vs_oracle", "sa_vs_explicit", "rank_one", "stochasticity", "mode_order")}
    seconds = dict.fromkeys(worst, 0.0)
    hull_ok = True
    positions = cfg.elements // cfg.shape[-1]
    explicit_steps = positions**2 * 2 * cfg.shape[-1]
    explicit_sa = explicit_steps <= EXPLICIT_SA_MAX_STEPS
    if not explicit_sa:
        logger.info("skipping explicit self-attention: %d steps > %d", explicit_steps, EXPLICIT_SA_MAX_STEPS)

    for trial in range(cfg.trials):
        x, params, rng = _instance(cfg, trial)

        with _Stopwatch() as sw:
            z = folded_attention(x, params)
            if params.reapply_g:
                reference = _nested_reference(x, params)
            else:
                reference = oracle_aggregate(x, params).data
            worst["fa_vs_oracle"] = max(worst["fa_vs_oracle"], _max_abs(z.data, reference))
        seconds["fa_vs_oracle"] += sw.seconds

        if explicit_sa:
            with _Stopwatch() as sw:
                sa = self_attention(x, params, budget_bytes=cfg.mem_budget_bytes)
                explicit = self_attention_reference(x, params).data
                worst["sa_vs_explicit"] = max(worst["sa_vs_explicit"], _max_abs(sa.data, explicit))
            seconds["sa_vs_explicit"] += sw.seconds

        with _Stopwatch() as sw:
            subs = compute_sub_affinities(x, params)
            v = tuple(int(rng.integers(0, n)) for n in x.shape)
            affinity = rank_one_affinity(subs, v)
            worst["rank_one"] = max(worst["rank_one"], max(affinity.singular_value_ratios()))
        seconds["rank_one"] += sw.seconds

        with _Stopwatch() as sw:
            deviation = abs(affinity.total() - 1.0)
            if np.any(affinity.a.data < 0):
                deviation = math.inf
            if not params.reapply_g:
                gx = params.g(x).data
                hull_ok &= bool(np.all(z.data >= gx.min() - cfg.atol) and np.all(z.data <= gx.max() + cfg.atol))
            constant = FeatureTensor(np.full(x.shape, float(rng.standard_normal())))
            preserving = replace(params, g=LinearMapParams.identity(x.channels), reapply_g=False)
            deviation = max(deviation, _max_abs(folded_attention(constant, preserving).data, constant.data))
            worst["stochasticity"] = max(worst["stochasticity"], deviation)
        seconds["stochasticity"] += sw.seconds

        if not params.reapply_g:
            with _Stopwatch() as sw:
                reversed_order = replace(params, mode_order=tuple(reversed(default_mode_order(x.rank))))
                worst["mode_order"] = max(worst["mode_order"], _max_abs(folded_attention(x, reversed_order).data, z.data))
            seconds["mode_order"] += sw.seconds

    report = SuiteReport("equivalence")
    for name in worst:
        passed = worst[name] <= cfg.atol
        detail: Dict[str, Any] = {"trials": cfg.trials}
        if name == "fa_vs_oracle":
            detail["reference"] = "nested" if cfg.reapply_g else "oracle"
        if name == "stochasticity":
            passed = passed and hull_ok
            detail["convex_hull"] = hull_ok
        if name == "mode_order" and cfg.reapply_g:
            detail["skipped"] = "stages do not commute when g is reapplied"
        if name == "sa_vs_explicit" and not explicit_sa:
            detail["skipped"] = f"{positions} positions need {explicit_steps} scalar steps, above {EXPLICIT_SA_MAX_STEPS}"
        report.add(CheckResult(name, passed, worst[name], seconds[name], detail))
    return report


def run_gradcheck(cfg: RunConfig) -> SuiteReport:
    """
    Finite-difference certification of the folded attention gradients.

    Raises:
        GuardExceededError: If the input tensor is too large to perturb entry by entry
    """
    limit = get_config().gradcheck_max_elements
    if cfg.elements > limit:
        raise GuardExceededError(cfg.elements, limit, "gradient check")

    report = SuiteReport("gradcheck")
    worst = None
    with _Stopwatch() as sw:
        for trial in range(cfg.trials):
            x, params, _ = _instance(cfg, trial)
            inputs = attention_inputs(x, params)
            fd = finite_diff_check(
                fa_graph(params), inputs, rtol=cfg.rtol, max_elements=sum(v.size for v in inputs.values())
            )
            if worst is None or fd.rel_err > worst[1].rel_err:
                worst = (trial, fd)
    trial, fd = worst
    report.add(CheckResult("fa_gradients", fd.passed, fd.rel_err, sw.seconds, {"trial": trial, **fd.to_dict()}))

    x, params, _ = _instance(cfg, 0)
    zeroed = params.zero_embeddings()
    inputs = attention_inputs(x, zeroed)
    with _Stopwatch() as sw:
        fd = finite_diff_check(fa_graph(zeroed), inputs, rtol=cfg.rtol, max_elements=sum(v.size for v in inputs.values()))
    report.add(CheckResult("zero_embeddings", fd.passed, fd.rel_err, sw.seconds, fd.to_dict()))

    with _Stopwatch() as sw:
        out, tape = record_and_run(fa_graph(params), attention_inputs(x, params))
        seed = trial_rng(cfg.seed, 0).standard_normal(out.shape)
        once = backward(tape, seed)
        twice = backward(tape, 2.0 * seed)
        deviation = max(_max_abs(twice[name], 2.0 * once[name]) for name in once)
    report.add(CheckResult("seed_linearity", deviation == 0.0, deviation, sw.seconds))
    return report


def _counter_check(cfg: RunConfig) -> CheckResult:
    shape = cfg.shape if cfg.elements <= get_config().oracle_max_elements else COUNTER_FALLBACK_SHAPE
    x, params, _ = _instance(replace_config(cfg, shape=shape, reapply_g=False), 0)
    with _Stopwatch() as sw, count_ops() as counter:
        folded_attention(x, params)
    expected = cost_fa(ShapeSpec(*shape))
    measured = {
        "embed_flops": counter["embed"],
        "affinity_build_flops": counter["affinity_build"],
        "aggregation_flops": counter["aggregate"],
    }
    discrepancy = sum(abs(measured[key] - getattr(expected, key)) for key in measured)
    detail = {"shape": list(shape), "measured": measured, "model": {key: getattr(expected, key) for key in measured}}
    return CheckResult("kernel_counters", discrepancy == 0, float(discrepancy), sw.seconds, detail)


def run_cost(cfg: RunConfig, table_path: Optional[Path] = None) -> SuiteReport:
    """Scaling table for the equal-dims sweep plus the complexity checks."""
    report = SuiteReport("cost")
    with _Stopwatch() as sw:
        sizes = [ShapeSpec.cube(s) for s in cfg.sizes]
        rows = scaling_table(sizes)
    path = table_path if table_path is not None else cfg.out
    if path is not None:
        report.artifacts["table"] = str(write_table(rows, path, cfg.format))

    by_variant = {variant: [row for row in rows if row.variant == variant] for variant in VARIANTS}
    for variant, target in (("FA", 5.0), ("SA", 7.0)):
        slope = fit_loglog_slope(list(cfg.sizes), [row.flops for row in by_variant[variant]])
        report.add(
            CheckResult(
                f"{variant.lower()}_slope",
                abs(slope - target) <= SLOPE_TOLERANCE,
                slope,
                sw.seconds,
                {"target": target, "sizes": list(cfg.sizes)},
            )
        )

    summary = reduction_summary()
    storage = {key: value for key, value in summary.items() if "flops" not in key and "memory" not in key}
    report.add(
        CheckResult(
            "reference_reduction",
            summary["fa_vs_sa_pct"] >= REFERENCE_REDUCTION_PCT,
            summary["fa_vs_sa_pct"],
            0.0,
            {"shape": list(REFERENCE_SHAPE), **storage},
        )
    )
    report.add(
        CheckResult(
            "reference_costs",
            True,
            summary["fa_vs_da_memory_pct"],
            0.0,
            {"shape": list(REFERENCE_SHAPE), **{k: v for k, v in summary.items() if k not in storage}},
            gating=False,
        )
    )

    naive = cost_naive_spatial_channel(ShapeSpec(*REFERENCE_SHAPE))
    report.add(
        CheckResult(
            "naive_infeasible",
            not naive.feasible,
            float(naive.memory_bytes),
            0.0,
            {"byte_budget": naive.byte_budget},
        )
    )

    dominated = all(
        fa.flops < by_variant[variant][index].flops
        and fa.affinity_bytes < by_variant[variant][index].affinity_bytes
        for index, fa in enumerate(by_variant["FA"])
        for variant in ("SA", "naive", "DA")
        if fa.h >= 4
    )
    report.add(CheckResult("fa_dominates", dominated, 0.0 if dominated else 1.0, 0.0))
    report.add(_counter_check(cfg))
    return report


def run_bench(cfg: RunConfig) -> SuiteReport:
    """Wall-clock medians of folded attention and self-attention. Never gates."""
    report = SuiteReport("bench")
    shapes = [tuple(cfg.shape)] + [s for s in cfg.bench_shapes if tuple(s) != tuple(cfg.shape)]
    for shape in shapes:
        local = replace_config(cfg, shape=shape)
        x, params, _ = _instance(local, 0)
        for variant in ("fa", "sa"):
            samples: List[float] = []
            ops = None
            refused = None
            for trial in range(cfg.trials):
                try:
                    with _Stopwatch() as sw, count_ops() as counter:
                        if variant == "fa":
                            folded_attention(x, params)
                        else:
                            self_attention(x, params, budget_bytes=cfg.mem_budget_bytes)
                except MemoryBudgetError as exc:
                    refused = str(exc)
                    break
                samples.append(sw.seconds)
                ops = counter.total if ops is None else ops
            median = statistics.median(samples) if samples else None
            detail: Dict[str, Any] = {"shape": list(shape), "samples": samples, "median": median, "flops": ops}
            if refused is not None:
                detail["refused"] = refused
            report.add(
                CheckResult(
                    f"{variant}@{'x'.join(map(str, shape))}",
                    True,
                    median if median is not None else 0.0,
                    sum(samples),
                    detail,
                    gating=False,
                )
            )
    return report


def replace_config(cfg: RunConfig, **changes) -> RunConfig:
    return cfg.model_copy(update=changes)


def _sibling(path: Path, suffix: str, fmt: str) -> Path:
    return path.with_name(f"{path.stem}.{suffix}.{fmt}")


def run_all(cfg: RunConfig) -> List[SuiteReport]:
    """Every suite in turn; the cost table goes next to the report file."""
    table = _sibling(cfg.out, "cost", cfg.format) if cfg.out is not None else None
    return [run_equivalence(cfg), run_gradcheck(cfg), run_cost(cfg, table_path=table), run_bench(cfg)]


def run(cfg: RunConfig) -> List[SuiteReport]:
    """Dispatch on cfg.command."""
    logger.info("running %s with shape %s, %d trials, seed %d", cfg.command, cfg.shape, cfg.trials, cfg.seed)
    if cfg.command == "all":
        return run_all(cfg)
    if cfg.command == "cost":
        return [run_cost(cfg)]
    suite = {"equivalence": run_equivalence, "gradcheck": run_gradcheck, "bench": run_bench}[cfg.command]
    return [suite(cfg)]


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


REPORT_FIELDS = ("suite", "check", "passed", "metric", "seconds")


class ReportRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    suite: str
    check: str
    passed: bool
    metric: float
    seconds: float = Field(ge=0)


class CheckRecord(BaseModel):
    name: str
    passed: bool
    metric: float
    seconds: float = Field(ge=0)
    gating: bool
    detail: Dict[str, Any]


class SuiteRecord(BaseModel):
    suite: str
    passed: bool
    checks: List[CheckRecord]
    artifacts: Dict[str, str]


class ReportDocument(BaseModel):
    passed: bool
    config: Dict[str, Any]
    suites: List[SuiteRecord]


def overall_passed(reports: Sequence[SuiteReport]) -> bool:
    return all(report.passed for report in reports)


def write_report(reports: Sequence[SuiteReport], cfg: RunConfig, path: Union[str, Path, None] = None) -> Path:
    """Write the suites as one JSON document or as CSV rows (one per check)."""
    path = Path(path if path is not None else cfg.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if cfg.format == "json":
        document = {
            "passed": overall_passed(reports),
            "config": json.loads(cfg.model_dump_json()),
            "suites": [report.to_dict() for report in reports],
        }
        path.write_text(json.dumps(document, indent=2, default=float))
    else:
        with path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for report in reports:
                writer.writerows(report.csv_rows())
    return path


def read_report(path: Union[str, Path]) -> Union[ReportDocument, List[ReportRow]]:
    """Parse a report file back through the schema; raises ConfigurationError if it does not match."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            return ReportDocument.model_validate_json(path.read_text())
        with path.open(newline="") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
                raise ConfigurationError(f"unexpected report header {reader.fieldnames}")
            return TypeAdapter(List[ReportRow]).validate_python(list(reader))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid report {path}: {exc}") from exc
