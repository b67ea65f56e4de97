"""
Analytic FLOPs and memory accounting for four attention variants.

Conventions:
- One multiply-add is 2 FLOPs.
- Softmax (exp, sum, divide, max shift) is 4 FLOPs per affinity entry and is
  reported as softmax_flops, separate from flops.
- Memory is affinity storage plus activation buffers at element_bytes each.
- Embedding width equals the channel count.

Every count is a Python int, so large shapes never overflow.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError

from src.errors import ConfigurationError
from src.utils import check_shape, get_config

logger = logging.getLogger(__name__)

SOFTMAX_FLOPS_PER_ENTRY = 4
VARIANTS = ("SA", "naive", "DA", "FA")
TABLE_FIELDS = ("variant", "h", "w", "d", "c", "flops", "affinity_elements", "affinity_bytes")
REFERENCE_SHAPE = (32, 32, 32, 64)


@dataclass(frozen=True)
class ShapeSpec:
    """Sizes of an (h, w, d, c) feature tensor."""

    h: int
    w: int
    d: int
    c: int

    def __post_init__(self):
        check_shape((self.h, self.w, self.d, self.c), rank=4)

    @classmethod
    def cube(cls, s: int) -> "ShapeSpec":
        return cls(s, s, s, s)

    @classmethod
    def parse(cls, text: str) -> "ShapeSpec":
        """Parse 'H,W,D,C'."""
        try:
            sizes = [int(part) for part in text.split(",")]
        except ValueError as exc:
            raise ConfigurationError(f"shape must be four integers H,W,D,C, got '{text}'") from exc
        return cls(*check_shape(sizes, rank=4))

    @property
    def N(self) -> int:
        return self.h * self.w * self.d

    @property
    def M(self) -> int:
        return self.h + self.w + self.d + self.c

    @property
    def total(self) -> int:
        return self.N * self.c

    @property
    def dims(self) -> tuple:
        return (self.h, self.w, self.d, self.c)


@dataclass(frozen=True)
class CostReport:
    variant: str
    shape: ShapeSpec
    flops: int
    affinity_elements: int
    embed_flops: int
    affinity_build_flops: int
    aggregation_flops: int
    fusion_flops: int
    softmax_flops: int
    activation_elements: int
    element_bytes: int
    byte_budget: int

    @property
    def affinity_bytes(self) -> int:
        return self.affinity_elements * self.element_bytes

    @property
    def memory_bytes(self) -> int:
        return (self.affinity_elements + self.activation_elements) * self.element_bytes

    @property
    def feasible(self) -> bool:
        return self.memory_bytes <= self.byte_budget

    @property
    def total_flops(self) -> int:
        return self.flops + self.softmax_flops

    def itemized(self) -> Dict[str, int]:
        return {
            "embed_flops": self.embed_flops,
            "affinity_build_flops": self.affinity_build_flops,
            "aggregation_flops": self.aggregation_flops,
            "fusion_flops": self.fusion_flops,
            "softmax_flops": self.softmax_flops,
        }


def _report(
    variant: str,
    s: ShapeSpec,
    *,
    affinity_elements: int,
    embed: int,
    build: int,
    aggregation: int,
    fusion: int = 0,
    softmax_entries: int,
    activation_elements: int,
    element_bytes: Optional[int],
    byte_budget: Optional[int],
) -> CostReport:
    config = get_config()
    report = CostReport(
        variant=variant,
        shape=s,
        flops=embed + build + aggregation + fusion,
        affinity_elements=affinity_elements,
        embed_flops=embed,
        affinity_build_flops=build,
        aggregation_flops=aggregation,
        fusion_flops=fusion,
        softmax_flops=SOFTMAX_FLOPS_PER_ENTRY * softmax_entries,
        activation_elements=activation_elements,
        element_bytes=element_bytes if element_bytes is not None else config.element_bytes,
        byte_budget=byte_budget if byte_budget is not None else config.cost_byte_budget,
    )
    if not report.feasible:
        logger.info(
            "%s at %s needs %d bytes, over the %d byte budget",
            variant,
            s.dims,
            report.memory_bytes,
            report.byte_budget,
        )
    return report


def cost_sa(
    s: ShapeSpec, element_bytes: Optional[int] = None, byte_budget: Optional[int] = None
) -> CostReport:
    """Embedded-Gaussian self-attention over N positions."""
    n, c = s.N, s.c
    return _report(
        "SA",
        s,
        affinity_elements=n * n,
        embed=3 * 2 * n * c * c,
        build=2 * n * n * c,
        aggregation=2 * n * n * c,
        softmax_entries=n * n,
        activation_elements=3 * n * c + n * c,
        element_bytes=element_bytes,
        byte_budget=byte_budget,
    )


def cost_naive_spatial_channel(
    s: ShapeSpec, element_bytes: Optional[int] = None, byte_budget: Optional[int] = None
) -> CostReport:
    """Self-attention treating each of the N*c elements as a token with scalar embeddings."""
    t = s.total
    return _report(
        "naive",
        s,
        affinity_elements=t * t,
        embed=3 * 2 * t,
        build=2 * t * t,
        aggregation=2 * t * t,
        softmax_entries=t * t,
        activation_elements=3 * t + t,
        element_bytes=element_bytes,
        byte_budget=byte_budget,
    )


def cost_da(
    s: ShapeSpec, element_bytes: Optional[int] = None, byte_budget: Optional[int] = None
) -> CostReport:
    """Dual attention: spatial SA plus a c x c channel attention, summed elementwise."""
    n, c = s.N, s.c
    sa = cost_sa(s, element_bytes, byte_budget)
    return _report(
        "DA",
        s,
        affinity_elements=n * n + c * c,
        embed=sa.embed_flops,
        build=sa.affinity_build_flops + 2 * c * c * n,
        aggregation=sa.aggregation_flops + 2 * c * c * n,
        fusion=n * c,
        softmax_entries=n * n + c * c,
        activation_elements=sa.activation_elements + 2 * n * c,
        element_bytes=element_bytes,
        byte_budget=byte_budget,
    )


def cost_fa(
    s: ShapeSpec, element_bytes: Optional[int] = None, byte_budget: Optional[int] = None
) -> CostReport:
    """
    Folded attention with one sub-affinity per mode.

    Each mode v builds a d_v x d_v sub-affinity from (d_v x Nc/d_v) unfoldings
    and mixes all Nc elements along v, so both terms cost 2*d_v*N*c and sum
    to 2*N*c*M over the four modes.
    """
    t = s.total
    squares = sum(d * d for d in s.dims)
    return _report(
        "FA",
        s,
        affinity_elements=squares,
        embed=3 * 2 * t * s.c,
        build=sum(2 * d * d * (t // d) for d in s.dims),
        aggregation=sum(2 * d * t for d in s.dims),
        softmax_entries=squares,
        activation_elements=3 * t + t,
        element_bytes=element_bytes,
        byte_budget=byte_budget,
    )


COST_FUNCTIONS = {
    "SA": cost_sa,
    "naive": cost_naive_spatial_channel,
    "DA": cost_da,
    "FA": cost_fa,
}


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


class TableRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    variant: Literal["SA", "naive", "DA", "FA"]
    h: int = Field(ge=1)
    w: int = Field(ge=1)
    d: int = Field(ge=1)
    c: int = Field(ge=1)
    flops: int = Field(ge=0)
    affinity_elements: int = Field(ge=0)
    affinity_bytes: int = Field(ge=0)

    @classmethod
    def from_report(cls, report: CostReport) -> "TableRow":
        s = report.shape
        return cls(
            variant=report.variant,
            h=s.h,
            w=s.w,
            d=s.d,
            c=s.c,
            flops=report.flops,
            affinity_elements=report.affinity_elements,
            affinity_bytes=report.affinity_bytes,
        )


_ROWS = TypeAdapter(List[TableRow])


def scaling_table(
    sizes: Sequence[ShapeSpec], element_bytes: Optional[int] = None, byte_budget: Optional[int] = None
) -> List[TableRow]:
    """One row per size per variant, variants in the order SA, naive, DA, FA."""
    if not sizes:
        raise ConfigurationError("scaling_table needs at least one size")
    return [
        TableRow.from_report(COST_FUNCTIONS[variant](s, element_bytes, byte_budget))
        for s in sizes
        for variant in VARIANTS
    ]


def validate_table_records(records: Iterable[dict]) -> List[TableRow]:
    """Schema check for table records read back from disk."""
    try:
        return _ROWS.validate_python(list(records))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid cost table: {exc}") from exc


def write_table(rows: Sequence[TableRow], path: Union[str, Path], fmt: str = "csv") -> Path:
    """Write rows as CSV (header TABLE_FIELDS) or as a JSON array of records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        with path.open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=TABLE_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow(row.model_dump())
    elif fmt == "json":
        path.write_text(json.dumps([row.model_dump() for row in rows], indent=2))
    else:
        raise ConfigurationError(f"unknown table format '{fmt}'")
    logger.info("wrote %d cost rows to %s", len(rows), path)
    return path


def read_table(path: Union[str, Path], fmt: Optional[str] = None) -> List[TableRow]:
    path = Path(path)
    fmt = fmt or ("json" if path.suffix == ".json" else "csv")
    if fmt == "json":
        records = json.loads(path.read_text())
    else:
        with path.open(newline="") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != TABLE_FIELDS:
                raise ConfigurationError(f"unexpected CSV header {reader.fieldnames}")
            records = list(reader)
    return validate_table_records(records)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


def fit_loglog_slope(sizes: Sequence[int], values: Sequence[int]) -> float:
    """Least-squares slope of log(values) against log(sizes)."""
    if len(sizes) != len(values) or len(sizes) < 2:
        raise ConfigurationError("need at least two (size, value) pairs")
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.array([math.log(v) for v in values])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _reduction_pct(fa: float, other: float) -> float:
    return 100.0 * (1.0 - fa / other)


def reduction_summary(s: ShapeSpec = ShapeSpec(*REFERENCE_SHAPE)) -> Dict[str, float]:
    """
    Reductions of FA against the other variants at shape s, in percent.

    Affinity storage is compared against SA, the naive variant and DA.
    Total FLOPs (softmax included) and memory (affinity plus activations)
    are compared against SA and DA.
    """
    fa, sa, da = cost_fa(s), cost_sa(s), cost_da(s)
    naive = cost_naive_spatial_channel(s)
    return {
        "fa_affinity_elements": fa.affinity_elements,
        "sa_affinity_elements": sa.affinity_elements,
        "naive_affinity_elements": naive.affinity_elements,
        "da_affinity_elements": da.affinity_elements,
        "fa_vs_sa_pct": _reduction_pct(fa.affinity_elements, sa.affinity_elements),
        "fa_vs_naive_pct": _reduction_pct(fa.affinity_elements, naive.affinity_elements),
        "fa_vs_da_pct": _reduction_pct(fa.affinity_elements, da.affinity_elements),
        "fa_vs_sa_flops_pct": _reduction_pct(fa.total_flops, sa.total_flops),
        "fa_vs_da_flops_pct": _reduction_pct(fa.total_flops, da.total_flops),
        "fa_vs_sa_memory_pct": _reduction_pct(fa.memory_bytes, sa.memory_bytes),
        "fa_vs_da_memory_pct": _reduction_pct(fa.memory_bytes, da.memory_bytes),
    }
