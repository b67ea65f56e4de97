"""
Tests for the analytic cost model.
"""

import itertools
import json

import numpy as np
import pytest

from src.attention import folded_attention, init_params, self_attention
from src.cost_model import (
    REFERENCE_SHAPE,
    TABLE_FIELDS,
    ShapeSpec,
    TableRow,
    cost_da,
    cost_fa,
    cost_naive_spatial_channel,
    cost_sa,
    fit_loglog_slope,
    read_table,
    reduction_summary,
    scaling_table,
    validate_table_records,
    write_table,
)
from src.errors import ConfigurationError
from src.tensor_core import count_ops
from src.utils import random_tensor

REFERENCE = ShapeSpec(*REFERENCE_SHAPE)
SWEEP = (4, 8, 16, 32)


class TestShapeSpec:
    def test_derived_sizes(self):
        s = ShapeSpec(2, 3, 4, 5)
        assert (s.N, s.M, s.total) == (24, 14, 120)

    def test_parse(self):
        assert ShapeSpec.parse("32,32,32,64") == REFERENCE
        with pytest.raises(ConfigurationError):
            ShapeSpec.parse("2,3,x,4")
        with pytest.raises(ConfigurationError):
            ShapeSpec.parse("2,3,4")
        with pytest.raises(ConfigurationError):
            ShapeSpec(2, 0, 2, 2)


class TestSelfAttentionCost:
    def test_single_position(self):
        assert cost_sa(ShapeSpec(1, 1, 1, 7)).affinity_elements == 1

    def test_reference_shape(self):
        assert cost_sa(REFERENCE).affinity_elements == 1_073_741_824

    def test_doubling_spatial_dims(self):
        small, large = cost_sa(ShapeSpec(4, 4, 4, 8)), cost_sa(ShapeSpec(8, 8, 8, 8))
        assert large.affinity_elements == 64 * small.affinity_elements

    def test_itemized_terms(self):
        s = ShapeSpec(2, 3, 4, 5)
        report = cost_sa(s)
        assert report.affinity_build_flops == 2 * 24 * 24 * 5
        assert report.aggregation_flops == 2 * 24 * 24 * 5
        assert report.embed_flops == 3 * 2 * 24 * 5 * 5
        assert report.flops == sum(v for k, v in report.itemized().items() if k != "softmax_flops")
        assert report.softmax_flops == 4 * 24 * 24


class TestNaiveCost:
    def test_reference_is_infeasible(self):
        report = cost_naive_spatial_channel(REFERENCE)
        assert report.affinity_elements == 2_097_152**2
        assert report.affinity_elements == pytest.approx(4.398e12, rel=1e-3)
        assert report.affinity_bytes == pytest.approx(17.6e12, rel=1e-2)
        assert not report.feasible
        assert cost_sa(REFERENCE).feasible

    def test_trivial(self):
        assert cost_naive_spatial_channel(ShapeSpec(1, 1, 1, 1)).affinity_elements == 1

    def test_ratio_to_folded(self):
        s = ShapeSpec(2, 2, 2, 2)
        assert cost_naive_spatial_channel(s).affinity_elements == 256
        assert cost_fa(s).affinity_elements == 16

    def test_byte_budget_override(self):
        s = ShapeSpec(2, 2, 2, 2)
        assert not cost_naive_spatial_channel(s, byte_budget=10).feasible
        assert cost_naive_spatial_channel(s, element_bytes=8).affinity_bytes == 256 * 8


class TestDualAttentionCost:
    def test_single_channel(self):
        s = ShapeSpec(3, 4, 2, 1)
        sa, da = cost_sa(s), cost_da(s)
        assert da.fusion_flops == s.N
        assert da.affinity_build_flops - sa.affinity_build_flops == 2 * s.N
        assert da.aggregation_flops - sa.aggregation_flops == 2 * s.N
        assert da.embed_flops == sa.embed_flops

    def test_reference_shape(self):
        assert cost_da(REFERENCE).affinity_elements == 1_073_741_824 + 4096

    @pytest.mark.parametrize("c", [1, 2, 7, 64])
    def test_more_storage_than_sa(self, c):
        s = ShapeSpec(3, 3, 3, c)
        assert cost_da(s).affinity_elements > cost_sa(s).affinity_elements


class TestFoldedCost:
    def test_reference_shape(self):
        report = cost_fa(REFERENCE)
        assert report.affinity_elements == 7168
        assert report.affinity_bytes == 7168 * 4

    def test_all_ones(self):
        report = cost_fa(ShapeSpec(1, 1, 1, 1))
        assert report.affinity_elements == 4
        assert report.flops == 6 + 8 + 8

    def test_equal_dims_closed_form(self):
        for s in SWEEP:
            assert cost_fa(ShapeSpec.cube(s)).flops == 22 * s**5

    def test_aggregation_is_twice_total_times_dim_sum(self):
        s = ShapeSpec(2, 3, 4, 5)
        assert cost_fa(s).aggregation_flops == 2 * s.total * s.M

    def test_slopes(self):
        fa = [cost_fa(ShapeSpec.cube(s)).flops for s in SWEEP]
        sa = [cost_sa(ShapeSpec.cube(s)).flops for s in SWEEP]
        assert fit_loglog_slope(SWEEP, fa) == pytest.approx(5.0, abs=0.1)
        assert fit_loglog_slope(SWEEP, sa) == pytest.approx(7.0, abs=0.1)

    def test_leading_order_ratio_is_bounded(self):
        for dims in itertools.product((1, 2, 5, 16), repeat=4):
            s = ShapeSpec(*dims)
            ratio = cost_fa(s).flops / (s.N * s.c * s.M + s.N * s.c**2)
            assert 1.0 <= ratio <= 8.0

    def test_less_storage_than_sa(self):
        # Holds for c <= N / 2; at c = N the channel term can win, e.g. (2, 2, 2, 8).
        for h, w, d, c in itertools.product((2, 3, 5), (2, 4), (2, 7), (1, 2, 4, 16, 64)):
            s = ShapeSpec(h, w, d, c)
            if c <= s.N // 2:
                assert cost_fa(s).affinity_elements < cost_sa(s).affinity_elements
        assert cost_fa(ShapeSpec(2, 2, 2, 8)).affinity_elements > cost_sa(ShapeSpec(2, 2, 2, 8)).affinity_elements

    @pytest.mark.parametrize("shape", [(2, 3, 2, 3), (1, 4, 2, 5), (3, 1, 1, 2)])
    def test_kernel_counters_match_model(self, shape):
        rng = np.random.default_rng(0)
        x = random_tensor(shape, rng)
        params = init_params(x.channels, rng)
        with count_ops() as counter:
            folded_attention(x, params)
        model = cost_fa(ShapeSpec(*shape))
        assert counter["aggregate"] == model.aggregation_flops
        assert counter["affinity_build"] == model.affinity_build_flops
        assert counter["embed"] == model.embed_flops
        assert counter.total == model.flops

    def test_sa_kernel_counters_match_model(self):
        rng = np.random.default_rng(1)
        x = random_tensor((2, 3, 2, 3), rng)
        params = init_params(x.channels, rng)
        with count_ops() as counter:
            self_attention(x, params)
        assert counter.total == cost_sa(ShapeSpec(2, 3, 2, 3)).flops


class TestScalingTable:
    def test_single_size_has_four_rows(self):
        rows = scaling_table([ShapeSpec(2, 2, 2, 2)])
        assert [row.variant for row in rows] == ["SA", "naive", "DA", "FA"]

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            scaling_table([])

    def test_folded_dominated_and_columns_monotone(self):
        rows = scaling_table([ShapeSpec.cube(s) for s in SWEEP])
        for variant in ("SA", "naive", "DA", "FA"):
            column = [row for row in rows if row.variant == variant]
            assert all(a.flops <= b.flops for a, b in zip(column, column[1:]))
            assert all(a.affinity_bytes <= b.affinity_bytes for a, b in zip(column, column[1:]))
        for index in range(0, len(rows), 4):
            sa, naive, da, fa = rows[index : index + 4]
            for other in (sa, naive, da):
                assert fa.flops < other.flops
                assert fa.affinity_bytes < other.affinity_bytes

    @pytest.mark.parametrize("fmt", ["csv", "json"])
    def test_round_trip(self, tmp_path, fmt):
        rows = scaling_table([ShapeSpec.cube(s) for s in SWEEP])
        path = write_table(rows, tmp_path / f"table.{fmt}", fmt)
        assert read_table(path) == rows
        if fmt == "csv":
            lines = path.read_text().splitlines()
            assert lines[0] == ",".join(TABLE_FIELDS)
            assert len(lines) == 1 + len(SWEEP) * 4
        else:
            assert len(json.loads(path.read_text())) == len(SWEEP) * 4

    def test_schema_check(self):
        good = TableRow.from_report(cost_fa(REFERENCE)).model_dump()
        assert validate_table_records([good])[0].affinity_elements == 7168
        with pytest.raises(ConfigurationError):
            validate_table_records([{**good, "variant": "AG"}])
        with pytest.raises(ConfigurationError):
            validate_table_records([{**good, "extra": 1}])
        with pytest.raises(ConfigurationError):
            validate_table_records([{k: v for k, v in good.items() if k != "flops"}])

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_table(scaling_table([ShapeSpec(1, 1, 1, 1)]), tmp_path / "t.xml", "xml")


class TestSummaries:
    def test_reference_reduction(self):
        summary = reduction_summary()
        assert summary["fa_affinity_elements"] == 7168
        assert summary["fa_vs_sa_pct"] >= 99.99
        assert summary["fa_vs_naive_pct"] > summary["fa_vs_sa_pct"]

    def test_reference_flops_and_memory_against_sa_and_da(self):
        summary = reduction_summary()
        fa, sa, da = cost_fa(REFERENCE), cost_sa(REFERENCE), cost_da(REFERENCE)
        assert summary["fa_vs_da_pct"] == pytest.approx(100.0 * (1 - 7168 / (1_073_741_824 + 4096)))
        assert summary["fa_vs_sa_flops_pct"] == pytest.approx(100.0 * (1 - fa.total_flops / sa.total_flops))
        assert summary["fa_vs_da_memory_pct"] == pytest.approx(100.0 * (1 - fa.memory_bytes / da.memory_bytes))
        for key in ("pct", "flops_pct", "memory_pct"):
            assert 0.0 < summary[f"fa_vs_sa_{key}"] < summary[f"fa_vs_da_{key}"] < 100.0

    def test_slope_of_power_law(self):
        assert fit_loglog_slope([1, 2, 4, 8], [3 * s**3 for s in (1, 2, 4, 8)]) == pytest.approx(3.0)

    def test_slope_needs_two_points(self):
        with pytest.raises(ConfigurationError):
            fit_loglog_slope([4], [10])
