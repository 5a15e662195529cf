import numpy as np
import pytest

from swinmr.bench import BudgetExceeded, bench_attention, bench_point, count_full_macs, full_logits_bytes
from swinmr.model import flops_msa, flops_wmsa


def test_bench_rows_report_exact_counts():
    rows = bench_attention([(8, 8, 8, 4), (16, 8, 12, 4)], heads=2, repeats=1)
    for r in rows:
        assert r["macs_wmsa_counted"] == flops_wmsa(r["H"], r["W"], r["C"], r["M"])
        assert r["macs_msa_counted"] == flops_msa(r["H"], r["W"], r["C"])
        assert r["time_wmsa_s"] > 0 and r["time_msa_s"] > 0
        assert not r["refused"]


def test_memory_guard_refuses_large_full_attention():
    budget = full_logits_bytes(16, 16, 2) - 1
    row = bench_point(16, 16, 8, 4, repeats=1, budget_bytes=budget)
    assert row["refused"] and row["macs_msa_counted"] is None and row["time_msa_s"] is None
    assert row["macs_wmsa_counted"] == flops_wmsa(16, 16, 8, 4)
    with pytest.raises(BudgetExceeded):
        count_full_macs(16, 16, 8, budget_bytes=budget)


def test_bench_validates_shapes():
    with pytest.raises(ValueError):
        bench_point(10, 10, 8, 4)
    with pytest.raises(ValueError):
        bench_point(8, 8, 7, 4, heads=2)


def test_model_ratio_at_operating_point():
    assert flops_msa(96, 96, 180) / flops_wmsa(96, 96, 180, 8) == pytest.approx(22.585, abs=1e-3)
