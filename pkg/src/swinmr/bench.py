"""Global vs windowed attention: counted multiply-accumulates and wall-clock."""
from __future__ import annotations

import time
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .model import (WindowAttention, flops_msa, flops_wmsa, full_attention, window_attention,
                    window_partition)
from .tensor import Tensor

DEFAULT_BUDGET_BYTES = 512 * 2 ** 20


class BudgetExceeded(MemoryError):
    """Full attention logits would not fit in the configured byte budget."""


def full_logits_bytes(H: int, W: int, heads: int, itemsize: int = 4) -> int:
    return heads * (H * W) ** 2 * itemsize


def windowed_forward(x: Tensor, attn: WindowAttention, H: int, W: int) -> Tensor:
    """Partition a [1, H*W, C] token map into windows and attend (no shift)."""
    C = x.shape[-1]
    return window_attention(window_partition(T.reshape(x, (1, H, W, C)), attn._window), attn)


def count_windowed_macs(H, W, C, M, heads=2, seed=0, dtype=np.float32) -> int:
    attn = WindowAttention(C, M, heads, np.random.default_rng(seed), np.dtype(dtype))
    x = Tensor(np.zeros((1, H * W, C), dtype=dtype))
    with T.no_grad(), T.count_macs() as c:
        windowed_forward(x, attn, H, W)
    return c.total


def count_full_macs(H, W, C, heads=2, seed=0, dtype=np.float32, budget_bytes=DEFAULT_BUDGET_BYTES) -> int:
    _guard(H, W, heads, np.dtype(dtype).itemsize, budget_bytes)
    attn = WindowAttention(C, 1, heads, np.random.default_rng(seed), np.dtype(dtype))
    x = Tensor(np.zeros((1, H * W, C), dtype=dtype))
    with T.no_grad(), T.count_macs() as c:
        full_attention(x, attn)
    return c.total


def _guard(H, W, heads, itemsize, budget_bytes):
    need = full_logits_bytes(H, W, heads, itemsize)
    if need > budget_bytes:
        raise BudgetExceeded(f"full attention at {H}x{W} needs {need} bytes of logits, budget is {budget_bytes}")


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_point(H: int, W: int, C: int, M: int, heads: int = 2, repeats: int = 3, seed: int = 0,
                dtype=np.float32, budget_bytes: int = DEFAULT_BUDGET_BYTES) -> dict:
    """One grid point; full-attention fields are None when the memory guard refuses."""
    if C % heads:
        raise ValueError(f"channels {C} not divisible by heads {heads}")
    if H % M or W % M:
        raise ValueError(f"{H}x{W} not divisible by window {M}")
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    attn = WindowAttention(C, M, heads, rng, dtype)
    x = Tensor(rng.standard_normal((1, H * W, C)).astype(dtype))
    row = {"H": H, "W": W, "C": C, "M": M, "heads": heads,
           "macs_wmsa_model": flops_wmsa(H, W, C, M), "macs_msa_model": flops_msa(H, W, C)}
    with T.no_grad():
        with T.count_macs() as c:
            windowed_forward(x, attn, H, W)
        row["macs_wmsa_counted"] = c.total
        row["time_wmsa_s"] = _best_time(lambda: windowed_forward(x, attn, H, W), repeats)
        try:
            _guard(H, W, heads, dtype.itemsize, budget_bytes)
        except BudgetExceeded:
            row.update(macs_msa_counted=None, time_msa_s=None, refused=True)
        else:
            with T.count_macs() as c:
                full_attention(x, attn)
            row["macs_msa_counted"] = c.total
            row["time_msa_s"] = _best_time(lambda: full_attention(x, attn), repeats)
            row["refused"] = False
    row["model_ratio"] = row["macs_msa_model"] / row["macs_wmsa_model"]
    row["wmsa_rel_err"] = abs(row["macs_wmsa_counted"] - row["macs_wmsa_model"]) / row["macs_wmsa_model"]
    if row["macs_msa_counted"] is not None:
        row["msa_rel_err"] = abs(row["macs_msa_counted"] - row["macs_msa_model"]) / row["macs_msa_model"]
    else:
        row["msa_rel_err"] = None
    return row


def bench_attention(grid: Iterable[Sequence[int]], heads: int = 2, repeats: int = 3, seed: int = 0,
                    budget_bytes: int = DEFAULT_BUDGET_BYTES) -> List[dict]:
    """Benchmark every (H, W, C, M) point of ``grid`` in order."""
    return [bench_point(*point, heads=heads, repeats=repeats, seed=seed, budget_bytes=budget_bytes)
            for point in grid]
