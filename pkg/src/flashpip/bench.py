"""Sweep harness for the sparse-vs-dense access model.

Each cell of the (resolution x sparsity x T) grid builds masks from one
fixed coarse importance field upsampled to the cell's feature resolution
(the same scene rendered at different sizes), then compares the analytic
ledgers. Executing the loops for wall-clock timing and oracle checking is
optional; modeled columns never depend on execution.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .engine import (dense_ledger, dense_reference_loop, ledger_report,
                     masked_dense_loop, run_fused, sparse_ledger)
from .model import ConvGruParams
from .sparsity import ImportanceMap, build_rulebook, make_masks


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1.0001, h)
    xs = np.linspace(0, gw - 1.0001, w)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + grid[np.ix_(np.minimum(y0 + 1, gh - 1), x0)] * fy * (1 - fx)
            + grid[np.ix_(y0, np.minimum(x0 + 1, gw - 1))] * (1 - fy) * fx
            + grid[np.ix_(np.minimum(y0 + 1, gh - 1),
                          np.minimum(x0 + 1, gw - 1))] * fy * fx)


def synthetic_importance(h: int, w: int, seed: int = 0,
                         cells: tuple = (20, 46)) -> ImportanceMap:
    """One seeded coarse field rendered at any resolution, so sweeps across
    sizes see geometrically similar update regions."""
    rng = np.random.default_rng(seed)
    grid = rng.random(cells)
    return ImportanceMap(_bilinear_upsample(grid, h, w).astype(np.float32))


@dataclass
class BenchConfig:
    hidden_channels: int = 32
    input_channels: int = 8
    levels: int = 2
    feature_scale: int = 4     # image size / feature-map size for the update loop
    threshold: float = 0.0
    seed: int = 0


def _level_shapes(h_feat: int, w_feat: int, levels: int) -> list:
    return [(h_feat >> lv, w_feat >> lv) for lv in range(levels)]


def bench_cell(height: int, width: int, sparsity: float, T: int,
               cfg: BenchConfig, params=None, execute: bool = False,
               check: bool = False) -> dict:
    """One sweep cell; returns a flat dict ready for CSV emission."""
    fh, fw = height // cfg.feature_scale, width // cfg.feature_scale
    div = 2 ** (cfg.levels - 1)
    fh -= fh % div
    fw -= fw % div
    imp = synthetic_importance(fh, fw, cfg.seed)
    masks = make_masks(imp, cfg.threshold, sparsity, cfg.levels)
    rb = build_rulebook(masks, cfg.hidden_channels, cfg.input_channels)
    sparse = sparse_ledger(rb, T)
    dense = dense_ledger([lb.shape for lb in rb.levels],
                         cfg.hidden_channels, cfg.input_channels, T)
    rep = ledger_report(sparse, dense)
    row = {
        "height": height,
        "width": width,
        "levels": cfg.levels,
        "sparsity": sparsity,
        "T": T,
        "dense_requests": dense.total_requests,
        "sparse_requests": sparse.total_requests,
        "dense_peak_bytes": dense.peak_bytes,
        "sparse_peak_bytes": sparse.peak_bytes,
        "reduction_req_pct": rep.request_reduction_pct,
        "reduction_peak_pct": rep.peak_reduction_pct,
        "modeled_speedup": rep.modeled_speedup,
        "dense_hidden_requests": dense.hidden_map_requests,
        "sparse_hidden_requests": sparse.hidden_map_requests,
    }
    if execute or check:
        if params is None:
            params = [ConvGruParams(cfg.hidden_channels, cfg.input_channels, 3,
                                    np.random.default_rng(cfg.seed + lv))
                      for lv in range(cfg.levels)]
        rng = np.random.default_rng(cfg.seed + 99)
        hidden = [rng.standard_normal((cfg.hidden_channels, *s)).astype(np.float32)
                  for s in _level_shapes(fh, fw, cfg.levels)]
        inputs = [rng.standard_normal((cfg.input_channels, *s)).astype(np.float32)
                  for s in _level_shapes(fh, fw, cfg.levels)]
        t0 = time.perf_counter()
        fused_out, _ = run_fused(params, hidden, inputs, masks, T, rulebook=rb)
        row["wall_sparse_s"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        dense_reference_loop(hidden, inputs, params, T)
        row["wall_dense_s"] = time.perf_counter() - t0
        if check:
            oracle = masked_dense_loop(hidden, inputs, params, T, masks)
            max_diff = 0.0
            frozen_ok = True
            for lv, m in enumerate(masks.masks):
                if m.any():
                    max_diff = max(max_diff, float(
                        np.abs(fused_out[lv][:, m] - oracle[lv][:, m]).max()))
                frozen_ok &= bool(np.array_equal(fused_out[lv][:, ~m], hidden[lv][:, ~m]))
            row["check_max_diff"] = max_diff
            row["check_frozen_ok"] = int(frozen_ok)
    return row


def bench_sweep(resolutions, sparsities, iteration_counts, cfg: BenchConfig,
                params=None, execute: bool = False, check: bool = False,
                log=None) -> list[dict]:
    rows = []
    for (h, w) in resolutions:
        for s in sparsities:
            for T in iteration_counts:
                row = bench_cell(h, w, s, T, cfg, params=params,
                                 execute=execute, check=check)
                rows.append(row)
                if log is not None:
                    log(f"{h}x{w} s={s} T={T}: req -{row['reduction_req_pct']:.1f}% "
                        f"peak -{row['reduction_peak_pct']:.1f}%")
    return rows
