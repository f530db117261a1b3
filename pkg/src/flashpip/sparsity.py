"""Importance-driven pixel selection and the multi-level packing rulebook.

Active pixels are chosen by thresholded top-k over an importance map, the
selection is coarsened across resolution levels (a parent is active if any
2x2 child is), and a static bidirectional index table maps coordinates to
packed arena slots. The rulebook also freezes everything the fused executor
needs at init time: the frozen-neighbor halo, per-footprint gather lists,
and the arena layout.

Slot numbering is row-major everywhere; ties in the top-k break toward the
smaller row-major coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCALAR_BYTES = 4


@dataclass
class ImportanceMap:
    scores: np.ndarray    # [h,w], nonnegative

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ValueError(f"ImportanceMap: scores must be 2-d, got {self.scores.shape}")
        if not np.isfinite(self.scores).all():
            raise ValueError("ImportanceMap: scores must be finite")
        if self.scores.min() < 0:
            raise ValueError("ImportanceMap: scores must be nonnegative")


def box_filter3(a: np.ndarray) -> np.ndarray:
    """3x3 box mean with zero padding, constant 1/9 normalization."""
    ap = np.pad(np.asarray(a, dtype=np.float64), 1)
    out = np.zeros_like(ap[1:-1, 1:-1])
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += ap[dy:dy + a.shape[0], dx:dx + a.shape[1]]
    return (out / 9.0).astype(np.float32)


def importance_proxy(last_delta: np.ndarray | None, shape=None) -> ImportanceMap:
    """|most recent delta| box-smoothed; uniform when no delta exists yet.

    Stands in for a learned attention module: pixels whose estimate is still
    moving are the ones worth updating.
    """
    if last_delta is None:
        if shape is None:
            raise ValueError("importance_proxy: need a shape for the uniform map")
        return ImportanceMap(np.ones(shape, dtype=np.float32))
    d = np.asarray(last_delta)
    if d.ndim == 4:
        d = d[0, 0]
    elif d.ndim == 3:
        d = d[0]
    return ImportanceMap(box_filter3(np.abs(d)))


def select_active(imp: ImportanceMap, threshold: float, sparsity_target: float) -> np.ndarray:
    """Boolean mask keeping the top-k candidates above the threshold.

    k = round((1 - sparsity_target) * pixels). If more candidates pass the
    threshold than k, the k largest are kept (row-major order breaks ties);
    if fewer pass, only the candidates stay and the realized sparsity
    exceeds the target.
    """
    if not 0.0 <= sparsity_target < 1.0:
        raise ValueError(f"select_active: sparsity_target must be in [0,1), "
                         f"got {sparsity_target}")
    scores = imp.scores
    h, w = scores.shape
    k = int(round((1.0 - sparsity_target) * h * w))
    flat = scores.reshape(-1)
    candidates = np.flatnonzero(flat >= threshold)
    if len(candidates) > k:
        # sort candidates by (-score, row-major index); lexsort: last key primary
        order = np.lexsort((candidates, -flat[candidates]))
        candidates = candidates[order[:k]]
    mask = np.zeros(h * w, dtype=bool)
    mask[candidates] = True
    return mask.reshape(h, w)


def coarsen_mask(fine_mask: np.ndarray, levels: int) -> list[np.ndarray]:
    """Per-level masks where a parent is active iff any 2x2 child is."""
    fine_mask = np.asarray(fine_mask, dtype=bool)
    h, w = fine_mask.shape
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ValueError(f"coarsen_mask: {h}x{w} not divisible by 2^(levels-1)={div}")
    masks = [fine_mask]
    for _ in range(levels - 1):
        m = masks[-1]
        masks.append(m.reshape(m.shape[0] // 2, 2, m.shape[1] // 2, 2).any(axis=(1, 3)))
    return masks


@dataclass
class SparsityMask:
    """Per-level boolean maps plus realized sparsity bookkeeping."""
    masks: list

    @property
    def levels(self) -> int:
        return len(self.masks)

    def k(self, level: int) -> int:
        return int(self.masks[level].sum())

    def sparsity(self, level: int) -> float:
        m = self.masks[level]
        return 1.0 - float(m.sum()) / m.size

    def min_sparsity(self) -> float:
        return min(self.sparsity(lv) for lv in range(self.levels))


def make_masks(imp: ImportanceMap, threshold: float, sparsity_target: float,
               levels: int) -> SparsityMask:
    return SparsityMask(coarsen_mask(select_active(imp, threshold, sparsity_target), levels))


# ---------------------------------------------------------------------------
# rulebook

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _dilate(mask: np.ndarray, dist: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(dist):
        cur = out.copy()
        for dy, dx in _OFFSETS:
            if dy == 0 and dx == 0:
                continue
            shifted = np.zeros_like(cur)
            ys = slice(max(dy, 0), cur.shape[0] + min(dy, 0))
            yd = slice(max(-dy, 0), cur.shape[0] + min(-dy, 0))
            xs = slice(max(dx, 0), cur.shape[1] + min(dx, 0))
            xd = slice(max(-dx, 0), cur.shape[1] + min(-dx, 0))
            shifted[yd, xd] = cur[ys, xs]
            out |= shifted
    return out


@dataclass
class LevelBook:
    """Static index tables for one resolution level.

    Active slots come first in the arena block, then frozen halo slots
    (inactive pixels within distance 2 of an active one: the candidate-gate
    ring needs their hidden and input values for exactness). Gather lists
    use -1 for out-of-image taps, which read as zero like the dense padding.
    """
    shape: tuple
    slot_of: np.ndarray        # [h,w] int32, coordinate -> active slot, -1 inactive
    coords: np.ndarray         # [k,2]  int32, active slot -> coordinate
    k: int
    halo_coords: np.ndarray    # [n_halo,2] frozen-snapshot pixels (row-major)
    n2_slot_of: np.ndarray     # [h,w] arena slot (active then halo), -1 outside N2
    n1_arena: np.ndarray       # [n1] arena slots of ring-extended compute set
    gather_n1: np.ndarray      # [n1,9] arena slots for each compute pixel's footprint
    gather_act: np.ndarray     # [k,9]  n1-order indices for each active footprint
    parent_slot: np.ndarray | None = None   # [k] active slot at the next coarser level
    child_slots: np.ndarray | None = None   # [k,4] finer-level slots (set on coarse levels)

    @property
    def n_halo(self) -> int:
        return len(self.halo_coords)

    @property
    def n1(self) -> int:
        return len(self.n1_arena)

    @property
    def n2(self) -> int:
        return self.k + self.n_halo


@dataclass
class Rulebook:
    """Multi-level bidirectional mapping plus frozen arena accounting."""
    levels: list
    hidden_channels: list
    input_channels: list
    active_bytes: int = 0
    workspace_bytes: int = 0

    @property
    def arena_bytes(self) -> int:
        return self.active_bytes + self.workspace_bytes

    def level_slot_ranges(self) -> list[tuple]:
        """Disjoint contiguous [start, end) active-slot ranges in one arena."""
        out = []
        start = 0
        for lb in self.levels:
            out.append((start, start + lb.k))
            start += lb.n2
        return out


def _coords_rowmajor(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.stack([ys, xs], axis=1).astype(np.int32)


def _build_level(mask: np.ndarray) -> LevelBook:
    h, w = mask.shape
    coords = _coords_rowmajor(mask)
    k = len(coords)
    slot_of = np.full((h, w), -1, dtype=np.int32)
    slot_of[mask] = np.arange(k, dtype=np.int32)

    ring_mask = _dilate(mask, 1) & ~mask
    halo_mask = _dilate(mask, 2) & ~mask
    halo_coords = _coords_rowmajor(halo_mask)

    n2_slot_of = np.full((h, w), -1, dtype=np.int32)
    n2_slot_of[mask] = np.arange(k, dtype=np.int32)
    n2_slot_of[halo_mask] = k + np.arange(len(halo_coords), dtype=np.int32)

    n1_coords = np.concatenate([coords, _coords_rowmajor(ring_mask)]) \
        if ring_mask.any() else coords
    n1_arena = n2_slot_of[n1_coords[:, 0], n1_coords[:, 1]] if len(n1_coords) else \
        np.zeros(0, dtype=np.int32)

    n1_index_of = np.full((h, w), -1, dtype=np.int32)
    if len(n1_coords):
        n1_index_of[n1_coords[:, 0], n1_coords[:, 1]] = np.arange(len(n1_coords),
                                                                  dtype=np.int32)

    def footprints(points: np.ndarray, table: np.ndarray) -> np.ndarray:
        out = np.full((len(points), 9), -1, dtype=np.int32)
        for j, (dy, dx) in enumerate(_OFFSETS):
            ny = points[:, 0] + dy
            nx = points[:, 1] + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            out[ok, j] = table[ny[ok], nx[ok]]
        return out

    gather_n1 = footprints(n1_coords, n2_slot_of) if len(n1_coords) else \
        np.zeros((0, 9), dtype=np.int32)
    gather_act = footprints(coords, n1_index_of) if k else np.zeros((0, 9), dtype=np.int32)
    # every in-bounds neighbor of a compute pixel lies inside N2 by construction
    in_bounds_missing = (gather_n1 == -1) & _in_bounds_taps(n1_coords, h, w)
    if in_bounds_missing.any():
        raise AssertionError("rulebook: compute footprint escaped the frozen halo")
    return LevelBook(shape=(h, w), slot_of=slot_of, coords=coords, k=k,
                     halo_coords=halo_coords, n2_slot_of=n2_slot_of,
                     n1_arena=n1_arena, gather_n1=gather_n1, gather_act=gather_act)


def _in_bounds_taps(points: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros((len(points), 9), dtype=bool)
    for j, (dy, dx) in enumerate(_OFFSETS):
        ny = points[:, 0] + dy
        nx = points[:, 1] + dx
        out[:, j] = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    return out


def gru_param_scalars(ch: int, cx: int, k: int = 3) -> int:
    return 3 * (ch * (ch + cx) * k * k + ch)


def build_rulebook(masks: SparsityMask | list, hidden_channels, input_channels) -> Rulebook:
    """Assign packed slots level by level and freeze the arena size.

    Masks must be consistent under any-pool coarsening. Channel counts may be
    an int (shared by all levels) or a per-level list; the arena covers the
    packed hidden + input blocks, the frozen halo, and the gather tables.
    """
    mask_list = masks.masks if isinstance(masks, SparsityMask) else list(masks)
    n_levels = len(mask_list)
    for lv in range(n_levels - 1):
        want = coarsen_mask(mask_list[lv], 2)[1]
        if want.shape != mask_list[lv + 1].shape or not np.array_equal(want, mask_list[lv + 1]):
            raise ValueError(f"build_rulebook: level {lv + 1} mask is not the "
                             f"any-pool coarsening of level {lv}")

    def per_level(v):
        return list(v) if isinstance(v, (list, tuple)) else [v] * n_levels

    ch = per_level(hidden_channels)
    cx = per_level(input_channels)
    levels = [_build_level(m) for m in mask_list]

    # bidirectional cross-level table
    for lv in range(n_levels - 1):
        fine, coarse = levels[lv], levels[lv + 1]
        if fine.k:
            py = fine.coords[:, 0] // 2
            px = fine.coords[:, 1] // 2
            fine.parent_slot = coarse.slot_of[py, px]
            if (fine.parent_slot < 0).any():
                raise ValueError("build_rulebook: active pixel has no active parent")
        else:
            fine.parent_slot = np.zeros(0, dtype=np.int32)
        child = np.full((coarse.k, 4), -1, dtype=np.int32)
        for i, (cy, cx_) in enumerate(coarse.coords):
            for j, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                y, x = 2 * cy + oy, 2 * cx_ + ox
                child[i, j] = fine.slot_of[y, x]
        coarse.child_slots = child

    active = sum(lb.k * c for lb, c in zip(levels, ch))
    workspace = sum(lb.n_halo * c for lb, c in zip(levels, ch))          # frozen hidden halo
    workspace += sum(lb.n2 * c for lb, c in zip(levels, cx))             # packed inputs
    workspace += sum(9 * (lb.n1 + lb.k) for lb in levels)                # gather tables
    workspace += sum(gru_param_scalars(c, x) for c, x in zip(ch, cx))    # resident weights
    return Rulebook(levels=levels, hidden_channels=ch, input_channels=cx,
                    active_bytes=SCALAR_BYTES * active,
                    workspace_bytes=SCALAR_BYTES * workspace)
