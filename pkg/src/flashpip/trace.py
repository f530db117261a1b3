"""Update-flag statistics over refinement trajectories.

A pixel's flag is set when its disparity moved by more than epsilon in one
iteration. The hit ratio between consecutive iterations counts agreement
over the whole map (both updated and static pixels); an IoU over just the
updated sets is reported alongside as the alternate overlap reading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class UpdateFlagMap:
    flags: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.epsilon <= 0:
            raise ValueError(f"UpdateFlagMap: epsilon must be > 0, got {self.epsilon}")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def update_flags(d_prev, d_curr, epsilon: float = 1e-3) -> UpdateFlagMap:
    """flags[p] = |d_curr[p] - d_prev[p]| > epsilon."""
    a, b = _data(d_prev), _data(d_curr)
    if a.shape != b.shape:
        raise ValueError(f"update_flags: shape mismatch {a.shape} vs {b.shape}")
    if epsilon <= 0:
        raise ValueError(f"update_flags: epsilon must be > 0, got {epsilon}")
    return UpdateFlagMap(np.abs(b.astype(np.float64) - a.astype(np.float64)) > epsilon,
                         epsilon)


def hit_ratio(flags_t: UpdateFlagMap, flags_prev: UpdateFlagMap) -> float:
    """Fraction of pixels whose flag agrees between the two maps."""
    a, b = flags_t.flags, flags_prev.flags
    if a.shape != b.shape:
        raise ValueError(f"hit_ratio: shape mismatch {a.shape} vs {b.shape}")
    return float((a == b).sum()) / a.size


def iou_updated(flags_t: UpdateFlagMap, flags_prev: UpdateFlagMap) -> float:
    """Intersection-over-union of the two updated sets; 1.0 when both empty."""
    a, b = flags_t.flags, flags_prev.flags
    if a.shape != b.shape:
        raise ValueError(f"iou_updated: shape mismatch {a.shape} vs {b.shape}")
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum()) / float(union)


def updated_fraction(flags: UpdateFlagMap) -> float:
    return float(flags.flags.sum()) / flags.flags.size


@dataclass
class TraceSeries:
    """Per-iteration statistics for one recorded trajectory."""
    epsilon: float
    fractions: list = field(default_factory=list)      # length T
    hit_ratios: list = field(default_factory=list)     # length T-1
    ious: list = field(default_factory=list)           # length T-1
    flag_maps: list = field(default_factory=list)


def trajectory_report(record, epsilon: float = 1e-3) -> TraceSeries:
    """Flag maps, updated fractions and consecutive hit ratios for a
    recorded trajectory (needs T >= 2)."""
    if record.T < 2:
        raise ValueError(f"trajectory_report: need T >= 2, got {record.T}")
    if len(record.disparities) != record.T + 1:
        raise ValueError("trajectory_report: record has no intermediate estimates "
                         "(was it run with record=False?)")
    series = TraceSeries(epsilon=epsilon)
    prev_flags = None
    for t in range(1, record.T + 1):
        flags = update_flags(record.disparities[t - 1], record.disparities[t], epsilon)
        series.flag_maps.append(flags)
        series.fractions.append(updated_fraction(flags))
        if prev_flags is not None:
            series.hit_ratios.append(hit_ratio(flags, prev_flags))
            series.ious.append(iou_updated(flags, prev_flags))
        prev_flags = flags
    return series


def write_trace_csv(path, series: TraceSeries) -> None:
    with open(path, "w", newline="") as f:
        f.write("iteration,updated_fraction,hit_ratio_vs_prev,iou_vs_prev\n")
        for i, frac in enumerate(series.fractions):
            hr = "" if i == 0 else f"{series.hit_ratios[i - 1]:.9g}"
            io = "" if i == 0 else f"{series.ious[i - 1]:.9g}"
            f.write(f"{i + 1},{frac:.9g},{hr},{io}\n")


def pgm_write(path, flags) -> None:
    """Binary PGM dump of a flag map (255 = updated)."""
    arr = np.asarray(flags.flags if isinstance(flags, UpdateFlagMap) else flags)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"pgm_write: expected a 2-d map, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((arr.astype(np.uint8) * 255).tobytes())
