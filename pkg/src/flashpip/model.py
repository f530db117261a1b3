"""Iterative stereo disparity refinement at desk scale.

A small conv encoder feeds a per-pixel correlation volume; a ConvGRU update
operator refines a disparity estimate over T steps, each step consuming a
windowed correlation lookup around the current estimate and emitting a
per-pixel delta through a two-layer head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (Tensor, accumulate, add, clamp, concat_channels, conv2d,
                     mul, relu, scale, sigmoid, sub, tanh, tape_record)


@dataclass
class ModelConfig:
    feat_channels: int = 16
    hidden_channels: int = 32
    kernel_size: int = 3
    d_max: int = 16
    lookup_radius: int = 3
    init_mode: str = "softargmax"   # or "zero"
    update_gate_bias: float = 0.0   # negative biases the GRU toward slow commitment

    @property
    def gru_input_channels(self) -> int:
        # correlation window plus the normalized current estimate
        return 2 * self.lookup_radius + 1 + 1


def _conv_init(rng, cout, cin, k, gain=1.0):
    std = gain / np.sqrt(cin * k * k)
    return Tensor(rng.standard_normal((cout, cin, k, k)).astype(np.float32) * std,
                  requires_grad=True)


def _bias_init(cout):
    return Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)


class ConvGruParams:
    """Gate kernels for a convolutional GRU over concatenated [hidden | input]."""

    def __init__(self, hidden_channels: int, input_channels: int, kernel_size: int, rng,
                 update_gate_bias: float = 0.0):
        if kernel_size % 2 == 0:
            raise ValueError("ConvGRU kernel size must be odd")
        self.hidden_channels = hidden_channels
        self.input_channels = input_channels
        self.kernel_size = kernel_size
        cin = hidden_channels + input_channels
        self.wu = _conv_init(rng, hidden_channels, cin, kernel_size)
        self.bu = _bias_init(hidden_channels)
        self.bu.data[:] = update_gate_bias
        self.wr = _conv_init(rng, hidden_channels, cin, kernel_size)
        self.br = _bias_init(hidden_channels)
        self.wc = _conv_init(rng, hidden_channels, cin, kernel_size)
        self.bc = _bias_init(hidden_channels)

    def named(self, prefix="gru"):
        return {f"{prefix}.wu": self.wu, f"{prefix}.bu": self.bu,
                f"{prefix}.wr": self.wr, f"{prefix}.br": self.br,
                f"{prefix}.wc": self.wc, f"{prefix}.bc": self.bc}


class HeadParams:
    """Two-layer conv head mapping hidden state to a disparity delta."""

    def __init__(self, hidden_channels: int, rng):
        self.w1 = _conv_init(rng, hidden_channels, hidden_channels, 3, gain=np.sqrt(2))
        self.b1 = _bias_init(hidden_channels)
        self.w2 = _conv_init(rng, 1, hidden_channels, 3)
        self.b2 = _bias_init(1)

    def named(self, prefix="head"):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class EncoderParams:
    """Fixed three-layer conv feature extractor, trained jointly."""

    def __init__(self, feat_channels: int, rng):
        c = feat_channels
        self.w1 = _conv_init(rng, c, 1, 3, gain=np.sqrt(2))
        self.b1 = _bias_init(c)
        self.w2 = _conv_init(rng, c, c, 3, gain=np.sqrt(2))
        self.b2 = _bias_init(c)
        self.w3 = _conv_init(rng, c, c, 3)
        self.b3 = _bias_init(c)

    def named(self, prefix="enc"):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
                f"{prefix}.w3": self.w3, f"{prefix}.b3": self.b3}


@dataclass
class CorrVolume:
    """Per-pixel matching costs over disparities 0..d_max."""
    cost: Tensor            # [B, d_max+1, h, w]
    d_max: int

    def __post_init__(self):
        if self.cost.data.shape[1] != self.d_max + 1:
            raise ValueError(f"CorrVolume: {self.cost.data.shape[1]} cost planes "
                             f"for d_max {self.d_max}")


@dataclass
class RefineState:
    hidden: Tensor
    disparity: Tensor
    iteration: int = 0


@dataclass
class TrajectoryRecord:
    """One forward pass: hidden states z_0..z_T, deltas 1..T, estimates 0..T.

    Estimates are clamped to [0, d_max] after each update, so the running
    disparity equals the previous one plus the delta wherever the clamp is
    inactive.
    """
    hidden_states: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    disparities: list = field(default_factory=list)
    T: int = 0

    @property
    def final_state(self) -> RefineState:
        return RefineState(self.hidden_states[-1], self.disparities[-1], self.T)


# ---------------------------------------------------------------------------
# correlation ops (custom backward rules)


def build_corr(left_feat: Tensor, right_feat: Tensor, d_max: int) -> CorrVolume:
    """cost[b,d,y,x] = <left[b,:,y,x], right[b,:,y,x-d]> / sqrt(C).

    Out-of-bounds lookups (x - d < 0) clamp to column 0.
    """
    if left_feat.data.shape != right_feat.data.shape:
        raise ValueError(f"build_corr: feature shapes differ "
                         f"{left_feat.data.shape} vs {right_feat.data.shape}")
    B, C, H, W = left_feat.data.shape
    if d_max >= W:
        raise ValueError(f"build_corr: d_max {d_max} >= width {W}")
    inv = 1.0 / np.sqrt(C)
    lf = left_feat.data.astype(np.float64)
    rf = right_feat.data.astype(np.float64)
    cost = np.empty((B, d_max + 1, H, W), dtype=np.float64)
    for d in range(d_max + 1):
        cols = np.clip(np.arange(W) - d, 0, W - 1)
        cost[:, d] = (lf * rf[:, :, :, cols]).sum(axis=1) * inv
    out_dtype = left_feat.data.dtype
    out = Tensor(cost.astype(out_dtype), dtype=out_dtype)

    def backward(g):
        gl = np.zeros((B, C, H, W), dtype=np.float64)
        gr = np.zeros((B, C, H, W), dtype=np.float64)
        for d in range(d_max + 1):
            gd = g[:, d][:, None] * inv                     # [B,1,H,W]
            cols = np.clip(np.arange(W) - d, 0, W - 1)
            gl += gd * rf[:, :, :, cols]
            if d == 0:
                gr += gd * lf
            else:
                gr[:, :, :, :W - d] += (gd * lf)[:, :, :, d:]
                gr[:, :, :, 0] += (gd * lf)[:, :, :, :d].sum(axis=3)
        accumulate(left_feat, gl)
        accumulate(right_feat, gr)

    tape_record(out, (left_feat, right_feat), backward)
    return CorrVolume(out, d_max)


def corr_lookup(corr: CorrVolume, disparity: Tensor, radius: int) -> Tensor:
    """Linearly interpolated cost samples at offsets -r..+r around the estimate.

    Sample positions are clamped to [0, d_max], so border samples repeat the
    boundary cost.
    """
    if radius < 1:
        raise ValueError(f"corr_lookup: radius must be >= 1, got {radius}")
    cost = corr.cost
    B, D, H, W = cost.data.shape
    if disparity.data.shape != (B, 1, H, W):
        raise ValueError(f"corr_lookup: disparity shape {disparity.data.shape} "
                         f"!= {(B, 1, H, W)}")
    out_dtype = np.result_type(cost.data.dtype, disparity.data.dtype)
    offs = np.arange(-radius, radius + 1, dtype=out_dtype)
    s = np.clip(disparity.data[:, 0][:, None] + offs[None, :, None, None], 0.0, D - 1.0)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, D - 1)
    frac = s - lo
    cd = cost.data
    bidx = np.arange(B)[:, None, None, None]
    yidx = np.arange(H)[None, None, :, None]
    xidx = np.arange(W)[None, None, None, :]
    c_lo = cd[bidx, lo, yidx, xidx]
    c_hi = cd[bidx, hi, yidx, xidx]
    out = Tensor(((1.0 - frac) * c_lo + frac * c_hi).astype(out_dtype), dtype=out_dtype)
    unclamped = disparity.data[:, 0][:, None] + offs[None, :, None, None]
    inside = (unclamped > 0.0) & (unclamped < D - 1.0)

    def backward(g):
        if cost.requires_grad:
            # scatter-add via bincount over flattened volume indices
            base = (np.broadcast_to(bidx, lo.shape) * D * H * W
                    + np.broadcast_to(yidx, lo.shape) * W
                    + np.broadcast_to(xidx, lo.shape))
            n = B * D * H * W
            gc = np.bincount((base + lo * H * W).ravel(),
                             weights=(g * (1.0 - frac)).ravel(), minlength=n)
            gc += np.bincount((base + hi * H * W).ravel(),
                              weights=(g * frac).ravel(), minlength=n)
            accumulate(cost, gc.reshape(cd.shape))
        if disparity.requires_grad:
            gd = (g * (c_hi - c_lo) * inside).sum(axis=1, keepdims=True)
            accumulate(disparity, gd)

    return tape_record(out, (cost, disparity), backward)


def init_disparity(corr: CorrVolume, mode: str = "softargmax") -> Tensor:
    """Initial estimate: soft-argmax over the disparity axis, or the zero map."""
    cost = corr.cost
    B, D, H, W = cost.data.shape
    if mode == "zero":
        return Tensor(np.zeros((B, 1, H, W), dtype=cost.data.dtype), dtype=cost.data.dtype)
    if mode != "softargmax":
        raise ValueError(f"init_disparity: unknown mode {mode!r}")
    c = cost.data.astype(np.float64)
    e = np.exp(c - c.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    idx = np.arange(D, dtype=np.float64)[None, :, None, None]
    exp = (p * idx).sum(axis=1, keepdims=True)
    out = Tensor(exp.astype(cost.data.dtype), dtype=cost.data.dtype)

    def backward(g):
        accumulate(cost, g * p * (idx - exp))

    return tape_record(out, (cost,), backward)


# ---------------------------------------------------------------------------
# update operator


def gru_step(params: ConvGruParams, hidden: Tensor, x: Tensor) -> Tensor:
    """One ConvGRU update: u/r gates over [h|x], candidate over [(r*h)|x]."""
    if hidden.data.shape[1] != params.hidden_channels:
        raise ValueError(f"gru_step: hidden has {hidden.data.shape[1]} channels, "
                         f"params expect {params.hidden_channels}")
    if x.data.shape[1] != params.input_channels:
        raise ValueError(f"gru_step: input has {x.data.shape[1]} channels, "
                         f"params expect {params.input_channels}")
    hx = concat_channels([hidden, x])
    u = sigmoid(conv2d(hx, params.wu, params.bu))
    r = sigmoid(conv2d(hx, params.wr, params.br))
    rhx = concat_channels([mul(r, hidden), x])
    c = tanh(conv2d(rhx, params.wc, params.bc))
    one_minus_u = sub(Tensor(np.float32(1.0)), u)
    return add(mul(one_minus_u, hidden), mul(u, c))


def disparity_head(params: HeadParams, hidden: Tensor) -> Tensor:
    """Hidden state -> per-pixel disparity delta (3x3 conv, relu, 3x3 conv)."""
    return conv2d(relu(conv2d(hidden, params.w1, params.b1)), params.w2, params.b2)


# ---------------------------------------------------------------------------
# full model


class RefineModel:
    """Encoder + correlation + ConvGRU + delta head, bundled with its config."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = EncoderParams(cfg.feat_channels, rng)
        self.gru = ConvGruParams(cfg.hidden_channels, cfg.gru_input_channels,
                                 cfg.kernel_size, rng,
                                 update_gate_bias=cfg.update_gate_bias)
        self.head = HeadParams(cfg.hidden_channels, rng)

    def named_parameters(self) -> dict:
        out = {}
        out.update(self.encoder.named())
        out.update(self.gru.named())
        out.update(self.head.named())
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def gru_parameters(self):
        return list(self.gru.named().values())

    def head_parameters(self):
        return list(self.head.named().values())

    def encoder_parameters(self):
        return list(self.encoder.named().values())

    def set_trainable(self, gru: bool = True, head: bool = True, encoder: bool = True):
        for p in self.gru_parameters():
            p.requires_grad = gru
        for p in self.head_parameters():
            p.requires_grad = head
        for p in self.encoder_parameters():
            p.requires_grad = encoder

    def encode(self, image: Tensor) -> Tensor:
        e = self.encoder
        f = relu(conv2d(image, e.w1, e.b1))
        f = relu(conv2d(f, e.w2, e.b2))
        return conv2d(f, e.w3, e.b3)

    def correlation(self, left: Tensor, right: Tensor) -> CorrVolume:
        return build_corr(self.encode(left), self.encode(right), self.cfg.d_max)

    def gru_input(self, corr: CorrVolume, disparity: Tensor) -> Tensor:
        look = corr_lookup(corr, disparity, self.cfg.lookup_radius)
        return concat_channels([look, scale(disparity, 1.0 / max(self.cfg.d_max, 1))])

    def run_trajectory(self, corr: CorrVolume, d_init: Tensor, T: int,
                       record: bool = True, state: Optional[RefineState] = None
                       ) -> TrajectoryRecord:
        """Iterate lookup -> gru -> head -> clamped update for T steps."""
        if T < 1:
            raise ValueError(f"run_trajectory: T must be >= 1, got {T}")
        B, _, H, W = d_init.data.shape
        if state is None:
            hidden = Tensor(np.zeros((B, self.cfg.hidden_channels, H, W),
                                     dtype=d_init.data.dtype), dtype=d_init.data.dtype)
            disp = d_init
        else:
            hidden, disp = state.hidden, state.disparity
        rec = TrajectoryRecord(T=T)
        rec.hidden_states.append(hidden)
        rec.disparities.append(disp)
        for _ in range(T):
            x = self.gru_input(corr, disp)
            hidden = gru_step(self.gru, hidden, x)
            delta = disparity_head(self.head, hidden)
            disp = clamp(add(disp, delta), 0.0, float(self.cfg.d_max))
            if record:
                rec.hidden_states.append(hidden)
                rec.deltas.append(delta)
                rec.disparities.append(disp)
        if not record:
            rec.hidden_states = [rec.hidden_states[0], hidden]
            rec.disparities = [rec.disparities[0], disp]
            rec.deltas = []
        return rec

    def refine_pair(self, left: Tensor, right: Tensor, T: int,
                    record: bool = True) -> tuple[TrajectoryRecord, CorrVolume]:
        corr = self.correlation(left, right)
        d0 = init_disparity(corr, self.cfg.init_mode)
        return self.run_trajectory(corr, d0, T, record=record), corr


def run_trajectory(model: RefineModel, left_feat: Tensor, right_feat: Tensor,
                   d_init: Tensor, T: int, record: bool = True) -> TrajectoryRecord:
    """Trajectory over precomputed features (bypasses the encoder)."""
    corr = build_corr(left_feat, right_feat, model.cfg.d_max)
    return model.run_trajectory(corr, d_init, T, record=record)


def epe(pred: Tensor, gt: Tensor) -> float:
    """End-point error: mean absolute disparity error in pixels."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"epe: shape mismatch {pred.data.shape} vs {gt.data.shape}")
    return float(np.mean(np.abs(pred.data.astype(np.float64) - gt.data.astype(np.float64))))
