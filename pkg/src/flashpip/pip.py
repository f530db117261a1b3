"""Progressive iteration pruning.

Each stage distills a frozen more-iterations teacher into a fewer-iterations
student initialized from it: the student's per-step outputs are aligned with
the teacher's block-aggregated outputs (cumulative and final), and its hidden
states with the teacher's at the coarse time grid. Only the recurrent gates
(optionally the output head) receive gradients; halving recursively collapses
the unroll depth.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .model import RefineModel, TrajectoryRecord, disparity_head, gru_step, init_disparity
from .tensor import Adam, GradTape, Tensor, add, clamp, scale, sub, sumsq
from .training import evaluate_epe, sample_batch


@dataclass
class PruneSchedule:
    """Successive-halving plan with per-stage budgets."""
    t0: int
    ratio: int = 2
    stages: int = 1
    steps_per_stage: int = 2000
    lr: float = 2e-4
    batch_size: int = 8
    seed: int = 0
    final_mode: str = "accumulated"

    def __post_init__(self):
        if self.ratio < 2:
            raise ValueError(f"PruneSchedule: ratio must be >= 2, got {self.ratio}")
        if self.t0 % (self.ratio ** self.stages) != 0:
            raise ValueError(f"PruneSchedule: t0={self.t0} not divisible by "
                             f"ratio^stages={self.ratio ** self.stages}")

    def stage_iters(self) -> list[int]:
        return [self.t0 // self.ratio ** (s + 1) for s in range(self.stages)]


@dataclass
class PipLossReport:
    loss_cum: float
    loss_final: float
    loss_hid: float
    total: float


@dataclass
class StageConfig:
    budget: int
    lr: float = 2e-4
    batch_size: int = 8
    train_head: bool = False
    teacher_forcing: bool = False
    final_mode: str = "accumulated"   # or "delta" for the per-step-output form
    seed: int = 0


@dataclass
class StageResult:
    model: RefineModel
    iters: int
    reports: list
    epe_heldout: float | None = None
    epe_truncated: float | None = None


# ---------------------------------------------------------------------------
# losses


def block_aggregate(teacher, r: int) -> list[Tensor]:
    """Mean of the teacher's per-step deltas within each r-step window."""
    deltas = teacher.deltas if isinstance(teacher, TrajectoryRecord) else list(teacher)
    T = len(deltas)
    if T % r != 0:
        raise ValueError(f"block_aggregate: T={T} not divisible by r={r}")
    blocks = []
    for s in range(T // r):
        acc = deltas[r * s]
        for i in range(1, r):
            acc = add(acc, deltas[r * s + i])
        blocks.append(scale(acc, 1.0 / r))
    return blocks


def _batch_of(t: Tensor) -> int:
    return t.data.shape[0] if t.data.ndim >= 1 else 1


def loss_cum(student_deltas, teacher_blocks) -> Tensor:
    """Squared L2 between cumulative student and teacher outputs at each
    coarse step, summed over steps; reduced by batch size."""
    if len(student_deltas) != len(teacher_blocks):
        raise ValueError(f"loss_cum: {len(student_deltas)} student deltas vs "
                         f"{len(teacher_blocks)} teacher blocks")
    batch = _batch_of(student_deltas[0])
    total = None
    ps_student = None
    ps_teacher = None
    for d_fi, d_mi in zip(student_deltas, teacher_blocks):
        ps_student = d_fi if ps_student is None else add(ps_student, d_fi)
        ps_teacher = d_mi if ps_teacher is None else add(ps_teacher, d_mi)
        term = sumsq(sub(ps_student, ps_teacher), div=batch)
        total = term if total is None else add(total, term)
    return total


def loss_final(student_final_delta: Tensor, teacher_final_hidden: Tensor,
               teacher_head) -> Tensor:
    """Squared L2 between the student's final delta and the frozen teacher
    head applied to the teacher's final hidden state."""
    target = disparity_head(teacher_head, teacher_final_hidden)
    if student_final_delta.data.shape != target.data.shape:
        raise ValueError(f"loss_final: shape mismatch "
                         f"{student_final_delta.data.shape} vs {target.data.shape}")
    return sumsq(sub(student_final_delta, target.detach()),
                 div=_batch_of(student_final_delta))


def loss_hid(student_hiddens, teacher_hiddens, r: int) -> Tensor:
    """Squared L2 between student and teacher hidden states on the coarse
    grid (student step s vs teacher step r*s)."""
    S = len(student_hiddens)
    if r * S > len(teacher_hiddens) - 1:
        raise ValueError(f"loss_hid: teacher has {len(teacher_hiddens) - 1} steps, "
                         f"student needs index {r * S}")
    batch = _batch_of(student_hiddens[0])
    total = None
    for s in range(1, S + 1):
        term = sumsq(sub(student_hiddens[s - 1], teacher_hiddens[r * s].detach()), div=batch)
        total = term if total is None else add(total, term)
    return total


def pip_losses(student_rec: TrajectoryRecord, teacher_rec: TrajectoryRecord,
               r: int, teacher_head, final_mode: str = "accumulated"):
    """Total distillation loss and its per-component report.

    final_mode "accumulated" compares final disparity estimates; "delta"
    compares the student's final per-step output against the teacher head
    applied to the teacher's final hidden state.
    """
    blocks = [b.detach() for b in block_aggregate(teacher_rec, r)]
    lc = loss_cum(student_rec.deltas, blocks)
    if final_mode == "delta":
        lf = loss_final(student_rec.deltas[-1], teacher_rec.hidden_states[-1], teacher_head)
    elif final_mode == "accumulated":
        lf = sumsq(sub(student_rec.disparities[-1], teacher_rec.disparities[-1].detach()),
                   div=_batch_of(student_rec.disparities[-1]))
    else:
        raise ValueError(f"pip_losses: unknown final_mode {final_mode!r}")
    lh = loss_hid(student_rec.hidden_states[1:], teacher_rec.hidden_states, r)
    total = add(add(lc, lf), lh)
    report = PipLossReport(lc.item(), lf.item(), lh.item(), total.item())
    return total, report


# ---------------------------------------------------------------------------
# stages


def copy_model(model: RefineModel) -> RefineModel:
    out = RefineModel(copy.deepcopy(model.cfg))
    src = model.named_parameters()
    for name, p in out.named_parameters().items():
        p.data = src[name].data.copy()
    return out


def _student_rollout(model: RefineModel, corr, d_init: Tensor, S: int,
                     teacher_rec: TrajectoryRecord | None, r: int) -> TrajectoryRecord:
    """S-step rollout; with a teacher record, lookups are teacher-forced from
    the coarse-grid disparities instead of the student's own estimates."""
    B, _, H, W = d_init.data.shape
    hidden = Tensor(np.zeros((B, model.cfg.hidden_channels, H, W), dtype=np.float32))
    disp = d_init
    rec = TrajectoryRecord(T=S)
    rec.hidden_states.append(hidden)
    rec.disparities.append(disp)
    for s in range(S):
        lookup_disp = disp if teacher_rec is None else teacher_rec.disparities[r * s].detach()
        x = model.gru_input(corr, lookup_disp)
        hidden = gru_step(model.gru, hidden, x)
        delta = disparity_head(model.head, hidden)
        disp = clamp(add(disp, delta), 0.0, float(model.cfg.d_max))
        rec.hidden_states.append(hidden)
        rec.deltas.append(delta)
        rec.disparities.append(disp)
    return rec


def prune_stage(mi_model: RefineModel, mi_iters: int, dataset, r: int,
                cfg: StageConfig, log=None):
    """One halving stage: returns the finetuned student and per-step reports.

    The student is a deep copy of the teacher; only its GRU gates (and the
    head when cfg.train_head) receive gradients, the encoder stays frozen.
    Teacher trajectories are generated fresh per batch from the frozen teacher.
    """
    if cfg.budget < 1:
        raise ValueError(f"prune_stage: budget must be >= 1, got {cfg.budget}")
    if mi_iters % r != 0:
        raise ValueError(f"prune_stage: teacher iterations {mi_iters} not divisible by r={r}")
    S = mi_iters // r

    teacher = copy_model(mi_model)
    teacher.set_trainable(gru=False, head=False, encoder=False)
    student = copy_model(mi_model)
    student.set_trainable(gru=True, head=cfg.train_head, encoder=False)
    trainable = student.gru_parameters()
    if cfg.train_head:
        trainable += student.head_parameters()

    opt = Adam(trainable, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for step in range(cfg.budget):
        left, right, _ = sample_batch(dataset, cfg.batch_size, rng)
        corr = teacher.correlation(left, right)       # encoder frozen and shared
        d0 = init_disparity(corr, teacher.cfg.init_mode)
        teacher_rec = teacher.run_trajectory(corr, d0, mi_iters)
        opt.zero_grad()
        with GradTape() as tape:
            student_rec = _student_rollout(student, corr, d0, S,
                                           teacher_rec if cfg.teacher_forcing else None, r)
            total, report = pip_losses(student_rec, teacher_rec, r, teacher.head,
                                       cfg.final_mode)
            tape.backward(total)
        opt.step()
        reports.append(report)
        if log is not None and (step % 25 == 0 or step == cfg.budget - 1):
            log(f"stage S={S} step {step:5d}  cum {report.loss_cum:.5f}  "
                f"final {report.loss_final:.5f}  hid {report.loss_hid:.5f}")
    return student, reports


def prune_progressive(model: RefineModel, schedule: PruneSchedule, dataset,
                      heldout=None, train_head: bool = False,
                      teacher_forcing: bool = False, log=None) -> list[StageResult]:
    """Chain prune stages, each stage's student becoming the next teacher.

    With a held-out set, also evaluates the original model truncated to each
    stage's iteration count as the no-finetuning control.
    """
    results = []
    current = model
    iters = schedule.t0
    for stage, s_iters in enumerate(schedule.stage_iters()):
        cfg = StageConfig(budget=schedule.steps_per_stage, lr=schedule.lr,
                          batch_size=schedule.batch_size, train_head=train_head,
                          teacher_forcing=teacher_forcing,
                          final_mode=schedule.final_mode,
                          seed=schedule.seed + 1000 * (stage + 1))
        student, reports = prune_stage(current, iters, dataset, schedule.ratio, cfg, log=log)
        iters = s_iters
        res = StageResult(model=student, iters=iters, reports=reports)
        if heldout is not None:
            res.epe_heldout = evaluate_epe(student, heldout, iters)
            res.epe_truncated = evaluate_epe(model, heldout, iters)
            if log is not None:
                log(f"stage S={iters}: heldout EPE {res.epe_heldout:.4f} "
                    f"(truncated baseline {res.epe_truncated:.4f})")
        results.append(res)
        current = student
    return results
