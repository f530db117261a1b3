import numpy as np
import pytest

from flashpip.dataio import make_dataset
from flashpip.model import ModelConfig, RefineModel, TrajectoryRecord
from flashpip.pip import (PruneSchedule, StageConfig, block_aggregate,
                          copy_model, loss_cum, loss_final, loss_hid, pip_losses,
                          prune_progressive, prune_stage)
from flashpip.tensor import GradTape, Tensor

from oracles import check_gradients


def t(vals, shape=None):
    arr = np.asarray(vals, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return Tensor(arr)


def scalar_list(vals):
    """Each value as a [1,1,1,1] map so batch reduction is by 1."""
    return [t([v], (1, 1, 1, 1)) for v in vals]


class TestBlockAggregate:
    def test_r1_identity(self):
        deltas = scalar_list([1.0, 2.0, 3.0])
        blocks = block_aggregate(deltas, r=1)
        assert [b.item() for b in blocks] == [1.0, 2.0, 3.0]

    def test_hand_means(self):
        blocks = block_aggregate(scalar_list([1.0, 3.0, 5.0, 7.0]), r=2)
        assert [b.item() for b in blocks] == [2.0, 6.0]

    def test_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            block_aggregate(scalar_list([1.0, 2.0, 3.0]), r=2)

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(0)
        deltas = [Tensor(rng.standard_normal((2, 1, 3, 4)).astype(np.float32))
                  for _ in range(6)]
        blocks = block_aggregate(deltas, r=2)
        for s in range(3):
            want = (deltas[2 * s].data.astype(np.float64)
                    + deltas[2 * s + 1].data.astype(np.float64)) / 2
            np.testing.assert_allclose(blocks[s].data, want, rtol=0, atol=1e-6)

    def test_accepts_trajectory_record(self):
        rec = TrajectoryRecord(T=2)
        rec.deltas = scalar_list([2.0, 4.0])
        assert [b.item() for b in block_aggregate(rec, 2)] == [3.0]


class TestLosses:
    def test_cum_identical_is_zero(self):
        d = scalar_list([0.5, -1.0])
        assert loss_cum(d, d).item() == 0.0

    def test_cum_hand_case(self):
        # prefix sums: student 1,2 teacher 1,3 -> 0 + 1
        student = scalar_list([1.0, 1.0])
        teacher = scalar_list([1.0, 2.0])
        assert loss_cum(student, teacher).item() == 1.0

    def test_cum_random_vs_prefix_oracle(self):
        rng = np.random.default_rng(1)
        student = [Tensor(rng.standard_normal((2, 1, 2, 3)).astype(np.float32)) for _ in range(4)]
        teacher = [Tensor(rng.standard_normal((2, 1, 2, 3)).astype(np.float32)) for _ in range(4)]
        got = loss_cum(student, teacher).item()
        want = 0.0
        ps = np.zeros((2, 1, 2, 3))
        pt = np.zeros((2, 1, 2, 3))
        for s_, t_ in zip(student, teacher):
            ps = ps + s_.data
            pt = pt + t_.data
            want += ((ps - pt) ** 2).sum() / 2
        assert abs(got - want) < 1e-4

    def test_cum_length_mismatch(self):
        with pytest.raises(ValueError, match="loss_cum"):
            loss_cum(scalar_list([1.0]), scalar_list([1.0, 2.0]))

    def test_hid_zero_when_copied(self):
        rng = np.random.default_rng(2)
        teacher = [Tensor(rng.standard_normal((1, 2, 2, 2)).astype(np.float32))
                   for _ in range(5)]
        student = [teacher[2], teacher[4]]
        assert loss_hid(student, teacher, r=2).item() == 0.0

    def test_hid_hand_case(self):
        teacher = scalar_list([0.0, 0.0, 4.0])
        student = scalar_list([1.0])
        assert loss_hid(student, teacher, r=2).item() == 9.0

    def test_hid_index_overflow(self):
        with pytest.raises(ValueError, match="loss_hid"):
            loss_hid(scalar_list([1.0, 2.0]), scalar_list([0.0, 1.0, 2.0]), r=2)

    def test_final_modes(self):
        rng = np.random.default_rng(3)
        head = __import__("flashpip.model", fromlist=["HeadParams"]).HeadParams(
            2, np.random.default_rng(0))
        hidden = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
        from flashpip.model import disparity_head
        target = disparity_head(head, hidden)
        assert loss_final(target, hidden, head).item() == pytest.approx(0.0, abs=1e-10)
        off = Tensor(target.data + 1.0)
        # 3x3 map of ones, batch 1 -> sum of squares = 9
        assert loss_final(off, hidden, head).item() == pytest.approx(9.0, rel=1e-5)


class TestPipLosses:
    def make_records(self, seed=0, T=4, r=2, B=2, ch=3, H=2, W=3):
        rng = np.random.default_rng(seed)

        def maps(n, c):
            return [Tensor(rng.standard_normal((B, c, H, W)).astype(np.float32))
                    for _ in range(n)]

        teacher = TrajectoryRecord(T=T)
        teacher.hidden_states = maps(T + 1, ch)
        teacher.deltas = maps(T, 1)
        teacher.disparities = maps(T + 1, 1)
        student = TrajectoryRecord(T=T // r)
        student.hidden_states = maps(T // r + 1, ch)
        student.deltas = maps(T // r, 1)
        student.disparities = maps(T // r + 1, 1)
        return student, teacher

    def test_total_is_sum_of_components(self):
        from flashpip.model import HeadParams
        student, teacher = self.make_records()
        head = HeadParams(3, np.random.default_rng(1))
        for mode in ("accumulated", "delta"):
            total, rep = pip_losses(student, teacher, 2, head, final_mode=mode)
            assert rep.total == pytest.approx(rep.loss_cum + rep.loss_final + rep.loss_hid,
                                              rel=1e-12)
            assert total.item() == rep.total
            assert min(rep.loss_cum, rep.loss_final, rep.loss_hid) >= 0.0

    def test_skip_step_optimum_is_zero(self):
        # student hiddens copied from the teacher's coarse grid, deltas equal to
        # block means, matching final disparity: every component is exactly 0
        from flashpip.model import HeadParams
        rng = np.random.default_rng(4)
        head = HeadParams(3, np.random.default_rng(1))
        T, r = 4, 2
        teacher = TrajectoryRecord(T=T)
        teacher.hidden_states = [Tensor(rng.standard_normal((1, 3, 2, 2)).astype(np.float32))
                                 for _ in range(T + 1)]
        teacher.deltas = [Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
                          for _ in range(T)]
        teacher.disparities = [Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
                               for _ in range(T + 1)]
        student = TrajectoryRecord(T=T // r)
        student.hidden_states = [teacher.hidden_states[0]] + \
            [teacher.hidden_states[r * s] for s in range(1, T // r + 1)]
        student.deltas = [b.detach() for b in block_aggregate(teacher, r)]
        student.disparities = [teacher.disparities[0], Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32)),
                               teacher.disparities[-1]]
        total, rep = pip_losses(student, teacher, r, head, final_mode="accumulated")
        assert rep.loss_cum == 0.0
        assert rep.loss_hid == 0.0
        assert rep.loss_final == 0.0
        assert total.item() == 0.0

    def test_gradients_full_loss_2x2(self):
        # full distillation loss through a real student rollout on a 2x2 map
        from flashpip import pip as pip_mod
        cfg = ModelConfig(feat_channels=3, hidden_channels=4, kernel_size=3,
                          d_max=1, lookup_radius=1)
        teacher = RefineModel(cfg, seed=0)
        student = copy_model(teacher)
        for p in teacher.parameters():
            p.data = p.data.astype(np.float64)
        for p in student.parameters():
            p.data = p.data.astype(np.float64)
        teacher.set_trainable(gru=False, head=False, encoder=False)
        student.set_trainable(gru=True, head=False, encoder=False)
        rng = np.random.default_rng(5)
        left = Tensor(rng.uniform(0, 1, (1, 1, 2, 2)), dtype=np.float64)
        right = Tensor(rng.uniform(0, 1, (1, 1, 2, 2)), dtype=np.float64)

        def build():
            from flashpip.model import init_disparity
            corr = teacher.correlation(left, right)
            d0 = init_disparity(corr)
            teacher_rec = teacher.run_trajectory(corr, d0, 4)
            student_rec = pip_mod._student_rollout(student, corr, d0, 2, None, 2)
            total, _ = pip_losses(student_rec, teacher_rec, 2, teacher.head)
            return total

        params = student.gru.named()
        assert check_gradients(build, params) is None


class TestSchedule:
    def test_validation(self):
        with pytest.raises(ValueError, match="ratio"):
            PruneSchedule(t0=8, ratio=1, stages=2)
        with pytest.raises(ValueError, match="divisible"):
            PruneSchedule(t0=8, ratio=2, stages=4)

    def test_stage_iters(self):
        assert PruneSchedule(t0=8, ratio=2, stages=3).stage_iters() == [4, 2, 1]


def tiny_setup():
    cfg = ModelConfig(feat_channels=3, hidden_channels=4, kernel_size=3,
                      d_max=4, lookup_radius=1)
    model = RefineModel(cfg, seed=1)
    data = make_dataset(range(4), H=32, W=32, d_max=4, n_layers=2)
    return model, data


class TestPruneStage:
    def test_budget_zero_rejected(self):
        model, data = tiny_setup()
        with pytest.raises(ValueError, match="budget"):
            prune_stage(model, 4, data, 2, StageConfig(budget=0))

    def test_divisibility(self):
        model, data = tiny_setup()
        with pytest.raises(ValueError, match="divisible"):
            prune_stage(model, 5, data, 2, StageConfig(budget=1))

    def test_non_gru_params_frozen_bitwise(self):
        model, data = tiny_setup()
        student, reports = prune_stage(model, 4, data, 2,
                                       StageConfig(budget=1, batch_size=2))
        assert len(reports) == 1
        for name, p in model.named_parameters().items():
            p2 = student.named_parameters()[name]
            if name.startswith("gru."):
                continue
            assert p.data.tobytes() == p2.data.tobytes(), name
        changed = any(model.named_parameters()[n].data.tobytes() != q.data.tobytes()
                      for n, q in student.gru.named().items())
        assert changed

    def test_identity_dynamics_converges(self):
        # closed update gate makes F(z)=z exactly; zero head makes the output
        # mapping linear; the student starts at the optimum and must stay there
        model, data = tiny_setup()
        model.gru.bu.data[:] = -200.0
        model.head.w2.data[:] = 0.0
        model.head.b2.data[:] = 0.0
        student, reports = prune_stage(model, 4, data, 2,
                                       StageConfig(budget=8, batch_size=2, lr=1e-3))
        assert reports[-1].total < 1e-6

    def test_training_reduces_loss_from_perturbed_start(self):
        from flashpip import pip as pip_mod
        from flashpip.model import init_disparity
        from flashpip.tensor import Adam
        model, data = tiny_setup()
        model.gru.bu.data[:] = -200.0
        model.head.w2.data[:] = 0.0
        model.head.b2.data[:] = 0.0
        teacher = copy_model(model)
        teacher.set_trainable(gru=False, head=False, encoder=False)
        student = copy_model(model)
        rng = np.random.default_rng(3)
        student.gru.bu.data[:] = -1.0   # reopen the gate: trajectory now moves
        student.set_trainable(gru=True, head=False, encoder=False)
        opt = Adam(student.gru_parameters(), 5e-2)
        from flashpip.dataio import stack_samples
        left, right, _ = stack_samples(data[:2])
        first = last = None
        for step in range(30):
            corr = teacher.correlation(left, right)
            d0 = init_disparity(corr)
            teacher_rec = teacher.run_trajectory(corr, d0, 4)
            opt.zero_grad()
            with GradTape() as tape:
                student_rec = pip_mod._student_rollout(student, corr, d0, 2, None, 2)
                total, rep = pip_losses(student_rec, teacher_rec, 2, teacher.head)
                tape.backward(total)
            opt.step()
            if first is None:
                first = rep.total
            last = rep.total
        assert first > 1e-4
        assert last < first * 0.1


class TestProgressive:
    def test_schedule_arithmetic_and_chain(self):
        model, data = tiny_setup()
        sched = PruneSchedule(t0=4, ratio=2, stages=2, steps_per_stage=1,
                              batch_size=2, lr=1e-4)
        results = prune_progressive(model, sched, data, heldout=data[:2])
        assert [r.iters for r in results] == [2, 1]
        for r in results:
            assert r.epe_heldout is not None and r.epe_truncated is not None
            assert len(r.reports) == 1

    def test_single_stage_equals_prune_stage(self):
        model, data = tiny_setup()
        sched = PruneSchedule(t0=4, ratio=2, stages=1, steps_per_stage=2,
                              batch_size=2, lr=1e-4, seed=5)
        results = prune_progressive(model, sched, data)
        direct, _ = prune_stage(model, 4, data, 2,
                                StageConfig(budget=2, batch_size=2, lr=1e-4,
                                            seed=5 + 1000))
        for name, p in results[0].model.named_parameters().items():
            assert p.data.tobytes() == direct.named_parameters()[name].data.tobytes(), name
