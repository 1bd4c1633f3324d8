import numpy as np
import pytest

from mreq.distill import (
    DistillPlan, fld_loss, hsr_loss, post_train, student_from_teacher, total_loss, validate_plan,
)
from mreq.errors import ConfigurationError
from mreq.metrics import codebook_perplexity, usage_histogram
from mreq.mrvq import LrvqTrace, config_from_table, mrvq_kmeans_init
from mreq.numerics import FeatureMap, checksum, finite_diff_check
from mreq.teacher import build_nac, pad_signal, run_encoder, teacher_prefixes
from mreq.vq import Freeze, StOutput

CFG = config_from_table("default")


def fm(data):
    return FeatureMap(np.asarray(data, dtype=float), 48)


def small_teacher(seed=0):
    return build_nac(strides=(10, 5), hidden=4, d=4, L=8, V=8, rng=np.random.default_rng(seed))


def ready_student(teacher, seed=0):
    """Student with codebooks k-means initialised on 2 s of noise."""
    rng = np.random.default_rng(seed)
    student = student_from_teacher(teacher, CFG, rng=rng)
    x0 = run_encoder(student.encoder, rng.normal(size=4800), student.sample_rate).out
    mrvq_kmeans_init(student.mrvq, x0, 3, rng)
    return student


class TestPlan:
    def test_defaults(self):
        plan = DistillPlan()
        assert plan.pairs == ((1, 1), (2, 3), (3, 5), (4, 8))
        assert plan.fld_weights == (8, 6, 4, 2) and plan.hsr_weights == (8, 6, 4, 2)
        assert plan.lr == 0.01
        assert DistillPlan.for_config(CFG).pairs == plan.pairs
        validate_plan(plan, CFG, 8)

    def test_rejects_bad_pair(self):
        with pytest.raises(ConfigurationError):
            validate_plan(DistillPlan(pairs=((1, 1), (2, 4), (3, 5), (4, 8))), CFG, 8)
        with pytest.raises(ConfigurationError):
            validate_plan(DistillPlan(pairs=((1, 1), (2, 3), (3, 5), (5, 8))), CFG, 8)

    @pytest.mark.parametrize("name", ["two-level", "three-level", "with-4hz", "half-beta"])
    def test_for_config_is_valid(self, name):
        cfg = config_from_table(name)
        validate_plan(DistillPlan.for_config(cfg), cfg, 8)


class TestFld:
    def test_identical_is_zero(self):
        ps = [fm(np.random.default_rng(i).normal(size=(2, 3))) for i in range(8)]
        partials = [ps[0], ps[2], ps[4], ps[7]]
        assert fld_loss(partials, ps, DistillPlan())[0] == 0.0

    def test_single_pair(self):
        plan = DistillPlan(pairs=((1, 1),), fld_weights=(8.0,))
        assert fld_loss([fm([[0.5, -0.5]])], [fm([[0.0, 0.0]])], plan)[0] == 4.0

    def test_default_plan_hand_sum(self):
        rng = np.random.default_rng(0)
        partials = [fm(rng.normal(size=(3, 4))) for _ in range(4)]
        prefixes = [fm(rng.normal(size=(3, 4))) for _ in range(8)]
        value, grads = fld_loss(partials, prefixes, DistillPlan())
        expected = 0.0
        for (s, t), w in zip([(1, 1), (2, 3), (3, 5), (4, 8)], [8, 6, 4, 2]):
            a, b = partials[s - 1].data, prefixes[t - 1].data
            expected += w * sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(4)) / 12
        assert value == pytest.approx(expected, rel=1e-14)
        assert np.array_equal(grads[1], 6 * np.sign(partials[1].data - prefixes[2].data) / 12)

    def test_two_frame_hand_example(self):
        # d=1, two frames; student partial sums vs teacher prefixes
        partials = [fm([[1.0, 2.0]]), fm([[1.5, 2.0]])]
        prefixes = [fm([[1.0, 1.0]]), fm([[1.0, 2.5]])]
        plan = DistillPlan(pairs=((1, 1), (2, 2)), fld_weights=(8.0, 6.0))
        # 8 * (0 + 1)/2 + 6 * (0.5 + 0.5)/2 = 4 + 3
        assert fld_loss(partials, prefixes, plan)[0] == 7.0

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            fld_loss([fm([[0.0]])], [fm([[0.0]])], DistillPlan(pairs=((1, 2),), fld_weights=(1.0,)))


def _trace(a, u):
    a = np.asarray(a, float)
    st = StOutput([], a, 0.0, np.zeros_like(a), [])
    tr = LrvqTrace(a, st)
    if u is not None:
        tr.u = np.asarray(u, float)
        tr.c = st
        tr.a_target = a
    return tr


class TestHsr:
    def test_perfect_is_zero(self):
        assert hsr_loss([_trace([[1.0, 2.0]], [[1.0, 2.0]])], [8.0])[0] == 0.0

    def test_hand_value(self):
        assert hsr_loss([_trace([[0.0, 0.0, 1.0]], [[0.25, -0.25, 1.25]])], [8.0])[0] == 2.0

    def test_target_side_is_detached(self):
        _, grads = hsr_loss([_trace([[1.0, -1.0]], [[0.0, 0.0]])], [2.0])
        g_a, g_u = grads[0]
        assert not g_a.any()
        assert g_u.tolist() == [[-1.0, 1.0]]

    def test_degenerate_contributes_nothing(self):
        value, grads = hsr_loss([_trace([[1.0]], [[0.0]]), _trace([[5.0]], None)], [1.0, 100.0])
        assert value == 1.0 and grads[1] == (None, None)


class TestTotalLoss:
    def test_decomposition_and_ablation(self):
        teacher = small_teacher()
        samples = np.random.default_rng(1).normal(size=400)
        student = ready_student(teacher)
        prefixes = teacher_prefixes(teacher, samples)
        parts = total_loss(student, prefixes, samples, DistillPlan())
        assert abs(parts.total - (parts.nac + parts.fld + parts.hsr)) <= 1e-12 * parts.total
        assert parts.nac == parts.recon + 0.25 * parts.commit
        off = total_loss(student, prefixes, samples, DistillPlan(fld_weights=(0,) * 4, hsr_weights=(0,) * 4))
        assert off.total == off.nac and off.fld == 0.0 and off.hsr == 0.0

    def test_zero_batch_zero_nac(self):
        teacher = small_teacher()
        student = ready_student(teacher)
        for stack in student.mrvq.stacks():
            for cb in stack.layers:
                cb.vectors[0] = 0.0
        samples = np.zeros(100)
        parts = total_loss(student, teacher_prefixes(teacher, samples), samples, DistillPlan())
        assert parts.nac == 0.0

    def test_every_parameter_group_gets_gradient(self):
        teacher = small_teacher()
        samples = np.random.default_rng(2).normal(size=800)
        student = ready_student(teacher)
        for m in student.maps():
            m.zero_grad()
        total_loss(student, teacher_prefixes(teacher, samples), samples, DistillPlan())
        for i, m in enumerate(student.maps()):
            assert np.abs(m.grad_weights).sum() > 0, f"map {i} got no gradient"

    def test_gradient_matches_finite_differences(self):
        teacher = small_teacher(3)
        rng = np.random.default_rng(3)
        samples = rng.normal(size=300)
        student = ready_student(teacher, 3)
        prefixes = teacher_prefixes(teacher, samples)
        plan = DistillPlan()
        freeze = Freeze()
        total_loss(student, prefixes, samples, plan, freeze)
        freeze.replay = True
        maps = student.maps()

        def f():
            for m in maps:
                m.zero_grad()
            return total_loss(student, prefixes, samples, plan, freeze).total, [g for m in maps for g in m.grads()]

        params = [p for m in maps for p in m.params()]
        assert finite_diff_check(f, params, eps=1e-6, max_coords=5, rng=rng) < 1e-4


class TestPostTrain:
    def test_zero_steps_copies_teacher(self, desk_corpus):
        teacher = small_teacher()
        student, trace = post_train(teacher, CFG, DistillPlan(steps=0), desk_corpus[:2])
        assert checksum([p for m in student.encoder + student.decoder for p in m.params()]) == \
            checksum([p for m in teacher.encoder + teacher.decoder for p in m.params()])
        assert trace.init == "copy" and trace.total == []

    def test_from_scratch_flag(self, desk_corpus):
        teacher = small_teacher()
        student, trace = post_train(teacher, CFG, DistillPlan(steps=3, from_scratch=True), desk_corpus[:4])
        assert trace.init == "scratch"
        assert not np.array_equal(student.encoder[0].weights, teacher.encoder[0].weights)

    def test_short_run_is_deterministic_and_leaves_teacher(self, desk_corpus):
        teacher = small_teacher()
        before = teacher.checksum()
        a, _ = post_train(teacher, CFG, DistillPlan(steps=5), desk_corpus[:8])
        b, _ = post_train(teacher, CFG, DistillPlan(steps=5), desk_corpus[:8])
        assert a.checksum() == b.checksum()
        assert teacher.checksum() == before

    def test_empty_corpus(self):
        with pytest.raises(ConfigurationError):
            post_train(small_teacher(), CFG, DistillPlan(steps=1), [])

    def test_trained_run(self, distilled, held_out):
        trace = distilled["trace"]
        for name in ("total", "nac", "fld", "hsr"):
            assert all(np.isfinite(getattr(trace, name)))
        assert np.mean(trace.total[-50:]) < trace.total[0]
        assert distilled["teacher_before"] == distilled["teacher_after"]
        student = distilled["student"]
        x = np.concatenate([pad_signal(student, s) for s in held_out])
        from mreq.mrvq import mrvq_forward
        out = mrvq_forward(student.mrvq, run_encoder(student.encoder, x, 2400).out)
        ids = np.concatenate([r.ids for r in out.codes[0].b])
        assert codebook_perplexity(usage_histogram(ids, 64)) >= 4
