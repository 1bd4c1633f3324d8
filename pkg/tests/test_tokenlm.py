import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mreq.errors import ConfigurationError, CorruptTokenError
from mreq.mrvq import build_mrvq, config_from_table, mrvq_forward, mrvq_kmeans_init, rvq_config, transmitted
from mreq.numerics import FeatureMap, checksum
from mreq.tokenlm import (
    Conditioning, CountPredictor, DelayedGrid, OraclePredictor, Predictor, TokenGrid, apply_delay, ar_generate,
    ar_steps, layer_id, nar_refine_all, nar_step, remove_delay,
)

ALPHAS = (1, 2, 2, 3)


def module(name="default", V=16, d=4, seed=0):
    rng = np.random.default_rng(seed)
    m = build_mrvq(config_from_table(name), V, d, rng)
    mrvq_kmeans_init(m, FeatureMap(rng.normal(size=(d, 480)), 48), 5, rng)
    return m


def encoded(m, n=96, seed=1):
    return mrvq_forward(m, FeatureMap(np.random.default_rng(seed).normal(size=(m.d, n)), 48))


class TestDelay:
    def test_beta_one_identity(self):
        g = TokenGrid(np.array([[3, 1, 4]]), 8)
        dg = apply_delay(g, 16)
        assert dg.rows.tolist() == [[3, 1, 4]]
        assert remove_delay(dg) == g

    def test_hand_example(self):
        P = 9
        g = TokenGrid(np.array([[1, 2], [3, 4], [5, 6]]), 8)
        assert apply_delay(g, P).rows.tolist() == [[1, 2, P, P], [P, 3, 4, P], [P, P, 5, 6]]

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 30), st.integers(0, 2**31))
    def test_roundtrip(self, beta, n, seed):
        rows = np.random.default_rng(seed).integers(0, 16, size=(beta, n))
        g = TokenGrid(rows, 8)
        dg = apply_delay(g, 16)
        assert dg.rows.shape == (beta, n + beta - 1 if n else 0) or n == 0
        assert remove_delay(dg) == g

    def test_misplaced_pad(self):
        dg = apply_delay(TokenGrid(np.array([[1, 2], [3, 4]]), 8), 16)
        dg.rows[0, 1] = 16
        with pytest.raises(CorruptTokenError):
            remove_delay(dg)
        dg = apply_delay(TokenGrid(np.array([[1, 2], [3, 4]]), 8), 16)
        dg.rows[1, 0] = 5
        with pytest.raises(CorruptTokenError):
            remove_delay(dg)


class TestLayerId:
    def test_examples(self):
        assert layer_id(2, 1, ALPHAS) == 2
        assert layer_id(4, 3, ALPHAS) == 8
        assert [layer_id(4, l, ALPHAS) for l in (1, 2, 3)] == [6, 7, 8]

    def test_out_of_range(self):
        with pytest.raises(ConfigurationError):
            layer_id(2, 3, ALPHAS)
        with pytest.raises(ConfigurationError):
            layer_id(5, 1, ALPHAS)


class TestArGenerate:
    def test_oracle_reproduces_truth(self):
        m = module()
        out = encoded(m)
        truth = TokenGrid.from_rows(out.codes[0].b)
        got = ar_generate(OraclePredictor.from_forward(m, out), Conditioning(), truth.n, 6, 8)
        assert got == truth

    def test_90_seconds_budget(self):
        rows = np.random.default_rng(0).integers(0, 16, size=(6, 720))
        truth = TokenGrid(rows, 8)
        pred = OraclePredictor(16, truth, {})
        from mreq.tokenlm import ArStats
        stats = ArStats()
        got = ar_generate(pred, Conditioning(), 720, 6, 8, stats=stats)
        assert got.rows.shape == (6, 720) and got == truth
        assert stats.steps == ar_steps(720, 6) == 725

    def test_count_predictor_repeating_grid(self):
        rng = np.random.default_rng(3)
        period = rng.integers(0, 16, size=(3, 5))
        grid = TokenGrid(np.tile(period, 6), 8)
        pred = CountPredictor(16).fit_ar([grid])
        assert ar_generate(pred, Conditioning(), grid.n, 3, 8) == grid

    def test_prompt_excluded_from_output(self):
        rows = np.random.default_rng(4).integers(0, 16, size=(2, 12))
        prompt = TokenGrid(rows[:, :4], 8)
        rest = TokenGrid(rows[:, 4:], 8)
        cond = Conditioning.from_text("hi", prompt=prompt)
        got = ar_generate(OraclePredictor(16, rest, {}), cond, 8, 2, 8)
        assert got == rest

    def test_invalid_id_raises(self):
        class PadPredictor(Predictor):
            V = 4

            def ar_probs(self, cond, prefix):
                p = np.zeros((prefix.shape[0], 5))
                p[:, 4] = 1.0
                return p

        with pytest.raises(CorruptTokenError):
            ar_generate(PadPredictor(), Conditioning(), 3, 2, 8)

    def test_sampling_is_seeded(self):
        rng = np.random.default_rng(5)
        grids = [TokenGrid(rng.integers(0, 8, size=(2, 20)), 8) for _ in range(3)]
        pred = CountPredictor(8).fit_ar(grids)
        a = ar_generate(pred, Conditioning(), 15, 2, 8, greedy=False, temperature=1.3, seed=9)
        b = ar_generate(pred, Conditioning(), 15, 2, 8, greedy=False, temperature=1.3, seed=9)
        assert a == b


class TestNar:
    def test_step_oracle_equivalence(self):
        m = module()
        out = encoded(m)
        pred = OraclePredictor.from_forward(m, out)
        grids = [TokenGrid.from_rows(rows, k) for k, rows in enumerate(transmitted(out.codes), start=1)]
        state = None
        for k in range(1, m.K):
            got, state = nar_step(m, pred, Conditioning(), grids[k - 1], state)
            assert got == grids[k]

    def test_last_step_layer_ids(self):
        m = module()
        out = encoded(m)
        oracle = OraclePredictor.from_forward(m, out)
        seen = []

        class Logging(Predictor):
            V = m.V

            def nar_probs(self, cond, accumulated, prev_ids, layer):
                seen.append(layer)
                return oracle.nar_probs(cond, accumulated, prev_ids, layer)

        res = nar_refine_all(m, Logging(), Conditioning(), TokenGrid.from_rows(out.codes[0].b))
        assert seen == [2, 3, 4, 5, 6, 7, 8]
        assert seen[-3:] == [6, 7, 8]
        assert res.applications == sum(ALPHAS[1:]) == 7

    def test_empty_propagates(self):
        m = module()
        empty = TokenGrid(np.zeros((6, 0), dtype=np.int64), 8, 1)
        got, _ = nar_step(m, CountPredictor(m.V), Conditioning(), empty)
        assert got.n == 0 and got.k == 2 and got.frame_rate == 16

    def test_degenerate_block_rejected(self):
        m = module()
        with pytest.raises(ConfigurationError):
            nar_step(m, CountPredictor(m.V), Conditioning(), TokenGrid(np.zeros((3, 4), dtype=np.int64), 48, 4))

    @pytest.mark.parametrize("name", ["default", "two-level", "three-level", "with-4hz", "half-beta"])
    def test_refine_all_oracle(self, name):
        m = module(name)
        before = checksum(m.arrays())
        out = encoded(m, n=144)
        pred = OraclePredictor.from_forward(m, out)
        res = nar_refine_all(m, pred, Conditioning(), TokenGrid.from_rows(out.codes[0].b))
        assert np.array_equal(res.h.data, out.h.data)
        assert [g.rows.tolist() for g in res.grids] == \
            [[r.ids.tolist() for r in rows] for rows in transmitted(out.codes)]
        assert checksum(m.arrays()) == before

    def test_single_block_module(self):
        rng = np.random.default_rng(0)
        m = build_mrvq(rvq_config(4), 8, 3, rng)
        out = encoded(m, 20)
        res = nar_refine_all(m, CountPredictor(8), Conditioning(), TokenGrid.from_rows(out.codes[0].b))
        assert res.applications == 0
        assert np.array_equal(res.h.data, out.h.data)


class TestPredictorDistributions:
    def test_count_predictor_is_normalised(self):
        m = module()
        outs = [encoded(m, 96, s) for s in range(3)]
        pred = CountPredictor(m.V).fit_ar([TokenGrid.from_rows(o.codes[0].b) for o in outs]).fit_nar(m, outs)
        rng = np.random.default_rng(0)
        for t in range(5):
            p = pred.ar_probs(Conditioning(), rng.integers(0, m.V, size=(6, t)))
            assert p.shape == (6, m.V + 1)
            assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9) and not p[:, m.V].any()
        for layer in range(2, 9):
            p = pred.nar_probs(Conditioning(), None, rng.integers(0, m.V, size=10), layer)
            assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-9) and not p[:, m.V].any()

    def test_generation_cost_law(self):
        for beta in range(1, 7):
            for frames in (1, 10, 720):
                assert ar_steps(frames, beta) - ar_steps(frames - 1, beta) == (1 if frames > 1 else beta)
        assert ar_steps(1440, 6) - ar_steps(720, 6) == 720
        assert (ar_steps(8640, 1) - ar_steps(4320, 1)) == 6 * (ar_steps(1440, 6) - ar_steps(720, 6))


def test_delayed_grid_type():
    dg = DelayedGrid(np.array([[1, 4], [4, 2]]), 4, 8)
    assert remove_delay(dg).rows.tolist() == [[1], [2]]
