import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dacalab import autodiff as ad
from dacalab import credit
from dacalab.credit import DeltaTable
from dacalab.sampler import Snapshot, Trajectory, generate
from conftest import random_ids, tiny_model

V = 4


def hand_trajectory():
    # L = 3, T = 3, stride 1; position 1 born at step 1, position 0 at 2, position 2 at 3
    lp = lambda *vals: np.log(np.array(vals))
    s0 = Snapshot(0, np.array([0, 1, 2]), np.stack([lp(.1, .2, .3, .4), lp(.25, .25, .25, .25), lp(.4, .3, .2, .1)]))
    s1 = Snapshot(1, np.array([0, 2]), np.stack([lp(.1, .1, .1, .7), lp(.5, .2, .2, .1)]))
    s2 = Snapshot(2, np.array([2]), np.stack([lp(.8, .1, .05, .05)]))
    s3 = Snapshot(3, np.zeros(0, dtype=int), np.zeros((0, V)))
    return Trajectory([s0, s1, s2, s3], 1, np.array([2, 1, 3]), 3), np.array([3, 2, 0])


def test_score_and_deltas_hand_computed():
    t, x = hand_trajectory()
    assert credit.score(t, x, 2, 2) == pytest.approx(math.log(.8))
    assert credit.score(t, x, 0, 1) == pytest.approx((math.log(.4) + math.log(.4)) / 2)
    ds = credit.deltas(t, x)
    assert [(a, b) for a, b, _ in ds] == [(0, 1), (1, 2)]
    assert ds[0][2] == pytest.approx((math.log(.7) + math.log(.5)) / 2 - (math.log(.4) + math.log(.4)) / 2)
    assert ds[1][2] == pytest.approx(math.log(.8) - math.log(.5))
    with pytest.raises(ValueError):
        credit.score(t, x, 3, 3)


def test_last_step_modes():
    t, x = hand_trajectory()
    prior = [0.4, 0.7]
    assert credit.last_step_delta("neutral", t, x, prior) == 0.0
    assert credit.last_step_delta("extrapolate", t, x, prior) == 0.7
    assert credit.last_step_delta("mean", t, x, prior) == pytest.approx(0.55)
    assert credit.last_step_delta("raw", t, x, prior) == pytest.approx(math.log(.8))
    assert credit.last_step_delta("extrapolate", t, x, []) == 0.0
    assert credit.last_step_delta("mean", t, x, []) == 0.0
    with pytest.raises(ValueError):
        credit.last_step_delta("bogus", t, x, prior)


def test_measured_mode_costs_one_pass_others_zero(rng):
    m = tiny_model()
    p = random_ids(rng, 3)
    x, (t,) = generate(m, p, 6, 6, 2, rng)
    for mode in credit.LAST_STEP_MODES:
        before = m.counter.snapshot()
        credit.delta_table(t, x[0], mode, m, p)
        g, lp = m.counter.snapshot()
        assert g == before[0]
        assert lp - before[1] == (1 if mode == "measured" else 0)


def test_measured_mode_matches_replay(rng):
    m = tiny_model()
    p = random_ids(rng, 3)
    x, (t,) = generate(m, p, 6, 6, 1, rng)
    with ad.no_grad():
        final = m.log_probs(p, x[0]).data
    last = t.snapshots[-2]
    pos = last.masked_positions
    want = final[pos, x[0][pos]].mean() - credit.score(t, x[0], last.step, last.step)
    assert credit.last_step_delta("measured", t, x[0], None, m, p) == pytest.approx(want, abs=1e-12)


def test_score_matches_model_replay(rng):
    m = tiny_model()
    p = random_ids(rng, 3)
    x, (t,) = generate(m, p, 6, 6, 1, rng, temperature=1.0)
    comp = x[0]
    for snap in t.snapshots[:-1]:
        k = snap.step
        partial = comp.copy()
        partial[snap.masked_positions] = m.mask_id
        with ad.no_grad():
            rows = m.log_probs(p, partial).data
        j = t.snapshots[-2]
        want = rows[j.masked_positions, comp[j.masked_positions]].mean()
        assert credit.score(t, comp, k, j.step) == pytest.approx(want, abs=1e-12)


def test_uniform_model_scores_and_zero_deltas(rng):
    from dacalab.denoiser import Denoiser, DenoiserConfig
    m = Denoiser(DenoiserConfig(vocab_size=4, prompt_len=2, completion_len=5, d_model=8, n_heads=2,
                                n_blocks=1, zero_output=True))
    x, (t,) = generate(m, np.array([0, 2]), 5, 5, 1, rng, temperature=1.0)
    for a, b, d in credit.deltas(t, x[0]):
        assert credit.score(t, x[0], a, b) == pytest.approx(-math.log(4), abs=1e-12)
        assert d == pytest.approx(0.0, abs=1e-12)


def test_windows_cover_births_with_stride(rng):
    m = tiny_model(L=8)
    x, trajs = generate(m, random_ids(rng, (3, 3)), 8, 8, 3, rng, temperature=1.0)
    for t, c in zip(trajs, x):
        table = credit.delta_table(t, c)
        assert table.windows == [(0, 3), (3, 6), (6, 8)]
        idx = table.window_of(t.birth)
        # births 1..3 -> window 0, 4..6 -> 1, 7..8 -> 2
        assert np.array_equal(idx, (t.birth - 1) // 3)
        with pytest.raises(RuntimeError):
            table.window_of(np.array([9]))


def test_stride_window_tokens_share_weight(rng):
    m = tiny_model(L=8)
    x, trajs = generate(m, random_ids(rng, (2, 3)), 8, 8, 4, rng, temperature=1.0)
    tables = [credit.delta_table(t, c) for t, c in zip(trajs, x)]
    zs = credit.normalize(tables, "trajectory")
    at, om, _ = credit.token_weights(1.5, zs[0], tables[0], trajs[0].birth, 0.3)
    idx = tables[0].window_of(trajs[0].birth)
    for w in set(idx.tolist()):
        assert len(set(at[idx == w].tolist())) == 1


def table(deltas, starts=None):
    starts = starts if starts is not None else list(range(len(deltas)))
    return DeltaTable([(s, s + 1) for s in starts], np.array(deltas, dtype=float))


def test_per_step_hand_example():
    ts = [table([0.1]), table([0.3]), table([0.5])]
    z = credit.normalize(ts, "per-step")
    assert [round(float(v[0]), 4) for v in z] == [-1.2247, 0.0, 1.2247]


def test_equal_deltas_give_zero_and_none_is_identity():
    ts = [table([0.2, 0.1]), table([0.2, 0.5])]
    z = credit.normalize(ts, "per-step")
    assert z[0][0] == 0.0 and z[1][0] == 0.0
    z = credit.normalize([table([0.2, -0.4])], "none")
    assert z[0].tolist() == [0.2, -0.4]


def test_trajectory_and_group_modes():
    ts = [table([1.0, 2.0, 3.0]), table([0.0, 0.0, 6.0])]
    z = credit.normalize(ts, "trajectory")
    for zz in z:
        assert zz.mean() == pytest.approx(0, abs=1e-12) and zz.std() == pytest.approx(1, abs=1e-5)
    z = credit.normalize(ts, "group")
    flat = np.concatenate(z)
    assert flat.mean() == pytest.approx(0, abs=1e-12) and flat.std() == pytest.approx(1, abs=1e-6)


def test_per_step_group_scope():
    ts = [table([0.0]), table([1.0]), table([10.0]), table([30.0])]
    z = credit.normalize(ts, "per-step", groups=[0, 0, 1, 1])
    assert [float(v[0]) for v in z] == [-1.0, 1.0, -1.0, 1.0]


def test_additive_epsilon_mode():
    ts = [table([0.1]), table([0.3]), table([0.5])]
    z = credit.normalize(ts, "per-step", eps=0.1, eps_mode="additive")
    sd = np.std([0.1, 0.3, 0.5])
    assert z[2][0] == pytest.approx(0.2 / (sd + 0.1))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), B=st.integers(2, 12), n=st.integers(1, 6))
def test_per_step_invariant_property(seed, B, n):
    r = np.random.default_rng(seed)
    ts = []
    for _ in range(B):
        # ragged tables: each sample records a random prefix of the steps
        k = int(r.integers(1, n + 1))
        ts.append(table(r.normal(size=k) * r.uniform(0.01, 3)))
    z = credit.normalize(ts, "per-step")
    for step in range(n):
        vals = [zz[step] for zz, t in zip(z, ts) if len(t.delta) > step]
        raw = [t.delta[step] for t in ts if len(t.delta) > step]
        if len(vals) >= 2 and np.std(raw) > credit.EPS_NORM:
            assert abs(np.mean(vals)) <= 1e-9
            assert abs(np.std(vals) - 1) <= 1e-6


def test_token_weights_examples():
    t = DeltaTable([(0, 1)], np.array([0.0]))
    at, om, n = credit.token_weights(2.0, np.array([1.5]), t, np.array([1, 1]), 0.1)
    assert at.tolist() == pytest.approx([2.3, 2.3]) and n == 0
    at, om, n = credit.token_weights(-1.7, np.array([0.8]), t, np.array([1]), 0.0)
    assert at[0] == -1.7 and om[0] == 1.0
    at, om, n = credit.token_weights(1.0, np.array([-20.0]), t, np.array([1]), 0.1)
    assert om[0] == 0.0 and n == 1
    with pytest.raises(ValueError):
        credit.token_weights(1.0, np.array([0.0]), t, np.array([1]), -0.1)


@settings(max_examples=200, deadline=None)
@given(A=st.floats(-5, 5, allow_nan=False), lam=st.floats(0, 1),
       z=st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=6))
def test_sign_preservation(A, lam, z):
    t = DeltaTable([(i, i + 1) for i in range(len(z))], np.zeros(len(z)))
    birth = np.arange(1, len(z) + 1)
    at, om, _ = credit.token_weights(A, np.array(z), t, birth, lam)
    assert np.all(om >= 0)
    assert np.all(np.sign(at) * np.sign(A) >= 0)


def test_credit_csv(tmp_path, rng):
    m = tiny_model()
    x, trajs = generate(m, random_ids(rng, (2, 3)), 6, 6, 2, rng)
    tables = [credit.delta_table(t, c) for t, c in zip(trajs, x)]
    credit.normalize(tables)
    path = tmp_path / "credit.csv"
    credit.write_credit_csv(path, tables, [t.birth for t in trajs])
    lines = path.read_text().splitlines()
    assert lines[0] == "sample,window_start,window_end,delta,delta_z,n_tokens_born"
    rows = [ln.split(",") for ln in lines[1:]]
    assert sum(int(r[-1]) for r in rows) == 12
