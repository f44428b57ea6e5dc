"""Acceptance criteria, one test each, at the stated tolerances.

Each test records a one-line verdict; the lines are printed together at the
end of the session (see ``pytest_terminal_summary`` in conftest).
"""
import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dacalab import autodiff as ad
from dacalab import credit, likelihood as lk, objective as obj, sampler, trainer
from dacalab.autodiff import Tensor
from dacalab.denoiser import Denoiser, DenoiserConfig
from conftest import random_ids, tiny_model

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


def test_01_limiting_case_identities():
    t0 = time.perf_counter()
    worst1 = worstL = 0.0
    for seed in range(5):
        r = np.random.default_rng(seed)
        m = tiny_model(seed=seed)
        p, c = random_ids(r, 3), random_ids(r, 6)
        with ad.no_grad():
            mf = lk.mean_field_per_token(m, p, c).data
            k1 = lk.sml_per_token(m, p, c, lk.partition_strata(6, 1, "random", r)).data
            kl = lk.sml_per_token(m, p, c, lk.partition_strata(6, 6, "random", r)).data
        worst1 = max(worst1, float(np.abs(k1 - mf).max()))
        worstL = max(worstL, float(np.abs(kl - lk.pseudo_loglik_naive(m, p, c)).max()))
    dt = time.perf_counter() - t0
    verdict(1, worst1 <= 1e-12 and worstL <= 1e-12 and dt < 1.0,
            f"K=1 vs mean-field {worst1:.1e}, K=L vs leave-one-out {worstL:.1e}, {dt:.2f}s")


def test_02_trust_region_anchors():
    r = np.random.default_rng(0)
    m = tiny_model()
    old = m.frozen_copy()
    p, c = random_ids(r, (4, 3)), random_ids(r, (4, 6))
    parts = [lk.partition_strata(6, 3, "random", r) for _ in range(4)]
    pm = lk.draw_prompt_mask(p.shape, 0.15, r)
    with ad.no_grad():
        mf_old = lk.mean_field_per_token(old, p, c, pm).data
        en_old = lk.enriched_token_loglik(old, p, c, parts, pm).data
    rho = lk.token_ratio(lk.mean_field_per_token(m, p, c, pm), mf_old)
    rho_sml = lk.sml_ratio(lk.enriched_token_loglik(m, p, c, parts, pm), en_old)
    A = obj.batch_advantages(r.normal(size=4), 2)
    at = A[:, None] * np.exp(r.normal(scale=0.1, size=(4, 6)))
    d1 = obj.loss_d1(rho, at)[0].item()
    dr = obj.loss_daca_ratio(rho_sml, at)[0].item()
    exact = bool(np.all(rho.data == 1.0) and np.all(rho_sml.data == 1.0))
    e1, e2 = abs(d1 + at.mean()), abs(dr + at.mean())
    verdict(2, exact and e1 <= 1e-9 and e2 <= 1e-9,
            f"ratios exactly 1: {exact}; |loss + mean(adv)| d1 {e1:.1e}, daca {e2:.1e}")


def test_03_baseline_recovery():
    mismatches = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        m = tiny_model(seed=seed)
        old = m.frozen_copy()
        for q in old.params.values():
            q.data += r.normal(scale=0.02, size=q.data.shape)
        p, c = random_ids(r, (4, 3)), random_ids(r, (4, 6))
        A = obj.batch_advantages(r.uniform(0, 1, size=4), 2)
        z = r.normal(size=6)
        table = credit.DeltaTable([(k, k + 1) for k in range(6)], np.zeros(6))
        at, om, _ = credit.token_weights(1.0, z, table, np.arange(1, 7), lam=0.0)
        omega = np.tile(om, (4, 1))
        token_adv = A[:, None] * omega
        parts = [lk.partition_strata(6, 2, "random", r) for _ in range(4)]
        tok = lk.mean_field_per_token(m, p, c)
        base_wd1 = obj.loss_wd1(tok, A, 2).item()
        daca_wd1 = obj.loss_daca_wd1(tok, A, 2, omega, lk.sml_loglik(m, p, c, parts), eta=0.0).item()
        with ad.no_grad():
            old_tok = lk.mean_field_per_token(old, p, c).data
        rho = lk.token_ratio(tok, old_tok)
        base_d1 = obj.loss_d1(rho, A)[0].item()
        daca_d1 = obj.loss_daca_ratio(rho, token_adv)[0].item()
        masks = lk.sdmc_masks(4, 6, lk.DEFAULT_SDMC_POINTS, r)
        with ad.no_grad():
            e_old = lk.elbo_sdmc(old, p, c, masks=masks).data
        e = lk.elbo_sdmc(m, p, c, masks=masks)
        base_g = obj.loss_gdpo(e, e_old, 2, np.full(4, 6))[0].item()
        daca_g = obj.loss_gdpo(e, e_old, 2, np.full(4, 6), omega=omega)[0].item()
        mismatches += (base_wd1 != daca_wd1) + (base_d1 != daca_d1) + (base_g != daca_g)
    verdict(3, mismatches == 0, f"20 seeds x 3 losses, {mismatches} bitwise mismatches")


def test_04_per_step_normalization_invariant():
    worst_mu = worst_sd = 0.0
    checked = 0
    for batch in range(100):
        r = np.random.default_rng(batch)
        m = tiny_model(L=8, seed=batch % 5)
        stride = int(r.integers(1, 4))
        x, trajs = sampler.generate(m, random_ids(r, (6, 3)), 8, 8, stride, r, temperature=1.0)
        tables = [credit.delta_table(t, c) for t, c in zip(trajs, x)]
        zs = credit.normalize(tables, "per-step")
        for j in range(len(tables[0].windows)):
            raw = np.array([t.delta[j] for t in tables])
            if raw.std() <= credit.EPS_NORM:
                continue
            z = np.array([zz[j] for zz in zs])
            worst_mu = max(worst_mu, abs(z.mean()))
            worst_sd = max(worst_sd, abs(z.std() - 1))
            checked += 1
    verdict(4, worst_mu <= 1e-9 and worst_sd <= 1e-6 and checked > 100,
            f"{checked} steps over 100 batches, max |mean| {worst_mu:.1e}, max |std-1| {worst_sd:.1e}")


def _small(**kw):
    d = dict(task="countdown", G=3, inner_iters=2, batch_groups=2, outer_steps=2, train_pool=4,
             pretrain_steps=0, d_model=8, n_heads=2, n_blocks=1, eval_size=2)
    obj_kw = kw.pop("objective", {})
    d.update(kw)
    d["objective"] = obj_kw
    return trainer.config_from_dict(d)


def _passes(cfg):
    st = trainer.init_state(cfg)
    ms = [trainer.train_step(st) for _ in range(cfg.outer_steps)]
    return sum(m.generation_passes for m in ms), sum(m.loss_passes for m in ms)


def test_05_zero_cost_dps_and_pass_accounting():
    base = _small()
    B, mu, n = base.batch_groups * base.G, base.inner_iters, base.outer_steps
    g0, l0 = _passes(base)
    g_dps, l_dps = _passes(_small(objective={"use_dps": True, "stride": 2}))
    g_m, l_m = _passes(_small(objective={"use_dps": True, "last_step_mode": "measured"}))
    sml = {K: _passes(_small(objective={"use_sml": True, "K": K})) for K in (1, 2, 3, 4, 8)}
    ok_dps = g_dps == g0 and l_dps == l0
    ok_meas = g_m == g0 and l_m - l0 == B * n
    ok_sml = all(l - l0 == K * B * mu * n and g == g0 for K, (g, l) in sml.items())
    costs = [sml[K][1] for K in sorted(sml)]
    ok_mono = all(a < b for a, b in zip(costs, costs[1:]))
    verdict(5, ok_dps and ok_meas and ok_sml and ok_mono,
            f"DPS extra passes ({g_dps - g0}, {l_dps - l0}); measured +{(l_m - l0) / (B * n):g}/sample; "
            f"SML extra per sample per inner iter {[(l - l0) / (B * mu * n) for _, l in sml.values()]}")


def test_06_gradient_checks():
    t0 = time.perf_counter()
    cfg = DenoiserConfig(vocab_size=5, prompt_len=2, completion_len=6, d_model=8, n_heads=2, n_blocks=1, seed=0)
    m = Denoiser(cfg)
    old = m.frozen_copy()
    r = np.random.default_rng(7)
    for q in old.params.values():
        q.data += r.normal(scale=0.05, size=q.data.shape)
    p = np.array([[2, 3], [4, 0]])
    c = np.array([[2, 3, 4, 0, 2, 3], [4, 4, 2, 0, 3, 2]])
    parts = [lk.partition_strata(6, 3, "random", r) for _ in range(2)]
    masks = lk.sdmc_masks(2, 6, lk.DEFAULT_SDMC_POINTS, r)
    masks[:, :, 0] = True
    A = np.array([1.0, -1.0])
    om = np.array([[1.1, 0.9, 1.0, 1.2, 0.8, 1.0], [1.0, 1.05, 0.95, 1.0, 1.1, 0.9]])
    with ad.no_grad():
        mf_old = lk.mean_field_per_token(old, p, c).data
        en_old = lk.enriched_token_loglik(old, p, c, parts).data
        e_old = lk.elbo_sdmc(old, p, c, masks=masks).data
    losses = {
        "d1": lambda: obj.loss_d1(lk.token_ratio(lk.mean_field_per_token(m, p, c), mf_old), A[:, None] * om)[0],
        "wd1": lambda: obj.loss_wd1(lk.mean_field_per_token(m, p, c), A, 2),
        "gdpo": lambda: obj.loss_gdpo(lk.elbo_sdmc(m, p, c, masks=masks), e_old, 2, np.full(2, 6))[0],
        "daca_wd1": lambda: obj.loss_daca_wd1(lk.mean_field_per_token(m, p, c), A, 2, om,
                                              lk.sml_loglik(m, p, c, parts), 0.1),
        "daca_ratio": lambda: obj.loss_daca_ratio(lk.sml_ratio(lk.enriched_token_loglik(m, p, c, parts), en_old),
                                                  A[:, None] * om)[0],
    }
    errs = {k: ad.finite_difference_check(f, m.params) for k, f in losses.items()}
    dt = time.perf_counter() - t0
    verdict(6, all(e < 1e-5 for e in errs.values()) and dt < 30,
            " ".join(f"{k}={e:.1e}" for k, e in errs.items()) + f", {dt:.1f}s")


def test_07_advantage_normalization():
    r = np.random.default_rng(0)
    worst = max(abs(obj.group_advantages(r.normal(size=int(r.integers(2, 17))) * 5).mean()) for _ in range(200))
    A = obj.group_advantages([0.0, 2.0])
    # eps_adv = 1e-4 in the denominator shrinks the unit values by a factor 1/(1 + 1e-4)
    ok = worst <= 1e-12 and np.allclose(A, [-1.0, 1.0], atol=1e-4)
    verdict(7, ok, f"max |mean(A)| {worst:.1e}; [0,2] -> [{A[0]:.6f}, {A[1]:.6f}]")


def _smoke(name: str, seed: int, out: Path):
    d = json.loads((CONFIGS / name).read_text())
    d.update(seed=seed, out_dir=str(out / f"{name}_{seed}"))
    return trainer.run_training(trainer.config_from_dict(d))


@pytest.mark.slow
def test_08_training_smoke_and_direction(tmp_path):
    t0 = time.perf_counter()
    rises, wins, notes = [], 0, []
    for seed in (0, 1, 2):
        base = [m.reward_mean for m in _smoke("smoke_wd1.json", seed, tmp_path)]
        dps = [m.reward_mean for m in _smoke("smoke_wd1_dps.json", seed, tmp_path)]
        first, last = np.mean(base[:20]), np.mean(base[-20:])
        rises.append(last > first)
        fd = np.mean(dps[-20:])
        wins += fd >= last
        notes.append(f"seed {seed}: wd1 {first:.3f}->{last:.3f}, +DPS final {fd:.3f}")
    dt = time.perf_counter() - t0
    verdict(8, all(rises) and wins >= 2 and dt < 1800,
            "; ".join(notes) + f"; DPS>=wd1 on {wins}/3; {dt / 60:.1f} min")


def test_09_ablation_harness_shapes(tmp_path):
    base = json.loads((CONFIGS / "ablate_tiny.json").read_text())
    shapes = {}
    for preset in ("stride_last_step", "K_strategy", "lambda", "eta"):
        out = tmp_path / preset
        rows = trainer.ablation_sweep(base, preset, out)
        grid = None
        if (out / "grid.csv").is_file():
            g = list(csv.reader(open(out / "grid.csv")))
            grid = (len(g) - 1, len(g[0]) - 1)
        shapes[preset] = (len(rows), grid)
    want = {"stride_last_step": (30, (6, 5)), "K_strategy": (14, (7, 2)), "lambda": (3, None), "eta": (3, None)}
    verdict(9, shapes == want, ", ".join(f"{k}: {v[0]} rows grid {v[1]}" for k, v in shapes.items()))


def test_10_determinism(tmp_path):
    same = []
    for objective in ({"base": "wd1", "use_dps": True, "use_sml": True},
                      {"base": "d1", "use_dps": True, "last_step_mode": "measured"},
                      {"base": "gdpo", "use_dps": True}):
        outs = []
        for rep in (0, 1):
            cfg = _small(objective=objective, seed=42, outer_steps=3, eval_every=2,
                         out_dir=str(tmp_path / f"{objective['base']}_{rep}"))
            trainer.run_training(cfg)
            outs.append((Path(cfg.out_dir) / "metrics.csv").read_bytes())
        same.append(outs[0] == outs[1])
    verdict(10, all(same), f"byte-identical metrics for wd1/d1/gdpo: {same}")
