"""Outer/inner training loop, ablation sweeps and overhead accounting.

One outer step: roll out ``G`` completions per prompt, score them, build
advantages and (optionally) DPS token weights, cache old-policy quantities
once, then run ``inner_iters`` optimizer updates that only touch the
current policy.
"""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from . import credit, likelihood as lk, objective as obj, sampler, tasks
from .denoiser import Denoiser, DenoiserConfig, ForwardPassCounter, save_checkpoint
from .objective import ObjectiveConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    task: str = "countdown"
    G: int = 6
    T_steps: int = 0  # 0 means one step per completion position
    inner_iters: int = 12
    batch_groups: int = 1
    outer_steps: int = 300
    seed: int = 42
    eval_every: int = 50
    eval_size: int = 16
    train_pool: int = 64  # 0 draws a fresh instance every time
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.1
    max_grad_norm: float = 0.2
    grad_accum: int = 1  # accepted, inert at desk scale
    temperature: float = 1.0
    block_length: int = 0  # 0 disables block-wise decoding
    random_tiebreak: bool = False
    pretrain_steps: int = 300
    pretrain_batch: int = 32
    pretrain_lr: float = 3e-3
    pretrain_solution_frac: float = 0.0  # share of warm-start demos that are correct solutions
    d_model: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    mixer: str = "attention"
    out_dir: str = "runs/default"
    dump_trajectories: bool = True

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = objective_from_dict(self.objective)
        if self.task not in tasks.KINDS:
            raise ConfigError(f"unknown task {self.task!r}")
        for name in ("G", "inner_iters", "batch_groups", "outer_steps", "eval_every", "eval_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.G < 2:
            raise ConfigError("G must be >= 2")

    @property
    def prompt_len(self) -> int:
        return tasks.SHAPES[self.task][0]

    @property
    def L(self) -> int:
        return tasks.SHAPES[self.task][1]

    @property
    def steps(self) -> int:
        return self.T_steps or self.L

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(prompt_len=self.prompt_len, completion_len=self.L, d_model=self.d_model,
                              n_heads=self.n_heads, n_blocks=self.n_blocks, mixer=self.mixer,
                              seed=self.seed)


def objective_from_dict(d: dict) -> ObjectiveConfig:
    known = {f.name for f in fields(ObjectiveConfig)}
    kw = {}
    for k, v in d.items():
        name = obj.OBJECTIVE_ALIASES.get(k, k)
        if name not in known:
            raise ConfigError(f"unknown objective key {k!r}")
        kw[name] = v
    try:
        return ObjectiveConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def config_from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    d = dict(d)
    if "objective" in d:
        d["objective"] = objective_from_dict(d["objective"])
    try:
        return RunConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = obj.objective_to_dict(v) if f.name == "objective" else v
    return out


def _coerce(value: str, current: Any, key: str):
    if isinstance(current, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return low in ("true", "1")
    if isinstance(current, int):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(current, list):
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"{key}: expected a JSON list, got {value!r}") from None
        if not isinstance(parsed, list):
            raise ConfigError(f"{key}: expected a JSON list")
        return parsed
    return value


def apply_overrides(d: dict, overrides: list[str] | dict) -> dict:
    """Apply ``a.b=value`` overrides to a config dict, type-checked against defaults."""
    d = json.loads(json.dumps(d))
    defaults = config_to_dict(RunConfig())
    items = overrides.items() if isinstance(overrides, dict) else (_split(o) for o in overrides)
    for key, value in items:
        path = key.split(".")
        ref, tgt = defaults, d
        for p in path[:-1]:
            if p not in ref or not isinstance(ref[p], dict):
                raise ConfigError(f"unknown config key {key!r}")
            ref = ref[p]
            tgt = tgt.setdefault(p, {})
        leaf = path[-1]
        if leaf not in ref:
            raise ConfigError(f"unknown config key {key!r}")
        tgt[leaf] = _coerce(value, ref[leaf], key) if isinstance(value, str) else value
    return d


def _split(o: str) -> tuple[str, str]:
    if "=" not in o:
        raise ConfigError(f"override {o!r} is not key=value")
    k, v = o.split("=", 1)
    return k.strip(), v.strip()


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    cfg: RunConfig
    model: Denoiser
    ref: Denoiser
    opt: ad.AdamState
    task_rng: np.random.Generator
    gen_rng: np.random.Generator
    loss_rng: np.random.Generator
    pool: list[tasks.TaskInstance]
    eval_set: list[tasks.TaskInstance]
    step: int = 0
    last_aux: dict = field(default_factory=dict)


@dataclass
class StepMetrics:
    step: int
    reward_mean: float
    reward_std: float
    loss_mean: float
    clip_fraction: float
    clamp_fires: int
    generation_passes: int
    loss_passes: int
    wall_ms: float = 0.0
    eval_reward: float | None = None


METRIC_FIELDS = ["step", "reward_mean", "reward_std", "loss_mean", "clip_fraction", "clamp_fires",
                 "generation_passes", "loss_passes", "eval_reward"]


def init_state(cfg: RunConfig) -> TrainState:
    root = np.random.SeedSequence(cfg.seed)
    s_task, s_gen, s_loss, s_pre, s_eval = (np.random.default_rng(s) for s in root.spawn(5))
    pool = [tasks.sample_task(cfg.task, s_task) for _ in range(cfg.train_pool)]
    eval_set = [tasks.sample_task(cfg.task, s_eval) for _ in range(cfg.eval_size)]
    model = Denoiser(cfg.model_config())
    if cfg.pretrain_steps:
        pretrain(model, cfg, s_pre)
    model.counter.reset()
    ref = model.frozen_copy()
    return TrainState(cfg, model, ref, ad.AdamState(), s_task, s_gen, s_loss, pool, eval_set)


def pretrain(model: Denoiser, cfg: RunConfig, rng: np.random.Generator) -> list[float]:
    """Warm start with the masked-diffusion objective on well-formatted demos of fresh instances."""
    opt = ad.AdamState()
    losses = []
    L = cfg.L
    for _ in range(cfg.pretrain_steps):
        insts = [tasks.sample_task(cfg.task, rng) for _ in range(cfg.pretrain_batch)]
        prompts = np.array([i.prompt_ids for i in insts])
        demos = np.array([i.solution_ids() if rng.random() < cfg.pretrain_solution_frac else i.demo_ids(rng)
                          for i in insts])
        t = rng.uniform(0.05, 1.0, size=(len(insts), 1))
        m = rng.random(demos.shape) < t
        m[np.arange(len(insts)), rng.integers(0, L, len(insts))] = True
        lp = model.log_probs(prompts, np.where(m, model.mask_id, demos), "loss")
        tok = ad.gather(lp, demos)
        loss = -ad.sum_(tok * ad.Tensor(m / t / (L * len(insts))))
        grads = ad.evaluate_with_gradients(loss, model.params)
        ad.adam_step(model.params, grads, opt, lr=cfg.pretrain_lr, weight_decay=0.0, max_grad_norm=1.0)
        losses.append(loss.item())
    return losses


# ------------------------------------------------------------------- step


def train_step(state: TrainState) -> StepMetrics:
    cfg, o, model = state.cfg, state.cfg.objective, state.model
    t0 = time.perf_counter()
    gen0, loss0 = model.counter.snapshot()
    G, L = cfg.G, cfg.L
    if cfg.train_pool:
        # without replacement while the pool is large enough
        idx = state.task_rng.choice(len(state.pool), cfg.batch_groups,
                                    replace=cfg.batch_groups > len(state.pool))
        insts = [state.pool[i] for i in idx]
    else:
        insts = [tasks.sample_task(cfg.task, state.task_rng) for _ in range(cfg.batch_groups)]
    batch_insts = [inst for inst in insts for _ in range(G)]
    prompts = np.array([i.prompt_ids for i in batch_insts], dtype=np.int64)
    B = len(batch_insts)

    comps, trajs = sampler.generate(model, prompts, L, cfg.steps, o.stride, state.gen_rng,
                                    record=o.use_dps, temperature=cfg.temperature,
                                    block_length=cfg.block_length or None,
                                    random_tiebreak=cfg.random_tiebreak)
    rewards = np.array([tasks.score_completion(i, c).total for i, c in zip(batch_insts, comps)])
    A = obj.batch_advantages(rewards, G, o.adv_eps)

    omega = None
    clamp_fires = 0
    token_adv = np.repeat(A[:, None], L, axis=1)
    tables = []
    if o.use_dps:
        tables = [credit.delta_table(tr, c, o.last_step_mode, model, p)
                  for tr, c, p in zip(trajs, comps, prompts)]
        groups = np.repeat(np.arange(cfg.batch_groups), G) if o.norm_scope == "group" else None
        zs = credit.normalize(tables, o.norm_mode, o.norm_eps, groups, o.norm_eps_mode)
        omega = np.zeros((B, L))
        for b in range(B):
            token_adv[b], omega[b], n = credit.token_weights(A[b], zs[b], tables[b], trajs[b].birth, o.lam)
            clamp_fires += n

    pm = lk.draw_prompt_mask(prompts.shape, o.prompt_mask_prob, state.loss_rng)
    parts = None
    old = model.frozen_copy()
    if o.use_sml:
        parts = lk.partition_batch(B, L, o.K, o.strat_strategy, state.loss_rng, old, prompts, comps,
                                   o.confidence_order, pm)
    sdmc = None
    with ad.no_grad():
        ratio_sml = o.use_sml and o.base in ("d1", "gdpo")
        if ratio_sml:
            old_cache = lk.enriched_token_loglik(old, prompts, comps, parts, pm).data
        elif o.base == "d1":
            old_cache = lk.mean_field_per_token(old, prompts, comps, pm).data
        elif o.base == "gdpo":
            sdmc = lk.sdmc_masks(B, L, o.sdmc_points, state.loss_rng)
            old_cache = lk.elbo_sdmc(old, prompts, comps, o.sdmc_points, masks=sdmc, prompt_mask=pm).data
        else:
            old_cache = None

    losses, clips = [], []
    for it in range(cfg.inner_iters):
        clip_frac = 0.0
        try:
            if o.base == "wd1":
                tok = lk.mean_field_per_token(model, prompts, comps, pm)
                if o.use_dps or o.use_sml:
                    sml_seq = lk.sml_loglik(model, prompts, comps, parts, pm) if o.use_sml else None
                    loss = obj.loss_daca_wd1(tok, A, G, omega, sml_seq, o.eta, o.wd1_aggregate, o.wd1_softmax)
                else:
                    loss = obj.loss_wd1(tok, A, G, None, o.wd1_aggregate, o.wd1_softmax)
            elif ratio_sml:
                enr = lk.enriched_token_loglik(model, prompts, comps, parts, pm)
                loss, clip_frac = obj.loss_daca_ratio(lk.sml_ratio(enr, old_cache), token_adv, o.clip_eps)
            elif o.base == "d1":
                tok = lk.mean_field_per_token(model, prompts, comps, pm)
                loss, clip_frac = obj.loss_d1(lk.token_ratio(tok, old_cache), token_adv, o.clip_eps)
            else:
                elbo = lk.elbo_sdmc(model, prompts, comps, o.sdmc_points, masks=sdmc, prompt_mask=pm)
                adv = A if o.gdpo_advantage == "reward" else None
                loss, clip_frac = obj.loss_gdpo(elbo, old_cache, G, np.full(B, L), o.clip_eps,
                                                advantages=adv, omega=omega)
            if o.beta > 0:
                loss = loss + ad.affine(obj.kl_fully_masked(model, state.ref, prompts, comps, pm), o.beta)
            grads = ad.evaluate_with_gradients(loss, model.params)
        except FloatingPointError as e:
            _dump_abort(state, str(e), rewards, comps)
            raise TrainingAborted(f"step {state.step} inner {it}: {e}") from e
        ad.adam_step(model.params, grads, state.opt, cfg.lr, cfg.beta1, cfg.beta2,
                     cfg.weight_decay, cfg.max_grad_norm)
        losses.append(loss.item())
        clips.append(clip_frac)

    gen1, loss1 = model.counter.snapshot()
    state.last_aux = {"token_adv": token_adv, "omega": omega, "trajectories": trajs, "tables": tables,
                      "completions": comps, "prompts": prompts, "rewards": rewards}
    m = StepMetrics(state.step, float(rewards.mean()), float(rewards.std()), float(np.mean(losses)),
                    float(np.mean(clips)), clamp_fires, gen1 - gen0, loss1 - loss0,
                    wall_ms=(time.perf_counter() - t0) * 1000)
    state.step += 1
    return m


def _dump_abort(state: TrainState, msg: str, rewards, comps) -> None:
    out = Path(state.cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "abort.json").write_text(json.dumps({
        "step": state.step, "error": msg, "rewards": [float(r) for r in rewards],
        "completions": [[int(x) for x in c] for c in comps]}, indent=1))


def evaluate(state: TrainState) -> float:
    """Greedy decoding on the held-out set; passes go to a throwaway counter."""
    cfg = state.cfg
    m = Denoiser(state.model.cfg, state.model.params, ForwardPassCounter())
    prompts = np.array([i.prompt_ids for i in state.eval_set])
    comps, _ = sampler.generate(m, prompts, cfg.L, cfg.steps, record=False, temperature=0.0,
                                block_length=cfg.block_length or None)
    return float(np.mean([tasks.score_completion(i, c).total for i, c in zip(state.eval_set, comps)]))


# -------------------------------------------------------------- run loop


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                           cwd=Path(__file__).parent, timeout=5)
        return r.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(
        {"config": config_to_dict(cfg), "git_describe": git_describe()}, indent=2, sort_keys=True))


def run_training(cfg: RunConfig, progress=None) -> list[StepMetrics]:
    out = Path(cfg.out_dir)
    write_manifest(cfg, out)
    state = init_state(cfg)
    tasks.dump_instances(out / "train_instances.jsonl", state.pool)
    tasks.dump_instances(out / "eval_instances.jsonl", state.eval_set)
    history: list[StepMetrics] = []
    with open(out / "metrics.csv", "w", newline="") as fm, open(out / "timing.csv", "w", newline="") as ft:
        wm = csv.writer(fm)
        wt = csv.writer(ft)
        wm.writerow(METRIC_FIELDS)
        wt.writerow(["step", "wall_ms"])
        for _ in range(cfg.outer_steps):
            m = train_step(state)
            if (m.step + 1) % cfg.eval_every == 0 or m.step + 1 == cfg.outer_steps:
                m.eval_reward = evaluate(state)
                if cfg.dump_trajectories and state.last_aux["trajectories"]:
                    tdir = out / "trajectories"
                    tdir.mkdir(exist_ok=True)
                    sampler.write_trajectories(tdir / f"step_{m.step:05d}.jsonl",
                                               state.last_aux["trajectories"][:cfg.G])
            history.append(m)
            wm.writerow([_fmt(getattr(m, k)) for k in METRIC_FIELDS])
            wt.writerow([m.step, f"{m.wall_ms:.1f}"])
            if progress:
                progress(m)
    save_checkpoint(state.model, out / "checkpoint.json")
    return history


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def final_reward(history: list[StepMetrics], window: int = 20) -> float:
    return float(np.mean([m.reward_mean for m in history[-window:]]))


# -------------------------------------------------------------- ablations

PRESET_GRIDS: dict[str, dict] = {
    "stride_last_step": {"fixed": {"objective.use_dps": True},
                         "axes": {"objective.stride": [1, 2, 4, 8, 16, 32],
                                  "objective.last_step_mode": list(credit.LAST_STEP_MODES)}},
    "normalization": {"fixed": {"objective.use_dps": True},
                      "axes": {"objective.stride": [1, 2, 4, 8, 16, 32],
                               "objective.norm_mode": ["trajectory", "group", "none", "per-step"]}},
    "lambda": {"fixed": {"objective.use_dps": True}, "axes": {"objective.lambda": [0.05, 0.1, 0.2]}},
    "K_strategy": {"fixed": {"objective.use_sml": True},
                   "axes": {"objective.K": [2, 3, 4, 5, 6, 7, 8],
                            "objective.strat_strategy": ["random", "confidence"]}},
    "eta": {"fixed": {"objective.use_sml": True}, "axes": {"objective.eta": [0.05, 0.1, 0.2]}},
}


def resolve_grid(grid: dict | str) -> dict:
    if isinstance(grid, str):
        if grid not in PRESET_GRIDS:
            raise ConfigError(f"unknown preset grid {grid!r}")
        return PRESET_GRIDS[grid]
    if "preset" in grid:
        g = dict(PRESET_GRIDS[grid["preset"]])
        g["fixed"] = {**g.get("fixed", {}), **grid.get("fixed", {})}
        return g
    return grid


def ablation_sweep(base: dict, grid: dict | str, out_dir, progress=None) -> list[dict]:
    """Run the cartesian product of ``grid['axes']`` on top of ``base``; write CSVs.

    Writes ``results.csv`` (one row per cell) and, for two-axis grids,
    ``grid.csv`` pivoted with first-axis values as rows.
    """
    g = resolve_grid(grid)
    axes: dict[str, list] = g.get("axes", {})
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ConfigError("ablation grid is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(axes)
    rows = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        over = {**g.get("fixed", {}), **dict(zip(keys, combo))}
        d = apply_overrides(base, over)
        tag = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, combo))
        d["out_dir"] = str(out / "cells" / tag)
        cfg = config_from_dict(d)
        hist = run_training(cfg)
        evals = [m.eval_reward for m in hist if m.eval_reward is not None]
        row = {k.split(".")[-1]: v for k, v in zip(keys, combo)}
        row.update({"final_reward": final_reward(hist), "eval_reward": evals[-1] if evals else None,
                    "generation_passes": sum(m.generation_passes for m in hist),
                    "loss_passes": sum(m.loss_passes for m in hist)})
        rows.append(row)
        if progress:
            progress(row)
    cols = list(rows[0])
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    if len(keys) == 2:
        write_pivot(out / "grid.csv", rows, keys[0].split(".")[-1], keys[1].split(".")[-1], "final_reward")
    return rows


def write_pivot(path, rows: list[dict], row_key: str, col_key: str, value: str) -> None:
    rvals = list(dict.fromkeys(r[row_key] for r in rows))
    cvals = list(dict.fromkeys(r[col_key] for r in rows))
    cell = {(r[row_key], r[col_key]): r[value] for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([row_key] + [str(c) for c in cvals])
        for rv in rvals:
            w.writerow([rv] + [_fmt(cell[(rv, cv)]) for cv in cvals])


# --------------------------------------------------------------- overhead

DPS_SML_KEYS = {"use_dps", "use_sml", "lambda", "K", "eta", "stride", "last_step_mode", "norm_mode",
                "norm_scope", "norm_eps", "norm_eps_mode", "strat_strategy", "confidence_order"}
OVERHEAD_FIELDS = ["configuration", "wall_clock_s", "overhead_pct", "generation_passes", "loss_passes",
                   "extra_generation_passes", "extra_loss_passes"]


def _check_pair(base: dict, variant: dict) -> None:
    a, b = dict(base), dict(variant)
    oa, ob = dict(a.pop("objective", {})), dict(b.pop("objective", {}))
    a.pop("out_dir", None)
    b.pop("out_dir", None)
    if a != b:
        raise ConfigError("baseline and variant differ outside the objective's DPS/SML settings")
    for k in (set(oa) | set(ob)) - DPS_SML_KEYS:
        if oa.get(k) != ob.get(k):
            raise ConfigError(f"baseline and variant differ in objective.{k}")


def overhead_report(base: dict, variants: dict[str, dict], out_path) -> list[dict]:
    """Time and pass-count each variant against ``base``; write the overhead CSV."""
    base_full = config_to_dict(config_from_dict(base))
    runs = {"baseline": base_full}
    for name, v in variants.items():
        full = config_to_dict(config_from_dict(v))
        _check_pair(base_full, full)
        runs[name] = full
    results = {}
    out_root = Path(out_path).parent
    for name, d in runs.items():
        d = dict(d)
        d["out_dir"] = str(out_root / "overhead_runs" / name)
        cfg = config_from_dict(d)
        t0 = time.perf_counter()
        hist = run_training(cfg)
        results[name] = (time.perf_counter() - t0, sum(m.generation_passes for m in hist),
                         sum(m.loss_passes for m in hist), cfg)
    bt, bg, bl, _ = results["baseline"]
    rows = []
    for name, (wt, gp, lp, cfg) in results.items():
        o = cfg.objective
        extra_g, extra_l = gp - bg, lp - bl
        if name != "baseline" and o.use_dps and o.last_step_mode != "measured" and not o.use_sml:
            if extra_g != 0 or extra_l != 0:
                raise AssertionError(f"{name}: DPS changed pass counts ({extra_g}, {extra_l})")
        rows.append({"configuration": name, "wall_clock_s": round(wt, 3),
                     "overhead_pct": round(100.0 * (wt - bt) / bt, 2) if name != "baseline" else 0.0,
                     "generation_passes": gp, "loss_passes": lp,
                     "extra_generation_passes": extra_g, "extra_loss_passes": extra_l})
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=OVERHEAD_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows


_ = dataclasses
