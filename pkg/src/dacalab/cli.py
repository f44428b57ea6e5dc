"""``dacalab`` command line: train, eval, ablate, diagnose, overhead, report.

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.  Relative
output paths resolve under ``$DACALAB_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import credit, likelihood as lk, sampler, tasks, trainer
from .denoiser import load_checkpoint
from .trainer import ConfigError

OUTPUT_ROOT_ENV = "DACALAB_OUTPUT_ROOT"
DIAG_FIELDS = ["sample", "seed", "estimator", "K", "strategy", "seq_logprob", "mean_token_logprob",
               "abs_gap_to_pseudo", "passes"]
SUMMARY_FIELDS = ["run", "steps", "first20_reward", "last20_reward", "final_eval_reward",
                  "generation_passes", "loss_passes"]

log = logging.getLogger("dacalab")


class UsageError(Exception):
    pass


def resolve_out(path: str | os.PathLike) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e


def build_config(config_path, overrides, out=None) -> trainer.RunConfig:
    d = _load_json(config_path) if config_path else {}
    if not isinstance(d, dict):
        raise UsageError("config must be a JSON object")
    # validate the file first so unknown keys are reported against the file
    trainer.config_from_dict(d)
    d = trainer.apply_overrides(trainer.config_to_dict(trainer.config_from_dict(d)), overrides or [])
    if out:
        d["out_dir"] = out
    d["out_dir"] = str(resolve_out(d["out_dir"]))
    return trainer.config_from_dict(d)


# ----------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg = build_config(args.config, args.set, args.out)

    def progress(m):
        if m.eval_reward is not None:
            log.info("step %d reward %.3f eval %.3f", m.step, m.reward_mean, m.eval_reward)

    hist = trainer.run_training(cfg, progress)
    print(f"{cfg.out_dir}: {len(hist)} steps, last-20 reward {trainer.final_reward(hist):.4f}")
    return 0


# ------------------------------------------------------------------ eval


def cmd_eval(args) -> int:
    model = _checkpoint(args.checkpoint)
    kind = _task_for(model, args.task)
    rng = np.random.default_rng(args.seed)
    insts = [tasks.sample_task(kind, rng) for _ in range(args.n)]
    prompts = np.array([i.prompt_ids for i in insts])
    comps, _ = sampler.generate(model, prompts, model.cfg.completion_len, args.steps or model.cfg.completion_len,
                                record=False, temperature=0.0)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rewards = []
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "prompt", "completion", "reward"])
        for k, (inst, c) in enumerate(zip(insts, comps)):
            r = tasks.score_completion(inst, c).total
            rewards.append(r)
            w.writerow([k, inst.prompt_text, tasks.VOCAB.decode(c), repr(r)])
    print(f"mean greedy reward {np.mean(rewards):.4f} over {len(insts)} instances -> {out}")
    return 0


def _checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _task_for(model, kind: str | None) -> str:
    shape = (model.cfg.prompt_len, model.cfg.completion_len)
    if kind is None:
        match = [k for k, s in tasks.SHAPES.items() if s == shape]
        if not match:
            raise UsageError(f"no task kind has shape {shape}; pass --task")
        return match[0]
    if tasks.SHAPES.get(kind) != shape:
        raise UsageError(f"checkpoint shape {shape} does not fit task {kind!r}")
    return kind


# ---------------------------------------------------------------- ablate


def _grid_arg(value: str):
    if value in trainer.PRESET_GRIDS:
        return value
    p = Path(value)
    if p.is_file():
        return _load_json(p)
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        raise UsageError(f"--grid is neither a preset, a file nor inline JSON: {value!r}") from None


def cmd_ablate(args) -> int:
    grid = _grid_arg(args.grid)
    g = trainer.resolve_grid(grid)
    if not g.get("axes") or any(not v for v in g["axes"].values()):
        raise UsageError("ablation grid is empty")
    base = trainer.config_to_dict(build_config(args.config, args.set))
    out = resolve_out(args.out)
    rows = trainer.ablation_sweep(base, grid, out,
                                  progress=lambda r: log.info("cell %s", r))
    print(f"{len(rows)} cells -> {out / 'results.csv'}")
    return 0


# -------------------------------------------------------------- diagnose


def diagnostics(model, kind: str, n: int, seed: int, stride: int, out: Path) -> tuple[Path, Path]:
    """Estimator comparison and credit report on held-out greedy completions."""
    rng = np.random.default_rng(seed)
    insts = [tasks.sample_task(kind, rng) for _ in range(n)]
    prompts = np.array([i.prompt_ids for i in insts])
    L = model.cfg.completion_len
    comps, trajs = sampler.generate(model, prompts, L, L, stride, rng, record=True, temperature=0.0)
    ks = sorted({k for k in (1, 2, 4, 8, L) if k <= L})
    rows = []
    for s, (p, c) in enumerate(zip(prompts, comps)):
        pseudo = lk.pseudo_loglik_naive(model, p, c)
        mf = lk.estimate(model, p, c, "mean-field")
        rows.append(_diag_row(s, seed, "mean-field", 1, "-", mf, pseudo))
        for strat in ("random", "confidence"):
            for k in ks:
                with ad.no_grad():
                    part = lk.partition_strata(L, k, strat, rng, model, p, c)
                    per = lk.sml_per_token(model, p, c, part).data
                rows.append(_diag_row(s, seed, "sml", k, strat,
                                      lk.LikelihoodReport(per, float(per.sum()), "sml", k), pseudo))
    out.mkdir(parents=True, exist_ok=True)
    est_path = out / "estimators.csv"
    with open(est_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=DIAG_FIELDS)
        w.writeheader()
        w.writerows(rows)
    tables = [credit.delta_table(t, c, "extrapolate") for t, c in zip(trajs, comps)]
    credit.normalize(tables, "per-step")
    cred_path = out / "credit.csv"
    credit.write_credit_csv(cred_path, tables, [t.birth for t in trajs])
    return est_path, cred_path


def _diag_row(s, seed, est, k, strat, rep, pseudo) -> dict:
    return {"sample": s, "seed": seed, "estimator": est, "K": k, "strategy": strat,
            "seq_logprob": repr(rep.sequence_logprob),
            "mean_token_logprob": repr(float(rep.per_token_logprob.mean())),
            "abs_gap_to_pseudo": repr(float(np.abs(rep.per_token_logprob - pseudo).mean())),
            "passes": rep.passes_used}


def cmd_diagnose(args) -> int:
    model = _checkpoint(args.checkpoint)
    kind = _task_for(model, args.task)
    est, cred = diagnostics(model, kind, args.n, args.seed, args.stride, resolve_out(args.out))
    print(f"wrote {est} and {cred}")
    return 0


# -------------------------------------------------------------- overhead


def cmd_overhead(args) -> int:
    base = trainer.config_to_dict(build_config(args.config, args.set))
    variants = {}
    for spec in args.variant:
        if "=" not in spec:
            raise UsageError(f"--variant expects name=override[,override...], got {spec!r}")
        name, rest = spec.split("=", 1)
        variants[name] = trainer.apply_overrides(base, [o for o in rest.split(",") if o])
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = trainer.overhead_report(base, variants, out)
    for r in rows:
        print(r)
    return 0


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    from . import plots

    out = resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    summary = []
    for r in args.runs:
        mpath = Path(r) / "metrics.csv"
        if not mpath.is_file():
            raise UsageError(f"no metrics.csv in {r}")
        label = Path(r).name
        runs[label] = mpath
        rows = trainer.read_metrics(mpath)
        rew = [float(x["reward_mean"]) for x in rows]
        evals = [x["eval_reward"] for x in rows if x["eval_reward"]]
        summary.append({"run": label, "steps": len(rows), "first20_reward": repr(float(np.mean(rew[:20]))),
                        "last20_reward": repr(float(np.mean(rew[-20:]))),
                        "final_eval_reward": evals[-1] if evals else "",
                        "generation_passes": sum(int(x["generation_passes"]) for x in rows),
                        "loss_passes": sum(int(x["loss_passes"]) for x in rows)})
    written = []
    if runs:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            w.writeheader()
            w.writerows(summary)
        written += [out / "summary.csv", plots.reward_curves(runs, out / "reward_curves.png", args.window)]
    for a in args.ablation or []:
        g = Path(a) / "grid.csv"
        if g.is_file():
            written.append(plots.grid_heatmap(g, out / f"heatmap_{Path(a).name}.png", Path(a).name))
    if args.diagnostics:
        written.append(plots.estimator_vs_k(args.diagnostics, out / "estimator_vs_k.png"))
    if not written:
        raise UsageError("nothing to report: pass --runs, --ablation or --diagnostics")
    for p in written:
        print(p)
    return 0


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dacalab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="RunConfig JSON file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. objective.lambda=0.1 (repeatable)")

    p = sub.add_parser("train", help="run one training job")
    with_config(p)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=tasks.KINDS)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    with_config(p, required=False)
    p.add_argument("--grid", required=True, help=f"preset ({', '.join(trainer.PRESET_GRIDS)}), file or JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose", help="estimator and credit diagnostics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=tasks.KINDS)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("overhead", help="wall-clock and pass-count overhead against a baseline")
    with_config(p, required=False)
    p.add_argument("--variant", action="append", required=True, metavar="NAME=K=V[,K=V]")
    p.add_argument("--out", required=True, help="overhead CSV path")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("report", help="summary CSV plus figures from finished runs")
    p.add_argument("--runs", nargs="*", default=[], help="run directories with metrics.csv")
    p.add_argument("--ablation", nargs="*", help="ablation output directories")
    p.add_argument("--diagnostics", help="estimators.csv from diagnose")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"dacalab {args.command}: error: {e}", file=sys.stderr)
        return 2
    except trainer.TrainingAborted as e:
        print(f"dacalab {args.command}: training aborted: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"dacalab {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
