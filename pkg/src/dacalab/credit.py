"""Denoising progress scores and per-token advantage modulation.

A trajectory recorded with stride ``s`` has snapshot steps
``r_0 = 0 < r_1 < ... < r_m = T``.  Consecutive pairs ``(a, b)`` define
windows: tokens unmasked by the forward passes at steps ``a .. b-1`` (birth
steps ``a+1 .. b``) share the delta of that window.  The pair ending at
``T`` has no masked positions left, so its window takes the last-step delta.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .denoiser import Denoiser
from .sampler import Trajectory

log = logging.getLogger(__name__)

LAST_STEP_MODES = ("raw", "neutral", "mean", "measured", "extrapolate")
NORM_MODES = ("per-step", "trajectory", "group", "none")
EPS_NORM = 1e-6


def score(traj: Trajectory, completion, k: int, j: int) -> float:
    """Mean cached log-prob at step ``k`` of the final tokens over positions masked at step ``j``."""
    if j < k:
        raise ValueError("score needs j >= k so that M_j is contained in M_k")
    sk, sj = traj.snapshot_at(k), traj.snapshot_at(j)
    if len(sj.masked_positions) == 0:
        raise ValueError(f"no masked positions at step {j}")
    completion = np.asarray(completion)
    rows_idx = np.searchsorted(sk.masked_positions, sj.masked_positions)
    if not np.array_equal(sk.masked_positions[rows_idx], sj.masked_positions):
        raise ValueError("mask sets are not nested")
    vals = sk.rows[rows_idx, completion[sj.masked_positions]]
    return float(vals.mean())


def deltas(traj: Trajectory, completion) -> list[tuple[int, int, float]]:
    """``(a, b, S(b, b) - S(a, b))`` for every recorded pair with ``M_b`` nonempty."""
    steps = traj.recorded_steps
    if len(steps) < 2:
        raise ValueError("need at least two snapshots")
    out = []
    for a, b in zip(steps[:-1], steps[1:]):
        if len(traj.snapshot_at(b).masked_positions) == 0:
            continue
        out.append((a, b, score(traj, completion, b, b) - score(traj, completion, a, b)))
    return out


def last_step_delta(mode: str, traj: Trajectory, completion, prior: list[float] | None = None,
                    model: Denoiser | None = None, prompt=None) -> float:
    """Delta for the final window, which has no following snapshot to diff against."""
    if mode not in LAST_STEP_MODES:
        raise ValueError(f"unknown last-step mode {mode!r}")
    if prior is None:
        prior = [d for _, _, d in deltas(traj, completion)]
    last = _last_masked_step(traj)
    if mode == "neutral":
        return 0.0
    if mode == "raw":
        return score(traj, completion, last, last)
    if mode in ("mean", "extrapolate"):
        if not prior:
            log.info("last-step mode %s has no prior deltas; using neutral", mode)
            return 0.0
        return float(np.mean(prior)) if mode == "mean" else float(prior[-1])
    # measured: one extra pass on the fully revealed completion
    if model is None or prompt is None:
        raise ValueError("measured mode needs the model and prompt")
    completion = np.asarray(completion)
    pos = traj.snapshot_at(last).masked_positions
    with ad.no_grad():
        lp = model.log_probs(prompt, completion, "loss").data
    s_final = float(lp[pos, completion[pos]].mean())
    return s_final - score(traj, completion, last, last)


def _last_masked_step(traj: Trajectory) -> int:
    for s in reversed(traj.snapshots):
        if len(s.masked_positions):
            return s.step
    raise ValueError("trajectory has no masked snapshot")


@dataclass
class DeltaTable:
    windows: list[tuple[int, int]]  # [start, end) in forward-pass step units
    delta: np.ndarray  # raw deltas; last entry is the last-step delta
    z: np.ndarray | None = None

    def window_of(self, birth: np.ndarray) -> np.ndarray:
        """Window index for each birth step."""
        starts = np.array([w[0] for w in self.windows])
        ends = np.array([w[1] for w in self.windows])
        u = np.asarray(birth) - 1
        idx = np.searchsorted(starts, u, side="right") - 1
        if np.any(idx < 0) or np.any(u >= ends[idx]):
            raise RuntimeError("birth step outside every recorded window")
        return idx


def delta_table(traj: Trajectory, completion, last_mode: str = "extrapolate",
                model: Denoiser | None = None, prompt=None) -> DeltaTable:
    ds = deltas(traj, completion)
    steps = traj.recorded_steps
    windows = [(a, b) for a, b, _ in ds]
    prior = [d for _, _, d in ds]
    last_start = windows[-1][1] if windows else steps[0]
    windows.append((last_start, traj.total_steps))
    last = last_step_delta(last_mode, traj, completion, prior, model, prompt)
    return DeltaTable(windows, np.array(prior + [last], dtype=np.float64))


def _z(x: np.ndarray, eps: float, eps_mode: str) -> np.ndarray:
    mu = x.mean()
    sd = x.std()
    if eps_mode == "additive":
        return (x - mu) / (sd + eps)
    if sd <= eps:
        return np.zeros_like(x)
    return (x - mu) / sd


def normalize(tables: list[DeltaTable], mode: str = "per-step", eps: float = EPS_NORM,
              groups=None, eps_mode: str = "guard") -> list[np.ndarray]:
    """Z-score deltas over the axis chosen by ``mode``; fills ``table.z``.

    Population standard deviation throughout.  ``eps_mode='guard'`` divides
    by sigma and yields zeros when sigma <= eps; ``'additive'`` divides by
    ``sigma + eps``.  ``groups`` (one label per table) restricts per-step
    statistics to tables sharing a label.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = [t.delta.astype(np.float64).copy() for t in tables]
    if mode == "trajectory":
        out = [_z(d, eps, eps_mode) for d in out]
    elif mode == "group":
        flat = np.concatenate([t.delta for t in tables]) if tables else np.zeros(0)
        zz = _z(flat, eps, eps_mode) if flat.size else flat
        pos = 0
        for i, t in enumerate(tables):
            out[i] = zz[pos:pos + len(t.delta)]
            pos += len(t.delta)
    elif mode == "per-step":
        labels = list(groups) if groups is not None else [0] * len(tables)
        for g in sorted(set(labels)):
            members = [i for i, lab in enumerate(labels) if lab == g]
            by_start: dict[int, list[tuple[int, int]]] = {}
            for i in members:
                for j, (a, _) in enumerate(tables[i].windows):
                    by_start.setdefault(a, []).append((i, j))
            for cells in by_start.values():
                vals = np.array([tables[i].delta[j] for i, j in cells])
                zz = _z(vals, eps, eps_mode)
                for (i, j), v in zip(cells, zz):
                    out[i][j] = v
    for t, z in zip(tables, out):
        t.z = z
    return out


def token_weights(A: float, z: np.ndarray, table: DeltaTable, birth, lam: float = 0.1):
    """Per-token advantages ``A * max(0, 1 + lam * z[window(birth)])``.

    Returns ``(A_tilde, omega, n_clamped)``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    idx = table.window_of(birth)
    omega = 1.0 + lam * np.asarray(z)[idx]
    n_clamped = int((omega < 0).sum())
    if n_clamped:
        log.debug("omega clamp fired on %d tokens", n_clamped)
        omega = np.maximum(omega, 0.0)
    return A * omega, omega, n_clamped


CREDIT_FIELDS = ["sample", "window_start", "window_end", "delta", "delta_z", "n_tokens_born"]


def credit_rows(tables: list[DeltaTable], births) -> list[dict]:
    rows = []
    for s, (t, birth) in enumerate(zip(tables, births)):
        idx = t.window_of(birth)
        for j, (a, b) in enumerate(t.windows):
            rows.append({"sample": s, "window_start": a, "window_end": b,
                         "delta": repr(float(t.delta[j])),
                         "delta_z": repr(float(t.z[j])) if t.z is not None else "",
                         "n_tokens_born": int((idx == j).sum())})
    return rows


def write_credit_csv(path, tables: list[DeltaTable], births) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CREDIT_FIELDS)
        w.writeheader()
        w.writerows(credit_rows(tables, births))
