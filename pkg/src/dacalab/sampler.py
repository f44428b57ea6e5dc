"""Forward corruption and confidence-ordered reverse generation.

Step numbering: the state before any unmasking is step 0 (fully masked);
the unmasking performed by the forward pass at step ``k`` produces the
state at step ``k + 1``.  A position's birth step is therefore the first
step at which it is no longer masked, in ``1..T``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .denoiser import VOCAB, Denoiser


@dataclass
class TokenSequence:
    ids: np.ndarray
    role: str = "completion"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.role not in ("prompt", "completion"):
            raise ValueError(f"bad role {self.role!r}")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Snapshot:
    step: int
    masked_positions: np.ndarray  # sorted completion positions still masked at this step
    rows: np.ndarray  # [len(masked_positions), V] log-probs from this step's forward pass

    def row(self, pos: int) -> np.ndarray:
        j = int(np.searchsorted(self.masked_positions, pos))
        if j >= len(self.masked_positions) or self.masked_positions[j] != pos:
            raise KeyError(f"position {pos} not masked at step {self.step}")
        return self.rows[j]


@dataclass
class Trajectory:
    snapshots: list[Snapshot]
    stride: int
    birth: np.ndarray  # birth[pos] in 1..total_steps
    total_steps: int
    complete: bool = True

    @property
    def recorded_steps(self) -> list[int]:
        return [s.step for s in self.snapshots]

    def snapshot_at(self, step: int) -> Snapshot:
        for s in self.snapshots:
            if s.step == step:
                return s
        raise KeyError(f"step {step} not recorded")


def forward_mask(seq, t: float, rng: np.random.Generator, mask_id: int = VOCAB.mask_id):
    """Replace each completion token by MASK independently with probability ``t``.

    Takes a TokenSequence (returns one; prompts come back untouched) or raw ids.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"masking ratio {t} outside [0, 1]")
    if isinstance(seq, TokenSequence):
        if seq.role == "prompt":
            return TokenSequence(seq.ids.copy(), "prompt")
        return TokenSequence(forward_mask(seq.ids, t, rng, mask_id), seq.role)
    ids = np.asarray(seq, dtype=np.int64)
    hit = rng.random(ids.shape) < t
    return np.where(hit, mask_id, ids)


def unmask_schedule(L: int, T: int) -> list[int]:
    """How many positions are revealed at each of the ``T`` steps."""
    out, remaining = [], L
    for k in range(T):
        n = math.ceil(remaining / (T - k))
        out.append(n)
        remaining -= n
    return out


def generate(
    model: Denoiser,
    prompts,
    L: int,
    T_steps: int,
    stride: int = 1,
    rng: np.random.Generator | None = None,
    record: bool = True,
    temperature: float = 0.0,
    block_length: int | None = None,
    random_tiebreak: bool = False,
    on_step=None,
):
    """Confidence-ordered unmasking from a fully masked completion.

    With ``temperature == 0`` each masked position proposes its argmax token
    and confidence is the max probability.  With ``temperature > 0`` the
    proposal is drawn by Gumbel-max on ``logp / temperature`` and confidence
    is the model probability of the drawn token.  The MASK id is never
    proposed.  Ties in confidence go to the lowest position index unless
    ``random_tiebreak`` is set.

    Returns ``(completions [B, L], trajectories)``; trajectories are empty
    when ``record`` is false.
    """
    if L <= 0:
        raise ValueError("completion length must be positive")
    if T_steps < 1 or stride < 1:
        raise ValueError("T_steps and stride must be >= 1")
    if T_steps > L:
        raise ValueError("T_steps cannot exceed L (each step unmasks at least one position)")
    if rng is None:
        rng = np.random.default_rng(0)
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    B = prompts.shape[0]
    mask_id = model.mask_id
    x = np.full((B, L), mask_id, dtype=np.int64)
    birth = np.zeros((B, L), dtype=np.int64)
    snaps: list[list[Snapshot]] = [[] for _ in range(B)]

    if block_length:
        n_blocks = math.ceil(L / block_length)
        if T_steps % n_blocks:
            raise ValueError("T_steps must be divisible by the number of blocks")
        per_block = T_steps // n_blocks
        blocks = [(i * block_length, min(L, (i + 1) * block_length)) for i in range(n_blocks)]
        plan = []
        for lo, hi in blocks:
            plan += [(lo, hi, n) for n in unmask_schedule(hi - lo, per_block)]
    else:
        plan = [(0, L, n) for n in unmask_schedule(L, T_steps)]

    for k in range(T_steps):
        with ad.no_grad():
            logp = model.log_probs(prompts, x, tag="generation").data
        lo, hi, n_unmask = plan[k]
        proposal_scores = logp.copy()
        proposal_scores[..., mask_id] = -np.inf
        if temperature > 0:
            gumbel = -np.log(-np.log(rng.random(logp.shape)))
            proposal_scores = proposal_scores / temperature + gumbel
        tokens = proposal_scores.argmax(axis=-1)
        conf = np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]
        tiebreak = rng.random((B, L)) if random_tiebreak else None
        for b in range(B):
            masked = np.flatnonzero(x[b] == mask_id)
            if record and (k % stride == 0):
                snaps[b].append(Snapshot(k, masked.copy(), logp[b, masked].copy()))
            cand = masked[(masked >= lo) & (masked < hi)]
            secondary = tiebreak[b, cand] if tiebreak is not None else cand
            order = np.lexsort((secondary, -conf[b, cand]))
            chosen = cand[order[:n_unmask]]
            x[b, chosen] = tokens[b, chosen]
            birth[b, chosen] = k + 1
        if on_step is not None:
            on_step(k, logp, x.copy())

    trajectories: list[Trajectory] = []
    if record:
        V = model.cfg.vocab_size
        for b in range(B):
            snaps[b].append(Snapshot(T_steps, np.zeros(0, dtype=np.int64), np.zeros((0, V))))
            trajectories.append(Trajectory(snaps[b], stride, birth[b].copy(), T_steps))
    return x, trajectories


def birth_steps(traj: Trajectory) -> dict[int, int]:
    if not traj.complete or np.any(traj.birth < 1):
        raise ValueError("trajectory is incomplete")
    return {int(i): int(s) for i, s in enumerate(traj.birth)}


# --------------------------------------------------------- JSONL dump
#
# Line 1 (header): {"stride": s, "total_steps": T, "birth": [b_0, ..., b_{L-1}]}
# Lines 2..: {"step": k, "masked_positions": [...], "rows": [[V floats], ...]}
# Positions are 0-based completion indices.  Rows follow masked_positions order.


def dump_trajectory(traj: Trajectory, fh) -> None:
    fh.write(json.dumps({"stride": traj.stride, "total_steps": traj.total_steps,
                         "birth": [int(b) for b in traj.birth]}) + "\n")
    for s in traj.snapshots:
        fh.write(json.dumps({"step": s.step, "masked_positions": [int(i) for i in s.masked_positions],
                             "rows": s.rows.tolist()}) + "\n")


def load_trajectory(lines) -> Trajectory:
    it = iter(lines)
    head = json.loads(next(it))
    snaps = []
    V = 0
    for line in it:
        if not line.strip():
            continue
        d = json.loads(line)
        rows = np.asarray(d["rows"], dtype=np.float64)
        if rows.size:
            V = rows.shape[1]
        snaps.append(Snapshot(d["step"], np.asarray(d["masked_positions"], dtype=np.int64),
                              rows.reshape(len(d["masked_positions"]), V)))
    return Trajectory(snaps, head["stride"], np.asarray(head["birth"], dtype=np.int64), head["total_steps"])


def write_trajectories(path: str | Path, trajectories: list[Trajectory]) -> None:
    """Several trajectories concatenated; each begins with its header line."""
    with open(path, "w") as fh:
        for t in trajectories:
            dump_trajectory(t, fh)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    out, block = [], []
    for line in Path(path).read_text().splitlines():
        d = json.loads(line)
        if "stride" in d and block:
            out.append(load_trajectory(block))
            block = []
        block.append(line)
    if block:
        out.append(load_trajectory(block))
    return out


