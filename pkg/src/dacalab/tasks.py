"""Small verifiable-reward environments: mini-Countdown, 4x4 Sudoku, wrapped arithmetic.

Every symbol is one vocabulary token.  Prompt and completion lengths are
fixed per task kind (see ``SHAPES``); completions are right-padded with PAD
and PAD tokens are dropped before scoring.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import VOCAB

KINDS = ("countdown", "sudoku4", "arith")
# kind -> (prompt_len, completion_len)
SHAPES = {"countdown": (7, 8), "sudoku4": (16, 16), "arith": (5, 4)}
OPS = "+-*"


@dataclass
class RewardBreakdown:
    components: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))


@dataclass
class TaskInstance:
    kind: str
    prompt_ids: list[int]
    oracle: dict

    @property
    def prompt_text(self) -> str:
        return VOCAB.decode(self.prompt_ids)

    def reward(self, completion_text: str) -> RewardBreakdown:
        return REWARDS[self.kind](self, completion_text)

    def solution_ids(self) -> list[int]:
        """A completion that attains the maximum reward."""
        return _pad(VOCAB.encode(self.oracle["solution"]), SHAPES[self.kind][1])

    def demo_ids(self, rng: np.random.Generator) -> list[int]:
        """A well-formatted completion that ignores the task logic (warm-start data)."""
        return _pad(VOCAB.encode(DEMOS[self.kind](self, rng)), SHAPES[self.kind][1])

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "prompt_ids": [int(i) for i in self.prompt_ids],
                           "oracle": self.oracle})

    @classmethod
    def from_json(cls, line: str) -> "TaskInstance":
        d = json.loads(line)
        return cls(d["kind"], list(d["prompt_ids"]), d["oracle"])


def _pad(ids: list[int], L: int) -> list[int]:
    if len(ids) > L:
        raise ValueError("completion longer than the task's completion length")
    return ids + [VOCAB.pad_id] * (L - len(ids))


# -------------------------------------------------------------- countdown


def evaluate_expression(text: str) -> tuple[int, list[int]] | None:
    """Value and literal operands of ``n (op n)*`` with * binding tighter; None if unparseable."""
    parts = re.findall(r"\d+|[+\-*]|.", text)
    if not parts or len(parts) % 2 == 0:
        return None
    nums, ops = parts[0::2], parts[1::2]
    if not all(n.isdigit() for n in nums) or not all(o in OPS for o in ops):
        return None
    vals = [int(n) for n in nums]
    # fold multiplications first
    terms, signs = [vals[0]], []
    for op, v in zip(ops, vals[1:]):
        if op == "*":
            terms[-1] *= v
        else:
            signs.append(op)
            terms.append(v)
    total = terms[0]
    for s, t in zip(signs, terms[1:]):
        total = total + t if s == "+" else total - t
    return total, vals


def countdown_solutions(numbers, target: int) -> list[str]:
    out = []
    for perm in sorted(set(itertools.permutations(numbers))):
        for o1, o2 in itertools.product(OPS, repeat=2):
            expr = f"{perm[0]}{o1}{perm[1]}{o2}{perm[2]}"
            if evaluate_expression(expr)[0] == target:
                out.append(expr)
    return out


def sample_countdown(rng: np.random.Generator) -> TaskInstance:
    while True:
        nums = [int(x) for x in rng.integers(1, 10, size=3)]
        perm = [nums[i] for i in rng.permutation(3)]
        o1, o2 = (OPS[i] for i in rng.integers(0, 3, size=2))
        target = evaluate_expression(f"{perm[0]}{o1}{perm[1]}{o2}{perm[2]}")[0]
        if 0 <= target <= 999:
            break
    sols = countdown_solutions(nums, target)
    assert sols, "enumeration must recover the generating expression"
    prompt = "".join(str(n) for n in nums) + "|" + f"{target:03d}"
    return TaskInstance("countdown", VOCAB.encode(prompt),
                        {"numbers": nums, "target": target, "solution": sols[0]})


def reward_countdown(inst: TaskInstance, text: str) -> RewardBreakdown:
    parsed = evaluate_expression(text) if text else None
    score = 0.0
    if parsed is not None:
        value, used = parsed
        if sorted(used) == sorted(inst.oracle["numbers"]):
            score = 1.0 if value == inst.oracle["target"] else 0.1
    return RewardBreakdown({"correctness": score})


def _demo_countdown(inst: TaskInstance, rng) -> str:
    nums = [inst.oracle["numbers"][i] for i in rng.permutation(3)]
    o1, o2 = (OPS[i] for i in rng.integers(0, 3, size=2))
    return f"{nums[0]}{o1}{nums[1]}{o2}{nums[2]}"


# ----------------------------------------------------------------- sudoku

_BOXES = [[(r, c) for r in range(br, br + 2) for c in range(bc, bc + 2)] for br in (0, 2) for bc in (0, 2)]


def _valid_full(grid: np.ndarray) -> bool:
    want = {1, 2, 3, 4}
    return (all(set(grid[r]) == want for r in range(4))
            and all(set(grid[:, c]) == want for c in range(4))
            and all({grid[r, c] for r, c in box} == want for box in _BOXES))


def solve_sudoku4(grid, limit: int = 2) -> list[np.ndarray]:
    """Exhaustive backtracking; returns up to ``limit`` solutions (0 marks blanks)."""
    g = np.array(grid, dtype=np.int64).reshape(4, 4)
    sols: list[np.ndarray] = []

    def ok(r, c, v):
        if v in g[r] or v in g[:, c]:
            return False
        br, bc = 2 * (r // 2), 2 * (c // 2)
        return v not in g[br:br + 2, bc:bc + 2]

    def rec(i):
        if len(sols) >= limit:
            return
        if i == 16:
            sols.append(g.copy())
            return
        r, c = divmod(i, 4)
        if g[r, c]:
            rec(i + 1)
            return
        for v in range(1, 5):
            if ok(r, c, v):
                g[r, c] = v
                rec(i + 1)
                g[r, c] = 0

    rec(0)
    return sols


def sample_sudoku4(rng: np.random.Generator) -> TaskInstance:
    base = np.array([[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]])
    while True:
        digits = rng.permutation(4) + 1
        grid = digits[base - 1]
        bands = rng.permutation(2)
        rows = [2 * b + r for b in bands for r in rng.permutation(2)]
        stacks = rng.permutation(2)
        cols = [2 * s + c for s in stacks for c in rng.permutation(2)]
        grid = grid[rows][:, cols]
        if rng.random() < 0.5:
            grid = grid.T
        assert _valid_full(grid)
        n_blank = int(rng.integers(4, 9))
        blanks = np.sort(rng.choice(16, size=n_blank, replace=False))
        puzzle = grid.reshape(-1).copy()
        puzzle[blanks] = 0
        if len(solve_sudoku4(puzzle)) == 1:
            break
    prompt = "".join("?" if v == 0 else str(v) for v in puzzle)
    solution = "".join(str(v) for v in grid.reshape(-1))
    return TaskInstance("sudoku4", VOCAB.encode(prompt),
                        {"solution": solution, "blanks": [int(b) for b in blanks]})


def reward_sudoku(inst: TaskInstance, text: str) -> RewardBreakdown:
    blanks = inst.oracle["blanks"]
    sol = inst.oracle["solution"]
    correct = sum(1 for b in blanks if b < len(text) and text[b] == sol[b])
    return RewardBreakdown({"cells": correct / len(blanks)})


def _demo_sudoku(inst: TaskInstance, rng) -> str:
    givens = VOCAB.decode(inst.prompt_ids)
    return "".join(str(int(rng.integers(1, 5))) if ch == "?" else ch for ch in givens)


# ------------------------------------------------------------------ arith

_WRAPPED = re.compile(r"^\[(\d+)\]$")


def sample_arith(rng: np.random.Generator) -> TaskInstance:
    a, b = (int(x) for x in rng.integers(0, 10, size=2))
    return TaskInstance("arith", VOCAB.encode(f"{a}+{b}=?"), {"a": a, "b": b, "answer": a + b,
                                                              "solution": f"[{a + b}]"})


def reward_arith(inst: TaskInstance, text: str) -> RewardBreakdown:
    m = _WRAPPED.match(text)
    if m:
        fmt, ans = 1.0, int(m.group(1))
    else:
        digits = re.search(r"\d+", text)
        if digits is None:
            return RewardBreakdown({"format": 0.0, "correctness": 0.0})
        fmt, ans = 0.25, int(digits.group(0))
    return RewardBreakdown({"format": fmt, "correctness": 2.0 if ans == inst.oracle["answer"] else 0.0})


def _demo_arith(inst: TaskInstance, rng) -> str:
    return f"[{int(rng.integers(0, 19))}]"


# -------------------------------------------------------------- dispatch

SAMPLERS = {"countdown": sample_countdown, "sudoku4": sample_sudoku4, "arith": sample_arith}
REWARDS = {"countdown": reward_countdown, "sudoku4": reward_sudoku, "arith": reward_arith}
DEMOS = {"countdown": _demo_countdown, "sudoku4": _demo_sudoku, "arith": _demo_arith}
MAX_REWARD = {"countdown": 1.0, "sudoku4": 1.0, "arith": 3.0}


def sample_task(kind: str, rng: np.random.Generator) -> TaskInstance:
    if kind not in SAMPLERS:
        raise ValueError(f"unsupported task kind {kind!r}")
    return SAMPLERS[kind](rng)


def score_completion(inst: TaskInstance, completion_ids) -> RewardBreakdown:
    # sudoku is scored by cell position, so PAD keeps its slot there
    pad = "." if inst.kind == "sudoku4" else ""
    return inst.reward(VOCAB.decode(completion_ids, pad_char=pad))


def dump_instances(path: str | Path, instances: list[TaskInstance]) -> None:
    Path(path).write_text("".join(i.to_json() + "\n" for i in instances))


def load_instances(path: str | Path) -> list[TaskInstance]:
    return [TaskInstance.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
