"""The toy bidirectional denoiser used as the policy.

Input is ``prompt ++ completion`` token ids; output is a log-probability row
over the whole vocabulary for every completion position.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD = "<pad>"
MASK = "<mask>"
SYMBOLS = [PAD, MASK, *"0123456789", "+", "-", "*", "=", "?", "[", "]", "|"]


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...] = tuple(SYMBOLS)

    def __post_init__(self):
        if len(self.symbols) < 4:
            raise ValueError("vocabulary needs at least 4 symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        if PAD not in self.symbols or MASK not in self.symbols:
            raise ValueError("vocabulary must contain PAD and MASK")

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.symbols.index(PAD)

    @property
    def mask_id(self) -> int:
        return self.symbols.index(MASK)

    def id(self, sym: str) -> int:
        return self.symbols.index(sym)

    def encode(self, text: str) -> list[int]:
        return [self.symbols.index(c) for c in text]

    def decode(self, ids, show_mask: bool = False, pad_char: str = "") -> str:
        out = []
        for i in np.asarray(ids).reshape(-1):
            s = self.symbols[int(i)]
            if s == PAD:
                out.append(pad_char)
                continue
            if s == MASK:
                out.append("#" if show_mask else "")
                continue
            out.append(s)
        return "".join(out)


VOCAB = Vocabulary()


@dataclass
class ForwardPassCounter:
    """Per-sequence forward-pass tallies; a batched call of B rows counts B."""

    generation_passes: int = 0
    loss_passes: int = 0

    def add(self, tag: str, n: int = 1) -> None:
        if tag == "generation":
            self.generation_passes += n
        elif tag == "loss":
            self.loss_passes += n
        else:
            raise ValueError(f"unknown pass tag {tag!r}")

    def reset(self) -> None:
        self.generation_passes = 0
        self.loss_passes = 0

    def snapshot(self) -> tuple[int, int]:
        return self.generation_passes, self.loss_passes


@dataclass
class DenoiserConfig:
    vocab_size: int = VOCAB.size
    prompt_len: int = 8
    completion_len: int = 8
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    mixer: str = "attention"  # or "mlp": token-mixing MLP instead of attention
    mlp_ratio: int = 2
    init_std: float = 0.02
    zero_output: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mixer not in ("attention", "mlp"):
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if self.mixer == "attention" and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def init_params(cfg: DenoiserConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    D, V, N = cfg.d_model, cfg.vocab_size, cfg.prompt_len + cfg.completion_len
    H = cfg.mlp_ratio * D
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, 1.0, (V, D)) * cfg.init_std * 10,
        "pos_emb": rng.normal(0, 1.0, (N, D)) * cfg.init_std * 10,
    }
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        p[pre + "ln1.g"] = np.ones(D)
        p[pre + "ln1.b"] = np.zeros(D)
        if cfg.mixer == "attention":
            for w in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + w] = rng.normal(0, 1.0 / math.sqrt(D), (D, D))
        else:
            p[pre + "tok.w"] = rng.normal(0, 1.0 / math.sqrt(N), (N, N))
            p[pre + "tok.b"] = np.zeros(N)
        p[pre + "ln2.g"] = np.ones(D)
        p[pre + "ln2.b"] = np.zeros(D)
        p[pre + "mlp.w1"] = rng.normal(0, 1.0 / math.sqrt(D), (D, H))
        p[pre + "mlp.b1"] = np.zeros(H)
        p[pre + "mlp.w2"] = rng.normal(0, 1.0 / math.sqrt(H), (H, D))
        p[pre + "mlp.b2"] = np.zeros(D)
    p["ln_f.g"] = np.ones(D)
    p["ln_f.b"] = np.zeros(D)
    if cfg.zero_output:
        p["head.w"] = np.zeros((D, V))
    else:
        p["head.w"] = rng.normal(0, 1.0 / math.sqrt(D), (D, V))
    p["head.b"] = np.zeros(V)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class Denoiser:
    """Policy network plus its pass counter.

    ``params`` are live leaf tensors mutated in place by the optimizer.
    Frozen copies share the counter so every pass lands on one ledger.
    """

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor] | None = None,
                 counter: ForwardPassCounter | None = None, frozen: bool = False):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.counter = counter if counter is not None else ForwardPassCounter()
        self.frozen = frozen

    @property
    def mask_id(self) -> int:
        return VOCAB.mask_id

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def frozen_copy(self) -> "Denoiser":
        params = {k: Tensor(v.data.copy(), requires_grad=False, name=k) for k, v in self.params.items()}
        return Denoiser(self.cfg, params, self.counter, frozen=True)

    def log_probs(self, prompt_ids, completion_ids, tag: str = "loss") -> Tensor:
        """Log-probability rows for every completion position.

        Accepts a single sequence (1-D ids, returns ``[L, V]``) or a batch
        (2-D ids, returns ``[B, L, V]``).
        """
        prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
        completion_ids = np.asarray(completion_ids, dtype=np.int64)
        single = completion_ids.ndim == 1
        prompt_ids = np.atleast_2d(prompt_ids)
        completion_ids = np.atleast_2d(completion_ids)
        cfg = self.cfg
        if completion_ids.shape[1] != cfg.completion_len:
            raise ValueError(f"completion length {completion_ids.shape[1]} != {cfg.completion_len}")
        if prompt_ids.shape[1] != cfg.prompt_len:
            raise ValueError(f"prompt length {prompt_ids.shape[1]} != {cfg.prompt_len}")
        if prompt_ids.shape[0] != completion_ids.shape[0]:
            raise ValueError("prompt and completion batch sizes differ")
        ids = np.concatenate([prompt_ids, completion_ids], axis=1)
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
        out = self._forward(ids)
        self.counter.add(tag, ids.shape[0])
        return out[0] if single else out

    def _forward(self, ids: np.ndarray) -> Tensor:
        cfg, p = self.cfg, self.params
        B, N = ids.shape
        x = ad.embedding(p["tok_emb"], ids) + p["pos_emb"]
        for b in range(cfg.n_blocks):
            pre = f"blocks.{b}."
            h = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            if cfg.mixer == "attention":
                x = x + self._attention(h, pre)
            else:
                t = ad.transpose(h, (0, 2, 1)) @ p[pre + "tok.w"] + p[pre + "tok.b"]
                x = x + ad.transpose(ad.gelu(t), (0, 2, 1))
            h = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = ad.gelu(h @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"])
            x = x + (h @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"])
        x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        x = x[:, cfg.prompt_len:, :]
        logits = x @ p["head.w"] + p["head.b"]
        return ad.log_softmax(logits, axis=-1)

    def _attention(self, h: Tensor, pre: str) -> Tensor:
        p = self.params
        B, N, D = h.shape
        H = self.cfg.n_heads
        dh = D // H

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q = heads(h @ p[pre + "attn.wq"])
        k = ad.transpose(ad.reshape(h @ p[pre + "attn.wk"], (B, N, H, dh)), (0, 2, 3, 1))
        v = heads(h @ p[pre + "attn.wv"])
        att = ad.softmax(ad.affine(q @ k, 1.0 / math.sqrt(dh)), axis=-1)
        o = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, N, D))
        return o @ p[pre + "attn.wo"]


def forward(model: Denoiser, prompt_ids, masked_completion, tag: str = "loss") -> Tensor:
    return model.log_probs(prompt_ids, masked_completion, tag)


def snapshot_old(model: Denoiser) -> Denoiser:
    return model.frozen_copy()


# ------------------------------------------------------------ checkpoints
#
# JSON document:
#   {"format": "dacalab-denoiser/1",
#    "config": {<DenoiserConfig fields>},
#    "params": {"<name>": {"shape": [..], "data": [row-major floats]}, ...}}
# Floats are written with repr precision so a load/save round trip is exact.


def save_checkpoint(model: Denoiser, path: str | Path) -> None:
    doc = {
        "format": "dacalab-denoiser/1",
        "config": asdict(model.cfg),
        "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()}
                   for k, v in model.params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> Denoiser:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "dacalab-denoiser/1":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    cfg = DenoiserConfig(**doc["config"])
    params = {k: Tensor(np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]),
                        requires_grad=True, name=k)
              for k, v in doc["params"].items()}
    return Denoiser(cfg, params)


def copy_params(model: Denoiser) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def load_params(model: Denoiser, values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        model.params[k].data[...] = v


__all__ = [
    "VOCAB", "Vocabulary", "ForwardPassCounter", "DenoiserConfig", "Denoiser",
    "forward", "snapshot_old", "save_checkpoint", "load_checkpoint", "copy_params",
    "load_params", "init_params",
]

