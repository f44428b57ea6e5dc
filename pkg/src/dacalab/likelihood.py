"""Completion log-likelihood estimators.

All estimators take batched ids (``prompt [B, P]``, ``completion [B, L]``)
and return differentiable tensors, so the same code serves diagnostics and
losses.  1-D inputs are treated as a batch of one and squeezed on return.

``prompt_mask`` (boolean ``[B, P]``) replaces the flagged prompt tokens by
MASK for every pass of the call; callers draw it once and reuse it so the
current and old policies see identical inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser

DEFAULT_SDMC_POINTS = (0.2, 0.4, 0.6, 0.8)


def _batch(prompt, completion):
    prompt = np.asarray(prompt, dtype=np.int64)
    completion = np.asarray(completion, dtype=np.int64)
    single = completion.ndim == 1
    return np.atleast_2d(prompt), np.atleast_2d(completion), single


def _masked_prompt(model: Denoiser, prompt: np.ndarray, prompt_mask) -> np.ndarray:
    if prompt_mask is None:
        return prompt
    return np.where(np.atleast_2d(prompt_mask), model.mask_id, prompt)


def draw_prompt_mask(shape, prob: float, rng: np.random.Generator) -> np.ndarray:
    return rng.random(shape) < prob


def _squeeze(t: Tensor, single: bool) -> Tensor:
    return t[0] if single else t


# ------------------------------------------------------------ mean field


def mean_field_per_token(model: Denoiser, prompt, completion, prompt_mask=None) -> Tensor:
    """``log p(o_n | all completion masked, q)`` for every position; one pass per sample."""
    prompt, completion, single = _batch(prompt, completion)
    masked = np.full_like(completion, model.mask_id)
    lp = model.log_probs(_masked_prompt(model, prompt, prompt_mask), masked, "loss")
    return _squeeze(ad.gather(lp, completion), single)


def mean_field_loglik(model: Denoiser, prompt, completion, rng: np.random.Generator,
                      t: float | None = None, prompt_mask=None) -> Tensor:
    """Random-ratio estimate: mean log-prob over the positions masked at a drawn ``t``.

    A draw that masks nothing is rejected and ``t`` redrawn.
    """
    prompt, completion, single = _batch(prompt, completion)
    B, L = completion.shape
    masks = np.zeros((B, L), dtype=bool)
    for b in range(B):
        while True:
            tb = rng.random() if t is None else t
            m = rng.random(L) < tb
            if m.any():
                break
            if t is not None and t <= 0:
                raise ValueError("t = 0 never masks anything")
        masks[b] = m
    x_t = np.where(masks, model.mask_id, completion)
    lp = model.log_probs(_masked_prompt(model, prompt, prompt_mask), x_t, "loss")
    tok = ad.gather(lp, completion)
    w = masks / masks.sum(axis=1, keepdims=True)
    return _squeeze(ad.sum_(tok * Tensor(w), axis=1), single)


# ----------------------------------------------------------------- ELBO


def sdmc_masks(B: int, L: int, quad_points, rng: np.random.Generator) -> np.ndarray:
    """One random mask pattern per (sample, quadrature point): boolean ``[B, Q, L]``."""
    t = np.asarray(quad_points, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("quadrature points must lie in (0, 1]")
    return rng.random((B, len(t), L)) < t[None, :, None]


def elbo_sdmc(model: Denoiser, prompt, completion, quad_points=DEFAULT_SDMC_POINTS,
              rng: np.random.Generator | None = None, masks=None, prompt_mask=None) -> Tensor:
    """Fixed-node ELBO: average over points of ``(1/t) * sum_masked log p``.

    Pass ``masks`` (from :func:`sdmc_masks`) to share draws between policies.
    """
    prompt, completion, single = _batch(prompt, completion)
    B, L = completion.shape
    t = np.asarray(quad_points, dtype=np.float64)
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("quadrature points must lie in (0, 1]")
    if masks is None:
        masks = sdmc_masks(B, L, t, rng if rng is not None else np.random.default_rng(0))
    Q = len(t)
    ids = np.where(masks, model.mask_id, completion[:, None, :]).reshape(B * Q, L)
    pr = np.repeat(_masked_prompt(model, prompt, prompt_mask), Q, axis=0)
    lp = model.log_probs(pr, ids, "loss")
    tok = ad.reshape(ad.gather(lp, np.repeat(completion, Q, axis=0)), (B, Q, L))
    w = masks / t[None, :, None] / Q
    return _squeeze(ad.sum_(tok * Tensor(w), axis=(1, 2)), single)


# ---------------------------------------------------------------- strata


@dataclass
class StratumPartition:
    K: int
    strata: list[np.ndarray]
    strategy: str = "random"
    assignment: np.ndarray = field(init=False)

    def __post_init__(self):
        L = sum(len(s) for s in self.strata)
        self.assignment = np.full(L, -1, dtype=np.int64)
        for k, s in enumerate(self.strata):
            if np.any(self.assignment[s] >= 0):
                raise ValueError("strata overlap")
            self.assignment[s] = k
        if np.any(self.assignment < 0):
            raise ValueError("strata do not cover all positions")

    @property
    def L(self) -> int:
        return len(self.assignment)

    def membership(self) -> np.ndarray:
        """One-hot ``[K, L]``; row k flags the positions of stratum k."""
        return (np.arange(self.K)[:, None] == self.assignment[None, :]).astype(np.float64)


def partition_strata(L: int, K: int, strategy: str = "random", rng: np.random.Generator | None = None,
                     model: Denoiser | None = None, prompt=None, completion=None,
                     confidence_order: str = "contiguous", prompt_mask=None) -> StratumPartition:
    """Split ``L`` positions into ``K`` size-balanced strata.

    ``random`` shuffles and deals round-robin.  ``confidence`` ranks positions
    by fully-masked predictive entropy (one loss pass), highest first, then
    cuts the ranking into contiguous chunks, or deals it round-robin when
    ``confidence_order='round_robin'``.
    """
    if not 1 <= K <= L:
        raise ValueError(f"K={K} outside [1, {L}]")
    if strategy == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        perm = rng.permutation(L)
        strata = [np.sort(perm[k::K]) for k in range(K)]
    elif strategy == "confidence":
        if model is None or prompt is None or completion is None:
            raise ValueError("confidence stratification needs model, prompt and completion")
        ent = entropy_fully_masked(model, prompt, completion, prompt_mask)
        if ent.ndim > 1:
            ent = ent[0]
        ranked = np.argsort(-ent, kind="stable")
        if confidence_order == "contiguous":
            strata = [np.sort(c) for c in np.array_split(ranked, K)]
        elif confidence_order == "round_robin":
            strata = [np.sort(ranked[k::K]) for k in range(K)]
        else:
            raise ValueError(f"unknown confidence_order {confidence_order!r}")
    else:
        raise ValueError(f"unknown stratification strategy {strategy!r}")
    return StratumPartition(K, strata, strategy)


def entropy_fully_masked(model: Denoiser, prompt, completion, prompt_mask=None) -> np.ndarray:
    prompt, completion, single = _batch(prompt, completion)
    masked = np.full_like(completion, model.mask_id)
    with ad.no_grad():
        lp = model.log_probs(_masked_prompt(model, prompt, prompt_mask), masked, "loss").data
    ent = -(np.exp(lp) * lp).sum(-1)
    return ent[0] if single else ent


def partition_batch(B: int, L: int, K: int, strategy: str, rng: np.random.Generator,
                    model=None, prompts=None, completions=None, confidence_order="contiguous",
                    prompt_mask=None) -> list[StratumPartition]:
    if strategy == "confidence":
        # one batched entropy pass instead of B separate ones
        ent = entropy_fully_masked(model, prompts, completions, prompt_mask)
        out = []
        for b in range(B):
            ranked = np.argsort(-ent[b], kind="stable")
            if confidence_order == "contiguous":
                strata = [np.sort(c) for c in np.array_split(ranked, K)]
            else:
                strata = [np.sort(ranked[k::K]) for k in range(K)]
            out.append(StratumPartition(K, strata, "confidence"))
        return out
    return [partition_strata(L, K, strategy, rng) for _ in range(B)]


# -------------------------------------------------------------------- SML


def sml_per_token(model: Denoiser, prompt, completion, partitions, prompt_mask=None) -> Tensor:
    """``log p(o_n | completion with only n's stratum masked, q)``; K passes per sample."""
    prompt, completion, single = _batch(prompt, completion)
    if isinstance(partitions, StratumPartition):
        partitions = [partitions]
    B, L = completion.shape
    K = partitions[0].K
    if len(partitions) != B or any(p.K != K or p.L != L for p in partitions):
        raise ValueError("need one partition per sample, all with the same K and L")
    member = np.stack([p.membership() for p in partitions])  # [B, K, L]
    ids = np.where(member > 0, model.mask_id, completion[:, None, :]).reshape(B * K, L)
    pr = np.repeat(_masked_prompt(model, prompt, prompt_mask), K, axis=0)
    lp = model.log_probs(pr, ids, "loss")
    tok = ad.reshape(ad.gather(lp, np.repeat(completion, K, axis=0)), (B, K, L))
    return _squeeze(ad.sum_(tok * Tensor(member), axis=1), single)


def sml_loglik(model: Denoiser, prompt, completion, partitions, prompt_mask=None) -> Tensor:
    per = sml_per_token(model, prompt, completion, partitions, prompt_mask)
    return ad.sum_(per, axis=-1)


def enriched_token_loglik(model: Denoiser, prompt, completion, partitions, prompt_mask=None) -> Tensor:
    """Average of the fully-masked and own-stratum views per token (K + 1 passes)."""
    mf = mean_field_per_token(model, prompt, completion, prompt_mask)
    sml = sml_per_token(model, prompt, completion, partitions, prompt_mask)
    return ad.affine(mf + sml, 0.5)


def sml_ratio(enriched_theta, enriched_old) -> Tensor:
    """``exp(l_theta - l_old)`` per token; ``enriched_old`` is a cached constant."""
    old = enriched_old.data if isinstance(enriched_old, Tensor) else np.asarray(enriched_old)
    return ad.exp(ad.add(enriched_theta, Tensor(-old)))


def token_ratio(logp_theta: Tensor, logp_old) -> Tensor:
    return sml_ratio(logp_theta, logp_old)


def pseudo_loglik_naive(model: Denoiser, prompt, completion, prompt_mask=None) -> np.ndarray:
    """Leave-one-out log-probs with one pass per position; the K = L oracle."""
    prompt = np.asarray(prompt, dtype=np.int64)
    completion = np.asarray(completion, dtype=np.int64)
    out = np.zeros(len(completion))
    pm = _masked_prompt(model, prompt[None, :], prompt_mask)[0]
    with ad.no_grad():
        for i in range(len(completion)):
            x = completion.copy()
            x[i] = model.mask_id
            out[i] = model.log_probs(pm, x, "loss").data[i, completion[i]]
    return out


# -------------------------------------------------------------- reports


@dataclass
class LikelihoodReport:
    per_token_logprob: np.ndarray
    sequence_logprob: float
    estimator_tag: str
    passes_used: int


def estimate(model: Denoiser, prompt, completion, estimator: str, K: int = 4,
             strategy: str = "random", rng: np.random.Generator | None = None,
             quad_points=DEFAULT_SDMC_POINTS) -> LikelihoodReport:
    """Single-sequence estimate with pass accounting, for diagnostics.

    ``passes_used`` counts estimator passes only; the confidence strategy's
    entropy pass is partitioning overhead and is excluded.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    prompt = np.asarray(prompt)
    completion = np.asarray(completion)
    L = len(completion)
    with ad.no_grad():
        if estimator == "mean-field":
            per = mean_field_per_token(model, prompt, completion).data
            return LikelihoodReport(per, float(per.sum()), estimator, 1)
        if estimator == "elbo-sdmc":
            val = elbo_sdmc(model, prompt, completion, quad_points, rng).item()
            return LikelihoodReport(np.full(L, np.nan), val, estimator, len(quad_points))
        if estimator in ("sml", "pseudo"):
            if estimator == "pseudo":
                K = L
            part = partition_strata(L, K, strategy, rng, model, prompt, completion)
            per = sml_per_token(model, prompt, completion, part).data
            return LikelihoodReport(per, float(per.sum()), estimator, K)
    raise ValueError(f"unknown estimator {estimator!r}")
