"""Policy-gradient losses for masked diffusion policies.

Shapes: a batch holds ``n_groups * G`` completions laid out group-major,
so rows ``g*G .. g*G+G-1`` belong to prompt ``g``.  Per-token tensors are
``[B, L]``.  Multi-group losses are averaged over groups.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .likelihood import DEFAULT_SDMC_POINTS

BASES = ("d1", "wd1", "gdpo")


@dataclass
class ObjectiveConfig:
    base: str = "wd1"
    use_dps: bool = False
    use_sml: bool = False
    clip_eps: float = 0.5
    lam: float = 0.1
    K: int = 4
    eta: float = 0.1
    beta: float = 0.0
    adv_eps: float = 1e-4
    norm_mode: str = "per-step"
    norm_scope: str = "batch"  # or "group": per-step stats within each prompt group
    norm_eps: float = 1e-6
    norm_eps_mode: str = "guard"
    last_step_mode: str = "extrapolate"
    stride: int = 1
    sdmc_points: list = field(default_factory=lambda: list(DEFAULT_SDMC_POINTS))
    strat_strategy: str = "random"
    confidence_order: str = "contiguous"
    wd1_aggregate: str = "mean"
    wd1_softmax: str = "group"  # or "subset": softmax only over same-sign members
    gdpo_advantage: str = "ratio"  # or "reward": group-relative reward advantages
    prompt_mask_prob: float = 0.15

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base loss {self.base!r}")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.eta < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("eta, beta and lambda must be non-negative")
        if self.K < 1 or self.stride < 1:
            raise ValueError("K and stride must be >= 1")


# JSON key -> attribute, for names that are python keywords
OBJECTIVE_ALIASES = {"lambda": "lam"}


def objective_to_dict(cfg: ObjectiveConfig) -> dict:
    inv = {v: k for k, v in OBJECTIVE_ALIASES.items()}
    return {inv.get(f.name, f.name): getattr(cfg, f.name) for f in fields(cfg)}


# --------------------------------------------------------- advantages


def group_advantages(rewards, eps: float = 1e-4) -> np.ndarray:
    """``(r - mean) / (std + eps)`` within one group, population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least 2 completions per group")
    return (r - r.mean()) / (r.std() + eps)


def batch_advantages(rewards, G: int, eps: float = 1e-4) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64).reshape(-1, G)
    return np.concatenate([group_advantages(row, eps) for row in r])


def _as_token_adv(adv, shape) -> np.ndarray:
    a = np.asarray(adv, dtype=np.float64)
    if a.ndim == 1:
        a = np.broadcast_to(a[:, None], shape)
    return a


# ------------------------------------------------------------------ d1


def clipped_surrogate(ratio: Tensor, token_adv, clip_eps: float) -> tuple[Tensor, float]:
    """``-mean(min(rho * A, clip(rho) * A))`` and the fraction of tokens on the clipped branch."""
    adv = Tensor(_as_token_adv(token_adv, ratio.shape))
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    obj = ad.minimum(unclipped, clipped)
    frac = float(np.mean(clipped.data < unclipped.data))
    return -ad.mean(obj), frac


def loss_d1(ratio: Tensor, token_adv, clip_eps: float = 0.5) -> tuple[Tensor, float]:
    """Per-token clipped surrogate on fully-masked ratios."""
    return clipped_surrogate(ratio, token_adv, clip_eps)


def loss_daca_ratio(sml_ratio: Tensor, token_adv, clip_eps: float = 0.5) -> tuple[Tensor, float]:
    """Clipped surrogate on enriched (SML) ratios with DPS-modulated advantages."""
    return clipped_surrogate(sml_ratio, token_adv, clip_eps)


# ----------------------------------------------------------------- wd1


def wd1_weights(A, G: int, softmax_domain: str = "group") -> np.ndarray:
    """Signed per-sample coefficients multiplying ``log p(y)`` in the wd1 loss."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, G)
    coef = np.zeros_like(A)
    for g, a in enumerate(A):
        pos, neg = a > 0, a < 0
        if softmax_domain == "group":
            wp = _softmax(a)
            wn = _softmax(-a)
        elif softmax_domain == "subset":
            wp = np.zeros_like(a)
            wn = np.zeros_like(a)
            if pos.any():
                wp[pos] = _softmax(a[pos])
            if neg.any():
                wn[neg] = _softmax(-a[neg])
        else:
            raise ValueError(f"unknown softmax domain {softmax_domain!r}")
        coef[g] = np.where(pos, -wp, 0.0) + np.where(neg, wn, 0.0)
    return coef.reshape(-1)


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max())
    return e / e.sum()


def sequence_logprob(token_logp: Tensor, omega=None, aggregate: str = "mean") -> Tensor:
    t = token_logp if omega is None else token_logp * Tensor(np.asarray(omega, dtype=np.float64))
    if aggregate == "mean":
        return ad.mean(t, axis=-1)
    if aggregate == "sum":
        return ad.sum_(t, axis=-1)
    raise ValueError(f"unknown aggregate {aggregate!r}")


def loss_wd1(token_logp: Tensor, A, G: int, omega=None, aggregate: str = "mean",
             softmax_domain: str = "group") -> Tensor:
    """Ratio-free positive/negative reinforcement.

    ``token_logp`` are fully-masked per-token log-probs ``[B, L]``; ``omega``
    optionally weights each token inside the sequence aggregate.
    """
    seq = sequence_logprob(token_logp, omega, aggregate)
    coef = wd1_weights(A, G, softmax_domain)
    n_groups = len(coef) // G
    return ad.affine(ad.sum_(seq * Tensor(coef)), 1.0 / n_groups)


def loss_daca_wd1(token_logp: Tensor, A, G: int, omega=None, sml_seq: Tensor | None = None,
                  eta: float = 0.1, aggregate: str = "mean", softmax_domain: str = "group") -> Tensor:
    """wd1 with DPS token weights minus ``eta`` times the mean SML log-likelihood."""
    loss = loss_wd1(token_logp, A, G, omega, aggregate, softmax_domain)
    if sml_seq is not None:
        loss = loss + ad.affine(ad.mean(sml_seq), -eta)
    return loss


# ---------------------------------------------------------------- GDPO


def loss_gdpo(elbo_theta: Tensor, elbo_old, G: int, lengths, clip_eps: float = 0.5,
              beta: float = 0.0, kl: Tensor | None = None, advantages=None,
              token_adv=None, omega=None) -> tuple[Tensor, float]:
    """Sequence-level clipped objective on ELBO ratios.

    Without ``advantages`` the advantage is ``r_g - mean(r)`` within each
    group, a function of the current parameters.  ``token_adv`` (``[B, L]``)
    replaces the per-sample advantage by per-token ones, averaged over tokens.
    ``omega`` (``[B, L]``, non-negative) scales each sample's term by its mean
    token weight, which equals using ``A * omega_i`` per token.
    """
    old = np.asarray(elbo_old.data if isinstance(elbo_old, Tensor) else elbo_old, dtype=np.float64)
    if np.any(np.abs(old) < 1e-8):
        raise ZeroDivisionError("degenerate ELBO ratio: old-policy ELBO is ~0")
    B = old.shape[0]
    r = elbo_theta * Tensor(1.0 / old)
    lo, hi = 1.0 - clip_eps, 1.0 + clip_eps
    inv_len = Tensor(1.0 / np.asarray(lengths, dtype=np.float64))
    if token_adv is not None:
        adv = Tensor(np.asarray(token_adv, dtype=np.float64))
        r2 = ad.reshape(r, (B, 1))
        obj = ad.minimum(r2 * adv, ad.clip(r2, lo, hi) * adv)
        term = ad.mean(obj, axis=1)
        frac = float(np.mean((ad.clip(r2, lo, hi) * adv).data < (r2 * adv).data))
    else:
        if advantages is None:
            gm = ad.reshape(ad.mean(ad.reshape(r, (B // G, G)), axis=1, keepdims=True), (B // G, 1))
            A = ad.reshape(ad.reshape(r, (B // G, G)) - gm, (B,))
        else:
            A = Tensor(np.asarray(advantages, dtype=np.float64))
        unclipped = r * A
        clipped = ad.clip(r, lo, hi) * A
        term = ad.minimum(unclipped, clipped)
        frac = float(np.mean(clipped.data < unclipped.data))
        if omega is not None:
            w = np.asarray(omega, dtype=np.float64)
            if np.any(w < 0):
                raise ValueError("omega must be non-negative")
            term = term * Tensor(w.mean(axis=1))
    loss = -ad.mean(term * inv_len)
    if beta and kl is not None:
        loss = loss + ad.affine(kl, beta)
    return loss, frac


def kl_fully_masked(model, ref, prompt, completion, prompt_mask=None) -> Tensor:
    """Mean over positions of ``KL(pi_theta || pi_ref)`` rows in the fully-masked view."""
    from .likelihood import _batch, _masked_prompt

    prompt, completion, _ = _batch(prompt, completion)
    masked = np.full_like(completion, model.mask_id)
    pr = _masked_prompt(model, prompt, prompt_mask)
    lp = model.log_probs(pr, masked, "loss")
    with ad.no_grad():
        lref = ref.log_probs(pr, masked, "loss").data
    per = ad.sum_(ad.exp(lp) * (lp - Tensor(lref)), axis=-1)
    return ad.mean(per)
