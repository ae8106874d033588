"""Training losses: masked cross-entropy, density-harmonized weighting, and
virtual adversarial smoothing of the input embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import nn_core
from .model import EmoGraceModel, forward_aec, forward_ate
from .rng import stream_generator


def _as_batch(logits: Tensor, targets, mask) -> tuple[Tensor, np.ndarray, np.ndarray]:
    logits = ad.as_tensor(logits)
    if logits.data.ndim == 2:
        logits = ad.reshape(logits, (1,) + logits.data.shape)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if mask is None:
        mask = np.ones(targets.shape, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.ndim == 1:
            mask = mask[None, :]
    if logits.data.shape[:2] != targets.shape or mask.shape != targets.shape:
        raise ValueError("logits, targets and mask must align")
    return logits, targets, mask


def _per_token_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    k = logits.data.shape[-1]
    onehot = np.eye(k)[targets]
    return ad.mul(ad.tsum(ad.mul(ad.log_softmax(logits), onehot), axis=-1), -1.0)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions."""
    logits, targets, mask = _as_batch(logits, targets, mask)
    n = mask.sum()
    if n == 0:
        raise ValueError("cross_entropy needs at least one unmasked position")
    nll = _per_token_nll(logits, targets)
    return ad.mul(ad.tsum(ad.mul(nll, mask)), 1.0 / n)


@dataclass
class GhlState:
    """EMA bin densities for difficulty-harmonized weighting.

    Difficulty of a token is 1 - p(target); densities are per-bin token
    counts smoothed as S <- momentum * S + (1 - momentum) * R, seeded with
    the raw counts of the first batch ever seen.
    """

    bins: int = 24
    momentum: float = 0.75
    ema_counts: np.ndarray | None = None
    initialized: bool = False

    def __post_init__(self) -> None:
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.ema_counts is None:
            self.ema_counts = np.zeros(self.bins, dtype=np.float64)
        else:
            self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
            if self.ema_counts.shape != (self.bins,):
                raise ValueError("ema_counts must have one entry per bin")
            if (self.ema_counts < 0).any():
                raise ValueError("ema_counts must be non-negative")

    def to_meta(self) -> dict:
        return {
            "bins": self.bins,
            "momentum": self.momentum,
            "initialized": self.initialized,
        }

    @classmethod
    def from_meta(cls, meta: dict, ema_counts: np.ndarray) -> "GhlState":
        return cls(
            bins=meta["bins"],
            momentum=meta["momentum"],
            ema_counts=ema_counts,
            initialized=meta["initialized"],
        )


def ghl_loss(
    logits, targets, mask, state: GhlState
) -> tuple[Tensor, np.ndarray]:
    """Difficulty-harmonized cross-entropy.

    Tokens are binned by difficulty; each token's raw weight is the inverse
    of its bin's EMA density, then weights are normalized to sum to the
    number of unmasked tokens. Returns (loss, per-token weights); weights are
    zero at masked positions and are treated as constants by the gradient.
    """
    logits, targets, mask = _as_batch(logits, targets, mask)
    n = mask.sum()
    if n == 0:
        raise ValueError("ghl_loss needs at least one unmasked position")
    probs = nn_core.softmax(logits.data, axis=-1)
    p_target = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    difficulty = 1.0 - p_target
    bin_idx = np.minimum((difficulty * state.bins).astype(np.int64), state.bins - 1)
    unmasked = mask > 0
    counts = np.bincount(bin_idx[unmasked], minlength=state.bins).astype(np.float64)

    if not state.initialized:
        state.ema_counts = counts.copy()
        state.initialized = True
    else:
        state.ema_counts = (
            state.momentum * state.ema_counts + (1.0 - state.momentum) * counts
        )

    # A bin can be empty in the EMA yet populated now (frozen momentum=1
    # densities); fall back to the current batch count so weights stay finite.
    denom = np.where(state.ema_counts > 0, state.ema_counts, counts)
    raw = np.zeros_like(mask)
    raw[unmasked] = 1.0 / denom[bin_idx[unmasked]]
    weights = raw * (n / raw.sum())
    nll = _per_token_nll(logits, targets)
    loss = ad.mul(ad.tsum(ad.mul(nll, weights * mask)), 1.0 / n)
    return loss, weights


@dataclass(frozen=True)
class VatConfig:
    epsilon: float = 1.0
    xi: float = 1e-6

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.xi <= 0:
            raise ValueError("xi must be > 0")


def _branch_logits(
    model: EmoGraceModel,
    ids: np.ndarray,
    mask: np.ndarray,
    branch: str,
    embed_noise,
    ate_label_dist,
) -> Tensor:
    if branch == "ate":
        return forward_ate(model, ids, mask, embed_noise=embed_noise)
    if branch == "aec":
        return forward_aec(model, ids, mask, ate_label_dist, embed_noise=embed_noise)
    raise ValueError(f"unknown branch {branch!r}")


def adversarial_perturbation(
    model: EmoGraceModel,
    token_ids,
    mask,
    vat: VatConfig,
    seed: int,
    branch: str = "ate",
    ate_label_dist=None,
) -> np.ndarray | None:
    """One-power-iteration worst-case direction on the summed token+position
    embeddings of unmasked positions, scaled to L2 norm epsilon. None when
    the probe gradient vanishes."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    m = np.ones(ids.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]

    clean = _branch_logits(model, ids, m, branch, None, ate_label_dist)
    p = nn_core.softmax(clean.data, axis=-1)
    log_p = nn_core.log_softmax(clean.data, axis=-1)

    d = model.config.d_model
    r0 = stream_generator(seed, "vat/probe").standard_normal(ids.shape + (d,))
    r0 *= m[..., None]
    norm = np.linalg.norm(r0)
    if norm == 0:
        return None
    r = Tensor(r0 * (vat.xi / norm), requires_grad=True)
    kl = _mean_kl(p, log_p, _branch_logits(model, ids, m, branch, r, ate_label_dist), m)
    (g,) = ad.backward(kl, wrt=[r])
    gnorm = np.linalg.norm(g)
    if gnorm == 0:
        return None
    return vat.epsilon * g / gnorm


def _mean_kl(
    p: np.ndarray, log_p: np.ndarray, logits_q: Tensor, mask: np.ndarray
) -> Tensor:
    log_q = ad.log_softmax(logits_q)
    kl_pos = ad.tsum(ad.mul(p, ad.add(ad.mul(log_q, -1.0), log_p)), axis=-1)
    return ad.mul(ad.tsum(ad.mul(kl_pos, mask)), 1.0 / mask.sum())


def vat_loss(
    model: EmoGraceModel,
    token_ids,
    mask,
    vat: VatConfig,
    seed: int,
    branch: str = "ate",
    ate_label_dist=None,
) -> Tensor:
    """KL from the clean branch distribution to the adversarially perturbed
    one, averaged over unmasked positions. Zero when epsilon is 0 or the
    probe gradient vanishes."""
    if vat.epsilon == 0:
        return ad.constant(0.0)
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    m = np.ones(ids.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    r_adv = adversarial_perturbation(
        model, ids, m, vat, seed, branch=branch, ate_label_dist=ate_label_dist
    )
    if r_adv is None:
        return ad.constant(0.0)
    clean = _branch_logits(model, ids, m, branch, None, ate_label_dist)
    p = nn_core.softmax(clean.data, axis=-1)
    log_p = nn_core.log_softmax(clean.data, axis=-1)
    perturbed = _branch_logits(model, ids, m, branch, ad.constant(r_adv), ate_label_dist)
    return _mean_kl(p, log_p, perturbed, m)
