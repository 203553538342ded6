"""Training objectives.

All losses operate on torch tensors so gradients flow to the segmenter's
pre-softmax outputs; they are written dtype-neutral so float64 tensors
can be used for finite-difference checks. Per-sample segmentation losses
sum over pixels (the cross-entropy weight 0.05 is scaled for that
convention); batches are mean-reduced.

The hybrid segmentation loss on a prediction p and one-hot label y is

    L = 1 - lambda1 * sum(y * log p) - lambda2 * soft_dice(y, p)

with soft Dice averaged over foreground classes. The noise-tolerant
variant substitutes y with the boundary-weighted label B(y) * y in both
terms, discounting pixels near region boundaries where corrupted
annotations concentrate; with an all-ones weight map it reduces exactly
to the clean loss. The adversarial objective scores source predictions
as real and target predictions as fake, with the target side weighted
per patch by (lambda_entr * entropy + eps) so uncertain target regions
drive alignment hardest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 0.05          # cross-entropy weight
    lambda2: float = 1.0           # Dice weight
    lambda_adv: float = 0.001
    lambda_entr: float = 1.0
    entropy_eps: float = 0.4
    adv_weighting: str = "multiplicative"  # "additive" keeps the literal form for study

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_adv, self.lambda_entr) < 0:
            raise LossError("loss weights must be nonnegative")
        if self.entropy_eps <= 0:
            raise LossError("entropy_eps must be > 0")
        if self.adv_weighting not in ("multiplicative", "additive"):
            raise LossError("adv_weighting must be multiplicative or additive")


def _as_tensor(x, like: torch.Tensor | None = None):
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    t = torch.from_numpy(arr.copy() if not arr.flags.writeable else arr)
    if like is not None and t.is_floating_point():
        t = t.to(like.dtype)
    return t


def _one_hot_chw(mask: torch.Tensor, num_classes: int, dtype) -> torch.Tensor:
    return F.one_hot(mask.long(), num_classes).permute(2, 0, 1).to(dtype)


def _soft_dice_foreground(target_chw: torch.Tensor, probs_chw: torch.Tensor) -> torch.Tensor:
    """Mean over foreground classes of 2*sum(t*p) / (sum(t^2) + sum(p^2))."""
    t = target_chw[1:]
    p = probs_chw[1:]
    num = 2.0 * (t * p).sum(dim=(1, 2))
    den = (t * t).sum(dim=(1, 2)) + (p * p).sum(dim=(1, 2))
    return (num / den.clamp_min(LOG_FLOOR)).mean()


def _hybrid_loss(probs, target_chw, w: LossWeights, valid=None):
    logp = torch.log(probs.clamp_min(LOG_FLOOR))
    dice_probs = probs
    if valid is not None:
        # invalid pixels are excluded from both terms: masking only the
        # target would leave them in the Dice denominator and actively
        # suppress predictions there
        vmask = valid.to(probs.dtype).unsqueeze(0)
        target_chw = target_chw * vmask
        dice_probs = probs * vmask
    ce_sum = (target_chw * logp).sum()
    dice = _soft_dice_foreground(target_chw, dice_probs)
    return 1.0 - w.lambda1 * ce_sum - w.lambda2 * dice


def clean_loss(probs, mask, w: LossWeights, valid=None) -> torch.Tensor:
    """Hybrid cross-entropy + Dice loss against an exact one-hot label.

    ``probs`` is a (C, H, W) tensor, ``mask`` a (H, W) integer grid;
    ``valid`` optionally restricts supervision to a boolean pixel subset
    (used for pseudo-labels). Differentiable in ``probs``.
    """
    probs = _as_tensor(probs)
    mask = _as_tensor(mask)
    if probs.shape[1:] != mask.shape:
        raise LossError(f"probs spatial shape {tuple(probs.shape[1:])} != mask {tuple(mask.shape)}")
    onehot = _one_hot_chw(mask, probs.shape[0], probs.dtype)
    if valid is not None:
        valid = _as_tensor(valid)
    return _hybrid_loss(probs, onehot, w, valid)


def noise_loss(probs, mask, bweights, w: LossWeights, valid=None) -> torch.Tensor:
    """Boundary-weighted hybrid loss for corrupted labels.

    ``bweights`` is the (C, H, W) boundary weight map of this mask; the
    one-hot label is modulated per pixel by it, so boundary-adjacent
    pixels contribute little and deep-interior pixels behave as in the
    clean loss. Equal to clean_loss when the weights are all ones.
    """
    probs = _as_tensor(probs)
    mask = _as_tensor(mask)
    bw = _as_tensor(bweights, like=probs)
    if bw.shape != probs.shape:
        raise LossError(f"boundary weights shape {tuple(bw.shape)} != probs {tuple(probs.shape)}")
    onehot = _one_hot_chw(mask, probs.shape[0], probs.dtype)
    weighted = onehot * bw
    if valid is not None:
        valid = _as_tensor(valid)
    return _hybrid_loss(probs, weighted, w, valid)


def seg_loss(probs, mask, omega, bweights, w: LossWeights, valid=None) -> torch.Tensor:
    """Noise-filtering segmentation loss: clean when omega is 0, the
    boundary-weighted noise loss when omega is 1 (bweights may be None
    for the clean route)."""
    if omega not in (0, 1, False, True):
        raise LossError(f"omega must be 0 or 1, got {omega!r}")
    if omega:
        if bweights is None:
            raise LossError("noise route requires boundary weights")
        return noise_loss(probs, mask, bweights, w, valid)
    return clean_loss(probs, mask, w, valid)


def batch_seg_loss(probs_batch, masks, omegas, bweight_batch, w: LossWeights, valids=None):
    """Mean of per-sample seg losses; reduction order is fixed."""
    n = len(masks)
    if n == 0:
        raise LossError("empty batch")
    valids = valids if valids is not None else [None] * n
    total = None
    for i in range(n):
        li = seg_loss(probs_batch[i], masks[i], int(bool(omegas[i])),
                      bweight_batch[i], w, valids[i])
        total = li if total is None else total + li
    return total / n


def bweights_chw(bmap) -> np.ndarray:
    """(H, W, C) boundary weight array to the (C, H, W) layout losses use."""
    arr = bmap.weights if hasattr(bmap, "weights") else np.asarray(bmap)
    return np.ascontiguousarray(np.moveaxis(arr, 2, 0))


def entropy_map(probs) -> torch.Tensor:
    """Per-pixel Shannon entropy (natural log) of a (C, H, W) prediction;
    0 * log 0 counts as 0, so one-hot pixels score exactly 0."""
    probs = _as_tensor(probs)
    plogp = torch.where(
        probs > 0, probs * torch.log(probs.clamp_min(LOG_FLOOR)), torch.zeros_like(probs)
    )
    return -plogp.sum(dim=0)


def pool_to(map_hw: torch.Tensor, out_shape) -> torch.Tensor:
    """Average-pool a (H, W) map to the discriminator's score resolution."""
    return F.adaptive_avg_pool2d(map_hw[None, None], out_shape)[0, 0]


def adversarial_losses(d_src, d_tgt, entropy_tgt, w: LossWeights, valid_frac=None):
    """Entropy-weighted patch adversarial objectives.

    ``d_src`` and ``d_tgt`` are patch logits over source and target
    predictions; ``entropy_tgt`` is the target entropy map, pooled here
    to the score resolution. Returns (gen_loss, disc_loss): the
    discriminator scores source as real and target as fake, the
    generator drives target patches toward the source label, both with a
    per-patch target weight lambda_entr * entropy + eps (the additive
    variant adds the weight instead of multiplying). ``valid_frac``
    optionally scales target patches by their fraction of trusted pixels.
    """
    d_src = _as_tensor(d_src)
    d_tgt = _as_tensor(d_tgt)
    ent = _as_tensor(entropy_tgt, like=d_tgt)
    if ent.shape != d_tgt.shape:
        if ent.dim() != 2 or d_tgt.dim() != 2:
            raise LossError(f"entropy map shape {tuple(ent.shape)} does not match scores {tuple(d_tgt.shape)}")
        ent = pool_to(ent, d_tgt.shape)
    weight = w.lambda_entr * ent + w.entropy_eps
    if valid_frac is not None:
        vf = _as_tensor(valid_frac, like=d_tgt)
        if vf.shape != d_tgt.shape:
            vf = pool_to(vf, d_tgt.shape)
        weight = weight * vf

    # softplus(-x) = -log sigmoid(x): real targets; softplus(x): fake targets
    real_src = F.softplus(-d_src).mean()
    if w.adv_weighting == "multiplicative":
        fake_tgt = (weight * F.softplus(d_tgt)).mean()
        real_tgt = (weight * F.softplus(-d_tgt)).mean()
    else:
        fake_tgt = (weight + F.softplus(d_tgt)).mean()
        real_tgt = (weight + F.softplus(-d_tgt)).mean()
    disc = real_src + fake_tgt
    gen = real_tgt
    return gen, disc


def overall_objective(seg_loss_value, gen_adv_loss_value, w: LossWeights):
    """Segmenter-side objective: segmentation plus weighted adversarial."""
    return seg_loss_value + w.lambda_adv * gen_adv_loss_value


def with_logit_grad(loss_fn, logits: torch.Tensor, *args, **kwargs):
    """Evaluate a probs-based loss through a softmax over the class axis
    and return (value, gradient w.r.t. the logits)."""
    logits = logits.detach().clone().requires_grad_(True)
    probs = torch.softmax(logits, dim=0)
    value = loss_fn(probs, *args, **kwargs)
    (grad,) = torch.autograd.grad(value, logits)
    return value.detach(), grad
