"""Differentiable alignment losses on input gradients.

The core objective is a soft-margin triplet on cosine distances: the input is
the anchor, the true-class input-gradient the positive, and the input-gradient
of the strongest wrong class the negative.  Ablation variants swap in simpler
objectives.  Everything here is double-backward safe in softplus mode.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from attrobust.models import ModelBundle, input_gradient

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("art_triplet", "eq2_direct", "l2_distance", "cosine_only", "argmin_negative")

_NORM_FLOOR = 1e-12


@dataclass
class TripletTerms:
    """Cosine distances feeding the triplet loss, for logging and tests.

    d_pos / d_neg are in [0, 2]; i_star is the negative class per sample.
    """

    d_pos: np.ndarray
    d_neg: np.ndarray
    i_star: Optional[np.ndarray] = None
    degenerate: Optional[np.ndarray] = None


def select_negative_class(logits, y, variant="argmax"):
    """Negative class for the triplet: strongest (default) or weakest wrong class.

    Ties broken by lowest index.  Accepts a single logit vector or a batch.
    """
    arr = np.asarray(logits.detach().cpu() if isinstance(logits, torch.Tensor) else logits,
                     dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] < 2:
        raise ValueError("need at least two classes to pick a negative")
    ys = np.asarray(y.detach().cpu() if isinstance(y, torch.Tensor) else y).reshape(-1)
    if ys.size == 1 and arr.shape[0] > 1:
        ys = np.full(arr.shape[0], ys[0])
    rows = np.arange(arr.shape[0])
    masked = arr.copy()
    if variant == "argmax":
        masked[rows, ys] = -np.inf
        out = masked.argmax(axis=1)
    elif variant == "argmin":
        masked[rows, ys] = np.inf
        out = masked.argmin(axis=1)
    else:
        raise ValueError(f"unknown negative-selection variant {variant!r}")
    return int(out[0]) if single else out


def flat_cosine(a: torch.Tensor, b: torch.Tensor, channel_mean=False):
    """Per-sample cosine of flattened tensors; degenerate norms give cosine 0.

    Returns (cosine, valid_mask)."""
    if a.dim() == b.dim() == 3:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    if channel_mean:
        a = a.mean(dim=1)
        b = b.mean(dim=1)
    a = a.flatten(1)
    b = b.flatten(1)
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    valid = (na > _NORM_FLOOR) & (nb > _NORM_FLOOR)
    cos = (a * b).sum(dim=1) / (na * nb).clamp_min(_NORM_FLOOR ** 2)
    return torch.where(valid, cos, torch.zeros_like(cos)), valid


def attr_triplet_loss(x, g_pos, g_neg, channel_mean=False, return_terms=False):
    """Soft-margin triplet on cosine distances:
    log(1 + exp(-(d(g_neg, x) - d(g_pos, x)))) averaged over the batch.

    Differentiable in all tensor arguments; zero-norm gradients contribute a
    cosine of 0 and are flagged (and logged) rather than raising.
    """
    x = torch.as_tensor(x)
    g_pos = torch.as_tensor(g_pos)
    g_neg = torch.as_tensor(g_neg)
    if not (x.shape == g_pos.shape == g_neg.shape):
        raise ValueError("x, g_pos, g_neg must share a shape")
    cos_pos, ok_pos = flat_cosine(g_pos, x, channel_mean)
    cos_neg, ok_neg = flat_cosine(g_neg, x, channel_mean)
    valid = ok_pos & ok_neg
    if not bool(valid.all()):
        log.warning("degenerate gradient norm in %d/%d samples; cosine set to 0",
                    int((~valid).sum()), valid.numel())
    d_pos = 1.0 - cos_pos
    d_neg = 1.0 - cos_neg
    per_sample = F.softplus(-(d_neg - d_pos))
    loss = per_sample.mean()
    if not return_terms:
        return loss
    terms = TripletTerms(
        d_pos=d_pos.detach().cpu().numpy(),
        d_neg=d_neg.detach().cpu().numpy(),
        degenerate=(~valid).detach().cpu().numpy(),
    )
    return loss, terms


def attr_loss_terms(bundle: ModelBundle, x: torch.Tensor, y, variant="art_triplet",
                    channel_mean=False, i_star=None, reference_grad=None,
                    create_graph=True):
    """Alignment loss of the selected variant for a batch, plus diagnostics.

    The caller selects the activation pathway (softplus for anything that will
    be differentiated again).  i_star overrides the negative-class choice; by
    default it is picked from this forward's own logits.  eq2_direct needs
    reference_grad = input-gradient at the unperturbed input.

    Returns (loss, info) with info holding logits, per-sample loss, and
    TripletTerms when the variant is a triplet.
    """
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; options: {LOSS_VARIANTS}")
    y_t = torch.as_tensor(y)
    if y_t.dim() == 0:
        y_t = y_t.view(1)

    if variant in ("art_triplet", "argmin_negative"):
        xb = x if x.dim() == len(bundle.input_shape) + 1 else x.unsqueeze(0)
        xg = xb if xb.requires_grad else xb.detach().requires_grad_(True)
        logits = bundle.net(xg)
        n = xb.shape[0]
        y_t = y_t.long()
        if y_t.numel() == 1 and n > 1:
            y_t = y_t.expand(n)
        if i_star is None:
            sel = "argmin" if variant == "argmin_negative" else "argmax"
            i_star = select_negative_class(logits.detach(), y_t, variant=sel)
        i_star_t = torch.as_tensor(i_star).reshape(-1).long()
        if i_star_t.numel() == 1 and n > 1:
            i_star_t = i_star_t.expand(n)
        rows = torch.arange(n)
        (g_pos,) = torch.autograd.grad(logits[rows, y_t].sum(), xg,
                                       create_graph=create_graph, retain_graph=True)
        (g_neg,) = torch.autograd.grad(logits[rows, i_star_t].sum(), xg,
                                       create_graph=create_graph, retain_graph=True)
        loss, terms = attr_triplet_loss(xg, g_pos, g_neg, channel_mean, return_terms=True)
        terms.i_star = np.asarray(i_star).reshape(-1)
        info = {"logits": logits, "terms": terms}
        return loss, info

    g_pos = input_gradient(bundle, x, y_t, create_graph=create_graph)
    xb = x if x.dim() == len(bundle.input_shape) + 1 else x.unsqueeze(0)
    gb = g_pos if g_pos.dim() == len(bundle.input_shape) + 1 else g_pos.unsqueeze(0)
    if variant == "cosine_only":
        cos, valid = flat_cosine(gb, xb, channel_mean)
        if not bool(valid.all()):
            log.warning("degenerate gradient norm in %d samples", int((~valid).sum()))
        per_sample = 1.0 - cos
    elif variant == "l2_distance":
        per_sample = (gb - xb).flatten(1).norm(dim=1)
    elif variant == "eq2_direct":
        if reference_grad is None:
            raise ValueError("eq2_direct needs reference_grad (gradient at the clean input)")
        ref = torch.as_tensor(reference_grad)
        if ref.dim() == len(bundle.input_shape):
            ref = ref.unsqueeze(0)
        per_sample = (gb - ref).flatten(1).norm(dim=1)
    loss = per_sample.mean()
    return loss, {"per_sample": per_sample}
