"""Training methods: alignment-regularized robust training, its ablation
variants, and the natural / PGD-adversarial baselines.

The robust objective (ART) per batch:
  1. perturb the batch by ascending the alignment loss inside an l-inf ball
     (softplus pathway, since the loss differentiates input gradients);
  2. pick the negative class from the clean-input logits (strongest wrong
     class, exact-ReLU pathway);
  3. minimize cross-entropy on the perturbed batch (exact-ReLU pathway) plus
     a weighted alignment loss on the perturbed batch (softplus pathway).
Normalization statistics, when an architecture has them, update only on the
cross-entropy forward.
"""

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from attrobust.attacks import PerturbationBudget, art_inner_maximization, pgd_classification_attack
from attrobust.losses import (LOSS_VARIANTS, TripletTerms, attr_loss_terms, attr_triplet_loss,
                              select_negative_class)
from attrobust.models import (EXACT_RELU, SOFTPLUS, ModelBundle, SGDState, apply_update,
                              input_gradient, load_checkpoint, save_checkpoint)
from attrobust.utils import atomic_open, spawn_seed, torch_generator

log = logging.getLogger(__name__)

TRAIN_KINDS = ("natural", "pgd_adversarial", "art")


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss goes non-finite, with diagnostics attached."""


def _default_inner_budget():
    return PerturbationBudget(norm="linf", epsilon=8 / 255, step_size=1.5 / 255, steps=3,
                              random_init=True)


def _default_adv_budget():
    return PerturbationBudget(norm="linf", epsilon=8 / 255, step_size=2 / 255, steps=7,
                              random_init=True)


@dataclass
class ARTConfig:
    """Training configuration; the alignment fields matter only for kind 'art'.

    lr_milestones are (epoch_fraction, factor) pairs applied multiplicatively.
    The defaults mirror the full-scale recipe (SGD momentum 0.9, weight decay
    2e-4, attribution-loss weight 0.5, softplus beta 50, 3 inner steps of
    1.5/255 inside an 8/255 ball) with desk-scale epoch counts.
    """

    attr_loss_weight: float = 0.5
    softplus_beta: float = 50.0
    inner_budget: PerturbationBudget = field(default_factory=_default_inner_budget)
    loss_variant: str = "art_triplet"
    inner_loss: str = "l_attr"
    channel_mean: bool = False
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_milestones: tuple = ((0.5, 0.1), (0.8, 0.5))
    warmup_epochs: int = 0
    seed: int = 0
    augment: bool = False
    adv_budget: PerturbationBudget = field(default_factory=_default_adv_budget)
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.attr_loss_weight < 0:
            raise ValueError("attr_loss_weight must be >= 0")
        if self.softplus_beta <= 0:
            raise ValueError("softplus_beta must be positive")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")

    def to_dict(self):
        d = self.__dict__.copy()
        d["inner_budget"] = self.inner_budget.to_dict()
        d["adv_budget"] = self.adv_budget.to_dict()
        d["lr_milestones"] = [list(m) for m in self.lr_milestones]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "inner_budget" in d:
            d["inner_budget"] = PerturbationBudget.from_dict(d["inner_budget"])
        if "adv_budget" in d:
            d["adv_budget"] = PerturbationBudget.from_dict(d["adv_budget"])
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(tuple(m) for m in d["lr_milestones"])
        return cls(**d)


def _collect_grads(bundle):
    return [p.grad if p.grad is not None else torch.zeros_like(p) for p in bundle.parameters()]


def _check_finite(value, stats):
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite training loss {value}; stats: {stats}")


def natural_train_step(bundle: ModelBundle, batch, cfg: ARTConfig, opt_state: SGDState):
    """One cross-entropy SGD step on a clean batch (exact-ReLU pathway)."""
    x, y = batch
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    y = torch.as_tensor(y).long()
    bundle.net.train()
    with bundle.activation(EXACT_RELU):
        logits = bundle.net(x)
        loss = F.cross_entropy(logits, y)
    stats = {"loss_ce": float(loss.detach()), "loss_attr": 0.0, "loss": float(loss.detach()),
             "acc": float((logits.detach().argmax(1) == y).float().mean())}
    _check_finite(stats["loss"], stats)
    for p in bundle.parameters():
        p.grad = None
    loss.backward()
    apply_update(bundle, _collect_grads(bundle), opt_state)
    return bundle, stats


def pgd_train_step(bundle: ModelBundle, batch, cfg: ARTConfig, opt_state: SGDState, seed=0):
    """Adversarial training step: PGD examples under cfg.adv_budget, then a CE step."""
    x, y = batch
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    y = torch.as_tensor(y).long()
    bundle.net.eval()
    if cfg.adv_budget.steps > 0 or cfg.adv_budget.random_init:
        x_adv = pgd_classification_attack(bundle, x, y, cfg.adv_budget, seed=seed).perturbed
    else:
        x_adv = x
    bundle.net.train()
    with bundle.activation(EXACT_RELU):
        logits = bundle.net(x_adv)
        loss = F.cross_entropy(logits, y)
    stats = {"loss_ce": float(loss.detach()), "loss_attr": 0.0, "loss": float(loss.detach()),
             "acc": float((logits.detach().argmax(1) == y).float().mean())}
    _check_finite(stats["loss"], stats)
    for p in bundle.parameters():
        p.grad = None
    loss.backward()
    apply_update(bundle, _collect_grads(bundle), opt_state)
    return bundle, stats


def art_train_step(bundle: ModelBundle, batch, cfg: ARTConfig, opt_state: SGDState,
                   generator=None):
    """One step of alignment-regularized training (see module docstring)."""
    x, y = batch
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    y = torch.as_tensor(y).long()
    gen = generator if generator is not None else torch_generator(cfg.seed)
    bundle.set_activation(bundle.activation_mode, beta=cfg.softplus_beta)
    bundle.net.eval()  # smooth-pathway passes must not touch norm statistics

    use_attr = cfg.attr_loss_weight > 0
    inner = cfg.inner_budget
    ref_inner = None
    if cfg.loss_variant == "eq2_direct":
        with bundle.activation(SOFTPLUS):
            ref_inner = input_gradient(bundle, x, y, create_graph=False).detach()

    inner_trace = []
    if inner.steps > 0 or inner.random_init:
        x_tilde, inner_trace = art_inner_maximization(
            bundle, x, y, budget=inner, loss=cfg.inner_loss, loss_variant=cfg.loss_variant,
            channel_mean=cfg.channel_mean, generator=gen, reference_grad=ref_inner,
            return_trace=True)
    else:
        x_tilde = x

    l_attr = None
    terms = None
    if use_attr:
        with torch.no_grad(), bundle.activation(EXACT_RELU):
            clean_logits = bundle.net(x)
        i_star = None
        if cfg.loss_variant in ("art_triplet", "argmin_negative"):
            sel = "argmin" if cfg.loss_variant == "argmin_negative" else "argmax"
            i_star = select_negative_class(clean_logits, y, variant=sel)
        ref_outer = None
        if cfg.loss_variant == "eq2_direct":
            with bundle.activation(SOFTPLUS):
                ref_outer = input_gradient(bundle, x, y, create_graph=True)
        with bundle.activation(SOFTPLUS):
            l_attr, info = attr_loss_terms(bundle, x_tilde, y, variant=cfg.loss_variant,
                                           channel_mean=cfg.channel_mean, i_star=i_star,
                                           reference_grad=ref_outer, create_graph=True)
        terms = info.get("terms")

    bundle.net.train()  # statistics update on the cross-entropy pass only
    with bundle.activation(EXACT_RELU):
        logits = bundle.net(x_tilde)
        l_ce = F.cross_entropy(logits, y)
    total = l_ce if not use_attr else l_ce + cfg.attr_loss_weight * l_attr

    stats = {
        "loss_ce": float(l_ce.detach()),
        "loss_attr": float(l_attr.detach()) if use_attr else 0.0,
        "loss": float(total.detach()),
        "acc": float((logits.detach().argmax(1) == y).float().mean()),
        "inner_trace": inner_trace,
    }
    if isinstance(terms, TripletTerms):
        keep = ~terms.degenerate if terms.degenerate is not None else slice(None)
        stats["d_pos"] = float(np.mean(terms.d_pos[keep])) if np.any(keep) else float("nan")
        stats["d_neg"] = float(np.mean(terms.d_neg[keep])) if np.any(keep) else float("nan")
    _check_finite(stats["loss"], stats)

    for p in bundle.parameters():
        p.grad = None
    total.backward()
    apply_update(bundle, _collect_grads(bundle), opt_state)
    return bundle, stats


def loss_variant_step(bundle, batch, cfg: ARTConfig, opt_state, variant, generator=None):
    """art_train_step with the alignment term swapped for an ablation variant."""
    return art_train_step(bundle, batch, replace(cfg, loss_variant=variant), opt_state,
                          generator=generator)


def _lr_at_epoch(cfg: ARTConfig, epoch: int) -> float:
    if cfg.warmup_epochs and epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    lr = cfg.lr
    for frac, factor in cfg.lr_milestones:
        if epoch >= int(frac * cfg.epochs):
            lr *= factor
    return lr


def evaluate_accuracy(bundle: ModelBundle, x, y, batch_size=512) -> float:
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    y = torch.as_tensor(y).long()
    correct = 0
    bundle.net.eval()
    with torch.no_grad(), bundle.activation(EXACT_RELU):
        for i in range(0, x.shape[0], batch_size):
            pred = bundle.net(x[i:i + batch_size]).argmax(1)
            correct += int((pred == y[i:i + batch_size]).sum())
    return correct / x.shape[0]


def fit(bundle: ModelBundle, train_ds, cfg: ARTConfig, kind: str = "natural",
        out_dir=None, test_ds=None, resume: bool = False, config_hash=None):
    """Train a model for cfg.epochs; emits per-epoch CSV metrics and checkpoints.

    Resumable from the latest checkpoint in out_dir; a stored config hash that
    disagrees with the one supplied refuses to resume.
    """
    if kind not in TRAIN_KINDS:
        raise ValueError(f"unknown training kind {kind!r}; options {TRAIN_KINDS}")
    opt_state = SGDState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    start_epoch = 0
    rows = []
    ckpt_path = None if out_dir is None else Path(out_dir) / "checkpoint.pt"
    csv_path = None if out_dir is None else Path(out_dir) / "epochs.csv"
    if resume and ckpt_path is not None and ckpt_path.exists():
        loaded, meta = load_checkpoint(ckpt_path)
        if config_hash is not None and meta.get("config_hash") not in (None, config_hash):
            raise ValueError("checkpoint config hash does not match this run; refusing to resume")
        bundle.net.load_state_dict(loaded.net.state_dict())
        if meta.get("optimizer_state"):
            opt_state = SGDState.from_state_dict(meta["optimizer_state"])
        start_epoch = (meta.get("epoch") or 0) + 1
        if csv_path is not None and csv_path.exists():
            with open(csv_path) as fh:
                rows = list(csv.DictReader(fh))
        log.info("resuming %s training at epoch %d", kind, start_epoch)

    ascent_progress = []
    for epoch in range(start_epoch, cfg.epochs):
        opt_state.lr = _lr_at_epoch(cfg, epoch)
        data_gen = torch_generator(spawn_seed(cfg.seed, "data", epoch))
        attack_gen = torch_generator(spawn_seed(cfg.seed, "inner", epoch))
        epoch_stats = []
        for bi, (xb, yb) in enumerate(train_ds.iter_batches(cfg.batch_size, shuffle=True,
                                                            generator=data_gen,
                                                            augment=cfg.augment)):
            if kind == "natural":
                _, stats = natural_train_step(bundle, (xb, yb), cfg, opt_state)
            elif kind == "pgd_adversarial":
                seed = spawn_seed(cfg.seed, "pgd", epoch, bi)
                _, stats = pgd_train_step(bundle, (xb, yb), cfg, opt_state, seed=seed)
            else:
                _, stats = art_train_step(bundle, (xb, yb), cfg, opt_state, generator=attack_gen)
                tr = stats.get("inner_trace") or []
                if len(tr) >= 2:
                    ascent_progress.append(tr[-1] >= tr[0])
            epoch_stats.append(stats)

        row = {
            "epoch": epoch,
            "lr": f"{opt_state.lr:.6g}",
            "train_loss": f"{np.mean([s['loss'] for s in epoch_stats]):.6f}",
            "train_acc": f"{np.mean([s['acc'] for s in epoch_stats]):.4f}",
            "loss_ce": f"{np.mean([s['loss_ce'] for s in epoch_stats]):.6f}",
            "loss_attr": f"{np.mean([s['loss_attr'] for s in epoch_stats]):.6f}",
        }
        d_pos = [s["d_pos"] for s in epoch_stats if "d_pos" in s and np.isfinite(s["d_pos"])]
        row["d_pos"] = f"{np.mean(d_pos):.4f}" if d_pos else ""
        d_neg = [s["d_neg"] for s in epoch_stats if "d_neg" in s and np.isfinite(s["d_neg"])]
        row["d_neg"] = f"{np.mean(d_neg):.4f}" if d_neg else ""
        if test_ds is not None:
            row["test_acc"] = f"{evaluate_accuracy(bundle, test_ds.images, test_ds.labels):.4f}"
        rows.append(row)
        log.info("%s epoch %d: %s", kind, epoch, row)

        if csv_path is not None:
            with atomic_open(csv_path) as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
                writer.writeheader()
                writer.writerows(rows)
        if ckpt_path is not None and (
                epoch == cfg.epochs - 1
                or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
            save_checkpoint(bundle, ckpt_path, optimizer_state=opt_state, epoch=epoch,
                            seed=cfg.seed, config_hash=config_hash,
                            extra={"kind": kind})
    bundle.net.eval()
    history = {"rows": rows, "inner_ascent_progress": ascent_progress}
    return bundle, history


def baseline_train(bundle: ModelBundle, train_ds, kind: str, cfg: ARTConfig,
                   out_dir=None, test_ds=None, **kw):
    """Standard cross-entropy training, or adversarial training on PGD examples."""
    if kind not in ("natural", "pgd_adversarial"):
        raise ValueError("baseline kind must be 'natural' or 'pgd_adversarial'")
    return fit(bundle, train_ds, cfg, kind=kind, out_dir=out_dir, test_ds=test_ds, **kw)


def art_train(bundle: ModelBundle, train_ds, cfg: ARTConfig, out_dir=None, test_ds=None, **kw):
    """Alignment-regularized robust training."""
    return fit(bundle, train_ds, cfg, kind="art", out_dir=out_dir, test_ds=test_ds, **kw)
