"""Input-perturbation procedures.

Classification attacks (PGD, SPSA, transfer), attribution attacks (untargeted
top-k IFIA and targeted manipulation), and the signed-ascent inner loop used by
the robust training objective.  Every attack returns outputs inside the
perturbation budget: ||x_adv - x||_norm <= epsilon and pixels in the valid
range.  Attribution attacks additionally never change the model's prediction
on the samples they attack (steps that would flip it are reverted).
"""

import os
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from attrobust.attribution import IGConfig, attribution_scores
from attrobust.losses import attr_loss_terms
from attrobust.models import EXACT_RELU, SOFTPLUS, ModelBundle, _argmax_lowest_index
from attrobust.utils import torch_generator

# per-step budget assertions, cheap enough to leave on in CI runs
DEBUG_BUDGET = os.environ.get("ATTROBUST_DEBUG_BUDGET", "") == "1"

BUDGET_TOL = 1e-7


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm ball, step schedule and pixel box for an iterative attack.

    epsilon and step_size are in raw pixel units ([0,1] scale)."""

    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 40
    random_init: bool = True
    valid_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self):
        return {"norm": self.norm, "epsilon": self.epsilon, "step_size": self.step_size,
                "steps": self.steps, "random_init": self.random_init,
                "valid_range": list(self.valid_range)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "valid_range" in d:
            d["valid_range"] = tuple(d["valid_range"])
        return cls(**d)


@dataclass
class AttackResult:
    """Perturbed inputs plus bookkeeping.

    For batched calls prediction_preserved / skipped are per-sample arrays."""

    perturbed: torch.Tensor
    prediction_preserved: Union[bool, np.ndarray]
    steps_taken: int
    objective_trace: List[float] = field(default_factory=list)
    skipped: Union[bool, np.ndarray, None] = None


def project(x_adv: torch.Tensor, x0: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Project onto the budget ball around x0, then clamp to the valid range."""
    delta = x_adv - x0
    if budget.norm == "linf":
        delta = delta.clamp(-budget.epsilon, budget.epsilon)
    else:
        flat = delta.flatten(1) if delta.dim() > 1 else delta.flatten().unsqueeze(0)
        norms = flat.norm(dim=1).clamp_min(1e-20)
        factor = (budget.epsilon / norms).clamp(max=1.0)
        shape = (-1,) + (1,) * (delta.dim() - 1)
        delta = delta * factor.view(shape)
    out = (x0 + delta).clamp(budget.valid_range[0], budget.valid_range[1])
    if DEBUG_BUDGET:
        assert_within_budget(out, x0, budget)
    return out


def assert_within_budget(x_adv, x0, budget: PerturbationBudget):
    delta = (x_adv - x0).detach()
    lo, hi = budget.valid_range
    if x_adv.min() < lo - BUDGET_TOL or x_adv.max() > hi + BUDGET_TOL:
        raise AssertionError("attack output escaped the valid pixel range")
    if budget.norm == "linf":
        worst = delta.abs().max().item()
    else:
        flat = delta.flatten(1) if delta.dim() > 1 else delta.flatten().unsqueeze(0)
        worst = flat.norm(dim=1).max().item()
    if worst > budget.epsilon + BUDGET_TOL:
        raise AssertionError(f"perturbation norm {worst} exceeds epsilon {budget.epsilon}")


def _random_start(x0, budget: PerturbationBudget, gen):
    noise = (torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * 2 - 1) * budget.epsilon
    return project(x0 + noise, x0, budget)


def _ascent_step(x_adv, grad, x0, budget: PerturbationBudget):
    """One projected step in the ascent direction of grad."""
    if budget.norm == "linf":
        step = budget.step_size * grad.sign()
    else:
        flat = grad.flatten(1) if grad.dim() > 1 else grad.flatten().unsqueeze(0)
        norms = flat.norm(dim=1)
        shape = (-1,) + (1,) * (grad.dim() - 1)
        scale = torch.where(norms > 1e-20, budget.step_size / norms.clamp_min(1e-20),
                            torch.zeros_like(norms))
        step = grad * scale.view(shape)
    return project(x_adv + step, x0, budget)


def _batchify(bundle, x, y=None):
    single = x.dim() == len(bundle.input_shape)
    xb = x.unsqueeze(0) if single else x
    if y is None:
        return xb, None, single
    y_t = torch.as_tensor(y).long().reshape(-1)
    if y_t.numel() == 1 and xb.shape[0] > 1:
        y_t = y_t.expand(xb.shape[0])
    return xb, y_t, single


def _predict(bundle, x):
    with torch.no_grad(), bundle.activation(EXACT_RELU):
        return _argmax_lowest_index(bundle.net(x))


def _unbatch_result(res: AttackResult, single: bool) -> AttackResult:
    if not single:
        return res
    res.perturbed = res.perturbed.squeeze(0)
    res.prediction_preserved = bool(np.asarray(res.prediction_preserved).reshape(-1)[0])
    if res.skipped is not None:
        res.skipped = bool(np.asarray(res.skipped).reshape(-1)[0])
    return res


def pgd_classification_attack(bundle: ModelBundle, x, y, budget: PerturbationBudget,
                              seed: Optional[int] = 0) -> AttackResult:
    """Iterated projected gradient ascent on cross-entropy (exact-ReLU pathway)."""
    xb, y_t, single = _batchify(bundle, torch.as_tensor(x, dtype=bundle.param_dtype()), y)
    gen = torch_generator(seed or 0)
    x0 = xb.detach()
    x_adv = _random_start(x0, budget, gen) if budget.random_init else x0.clone()
    trace = []
    with bundle.activation(EXACT_RELU):
        for _ in range(budget.steps):
            x_var = x_adv.clone().requires_grad_(True)
            loss = F.cross_entropy(bundle.net(x_var), y_t)
            (grad,) = torch.autograd.grad(loss, x_var)
            trace.append(float(loss.detach()))
            x_adv = _ascent_step(x_adv, grad.detach(), x0, budget)
    preserved = (_predict(bundle, x_adv) == _predict(bundle, x0)).cpu().numpy()
    res = AttackResult(x_adv.detach(), preserved, budget.steps, trace)
    return _unbatch_result(res, single)


def spsa_gradient_estimate(objective, x, num_samples, scale, gen):
    """Simultaneous-perturbation estimate of the objective's input gradient.

    objective maps a batch of inputs to per-sample scalars; Rademacher probes
    are shared across the batch."""
    est = torch.zeros_like(x)
    for _ in range(num_samples):
        probe = torch.randint(0, 2, x.shape[1:], generator=gen).to(x.dtype) * 2 - 1
        probe = probe.unsqueeze(0)
        f_plus = objective(x + scale * probe)
        f_minus = objective(x - scale * probe)
        coeff = (f_plus - f_minus) / (2 * scale)
        est = est + coeff.view((-1,) + (1,) * (x.dim() - 1)) * probe
    return est / num_samples


def spsa_attack(bundle: ModelBundle, x, y, budget: PerturbationBudget,
                batch_perturbations: int = 128, seed: int = 0,
                perturbation_scale: float = 0.01) -> AttackResult:
    """Gradient-free attack: SPSA estimate of the cross-entropy input gradient
    drives the same projected ascent as PGD.  Model is queried as a black box."""
    xb, y_t, single = _batchify(bundle, torch.as_tensor(x, dtype=bundle.param_dtype()), y)
    gen = torch_generator(seed)
    x0 = xb.detach()

    def objective(batch):
        with torch.no_grad(), bundle.activation(EXACT_RELU):
            logits = bundle.net(batch.clamp(*budget.valid_range))
        return F.cross_entropy(logits, y_t, reduction="none")

    x_adv = _random_start(x0, budget, gen) if budget.random_init else x0.clone()
    trace = []
    for _ in range(budget.steps):
        grad_est = spsa_gradient_estimate(objective, x_adv, batch_perturbations,
                                          perturbation_scale, gen)
        trace.append(float(objective(x_adv).mean()))
        x_adv = _ascent_step(x_adv, grad_est, x0, budget)
    preserved = (_predict(bundle, x_adv) == _predict(bundle, x0)).cpu().numpy()
    res = AttackResult(x_adv.detach(), preserved, budget.steps, trace)
    return _unbatch_result(res, single)


def _attr_flat_abs(bundle, x, y_t, method, ig, seed, create_graph, **shap_kw):
    scores = attribution_scores(bundle, x, y_t, method=method, ig=ig, seed=seed,
                                create_graph=create_graph, **shap_kw)
    if scores.dim() == len(bundle.input_shape):
        scores = scores.unsqueeze(0)
    return scores.abs().flatten(1)


def ifia_topk_attack(bundle: ModelBundle, x, y, attribution_method="integrated_gradients",
                     budget: Optional[PerturbationBudget] = None, k: int = 100,
                     ig: Optional[IGConfig] = None, seed: int = 0,
                     num_baselines: int = 8, noise_scale: float = 0.1) -> AttackResult:
    """Iterative feature-importance attack, top-k variant.

    Minimizes the attribution mass remaining inside the clean map's top-k set,
    subject to the budget and to the prediction staying fixed: a step that
    flips the prediction is reverted, and the returned input is the visited
    iterate with the lowest retained mass.  Samples the model misclassifies
    up front are skipped (flagged, left unperturbed).
    """
    budget = budget or PerturbationBudget(epsilon=8 / 255, step_size=1 / 255, steps=50,
                                          random_init=False)
    xb, y_t, single = _batchify(bundle, torch.as_tensor(x, dtype=bundle.param_dtype()), y)
    x0 = xb.detach()
    n = x0.shape[0]
    shap_kw = dict(num_baselines=num_baselines, noise_scale=noise_scale)

    clean_pred = _predict(bundle, x0)
    skipped = (clean_pred != y_t).cpu().numpy()
    active = torch.as_tensor(~skipped)

    with bundle.activation(SOFTPLUS):
        base_flat = _attr_flat_abs(bundle, x0, y_t, attribution_method, ig, seed,
                                   create_graph=False, **shap_kw).detach()
    if not 1 <= k <= base_flat.shape[1]:
        raise ValueError(f"k must be in [1, {base_flat.shape[1]}], got {k}")
    top0 = base_flat.argsort(dim=1, descending=True, stable=True)[:, :k]
    mask = torch.zeros_like(base_flat)
    mask.scatter_(1, top0, 1.0)

    def retained_mass(batch, create_graph):
        with bundle.activation(SOFTPLUS):
            flat = _attr_flat_abs(bundle, batch, y_t, attribution_method, ig, seed,
                                  create_graph=create_graph, **shap_kw)
        return (flat * mask).sum(dim=1)

    gen = torch_generator(seed)
    x_adv = _random_start(x0, budget, gen) if budget.random_init else x0.clone()
    x_adv = torch.where(active.view((-1,) + (1,) * (x0.dim() - 1)), x_adv, x0)
    best = x_adv.clone()
    best_obj = torch.full((n,), np.inf, dtype=x0.dtype)
    trace = []
    for _ in range(budget.steps):
        x_var = x_adv.clone().requires_grad_(True)
        obj = retained_mass(x_var, create_graph=True)
        (grad,) = torch.autograd.grad(obj.sum(), x_var)
        with torch.no_grad():
            cur = obj.detach()
            improved = active & (cur < best_obj)
            best_obj = torch.where(improved, cur, best_obj)
            sel = improved.view((-1,) + (1,) * (x0.dim() - 1))
            best = torch.where(sel, x_adv, best)
            trace.append(float(cur[active].mean()) if active.any() else 0.0)
            # descend the retained mass
            candidate = _ascent_step(x_adv, -grad, x0, budget)
            flip = _predict(bundle, candidate) != clean_pred
            keep = active & ~flip
            sel = keep.view((-1,) + (1,) * (x0.dim() - 1))
            x_adv = torch.where(sel, candidate, x_adv)
    if budget.steps > 0:
        # needs autograd for the attribution itself, just not a higher-order graph
        cur = retained_mass(x_adv, create_graph=False).detach()
        with torch.no_grad():
            improved = active & (cur < best_obj)
            sel = improved.view((-1,) + (1,) * (x0.dim() - 1))
            best = torch.where(sel, x_adv, best)
    preserved = (_predict(bundle, best) == clean_pred).cpu().numpy()
    if DEBUG_BUDGET:
        assert_within_budget(best, x0, budget)
    res = AttackResult(best.detach(), preserved, budget.steps, trace, skipped=skipped)
    return _unbatch_result(res, single)


def targeted_attribution_attack(bundle: ModelBundle, x, y, target_map,
                                attribution_method="integrated_gradients",
                                budget: Optional[PerturbationBudget] = None, k: int = 100,
                                ig: Optional[IGConfig] = None, seed: int = 0,
                                num_baselines: int = 8, noise_scale: float = 0.1) -> AttackResult:
    """Steer the attribution map toward a target map.

    Maximizes the fraction of attribution mass inside the target map's top-k
    set (dissimilarity = 1 - that overlap), with prediction preservation via
    revert-on-flip.  Returns the visited iterate with the highest overlap.
    """
    budget = budget or PerturbationBudget(epsilon=8 / 255, step_size=1 / 255, steps=50,
                                          random_init=False)
    xb, y_t, single = _batchify(bundle, torch.as_tensor(x, dtype=bundle.param_dtype()), y)
    x0 = xb.detach()
    n = x0.shape[0]
    shap_kw = dict(num_baselines=num_baselines, noise_scale=noise_scale)

    target = torch.as_tensor(np.asarray(target_map), dtype=x0.dtype)
    if target.dim() == len(bundle.input_shape):
        target = target.unsqueeze(0)
    if tuple(target.shape[1:]) != tuple(bundle.input_shape):
        raise ValueError(f"target map shape {tuple(target.shape)} does not match "
                         f"input shape {bundle.input_shape}")
    if target.shape[0] == 1 and n > 1:
        target = target.expand_as(x0)
    if target.shape[0] != n:
        raise ValueError(f"need one target map per sample ({n}), got {target.shape[0]}")
    t_flat = target.abs().flatten(1)
    if not 1 <= k <= t_flat.shape[1]:
        raise ValueError(f"k must be in [1, {t_flat.shape[1]}], got {k}")
    t_top = t_flat.argsort(dim=1, descending=True, stable=True)[:, :k]
    mask = torch.zeros_like(t_flat)
    mask.scatter_(1, t_top, 1.0)

    clean_pred = _predict(bundle, x0)
    skipped = (clean_pred != y_t).cpu().numpy()
    active = torch.as_tensor(~skipped)

    def overlap(batch, create_graph):
        with bundle.activation(SOFTPLUS):
            flat = _attr_flat_abs(bundle, batch, y_t, attribution_method, ig, seed,
                                  create_graph=create_graph, **shap_kw)
        return (flat * mask).sum(dim=1) / flat.sum(dim=1).clamp_min(1e-20)

    gen = torch_generator(seed)
    x_adv = _random_start(x0, budget, gen) if budget.random_init else x0.clone()
    x_adv = torch.where(active.view((-1,) + (1,) * (x0.dim() - 1)), x_adv, x0)
    best = x_adv.clone()
    best_obj = torch.full((n,), -np.inf, dtype=x0.dtype)
    trace = []
    for _ in range(budget.steps):
        x_var = x_adv.clone().requires_grad_(True)
        obj = overlap(x_var, create_graph=True)
        (grad,) = torch.autograd.grad(obj.sum(), x_var)
        with torch.no_grad():
            cur = obj.detach()
            improved = active & (cur > best_obj)
            best_obj = torch.where(improved, cur, best_obj)
            sel = improved.view((-1,) + (1,) * (x0.dim() - 1))
            best = torch.where(sel, x_adv, best)
            trace.append(float(cur[active].mean()) if active.any() else 0.0)
            candidate = _ascent_step(x_adv, grad, x0, budget)
            flip = _predict(bundle, candidate) != clean_pred
            keep = active & ~flip
            sel = keep.view((-1,) + (1,) * (x0.dim() - 1))
            x_adv = torch.where(sel, candidate, x_adv)
    if budget.steps > 0:
        cur = overlap(x_adv, create_graph=False).detach()
        with torch.no_grad():
            improved = active & (cur > best_obj)
            sel = improved.view((-1,) + (1,) * (x0.dim() - 1))
            best = torch.where(sel, x_adv, best)
    preserved = (_predict(bundle, best) == clean_pred).cpu().numpy()
    if DEBUG_BUDGET:
        assert_within_budget(best, x0, budget)
    res = AttackResult(best.detach(), preserved, budget.steps, trace, skipped=skipped)
    return _unbatch_result(res, single)


def art_inner_maximization(bundle: ModelBundle, x, y, budget: Optional[PerturbationBudget] = None,
                           loss: str = "l_attr", loss_variant: str = "art_triplet",
                           channel_mean: bool = False, seed: Optional[int] = None,
                           generator: Optional[torch.Generator] = None,
                           reference_grad=None, return_trace: bool = False):
    """Signed-gradient ascent on the alignment loss inside an l-inf ball.

    The perturbation starts at uniform noise in [-eps, eps] and takes
    budget.steps signed steps of budget.step_size, projecting to the ball and
    the valid pixel range each time.  Softplus pathway throughout (the loss
    gradient needs second derivatives).  loss "l_attr_plus_ce" augments the
    ascent objective with cross-entropy.
    """
    budget = budget or PerturbationBudget(epsilon=8 / 255, step_size=1.5 / 255, steps=3,
                                          random_init=True)
    if loss not in ("l_attr", "l_attr_plus_ce"):
        raise ValueError(f"unknown inner loss {loss!r}")
    xb, y_t, single = _batchify(bundle, torch.as_tensor(x, dtype=bundle.param_dtype()), y)
    x0 = xb.detach()
    gen = generator if generator is not None else torch_generator(seed or 0)
    x_adv = _random_start(x0, budget, gen) if budget.random_init else x0.clone()
    trace = []

    def loss_at(batch, create_graph):
        with bundle.activation(SOFTPLUS):
            l_attr, info = attr_loss_terms(bundle, batch, y_t, variant=loss_variant,
                                           channel_mean=channel_mean,
                                           reference_grad=reference_grad,
                                           create_graph=create_graph)
            if loss == "l_attr_plus_ce":
                logits = info.get("logits")
                if logits is None:
                    logits = bundle.net(batch)
                l_attr = l_attr + F.cross_entropy(logits, y_t)
        return l_attr

    for _ in range(budget.steps):
        x_var = x_adv.clone().requires_grad_(True)
        obj = loss_at(x_var, create_graph=True)
        (grad,) = torch.autograd.grad(obj, x_var)
        trace.append(float(obj.detach()))
        x_adv = _ascent_step(x_adv, grad.detach(), x0, budget)
    if return_trace:
        trace.append(float(loss_at(x_adv, create_graph=False).detach()))
    if DEBUG_BUDGET:
        assert_within_budget(x_adv, x0, budget)
    out = x_adv.detach().squeeze(0) if single else x_adv.detach()
    return (out, trace) if return_trace else out


def transfer_attack_eval(source: ModelBundle, target: ModelBundle, x, y,
                         budget: PerturbationBudget, seed: int = 0) -> float:
    """Black-box transfer: craft PGD examples on source, report target accuracy."""
    res = pgd_classification_attack(source, x, y, budget, seed=seed)
    xb, y_t, _ = _batchify(target, res.perturbed, y)
    pred = _predict(target, xb)
    return float((pred == y_t).float().mean())
