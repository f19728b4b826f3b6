"""Attribution maps: gradient saliency, integrated gradients, expected gradients.

The public operations return detached numpy maps.  Attacks and the training
loss use the torch-level `attribution_scores`, which stays differentiable
through the map when create_graph=True (softplus pathway).
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from attrobust.models import ModelBundle, input_gradient
from attrobust.utils import save_array, torch_generator

GRADIENT = "gradient"
INTEGRATED_GRADIENTS = "integrated_gradients"
GRADSHAP = "gradshap"

REDUCTIONS = ("none", "channel_mean", "abs")


@dataclass
class IGConfig:
    """Path-integral discretization for integrated gradients.

    baseline "zeros" is the black image in raw pixel space; midpoint rule with
    50 steps is the evaluation default, 128 steps for completeness checks.
    """

    baseline: Union[str, np.ndarray, torch.Tensor] = "zeros"
    riemann_steps: int = 50
    rule: str = "midpoint"

    def validate(self):
        if self.riemann_steps < 1:
            raise ValueError(f"riemann_steps must be >= 1, got {self.riemann_steps}")
        if self.rule not in ("left", "midpoint"):
            raise ValueError(f"rule must be 'left' or 'midpoint', got {self.rule!r}")


@dataclass
class AttributionMap:
    """Per-element relevance scores for one (input, class) pair or a batch of them."""

    scores: np.ndarray
    method: str
    class_index: Union[int, np.ndarray]
    reduction: str = "none"


def reduce_map(amap: AttributionMap, reduction: str) -> AttributionMap:
    """Apply abs or channel-mean reduction; channel axis is the last image axis group's first."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    scores = amap.scores
    if reduction == "abs":
        scores = np.abs(scores)
    elif reduction == "channel_mean":
        scores = scores.mean(axis=-3)
    return AttributionMap(scores, amap.method, amap.class_index, reduction)


def _resolve_baseline(baseline, x: torch.Tensor) -> torch.Tensor:
    if isinstance(baseline, str):
        if baseline != "zeros":
            raise ValueError(f"unknown baseline {baseline!r}")
        return torch.zeros_like(x)
    b = torch.as_tensor(baseline, dtype=x.dtype)
    if b.shape == x.shape:
        return b
    if b.shape == x.shape[1:]:
        return b.unsqueeze(0).expand_as(x).contiguous()
    raise ValueError(f"baseline shape {tuple(b.shape)} does not match input {tuple(x.shape)}")


def _as_batch(bundle, x):
    single = x.dim() == len(bundle.input_shape)
    return (x.unsqueeze(0) if single else x), single


def _class_rows(class_index, n, num_classes, device):
    ci = torch.as_tensor(class_index, device=device)
    if ci.dim() == 0:
        ci = ci.expand(n)
    if ci.min() < 0 or ci.max() >= num_classes:
        raise ValueError(f"class index out of range [0, {num_classes})")
    return ci


def attribution_scores(bundle: ModelBundle, x: torch.Tensor, class_index, method=GRADIENT,
                       ig: Optional[IGConfig] = None, num_baselines=8, noise_scale=0.1,
                       seed=0, baseline_pool=None, create_graph=False) -> torch.Tensor:
    """Differentiable attribution scores (torch), same shape as x."""
    if method == GRADIENT:
        return _gradient_scores(bundle, x, class_index, create_graph)
    if method == INTEGRATED_GRADIENTS:
        return _ig_scores(bundle, x, class_index, ig or IGConfig(), create_graph)
    if method == GRADSHAP:
        return _gradshap_scores(bundle, x, class_index, num_baselines, noise_scale, seed,
                                baseline_pool, create_graph)
    raise ValueError(f"unknown attribution method {method!r}")


def _gradient_scores(bundle, x, class_index, create_graph):
    return input_gradient(bundle, x, class_index, create_graph=create_graph)


def _ig_scores(bundle, x, class_index, cfg: IGConfig, create_graph):
    cfg.validate()
    xb, single = _as_batch(bundle, x)
    base = _resolve_baseline(cfg.baseline, xb.detach())
    m = cfg.riemann_steps
    offsets = (np.arange(m) + 0.5) / m if cfg.rule == "midpoint" else np.arange(m) / m
    diff = xb - base
    total = None
    for t in offsets:
        point = base + float(t) * diff
        g = input_gradient(bundle, point, class_index, create_graph=create_graph)
        if g.dim() == len(bundle.input_shape):
            g = g.unsqueeze(0)
        total = g if total is None else total + g
    scores = diff * (total / m)
    return scores.squeeze(0) if single else scores


def _gradshap_scores(bundle, x, class_index, num_baselines, noise_scale, seed,
                     baseline_pool, create_graph):
    if num_baselines < 1:
        raise ValueError(f"num_baselines must be >= 1, got {num_baselines}")
    xb, single = _as_batch(bundle, x)
    gen = torch_generator(seed)
    pool = None if baseline_pool is None else torch.as_tensor(baseline_pool, dtype=xb.dtype)
    # the same baseline/interpolation draws are used for every sample in the
    # batch, so per-sample maps do not depend on batch composition
    total = None
    for _ in range(num_baselines):
        if pool is not None:
            idx = torch.randint(pool.shape[0], (1,), generator=gen).item()
            b = pool[idx].unsqueeze(0).expand_as(xb)
        else:
            b = torch.zeros_like(xb)
        if noise_scale > 0:
            noise = torch.randn(bundle.input_shape, generator=gen, dtype=xb.dtype) * noise_scale
            b = b + noise.unsqueeze(0)
        t = torch.rand((), generator=gen, dtype=xb.dtype)
        point = b + t * (xb - b)
        g = input_gradient(bundle, point, class_index, create_graph=create_graph)
        if g.dim() == len(bundle.input_shape):
            g = g.unsqueeze(0)
        contrib = (xb - b) * g
        total = contrib if total is None else total + contrib
    scores = total / num_baselines
    return scores.squeeze(0) if single else scores


def gradient_saliency(bundle: ModelBundle, x, class_index) -> AttributionMap:
    """Plain input-gradient saliency under the caller-selected activation mode."""
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    scores = _gradient_scores(bundle, x, class_index, create_graph=False)
    return AttributionMap(scores.detach().cpu().numpy(), GRADIENT, class_index)


def integrated_gradients(bundle: ModelBundle, x, class_index,
                         cfg: Optional[IGConfig] = None) -> AttributionMap:
    """Riemann approximation of the baseline-to-input path integral times (x - baseline)."""
    cfg = cfg or IGConfig()
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    scores = _ig_scores(bundle, x, class_index, cfg, create_graph=False)
    return AttributionMap(scores.detach().cpu().numpy(), INTEGRATED_GRADIENTS, class_index)


def gradshap(bundle: ModelBundle, x, class_index, num_baselines=8, noise_scale=0.1,
             seed=0, baseline_pool=None) -> AttributionMap:
    """Expected gradients: Monte-Carlo average of interpolated gradients over
    sampled baselines.  Deterministic given seed."""
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    scores = _gradshap_scores(bundle, x, class_index, num_baselines, noise_scale, seed,
                              baseline_pool, create_graph=False)
    return AttributionMap(scores.detach().cpu().numpy(), GRADSHAP, class_index)


def completeness_gap(bundle: ModelBundle, x, class_index, cfg: IGConfig):
    """(sum of IG map) - (f(x) - f(baseline)) for the chosen class.

    Zero in the exact-integral limit; used to audit discretization error.
    """
    x = torch.as_tensor(x, dtype=bundle.param_dtype())
    amap = integrated_gradients(bundle, x, class_index, cfg)
    xb, single = _as_batch(bundle, x)
    base = _resolve_baseline(cfg.baseline, xb)
    with torch.no_grad():
        lx = bundle.logits(xb)
        lb = bundle.logits(base)
    ci = _class_rows(class_index, xb.shape[0], bundle.num_classes, xb.device)
    rows = torch.arange(xb.shape[0])
    delta = (lx[rows, ci] - lb[rows, ci]).cpu().numpy()
    sums = amap.scores.reshape(xb.shape[0], -1).sum(axis=1)
    gap = sums - delta
    return (float(gap[0]), float(delta[0])) if single else (gap, delta)


def save_map(amap: AttributionMap, path):
    """Persist raw scores as a dense-array file with a shape + dtype header."""
    save_array(path, amap.scores)


def save_heatmap_png(scores: np.ndarray, path, colormap=None):
    """Render a 2-D (or channel-reducible) score array to an 8-bit image file.

    Grayscale by default; pass a matplotlib colormap name for color output.
    """
    from PIL import Image

    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim == 3:
        arr = np.abs(arr).mean(axis=0)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {arr.shape}")
    lo, hi = arr.min(), arr.max()
    norm = np.zeros_like(arr) if hi - lo < 1e-12 else (arr - lo) / (hi - lo)
    if colormap is None:
        img = Image.fromarray((norm * 255).round().astype(np.uint8), mode="L")
    else:
        from matplotlib import colormaps

        rgba = colormaps[colormap](norm)
        img = Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8), mode="RGB")
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
