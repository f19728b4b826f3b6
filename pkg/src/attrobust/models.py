"""Classifier backend with a dual activation pathway.

Every network here can run its forward pass either through exact ReLU
activations (the "real" classifier used for predictions and cross-entropy
training) or through a smooth softplus surrogate log(1 + exp(beta*z)) / beta
whose second derivative is well defined, which makes gradients of the
input-gradient itself available to autograd.  The two pathways share one
parameter set; switching is a runtime flag, never a weight copy.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from attrobust.utils import atomic_torch_save, torch_generator

EXACT_RELU = "exact_relu"
SOFTPLUS = "softplus"

CHECKPOINT_FORMAT_VERSION = 1


class ActivationState:
    """Mutable switch shared by all activation modules of one network."""

    __slots__ = ("mode", "beta")

    def __init__(self, mode=EXACT_RELU, beta=50.0):
        if beta <= 0:
            raise ValueError(f"softplus beta must be positive, got {beta}")
        self.mode = mode
        self.beta = float(beta)


class DualActivation(nn.Module):
    """ReLU or softplus-beta depending on the shared activation state."""

    def __init__(self, state: ActivationState):
        super().__init__()
        self.state = state

    def forward(self, z):
        if self.state.mode == EXACT_RELU:
            return F.relu(z)
        return F.softplus(z, beta=self.state.beta)

    def extra_repr(self):
        return f"mode={self.state.mode}, beta={self.state.beta}"


def softplus_relu_gap(beta: float) -> float:
    """Worst-case elementwise gap between softplus-beta and ReLU: ln(2)/beta at z=0."""
    return math.log(2.0) / beta


class Normalize(nn.Module):
    """Fixed per-channel normalization, kept inside the model so that attacks
    and perturbation budgets operate in raw [0, 1] pixel space."""

    def __init__(self, mean, std):
        super().__init__()
        mean = torch.as_tensor(mean, dtype=torch.float32).reshape(-1, 1, 1)
        std = torch.as_tensor(std, dtype=torch.float32).reshape(-1, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, x):
        return (x - self.mean) / self.std


class SmallCNN(nn.Module):
    """Compact 3-block convnet for 32x32 inputs (~34k parameters).

    Downsamples early so that double-backward passes stay cheap on CPU.
    norm="group" adds GroupNorm after each conv (no running statistics, so
    per-sample outputs never depend on batch composition).
    """

    def __init__(self, state, in_channels=3, num_classes=10, width=24, norm="group",
                 mean=(0.5,), std=(0.5,)):
        super().__init__()
        self.normalize = Normalize(mean, std)
        self.conv1 = nn.Conv2d(in_channels, width, 5, stride=2, padding=2)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, padding=1)
        if norm == "group":
            self.norm1 = nn.GroupNorm(4, width)
            self.norm2 = nn.GroupNorm(4, 2 * width)
            self.norm3 = nn.GroupNorm(4, 2 * width)
        elif norm == "none":
            self.norm1 = self.norm2 = self.norm3 = nn.Identity()
        else:
            raise ValueError(f"unknown norm {norm!r}")
        self.act1 = DualActivation(state)
        self.act2 = DualActivation(state)
        self.act3 = DualActivation(state)
        self.head = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = self.normalize(x)
        x = self.act1(self.norm1(self.conv1(x)))
        x = self.act2(self.norm2(self.conv2(x)))
        x = self.act3(self.norm3(self.conv3(x)))
        x = x.mean(dim=(2, 3))
        return self.head(x)


class _WRNBlock(nn.Module):
    def __init__(self, state, in_planes, out_planes, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.act1 = DualActivation(state)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes)
        self.act2 = DualActivation(state)
        self.conv2 = nn.Conv2d(out_planes, out_planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = self.act1(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(out)
        out = self.conv2(self.act2(self.bn2(self.conv1(out))))
        return out + skip


class WideResNet(nn.Module):
    """Wide residual network (depth = 6n + 4) with dual activations.

    The full-scale configuration (depth 28, widen factor 10) matches the
    architecture used for the reference benchmark runs; it is selectable via
    the registry but far too large for the desk-scale test suite.
    """

    def __init__(self, state, depth=28, widen_factor=10, in_channels=3, num_classes=10,
                 mean=(0.5,), std=(0.5,)):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ValueError("WideResNet depth must be 6n+4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
        self.normalize = Normalize(mean, std)
        self.conv0 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        blocks = []
        in_planes = widths[0]
        for group, w in enumerate(widths[1:]):
            for i in range(n):
                stride = 2 if (group > 0 and i == 0) else 1
                blocks.append(_WRNBlock(state, in_planes, w, stride))
                in_planes = w
        self.blocks = nn.Sequential(*blocks)
        self.bn_final = nn.BatchNorm2d(in_planes)
        self.act_final = DualActivation(state)
        self.head = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        x = self.normalize(x)
        x = self.blocks(self.conv0(x))
        x = self.act_final(self.bn_final(x))
        x = x.mean(dim=(2, 3))
        return self.head(x)


class LinearModel(nn.Module):
    """f(x) = W x + b on flattened input. Analytic ground truth for tests."""

    def __init__(self, state, in_features, num_classes, mean=(0.0,), std=(1.0,)):
        super().__init__()
        self.normalize = Normalize(mean, std)
        self.head = nn.Linear(in_features, num_classes)

    def forward(self, x):
        x = self.normalize(x)
        return self.head(x.flatten(1))


def _build_small_cnn(state, input_shape, num_classes, mean, std, **kw):
    return SmallCNN(state, in_channels=input_shape[0], num_classes=num_classes,
                    mean=mean, std=std, **kw)


def _build_wrn(state, input_shape, num_classes, mean, std, depth=28, widen_factor=10):
    return WideResNet(state, depth=depth, widen_factor=widen_factor,
                      in_channels=input_shape[0], num_classes=num_classes, mean=mean, std=std)


def _build_linear(state, input_shape, num_classes, mean, std):
    n = 1
    for d in input_shape:
        n *= d
    return LinearModel(state, n, num_classes, mean=mean, std=std)


ARCHITECTURES = {
    "small_cnn": _build_small_cnn,
    "wideresnet": _build_wrn,
    "linear": _build_linear,
}


class ModelBundle:
    """A classifier plus the metadata other modules rely on.

    Holds the network, its architecture id, the expected input shape, the
    number of classes and the activation switch.  Evaluation methods are
    read-only; apply_update is the single mutation point.
    """

    def __init__(self, net, architecture_id, input_shape, num_classes,
                 activation_state, arch_kwargs=None):
        self.net = net
        self.architecture_id = architecture_id
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self._state = activation_state
        self._arch_kwargs = dict(arch_kwargs or {})

    @property
    def activation_mode(self):
        return self._state.mode

    @property
    def beta(self):
        return self._state.beta

    def set_activation(self, mode, beta=None):
        if mode not in (EXACT_RELU, SOFTPLUS):
            raise ValueError(f"unknown activation mode {mode!r}")
        self._state.mode = mode
        if beta is not None:
            if beta <= 0:
                raise ValueError("beta must be positive")
            self._state.beta = float(beta)

    @contextmanager
    def activation(self, mode, beta=None):
        """Temporarily switch the activation pathway; parameters are untouched."""
        old_mode, old_beta = self._state.mode, self._state.beta
        try:
            self.set_activation(mode, beta)
            yield self
        finally:
            self._state.mode, self._state.beta = old_mode, old_beta

    def _check_input(self, x):
        if x.dim() == len(self.input_shape) and tuple(x.shape) == self.input_shape:
            return x.unsqueeze(0), True
        if x.dim() == len(self.input_shape) + 1 and tuple(x.shape[1:]) == self.input_shape:
            return x, False
        raise ValueError(
            f"input shape {tuple(x.shape)} does not match model input shape {self.input_shape}")

    def logits(self, x):
        """Raw pre-softmax scores, shape (n, num_classes) or (num_classes,) for a single input."""
        xb, single = self._check_input(x)
        out = self.net(xb)
        return out.squeeze(0) if single else out

    def predict(self, x):
        """Class index of the maximum logit; ties broken by lowest index."""
        xb, single = self._check_input(x)
        with torch.no_grad():
            out = self.net(xb)
        pred = _argmax_lowest_index(out)
        return pred.squeeze(0) if single else pred

    def parameters(self):
        return self.net.parameters()

    def param_dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype=None):
        if dtype is not None:
            self.net.to(dtype=dtype)
        return self

    def eval(self):
        self.net.eval()
        return self

    def train(self):
        self.net.train()
        return self

    def clone(self):
        b = build_model(self.architecture_id, self.input_shape, self.num_classes,
                        beta=self.beta, **self._arch_kwargs)
        b.net.load_state_dict({k: v.clone() for k, v in self.net.state_dict().items()})
        b.net.to(self.param_dtype())
        b.set_activation(self.activation_mode)
        b.net.train(self.net.training)
        return b


def _argmax_lowest_index(logits2d: torch.Tensor) -> torch.Tensor:
    # torch.argmax tie behaviour is not contractual; enforce lowest-index wins
    k = logits2d.shape[1]
    top = logits2d.max(dim=1, keepdim=True).values
    idx = torch.arange(k, device=logits2d.device).expand_as(logits2d)
    return torch.where(logits2d == top, idx, torch.full_like(idx, k)).min(dim=1).values


def build_model(architecture_id, input_shape=(3, 32, 32), num_classes=10, beta=50.0,
                mean=(0.5,), std=(0.5,), seed=None, **arch_kwargs) -> ModelBundle:
    """Construct a ModelBundle from the architecture registry.

    seed, when given, makes the weight initialization reproducible.
    """
    if architecture_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture_id!r}; "
                         f"available: {sorted(ARCHITECTURES)}")
    state = ActivationState(EXACT_RELU, beta)
    if seed is not None:
        torch.manual_seed(int(seed) % (2**63 - 1))
    net = ARCHITECTURES[architecture_id](state, tuple(input_shape), num_classes, mean, std,
                                         **arch_kwargs)
    arch_kwargs = dict(arch_kwargs, mean=tuple(mean), std=tuple(std))
    return ModelBundle(net, architecture_id, input_shape, num_classes, state,
                       arch_kwargs=arch_kwargs)


def input_gradient(bundle: ModelBundle, x: torch.Tensor, class_index, create_graph=None):
    """Gradient of the selected class logit with respect to the input.

    Same shape as x.  In softplus mode the result is itself differentiable
    (create_graph defaults to True there), which is what the alignment loss
    and the attribution attacks rely on.
    """
    g, _ = _class_logit_gradients(bundle, x, [class_index], create_graph=create_graph)
    return g[0]


def pair_input_gradients(bundle: ModelBundle, x: torch.Tensor, idx_a, idx_b, create_graph=None):
    """Gradients of two class logits from a single forward pass.

    Returns (grad_a, grad_b, logits)."""
    (ga, gb), logits = _class_logit_gradients(bundle, x, [idx_a, idx_b], create_graph=create_graph)
    return ga, gb, logits


def _class_logit_gradients(bundle, x, class_indices, create_graph=None):
    if create_graph is None:
        create_graph = bundle.activation_mode == SOFTPLUS
    xb, single = bundle._check_input(x)
    n = xb.shape[0]
    managed = not xb.requires_grad
    if managed:
        xb = xb.detach().requires_grad_(True)
    logits = bundle.net(xb)
    rows = torch.arange(n, device=xb.device)
    grads = []
    for pos, ci in enumerate(class_indices):
        ci_t = torch.as_tensor(ci, device=xb.device).long()
        if ci_t.dim() == 0:
            ci_t = ci_t.expand(n)
        if ci_t.min() < 0 or ci_t.max() >= bundle.num_classes:
            raise ValueError(f"class index out of range [0, {bundle.num_classes})")
        selected = logits[rows, ci_t].sum()
        retain = create_graph or pos < len(class_indices) - 1
        (g,) = torch.autograd.grad(selected, xb, create_graph=create_graph, retain_graph=retain)
        grads.append(g.squeeze(0) if single else g)
    out_logits = logits.detach() if not create_graph else logits
    return grads, (out_logits.squeeze(0) if single else out_logits)


@dataclass
class SGDState:
    """Optimizer state for apply_update: SGD with momentum and weight decay."""

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    momentum_buffers: dict = field(default_factory=dict)
    step_count: int = 0

    def state_dict(self):
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "momentum_buffers": self.momentum_buffers,
            "step_count": self.step_count,
        }

    @classmethod
    def from_state_dict(cls, d):
        return cls(**d)


def apply_update(bundle: ModelBundle, loss_gradients, state: SGDState) -> ModelBundle:
    """One SGD-with-momentum step from an externally supplied parameter gradient.

    loss_gradients is a sequence aligned with bundle.parameters().  Mutates the
    bundle in place and advances the optimizer state; deterministic given state.
    """
    params = list(bundle.parameters())
    grads = list(loss_gradients)
    if len(params) != len(grads):
        raise ValueError(f"expected {len(params)} gradients, got {len(grads)}")
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g.shape != p.shape:
                raise ValueError(f"gradient {i} shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            d = g.to(p.dtype)
            if state.weight_decay:
                d = d + state.weight_decay * p
            if state.momentum:
                buf = state.momentum_buffers.get(i)
                buf = d.clone() if buf is None else buf.mul_(state.momentum).add_(d)
                state.momentum_buffers[i] = buf
                d = buf
            p.add_(d, alpha=-state.lr)
    state.step_count += 1
    return bundle


def save_checkpoint(bundle: ModelBundle, path, optimizer_state=None, epoch=None,
                    seed=None, config_hash=None, extra=None):
    """Self-describing checkpoint: architecture, parameters, optimizer state, metadata."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture_id": bundle.architecture_id,
        "arch_kwargs": bundle._arch_kwargs,
        "input_shape": bundle.input_shape,
        "num_classes": bundle.num_classes,
        "beta": bundle.beta,
        "activation_mode": bundle.activation_mode,
        "state_dict": bundle.net.state_dict(),
        "optimizer_state": optimizer_state.state_dict() if isinstance(optimizer_state, SGDState)
                           else optimizer_state,
        "epoch": epoch,
        "seed": seed,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    atomic_torch_save(payload, path)


def load_checkpoint(path):
    """Rebuild a ModelBundle (plus metadata dict) from a checkpoint file."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    bundle = build_model(payload["architecture_id"], payload["input_shape"],
                         payload["num_classes"], beta=payload["beta"],
                         **payload.get("arch_kwargs", {}))
    bundle.net.load_state_dict(payload["state_dict"])
    bundle.set_activation(payload["activation_mode"])
    meta = {k: payload.get(k) for k in
            ("optimizer_state", "epoch", "seed", "config_hash", "extra", "format_version")}
    return bundle, meta
