"""Experiment configuration: one serializable object fully determines a run."""

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from attrobust.attacks import PerturbationBudget
from attrobust.training import ARTConfig

ATTACK_SUITES = ("pgd40", "ifia", "targeted", "spsa", "transfer", "eps_sweep")
METRIC_SUITES = ("clean_acc", "ifia_topk", "ifia_kendall", "cosine_alignment", "wsol")


@dataclass
class ModelEntry:
    """One trained model in a run: a row of the final report."""

    name: str
    kind: str
    train: ARTConfig = field(default_factory=ARTConfig)

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["kind"], ARTConfig.from_dict(d["train"]))


@dataclass
class ExperimentConfig:
    dataset_id: str = "synthetic"
    data_root: Optional[str] = None
    subset_size: int = 6000
    test_size: int = 1000
    eval_samples: int = 200
    architecture_id: str = "small_cnn"
    input_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    models: tuple = ()
    attack_suite: tuple = ("pgd40", "ifia")
    metric_suite: tuple = ("clean_acc", "ifia_topk", "ifia_kendall", "cosine_alignment")
    attribution_method: str = "integrated_gradients"
    ig_steps: int = 50
    ifia_k: int = 100
    ifia_steps: int = 50
    ifia_step_size: float = 1 / 255
    attack_epsilon: float = 8 / 255
    pgd_eval_steps: int = 40
    eps_sweep: tuple = (2 / 255, 4 / 255, 8 / 255, 12 / 255)
    seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        for s in self.attack_suite:
            if s not in ATTACK_SUITES:
                raise ValueError(f"unknown attack suite {s!r}")
        for s in self.metric_suite:
            if s not in METRIC_SUITES:
                raise ValueError(f"unknown metric suite {s!r}")

    def to_dict(self):
        d = {k: v for k, v in self.__dict__.items()}
        d["models"] = [m.to_dict() for m in self.models]
        d["input_shape"] = list(self.input_shape)
        d["attack_suite"] = list(self.attack_suite)
        d["metric_suite"] = list(self.metric_suite)
        d["eps_sweep"] = list(self.eps_sweep)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["models"] = tuple(ModelEntry.from_dict(m) for m in d.get("models", []))
        for key in ("input_shape", "attack_suite", "metric_suite", "eps_sweep"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def save(self, path):
        from attrobust.utils import write_json

        payload = self.to_dict()
        payload["config_hash"] = self.config_hash()
        write_json(path, payload)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        d.pop("config_hash", None)
        return cls.from_dict(d)

    def config_hash(self) -> str:
        """Hash of everything that determines results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("data_root", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_budget(epsilon=8 / 255, steps=40):
    return PerturbationBudget(epsilon=epsilon, step_size=2.5 * epsilon / max(steps, 1),
                              steps=steps, random_init=True)


def desk_train_config(kind, seed=0, epochs=None, **overrides) -> ARTConfig:
    """Desk-scale training recipe: the full-scale hyperparameters (SGD 0.9
    momentum, weight decay 2e-4, alignment weight 0.5, beta 50, 3 inner steps
    of 1.5/255 at eps 8/255) with reduced epochs, lr 0.05 and a short warmup
    for the small architecture."""
    defaults = dict(lr=0.05, batch_size=128, warmup_epochs=2, seed=seed,
                    lr_milestones=((0.6, 0.2), (0.85, 0.5)))
    if kind == "natural":
        defaults["epochs"] = 10
    elif kind == "pgd_adversarial":
        defaults["epochs"] = 16
        defaults["adv_budget"] = PerturbationBudget(epsilon=8 / 255, step_size=2 / 255,
                                                    steps=7, random_init=True)
    elif kind == "art":
        defaults["epochs"] = 14
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if epochs is not None:
        defaults["epochs"] = epochs
    defaults.update(overrides)
    return ARTConfig(**defaults)


def desk_preset(output_dir="runs/desk", seed=0, subset_size=6000, test_size=1000,
                eval_samples=200, attribution_method="gradient") -> ExperimentConfig:
    """Natural vs PGD-7 vs alignment-trained comparison at desk scale."""
    models = (
        ModelEntry("natural", "natural", desk_train_config("natural", seed)),
        ModelEntry("pgd7", "pgd_adversarial", desk_train_config("pgd_adversarial", seed)),
        ModelEntry("art", "art", desk_train_config("art", seed)),
    )
    return ExperimentConfig(models=models, output_dir=output_dir, seed=seed,
                            subset_size=subset_size, test_size=test_size,
                            eval_samples=eval_samples,
                            attribution_method=attribution_method,
                            attack_suite=("pgd40", "ifia"),
                            metric_suite=("clean_acc", "ifia_topk", "ifia_kendall",
                                          "cosine_alignment"))


def cifar10_full_preset(output_dir="runs/cifar10_full", seed=0) -> ExperimentConfig:
    """The full-scale benchmark recipe (wide residual network, 100 epochs,
    lr 0.1 with step decay, batch 256).  Documented for completeness; far
    beyond desk-scale hardware."""
    base = dict(lr=0.1, batch_size=256, weight_decay=2e-4, momentum=0.9,
                lr_milestones=((0.5, 0.1), (0.8, 0.5)), warmup_epochs=0, augment=True)
    models = (
        ModelEntry("natural", "natural", ARTConfig(epochs=100, seed=seed, **base)),
        ModelEntry("pgd10", "pgd_adversarial",
                   ARTConfig(epochs=100, seed=seed,
                             adv_budget=PerturbationBudget(epsilon=8 / 255, step_size=2 / 255,
                                                           steps=10, random_init=True),
                             **base)),
        ModelEntry("art", "art", ARTConfig(epochs=100, seed=seed, **base)),
    )
    return ExperimentConfig(dataset_id="cifar10", subset_size=50000, test_size=10000,
                            eval_samples=1000, architecture_id="wideresnet",
                            models=models, output_dir=output_dir, seed=seed,
                            attribution_method="integrated_gradients",
                            attack_suite=("pgd40", "ifia", "targeted", "eps_sweep"))
