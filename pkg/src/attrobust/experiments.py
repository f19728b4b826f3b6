"""Run orchestration: train or load the models of a config, evaluate the
attack and metric suites on a held-out slice, persist per-sample records, and
aggregate them into a report.

Every aggregate in the report is a plain mean over one column of one
per-sample CSV, so results can be re-derived from the records alone.
Intersection and rank-correlation aggregates are reported on a 0-100 scale.
"""

import csv
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from attrobust.attacks import (PerturbationBudget, ifia_topk_attack, pgd_classification_attack,
                               spsa_attack, targeted_attribution_attack, transfer_attack_eval)
from attrobust.attribution import IGConfig, attribution_scores
from attrobust.config import ExperimentConfig, desk_budget
from attrobust.datasets import load_dataset, normalization_for
from attrobust.metrics import (DegenerateInputError, UndefinedCorrelationError, cosine_alignment,
                               kendall_tau, topk_intersection)
from attrobust.models import EXACT_RELU, SOFTPLUS, build_model, input_gradient, load_checkpoint
from attrobust.training import evaluate_accuracy, fit
from attrobust.utils import spawn_seed, write_json
from attrobust import wsol as wsol_mod

log = logging.getLogger(__name__)


@dataclass
class RobustnessReport:
    rows: list
    metadata: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)  # (model, suite) -> list of per-sample dicts


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except Exception:
        return None


def write_record_csv(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not records:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(records[0].keys()))
        writer.writeheader()
        writer.writerows(records)


def read_record_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    return f"{v:.6f}"


def safe_cosine(x, g):
    """Cosine with the training-code convention for degenerate inputs: 0."""
    try:
        return cosine_alignment(x, g)
    except DegenerateInputError:
        log.warning("degenerate gradient in cosine evaluation; substituting 0")
        return 0.0


def eval_slice(test_ds, n, seed):
    """Deterministic evaluation slice of up to n samples."""
    rng = np.random.default_rng(spawn_seed(seed, "eval-slice"))
    idx = rng.permutation(len(test_ds))[:n]
    return idx


def correctly_classified_slice(bundle, test_ds, n, seed):
    """Up to n correctly classified samples, drawn deterministically."""
    rng = np.random.default_rng(spawn_seed(seed, "eval-slice"))
    order = rng.permutation(len(test_ds))
    x = torch.from_numpy(test_ds.images[order])
    y = torch.from_numpy(test_ds.labels[order])
    keep = []
    for i in range(0, len(order), 512):
        pred = bundle.predict(x[i:i + 512])
        keep.extend(order[i:i + 512][(pred == y[i:i + 512]).numpy()])
        if len(keep) >= n:
            break
    return np.asarray(keep[:n])


def attribution_flat_abs(bundle, x, y, cfg: ExperimentConfig, chunk=100):
    """|attribution| flattened per sample, softplus pathway, batched."""
    out = []
    ig = IGConfig(riemann_steps=cfg.ig_steps)
    with bundle.activation(SOFTPLUS):
        for i in range(0, x.shape[0], chunk):
            scores = attribution_scores(bundle, x[i:i + chunk], y[i:i + chunk],
                                        method=cfg.attribution_method, ig=ig,
                                        seed=spawn_seed(cfg.seed, "attr"))
            out.append(scores.detach().abs().flatten(1).numpy())
    return np.concatenate(out)


def eval_clean(bundle, test_ds):
    x = torch.from_numpy(test_ds.images)
    y = torch.from_numpy(test_ds.labels)
    records = []
    for i in range(0, len(test_ds), 512):
        pred = bundle.predict(x[i:i + 512]).numpy()
        for j, p in enumerate(pred):
            records.append({"index": i + j, "label": int(y[i + j]), "pred": int(p),
                            "correct": int(p == int(y[i + j]))})
    return records


def eval_pgd(bundle, test_ds, cfg: ExperimentConfig, norm="linf", chunk=250):
    idx = eval_slice(test_ds, cfg.eval_samples, cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    budget = desk_budget(cfg.attack_epsilon, cfg.pgd_eval_steps)
    if norm == "l2":
        budget = PerturbationBudget(norm="l2", epsilon=1.0,
                                    step_size=2.5 / cfg.pgd_eval_steps,
                                    steps=cfg.pgd_eval_steps, random_init=True)
    records = []
    for i in range(0, len(idx), chunk):
        res = pgd_classification_attack(bundle, x[i:i + chunk], y[i:i + chunk], budget,
                                        seed=spawn_seed(cfg.seed, "pgd-eval", i))
        pred = bundle.predict(res.perturbed).numpy()
        for j, p in enumerate(pred):
            records.append({"index": int(idx[i + j]), "label": int(y[i + j]),
                            "adv_pred": int(p), "correct": int(p == int(y[i + j]))})
    return records


def eval_spsa(bundle, test_ds, cfg: ExperimentConfig, steps=10, batch_perturbations=32):
    idx = eval_slice(test_ds, min(cfg.eval_samples, 100), cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    budget = PerturbationBudget(epsilon=cfg.attack_epsilon,
                                step_size=cfg.attack_epsilon / 4, steps=steps,
                                random_init=True)
    res = spsa_attack(bundle, x, y, budget, batch_perturbations=batch_perturbations,
                      seed=spawn_seed(cfg.seed, "spsa"))
    pred = bundle.predict(res.perturbed).numpy()
    return [{"index": int(idx[j]), "label": int(y[j]), "adv_pred": int(p),
             "correct": int(p == int(y[j]))} for j, p in enumerate(pred)]


def eval_ifia(bundle, test_ds, cfg: ExperimentConfig, epsilon=None, chunk=100):
    """Attack attribution maps of correctly classified samples; record top-k
    intersection and rank correlation between clean and attacked maps."""
    epsilon = epsilon if epsilon is not None else cfg.attack_epsilon
    idx = correctly_classified_slice(bundle, test_ds, cfg.eval_samples, cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    budget = PerturbationBudget(epsilon=epsilon, step_size=cfg.ifia_step_size,
                                steps=cfg.ifia_steps, random_init=False)
    records = []
    for i in range(0, len(idx), chunk):
        xs, ys = x[i:i + chunk], y[i:i + chunk]
        res = ifia_topk_attack(bundle, xs, ys, attribution_method=cfg.attribution_method,
                               budget=budget, k=cfg.ifia_k,
                               ig=IGConfig(riemann_steps=cfg.ig_steps),
                               seed=spawn_seed(cfg.seed, "ifia", i))
        before = attribution_flat_abs(bundle, xs, ys, cfg)
        after = attribution_flat_abs(bundle, res.perturbed, ys, cfg)
        for j in range(xs.shape[0]):
            rec = {"index": int(idx[i + j]), "label": int(ys[j]),
                   "skipped": int(bool(np.asarray(res.skipped).reshape(-1)[j]))}
            try:
                rec["topk_in"] = _fmt(topk_intersection(before[j], after[j], cfg.ifia_k))
                rec["kendall"] = _fmt(kendall_tau(before[j], after[j]))
            except UndefinedCorrelationError:
                rec["topk_in"] = _fmt(0.0)
                rec["kendall"] = _fmt(0.0)
            records.append(rec)
    return records


def eval_cosine(bundle, test_ds, cfg: ExperimentConfig):
    """cos(x, input-gradient at the true class), exact-ReLU pathway."""
    idx = eval_slice(test_ds, cfg.eval_samples, cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    records = []
    with bundle.activation(EXACT_RELU):
        for i in range(0, len(idx), 256):
            g = input_gradient(bundle, x[i:i + 256], y[i:i + 256], create_graph=False)
            g = g.detach().numpy()
            for j in range(g.shape[0]):
                cos = safe_cosine(x[i + j].numpy(), g[j])
                records.append({"index": int(idx[i + j]), "cosine": _fmt(cos)})
    return records


def eval_targeted(bundle, test_ds, cfg: ExperimentConfig, chunk=100):
    """Shuffled-pair protocol: each sample's target map comes from another
    randomly chosen sample.  Records similarity to the target before/after the
    attack and similarity of the attacked map to the original map."""
    idx = correctly_classified_slice(bundle, test_ds, cfg.eval_samples, cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    rng = np.random.default_rng(spawn_seed(cfg.seed, "targeted-shuffle"))
    perm = rng.permutation(len(idx))
    budget = PerturbationBudget(epsilon=cfg.attack_epsilon, step_size=cfg.ifia_step_size,
                                steps=cfg.ifia_steps, random_init=False)
    records = []
    for i in range(0, len(idx), chunk):
        xs, ys = x[i:i + chunk], y[i:i + chunk]
        own_flat = attribution_flat_abs(bundle, xs, ys, cfg)
        tgt_x = x[perm[i:i + chunk]]
        tgt_y = y[perm[i:i + chunk]]
        tgt_flat = attribution_flat_abs(bundle, tgt_x, tgt_y, cfg)
        target_maps = tgt_flat.reshape((-1,) + tuple(cfg.input_shape))
        res = targeted_attribution_attack(bundle, xs, ys, target_maps,
                                          attribution_method=cfg.attribution_method,
                                          budget=budget, k=cfg.ifia_k,
                                          ig=IGConfig(riemann_steps=cfg.ig_steps),
                                          seed=spawn_seed(cfg.seed, "targeted", i))
        after_flat = attribution_flat_abs(bundle, res.perturbed, ys, cfg)
        for j in range(xs.shape[0]):
            records.append({
                "index": int(idx[i + j]),
                "skipped": int(bool(np.asarray(res.skipped).reshape(-1)[j])),
                "sim_target_before": _fmt(topk_intersection(own_flat[j], tgt_flat[j], cfg.ifia_k)),
                "sim_target_after": _fmt(topk_intersection(after_flat[j], tgt_flat[j], cfg.ifia_k)),
                "sim_original_after": _fmt(topk_intersection(after_flat[j], own_flat[j], cfg.ifia_k)),
                "kendall_original_after": _fmt(_tau_or_zero(after_flat[j], own_flat[j])),
            })
    return records


def _tau_or_zero(a, b):
    try:
        return kendall_tau(a, b)
    except UndefinedCorrelationError:
        return 0.0


def eval_eps_sweep(bundle, test_ds, cfg: ExperimentConfig):
    """Post-attack top-k intersection across attack radii (paired samples)."""
    records = []
    for eps in cfg.eps_sweep:
        recs = eval_ifia(bundle, test_ds, cfg, epsilon=eps)
        active = [float(r["topk_in"]) for r in recs if not int(r["skipped"])]
        taus = [float(r["kendall"]) for r in recs if not int(r["skipped"])]
        records.append({"epsilon": _fmt(eps),
                        "topk_in": _fmt(float(np.mean(active)) if active else 0.0),
                        "kendall": _fmt(float(np.mean(taus)) if taus else 0.0),
                        "n": len(active)})
    return records


def eval_wsol(bundle, test_ds, cfg: ExperimentConfig, threshold=0.2):
    """Localization from gradient heatmaps against the dataset's exact boxes."""
    if test_ds.boxes is None:
        raise ValueError("dataset has no ground-truth boxes")
    idx = eval_slice(test_ds, cfg.eval_samples, cfg.seed)
    x = torch.from_numpy(test_ds.images[idx])
    y = torch.from_numpy(test_ds.labels[idx])
    records = []
    results = []
    with bundle.activation(SOFTPLUS):
        for i in range(0, len(idx), 256):
            g = input_gradient(bundle, x[i:i + 256], y[i:i + 256], create_graph=False)
            g = g.detach().numpy()
            pred = bundle.predict(x[i:i + 256]).numpy()
            for j in range(g.shape[0]):
                bx = test_ds.boxes[idx[i + j]]
                gt = wsol_mod.BoundingBox(int(bx[0]), int(bx[1]), int(bx[2]), int(bx[3]))
                r = wsol_mod.localize(g[j], gt, pred[j] == int(y[i + j]),
                                      threshold_fraction=threshold)
                results.append(r)
                records.append({"index": int(idx[i + j]), "iou": _fmt(r.iou),
                                "correct": int(r.prediction_correct),
                                "pred_box": " ".join(map(str, r.predicted_box.to_tuple())),
                                "gt_box": " ".join(map(str, gt.to_tuple()))})
    metrics = wsol_mod.wsol_metrics(results)
    return records, metrics


def train_or_load(entry, cfg: ExperimentConfig, train_ds, test_ds, out_dir):
    """Load the model checkpoint when its config hash matches; train otherwise."""
    model_dir = Path(out_dir) / "models" / entry.name
    ckpt = model_dir / "checkpoint.pt"
    mean, std = normalization_for(cfg.dataset_id)
    chash = cfg.config_hash()
    if ckpt.exists():
        bundle, meta = load_checkpoint(ckpt)
        if meta.get("config_hash") == chash:
            log.info("loaded %s from %s", entry.name, ckpt)
            bundle.eval()
            return bundle
        raise ValueError(f"checkpoint {ckpt} belongs to config {meta.get('config_hash')}, "
                         f"not {chash}; refusing to reuse")
    bundle = build_model(cfg.architecture_id, cfg.input_shape, cfg.num_classes,
                         beta=entry.train.softplus_beta, mean=mean, std=std,
                         seed=spawn_seed(cfg.seed, "init", entry.name))
    bundle, _ = fit(bundle, train_ds, entry.train, kind=entry.kind, out_dir=model_dir,
                    test_ds=test_ds, config_hash=chash)
    return bundle


def run_experiment(cfg: ExperimentConfig) -> RobustnessReport:
    """Full pipeline: data, models, suites, records, report, plots.

    A failing stage is recorded and skipped; everything already produced is
    kept on disk."""
    from attrobust.report import render_report

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    t_start = time.time()
    train_ds = load_dataset(cfg.dataset_id, cfg.subset_size, seed=cfg.seed, split="train",
                            data_root=cfg.data_root)
    test_ds = load_dataset(cfg.dataset_id, cfg.test_size, seed=cfg.seed, split="test",
                           data_root=cfg.data_root)

    report = RobustnessReport(rows=[], metadata={
        "config_hash": cfg.config_hash(),
        "git": _git_describe(),
        "started_unix": int(t_start),
        "errors": [],
    })

    bundles = {}
    for entry in cfg.models:
        try:
            bundles[entry.name] = train_or_load(entry, cfg, train_ds, test_ds, out)
        except Exception as e:  # partial outputs are kept
            log.exception("training %s failed", entry.name)
            report.metadata["errors"].append(f"{entry.name}/train: {e}")

    rec_dir = out / "records"
    for entry in cfg.models:
        if entry.name not in bundles:
            continue
        bundle = bundles[entry.name]
        row = {"name": entry.name, "kind": entry.kind}
        stages = []
        if "clean_acc" in cfg.metric_suite:
            stages.append(("clean", lambda: eval_clean(bundle, test_ds),
                           lambda r: {"clean_acc": np.mean([x["correct"] for x in r])}))
        if "pgd40" in cfg.attack_suite:
            stages.append(("pgd40", lambda: eval_pgd(bundle, test_ds, cfg),
                           lambda r: {"pgd40_acc": np.mean([x["correct"] for x in r])}))
        if "spsa" in cfg.attack_suite:
            stages.append(("spsa", lambda: eval_spsa(bundle, test_ds, cfg),
                           lambda r: {"spsa_acc": np.mean([x["correct"] for x in r])}))
        if "ifia" in cfg.attack_suite:
            def agg_ifia(r):
                act = [x for x in r if not int(x["skipped"])]
                return {"ifia_topk_in": 100 * np.mean([float(x["topk_in"]) for x in act]),
                        "ifia_kendall": 100 * np.mean([float(x["kendall"]) for x in act])}
            stages.append(("ifia", lambda: eval_ifia(bundle, test_ds, cfg), agg_ifia))
        if "cosine_alignment" in cfg.metric_suite:
            stages.append(("cosine", lambda: eval_cosine(bundle, test_ds, cfg),
                           lambda r: {"cosine_alignment": np.mean([float(x["cosine"]) for x in r])}))
        if "targeted" in cfg.attack_suite:
            def agg_targeted(r):
                act = [x for x in r if not int(x["skipped"])]
                gains = [float(x["sim_target_after"]) > float(x["sim_target_before"])
                         for x in act]
                return {"targeted_gain_frac": np.mean(gains) if gains else 0.0,
                        "targeted_sim_original": 100 * np.mean(
                            [float(x["sim_original_after"]) for x in act])}
            stages.append(("targeted", lambda: eval_targeted(bundle, test_ds, cfg),
                           agg_targeted))
        if "eps_sweep" in cfg.attack_suite:
            stages.append(("eps_sweep", lambda: eval_eps_sweep(bundle, test_ds, cfg),
                           lambda r: {}))
        if "wsol" in cfg.metric_suite and test_ds.boxes is not None:
            def run_wsol():
                recs, metrics = eval_wsol(bundle, test_ds, cfg)
                run_wsol.metrics = metrics
                return recs
            stages.append(("wsol", run_wsol,
                           lambda r: {k: v for k, v in run_wsol.metrics.items() if k != "n"}))

        for stage_name, run_stage, aggregate in stages:
            try:
                records = run_stage()
                report.records[(entry.name, stage_name)] = records
                write_record_csv(rec_dir / f"{entry.name}_{stage_name}.csv", records)
                row.update({k: round(float(v), 6) for k, v in aggregate(records).items()})
            except Exception as e:
                log.exception("%s/%s failed", entry.name, stage_name)
                report.metadata["errors"].append(f"{entry.name}/{stage_name}: {e}")
        report.rows.append(row)

    if "transfer" in cfg.attack_suite and len(bundles) > 1:
        try:
            records = []
            idx = eval_slice(test_ds, cfg.eval_samples, cfg.seed)
            x = torch.from_numpy(test_ds.images[idx])
            y = torch.from_numpy(test_ds.labels[idx])
            budget = desk_budget(cfg.attack_epsilon, cfg.pgd_eval_steps)
            for src_name, src in bundles.items():
                for tgt_name, tgt in bundles.items():
                    acc = transfer_attack_eval(src, tgt, x, y, budget,
                                               seed=spawn_seed(cfg.seed, "transfer", src_name))
                    records.append({"source": src_name, "target": tgt_name,
                                    "accuracy": _fmt(acc)})
            report.records[("all", "transfer")] = records
            write_record_csv(rec_dir / "transfer.csv", records)
        except Exception as e:
            log.exception("transfer matrix failed")
            report.metadata["errors"].append(f"transfer: {e}")

    report.metadata["elapsed_s"] = round(time.time() - t_start, 1)
    render_report(report, out, bundles=bundles, test_ds=test_ds, cfg=cfg)
    return report
