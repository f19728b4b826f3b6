"""Command-line interface.

Subcommands: train, attack-attr, attack-adv, eval-wsol, report, sweep.
Flags mirror the experiment config; a --config JSON file, when given,
overrides flag values field by field.  The dataset root comes from
--data-root or $ATTROBUST_DATA_ROOT.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("attrobust")


def eps_value(text):
    """Accept '8/255' style fractions or plain floats (pixel units)."""
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _add_common(p):
    p.add_argument("--dataset", default="synthetic",
                   help="dataset id: synthetic | cifar10 | gtsrb")
    p.add_argument("--data-root", default=None, help="dataset directory "
                   "(defaults to $ATTROBUST_DATA_ROOT)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/cli", help="output directory")
    p.add_argument("--config", default=None,
                   help="JSON config file; its fields override the flags")


def build_parser():
    parser = argparse.ArgumentParser(prog="attrobust",
                                     description="attributional robustness toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model (natural, PGD-adversarial, or ART)")
    _add_common(p)
    p.add_argument("--kind", default="art", choices=["natural", "pgd_adversarial", "art"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--attr-weight", type=float, default=0.5,
                   help="weight of the alignment loss")
    p.add_argument("--beta", type=float, default=50.0, help="softplus sharpness")
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--inner-step-size", type=eps_value, default="1.5/255")
    p.add_argument("--eps", type=eps_value, default="8/255")
    p.add_argument("--loss-variant", default="art_triplet")
    p.add_argument("--channel-mean", action="store_true")
    p.add_argument("--subset-size", type=int, default=6000)
    p.add_argument("--arch", default="small_cnn")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("attack-attr", help="attribution attacks on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", default="integrated_gradients",
                   choices=["gradient", "integrated_gradients", "gradshap"])
    p.add_argument("--targeted", action="store_true",
                   help="targeted manipulation with shuffled-pair targets")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--eps", type=eps_value, default="8/255")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=eps_value, default="1/255")
    p.add_argument("--ig-steps", type=int, default=50)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--dump-traces", action="store_true")

    p = sub.add_parser("attack-adv", help="classification attacks on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--norm", default="linf", choices=["linf", "l2"])
    p.add_argument("--eps", type=eps_value, default="8/255")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--spsa", action="store_true", help="gradient-free attack instead of PGD")
    p.add_argument("--transfer-checkpoint", default=None,
                   help="evaluate the perturbations on this target model")
    p.add_argument("--samples", type=int, default=200)

    p = sub.add_parser("eval-wsol", help="weakly supervised localization from a manifest")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--overlays", action="store_true", help="export box overlay images")

    p = sub.add_parser("report", help="re-render report files from a run directory")
    p.add_argument("--run-dir", required=True)

    p = sub.add_parser("sweep", help="hyperparameter / radius sweeps")
    _add_common(p)
    p.add_argument("--param", required=True, choices=["beta", "attr_weight", "inner_steps",
                                                      "eps"])
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 0.1,0.5,1.0 or 2/255,4/255")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--subset-size", type=int, default=4000)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--checkpoint", default=None,
                   help="for --param eps: evaluate this checkpoint instead of training")
    return parser


def _apply_config_file(args):
    """Per the interface contract, the config file overrides flag values."""
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        for key, value in overrides.items():
            setattr(args, key.replace("-", "_"), value)
    return args


def _load_data(args, split="test", n=None):
    from attrobust.datasets import load_dataset

    return load_dataset(args.dataset, n, seed=args.seed, split=split,
                        data_root=args.data_root)


def cmd_train(args):
    from attrobust.attacks import PerturbationBudget
    from attrobust.config import desk_train_config
    from attrobust.datasets import load_dataset, normalization_for
    from attrobust.models import build_model
    from attrobust.training import fit
    from attrobust.utils import spawn_seed

    cfg = desk_train_config(args.kind, seed=args.seed, epochs=args.epochs,
                            batch_size=args.batch_size, lr=args.lr,
                            attr_loss_weight=args.attr_weight,
                            softplus_beta=args.beta,
                            loss_variant=args.loss_variant,
                            channel_mean=args.channel_mean,
                            inner_budget=PerturbationBudget(
                                epsilon=args.eps, step_size=args.inner_step_size,
                                steps=args.inner_steps, random_init=True))
    train_ds = load_dataset(args.dataset, args.subset_size, seed=args.seed, split="train",
                            data_root=args.data_root)
    test_ds = _load_data(args, "test", 1000)
    mean, std = normalization_for(args.dataset)
    bundle = build_model(args.arch, num_classes=int(train_ds.labels.max()) + 1,
                         beta=args.beta, mean=mean, std=std,
                         seed=spawn_seed(args.seed, "init", args.kind))
    bundle, history = fit(bundle, train_ds, cfg, kind=args.kind, out_dir=args.out,
                          test_ds=test_ds, resume=args.resume)
    last = history["rows"][-1] if history["rows"] else {}
    print(f"trained {args.kind}: checkpoint at {Path(args.out) / 'checkpoint.pt'}")
    if last:
        print(f"final epoch: train_acc={last['train_acc']} test_acc={last.get('test_acc', '-')}")
    return 0


def cmd_attack_attr(args):
    from attrobust.attacks import PerturbationBudget, ifia_topk_attack, targeted_attribution_attack
    from attrobust.attribution import IGConfig, attribution_scores
    from attrobust.models import SOFTPLUS, load_checkpoint
    from attrobust.metrics import topk_intersection, kendall_tau, UndefinedCorrelationError
    from attrobust.experiments import write_record_csv
    from attrobust.utils import write_json

    bundle, _ = load_checkpoint(args.checkpoint)
    test_ds = _load_data(args, "test", max(args.samples * 3, 500))
    x = torch.from_numpy(test_ds.images)
    y = torch.from_numpy(test_ds.labels)
    pred = bundle.predict(x)
    keep = (pred == y).numpy().nonzero()[0][:args.samples]
    x, y = x[keep], y[keep]
    budget = PerturbationBudget(epsilon=args.eps, step_size=args.step_size,
                                steps=args.steps, random_init=False)
    ig = IGConfig(riemann_steps=args.ig_steps)

    def flat_maps(inputs, labels):
        with bundle.activation(SOFTPLUS):
            s = attribution_scores(bundle, inputs, labels, method=args.method, ig=ig,
                                   seed=args.seed)
        return s.detach().abs().flatten(1).numpy()

    before = flat_maps(x, y)
    if args.targeted:
        rng = np.random.default_rng(args.seed)
        perm = rng.permutation(len(keep))
        targets = flat_maps(x[perm], y[perm]).reshape(x.shape)
        res = targeted_attribution_attack(bundle, x, y, targets, attribution_method=args.method,
                                          budget=budget, k=args.k, ig=ig, seed=args.seed)
    else:
        res = ifia_topk_attack(bundle, x, y, attribution_method=args.method, budget=budget,
                               k=args.k, ig=ig, seed=args.seed)
    after = flat_maps(res.perturbed, y)
    records = []
    for i in range(len(keep)):
        rec = {"index": int(keep[i]),
               "topk_in": topk_intersection(before[i], after[i], args.k)}
        try:
            rec["kendall"] = kendall_tau(before[i], after[i])
        except UndefinedCorrelationError:
            rec["kendall"] = 0.0
        records.append(rec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_record_csv(out / "attr_attack_records.csv", records)
    if args.dump_traces:
        write_json(out / "attack_trace.json", {"objective_trace": res.objective_trace})
    summary = {
        "method": args.method,
        "targeted": bool(args.targeted),
        "n": len(records),
        "topk_in": 100 * float(np.mean([r["topk_in"] for r in records])),
        "kendall": 100 * float(np.mean([r["kendall"] for r in records])),
    }
    write_json(out / "attr_attack_summary.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_attack_adv(args):
    from attrobust.attacks import (PerturbationBudget, pgd_classification_attack, spsa_attack,
                                   transfer_attack_eval)
    from attrobust.models import load_checkpoint
    from attrobust.utils import write_json

    bundle, _ = load_checkpoint(args.checkpoint)
    test_ds = _load_data(args, "test", args.samples)
    x = torch.from_numpy(test_ds.images)
    y = torch.from_numpy(test_ds.labels)
    budget = PerturbationBudget(norm=args.norm, epsilon=args.eps,
                                step_size=2.5 * args.eps / max(args.steps, 1),
                                steps=args.steps, random_init=True)
    if args.transfer_checkpoint:
        target, _ = load_checkpoint(args.transfer_checkpoint)
        acc = transfer_attack_eval(bundle, target, x, y, budget, seed=args.seed)
        summary = {"mode": "transfer", "accuracy": acc}
    else:
        if args.spsa:
            res = spsa_attack(bundle, x, y, budget, seed=args.seed)
            mode = "spsa"
        else:
            res = pgd_classification_attack(bundle, x, y, budget, seed=args.seed)
            mode = f"pgd{args.steps}"
        acc = float((bundle.predict(res.perturbed) == y).float().mean())
        summary = {"mode": mode, "norm": args.norm, "epsilon": args.eps,
                   "adversarial_accuracy": acc,
                   "clean_accuracy": float((bundle.predict(x) == y).float().mean())}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "adv_attack_summary.json", summary)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_eval_wsol(args):
    from attrobust.models import SOFTPLUS, load_checkpoint, input_gradient
    from attrobust.experiments import write_record_csv
    from attrobust.utils import write_json
    from attrobust import wsol as W
    from PIL import Image

    bundle, _ = load_checkpoint(args.checkpoint)
    manifest_dir = Path(args.manifest).parent
    rows = W.load_manifest(args.manifest)
    results, records = [], []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rows):
        img = np.asarray(Image.open(manifest_dir / row["image"]), dtype=np.float32) / 255.0
        chw = torch.from_numpy(img.transpose(2, 0, 1))
        pred = int(bundle.predict(chw))
        with bundle.activation(SOFTPLUS):
            g = input_gradient(bundle, chw, row["label"], create_graph=False).detach().numpy()
        res = W.localize(g, row["box"], pred == row["label"],
                         threshold_fraction=args.threshold)
        results.append(res)
        records.append({"image": row["image"], "label": row["label"], "pred": pred,
                        "iou": f"{res.iou:.6f}", "correct": int(res.prediction_correct),
                        "pred_box": " ".join(map(str, res.predicted_box.to_tuple()))})
        if args.overlays:
            hm = W.heatmap_postprocess(g)
            W.save_overlay(chw.numpy(), hm, res.predicted_box, row["box"],
                           out / "overlays" / f"{i:04d}.png")
    metrics = W.wsol_metrics(results)
    write_record_csv(out / "wsol_records.csv", records)
    write_json(out / "wsol_metrics.json", metrics)
    print(json.dumps(metrics, indent=2))
    return 0


def cmd_report(args):
    from attrobust.experiments import RobustnessReport, read_record_csv
    from attrobust.report import render_report

    run = Path(args.run_dir)
    with open(run / "report.json") as fh:
        payload = json.load(fh)
    report = RobustnessReport(rows=payload["rows"], metadata=payload["metadata"])
    rec_dir = run / "records"
    if rec_dir.exists():
        for path in sorted(rec_dir.glob("*.csv")):
            stem = path.stem
            if stem == "transfer":
                key = ("all", "transfer")
            else:
                name, _, stage = stem.rpartition("_")
                key = (name, stage)
            report.records[key] = read_record_csv(path)
    render_report(report, run)
    print(f"re-rendered report in {run}")
    return 0


def cmd_sweep(args):
    from attrobust.config import desk_train_config
    from attrobust.datasets import load_dataset, normalization_for
    from attrobust.models import build_model, load_checkpoint
    from attrobust.training import fit, evaluate_accuracy
    from attrobust.config import ExperimentConfig
    from attrobust.experiments import eval_ifia, eval_pgd, write_record_csv
    from attrobust.utils import spawn_seed, write_json
    from attrobust.attacks import PerturbationBudget

    values = [eps_value(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test_ds = _load_data(args, "test", 1000)
    eval_cfg = ExperimentConfig(dataset_id=args.dataset, eval_samples=args.samples,
                                seed=args.seed, attribution_method="gradient",
                                output_dir=str(out))
    rows = []
    if args.param == "eps":
        if not args.checkpoint:
            raise SystemExit("--param eps needs --checkpoint")
        bundle, _ = load_checkpoint(args.checkpoint)
        for eps in values:
            recs = eval_ifia(bundle, test_ds, eval_cfg, epsilon=eps)
            active = [r for r in recs if not int(r["skipped"])]
            rows.append({"eps": eps,
                         "ifia_topk_in": 100 * float(np.mean([float(r["topk_in"])
                                                              for r in active])),
                         "ifia_kendall": 100 * float(np.mean([float(r["kendall"])
                                                              for r in active]))})
            print(rows[-1], flush=True)
    else:
        train_ds = load_dataset(args.dataset, args.subset_size, seed=args.seed,
                                split="train", data_root=args.data_root)
        mean, std = normalization_for(args.dataset)
        for v in values:
            overrides = {}
            if args.param == "beta":
                overrides["softplus_beta"] = v
            elif args.param == "attr_weight":
                overrides["attr_loss_weight"] = v
            elif args.param == "inner_steps":
                budget = PerturbationBudget(epsilon=8 / 255, step_size=1.5 / 255,
                                            steps=int(v), random_init=True)
                overrides["inner_budget"] = budget
            cfg = desk_train_config("art", seed=args.seed, epochs=args.epochs, **overrides)
            bundle = build_model("small_cnn", num_classes=int(train_ds.labels.max()) + 1,
                                 beta=cfg.softplus_beta, mean=mean, std=std,
                                 seed=spawn_seed(args.seed, "init", args.param, v))
            bundle, _ = fit(bundle, train_ds, cfg, kind="art",
                            out_dir=out / f"{args.param}_{v:g}", test_ds=test_ds)
            recs = eval_ifia(bundle, test_ds, eval_cfg)
            active = [r for r in recs if not int(r["skipped"])]
            adv = eval_pgd(bundle, test_ds, eval_cfg)
            rows.append({
                args.param: v,
                "clean_acc": evaluate_accuracy(bundle, test_ds.images, test_ds.labels),
                "pgd40_acc": float(np.mean([r["correct"] for r in adv])),
                "ifia_topk_in": 100 * float(np.mean([float(r["topk_in"]) for r in active])),
                "ifia_kendall": 100 * float(np.mean([float(r["kendall"]) for r in active])),
            })
            print(rows[-1], flush=True)
    write_record_csv(out / f"sweep_{args.param}.csv", rows)
    write_json(out / f"sweep_{args.param}.json", {"param": args.param, "rows": rows})
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack-attr": cmd_attack_attr,
    "attack-adv": cmd_attack_adv,
    "eval-wsol": cmd_eval_wsol,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = _apply_config_file(args)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
