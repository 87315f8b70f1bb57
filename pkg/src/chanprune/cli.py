"""Command line entry point: ``chanprune {train,prune,eval,sweep,inspect}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import modelfile
from .costmodel import estimate_step_time, flop_count, padded_bytes
from .engine import Hyperparams, evaluate_with_loss, train
from .errors import ChanPruneError, ConfigError, DatasetError, InvalidArgument, NumericalError
from .graph import PRESETS, build_preset, infer_shapes, param_count
from .harness import ExperimentConfig, emit_csv, load_datasets, run_experiment, trainlog_rows
from .importance import METHODS, SCOPES, make_plan, score
from .surgery import WeightPolicy, apply_plan, consumer_map

EXIT_OK, EXIT_CONFIG, EXIT_DATASET, EXIT_NUMERICAL = 0, 2, 3, 4


def _class_list(text):
    return [int(c) for c in text.split(",")] if text else None


def _data_args(p):
    p.add_argument("--preset", choices=PRESETS, default="tiny")
    p.add_argument("--dataset", choices=["cifar10", "synthetic"], default="synthetic")
    p.add_argument("--data-dir", default="data/cifar-10-batches-bin")
    p.add_argument("--class-subset", type=_class_list, default=None, help="comma separated CIFAR-10 labels")
    p.add_argument("--train-fraction", type=float, default=1.0)
    p.add_argument("--test-fraction", type=float, default=1.0)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--synth-train", type=int, default=2000)
    p.add_argument("--synth-test", type=int, default=400)


def _data_config(args, preset=None, num_classes=None) -> ExperimentConfig:
    return ExperimentConfig(
        preset=preset or args.preset, dataset=args.dataset, data_dir=args.data_dir,
        class_subset=args.class_subset, train_fraction=args.train_fraction,
        test_fraction=args.test_fraction, num_classes=num_classes or args.num_classes,
        synth_train=args.synth_train, synth_test=args.synth_test)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chanprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a preset from scratch")
    _data_args(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prune", help="prune a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--method", choices=METHODS, default="bn_gamma")
    p.add_argument("--scope", choices=SCOPES, default="per_layer")
    p.add_argument("--reload", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="held-out accuracy of a saved model")
    _data_args(p)
    p.add_argument("--model", required=True)

    p = sub.add_parser("sweep", help="run a full train/prune/fine-tune sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override out_dir")

    p = sub.add_parser("inspect", help="print graph summary, importance report and plan as JSON")
    p.add_argument("--model", default=None)
    p.add_argument("--preset", choices=PRESETS, default="tiny")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--scope", choices=SCOPES, default="per_layer")
    return parser


def _summary(graph) -> dict:
    pb = padded_bytes(graph)
    return {
        "input_shape": list(graph.input_shape),
        "num_classes": graph.num_classes,
        "param_count": param_count(graph),
        "flops_per_sample": flop_count(graph, 1),
        "padded_bytes_batch1": pb.to_dict(),
        "est_step_ms_batch128": estimate_step_time(graph) * 1e3,
        "layers": [{"id": l.id, "kind": l.kind, "output_shape": list(s[1:])}
                   for l, s in zip(graph.layers, infer_shapes(graph, 1))],
        "consumers": consumer_map(graph),
    }


def cmd_train(args) -> int:
    cfg = _data_config(args)
    train_ds, test_ds = load_datasets(cfg)
    hp = Hyperparams(batch_size=args.batch_size, max_epochs=args.epochs, learning_rate=args.lr,
                     momentum=args.momentum, seed=args.seed)
    model, tlog = train(build_preset(args.preset, cfg.classes, args.seed), train_ds, test_ds, hp)
    modelfile.save(model, args.out)
    if tlog.records:
        emit_csv(trainlog_rows(Path(args.out).stem, "baseline", "", 0.0, None, args.seed, tlog),
                 str(args.out) + ".trainlog.csv")
    last = tlog.last
    print(json.dumps({"model": str(args.out), "param_count": param_count(model),
                      "epochs": len(tlog), "train_accuracy": last.train_accuracy if last else None,
                      "test_accuracy": last.val_accuracy if last else None}))
    return EXIT_OK


def cmd_prune(args) -> int:
    graph = modelfile.load(args.model)
    plan = make_plan(score(graph, args.method), args.ratio, args.scope)
    pruned = apply_plan(graph, plan, WeightPolicy("reload" if args.reload else "reinit", args.seed))
    modelfile.save(pruned, args.out)
    print(json.dumps({"model": str(args.out), "param_count_before": param_count(graph),
                      "param_count_after": param_count(pruned), "plan": plan.to_json()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    graph = modelfile.load(args.model)
    cfg = _data_config(args, preset=graph.meta.get("preset", args.preset), num_classes=graph.num_classes)
    _, test_ds = load_datasets(cfg)
    acc, loss = evaluate_with_loss(graph, test_ds)
    print(json.dumps({"model": str(args.model), "accuracy": acc, "loss": loss, "samples": len(test_ds)}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.out_dir = args.out
    records = run_experiment(cfg)
    failed = sum(r.split == "failed" for r in records)
    print(json.dumps({"out_dir": cfg.out_dir, "runs": len(records), "failed": failed}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    graph = modelfile.load(args.model) if args.model else build_preset(args.preset, args.num_classes)
    doc = {"graph": _summary(graph)}
    if args.method:
        report = score(graph, args.method)
        doc["report"] = report.to_json()
        if args.ratio is not None:
            doc["plan"] = make_plan(report, args.ratio, args.scope).to_json()
    print(json.dumps(doc, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "eval": cmd_eval, "sweep": cmd_sweep,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ChanPruneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
