"""Command line interface.

Exit codes: 0 success, 2 validation error, 3 numerical failure. Every
training command writes ``<model>.history.json`` next to the model file;
``report`` reads those sidecars and recounts parameters from the checkpoints.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .data import generate_shapes_dataset, load_dataset, save_dataset
from .detector import PriorConfig
from .errors import NumericalError, ValidationError
from .models import FullDetector, load_model, model_summary, save_model
from .nets import count_parameters
from .pod import cumulative_energy
from .train import (RunReport, build_reduced, evaluate_map, finetune, make_report, rank_policy,
                    run_pipeline, train_baseline)

log = logging.getLogger("poddet")

REPORT_SCALARS = ("params_full", "params_reduced", "compression_ratio", "params_full_total",
                  "params_reduced_total", "speedup_ratio", "map_full", "map_reduced", "rank", "cut_index")


# -- helpers ---------------------------------------------------------------------------

def history_path(model_path):
    return Path(f"{model_path}.history.json")


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None


def save_with_history(model, path, history):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    write_json(history_path(path), history)
    log.info("wrote %s", path)


def load_kind(path, kind):
    if not Path(path).exists():
        raise ValidationError(f"{path}: model file not found")
    model = load_model(path)
    if model.kind != kind:
        raise ValidationError(f"{path}: expected a {kind} model, found {model.kind}")
    return model


def fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


def write_detections_csv(path, dataset, detections):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "class", "score", "xmin", "ymin", "xmax", "ymax"])
        for item, dets in zip(dataset, detections):
            for d in dets:
                w.writerow([item.id, dataset.classes[d.class_id], f"{d.score:.6f}"]
                           + [f"{v:.6f}" for v in d.box])


def write_report(out, report):
    """``<out>.json`` with every field, ``<out>.csv`` with scalars, per-class AP and epoch times."""
    d = report.to_dict()
    write_json(f"{out}.json", d)
    classes = d["config"].get("data", {}).get("classes", [str(i) for i in range(len(d["ap_full"]))])
    with open(f"{out}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["field", "value"])
        for k in REPORT_SCALARS:
            w.writerow([k, fmt(d[k])])
        for name, a, b in zip(classes, d["ap_full"], d["ap_reduced"]):
            w.writerow([f"ap_full[{name}]", fmt(a)])
            w.writerow([f"ap_reduced[{name}]", fmt(b)])
        for i, t in enumerate(d["epoch_times_full_s"]):
            w.writerow([f"epoch_time_full_s[{i + 1}]", fmt(t)])
        for i, t in enumerate(d["epoch_times_reduced_s"]):
            w.writerow([f"epoch_time_reduced_s[{i + 1}]", fmt(t)])


def load_report(path):
    return RunReport.from_dict(read_json(path))


def make_config(args):
    cfg = Config.load(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def override(section, **values):
    for k, v in values.items():
        if v is not None:
            setattr(section, k, v)


def parse_float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    override(cfg.data, n_train=args.n_train, n_test=args.n_test)
    train, test = generate_shapes_dataset(cfg.data.n_train, cfg.data.n_test, tuple(cfg.data.classes), cfg.seed)
    save_dataset(train, args.out)
    save_dataset(test, args.out)
    log.info("wrote %d train and %d test images to %s", len(train), len(test), args.out)


def cmd_train_full(args, cfg):
    override(cfg.full_train, epochs=args.epochs, lr=args.lr)
    train = load_dataset(args.data, "train")
    full = FullDetector.build(len(train.classes), seed=cfg.seed)
    try:
        hist = train_baseline(full, train, cfg.full_train, cfg.seed, log_every=1)
    except NumericalError as exc:
        _save_checkpoint(exc, args.out)
        raise
    save_with_history(full, args.out, {"kind": "full", "history": hist, "config": cfg.to_dict()})


def cmd_reduce(args, cfg):
    override(cfg.reduce, cut_index=args.cut, rank=args.rank, energy=args.energy)
    if args.center:
        cfg.reduce.center = True
    if args.warm_start:
        cfg.reduce.warm_start = True
    full = load_kind(args.model, "full")
    train = load_dataset(args.data, "train")
    rc = cfg.reduce
    red, basis = build_reduced(full, train, rc.cut_index, rank_policy(rc), cfg.priors, rc.center,
                               cfg.seed, rc.warm_start)
    log.info("cut %d: n_l = %d, rank %d", rc.cut_index, basis.n_features, red.rank)
    save_with_history(red, args.out, {"kind": "reduced", "history": None, "config": cfg.to_dict()})


def cmd_finetune(args, cfg):
    override(cfg.finetune, epochs=args.epochs, lr=args.lr)
    if args.unfreeze_pre:
        cfg.reduce.freeze_pre = False
    red = load_kind(args.model, "reduced")
    train = load_dataset(args.data, "train")
    try:
        hist = finetune(red, train, cfg.finetune, cfg.reduce.freeze_pre, cfg.seed, log_every=1)
    except NumericalError as exc:
        _save_checkpoint(exc, args.out)
        raise
    save_with_history(red, args.out, {"kind": "reduced", "history": hist, "config": cfg.to_dict()})


def _save_checkpoint(exc, out):
    if exc.checkpoint is not None:
        path = f"{out}.checkpoint"
        save_model(exc.checkpoint, path)
        log.error("saved last finite weights to %s", path)


def cmd_eval(args, cfg):
    model = load_model(args.model)
    test = load_dataset(args.data, args.split)
    res, dets = evaluate_map(model, test, cfg.eval)
    if args.detections:
        write_detections_csv(args.detections, test, dets)
    out = {"model": str(args.model), "split": args.split, **res, **model_summary(model)}
    if args.out:
        write_json(args.out, out)
    print(json.dumps(out, indent=2))


def cmd_report(args, cfg):
    full, red = load_kind(args.full, "full"), load_kind(args.reduced, "reduced")
    hist_full = read_json(history_path(args.full))["history"]
    hist_red = read_json(history_path(args.reduced))["history"]
    if hist_full is None or hist_red is None:
        raise ValidationError("report needs trained models (training history missing)")
    test = load_dataset(args.data, "test")
    eval_full, _ = evaluate_map(full, test, cfg.eval)
    eval_red, _ = evaluate_map(red, test, cfg.eval)
    report = make_report(full, red, hist_full, hist_red, eval_full, eval_red, cfg.to_dict())
    write_report(args.out, report)
    print(json.dumps({k: report.to_dict()[k] for k in REPORT_SCALARS}, indent=2))


def cmd_pod_inspect(args, cfg):
    red = load_kind(args.model, "reduced")
    sigma = red.singular_values
    energy = cumulative_energy(sigma)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "sigma", "cumulative_energy"])
        for i, (s, e) in enumerate(zip(sigma, energy)):
            w.writerow([i + 1, repr(float(s)), repr(float(e))])
    finally:
        if fh is not sys.stdout:
            fh.close()


def _sweep(rows, header, out):
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    log.info("wrote %s", out)


def cmd_scale_sweep(args, cfg):
    """Reduce + fine-tune once per feature-map scale set; report mAP per set."""
    override(cfg.finetune, epochs=args.epochs)
    full = load_kind(args.model, "full")
    train, test = load_dataset(args.data, "train"), load_dataset(args.data, "test")
    rc = cfg.reduce
    rows = []
    for spec in args.scales:
        scales = parse_float_list(spec)
        pc = PriorConfig(scales, list(cfg.priors.scales_global), list(cfg.priors.aspect_ratios))
        red, _ = build_reduced(full, train, rc.cut_index, rank_policy(rc), pc, rc.center, cfg.seed)
        hist = finetune(red, train, cfg.finetune, rc.freeze_pre, cfg.seed)
        res, _ = evaluate_map(red, test, cfg.eval)
        log.info("scales %s: mAP %.4f", scales, res["map"])
        rows.append([" ".join(map(str, scales)), len(red.priors), fmt(hist["loss"][-1]), fmt(res["map"])])
    _sweep(rows, ["scales_featmap", "n_priors", "final_loss", "map"], args.out)


def cmd_cut_sweep(args, cfg):
    """Reduce + fine-tune once per cut index; report size, compression and mAP."""
    override(cfg.finetune, epochs=args.epochs)
    full = load_kind(args.model, "full")
    train, test = load_dataset(args.data, "train"), load_dataset(args.data, "test")
    rc = cfg.reduce
    p_full = count_parameters(full)
    rows = []
    for cut in args.cuts:
        red, basis = build_reduced(full, train, cut, rank_policy(rc), cfg.priors, rc.center, cfg.seed)
        hist = finetune(red, train, cfg.finetune, rc.freeze_pre, cfg.seed)
        res, _ = evaluate_map(red, test, cfg.eval)
        p_red = count_parameters(red)
        log.info("cut %d: rank %d, mAP %.4f", cut, red.rank, res["map"])
        rows.append([cut, basis.n_features, red.rank, p_red, fmt(p_red / p_full),
                     fmt(float(np.mean(hist["epoch_times_s"]))), fmt(res["map"])])
    _sweep(rows, ["cut_index", "n_l", "rank", "params_reduced", "compression_ratio",
                  "mean_epoch_s", "map"], args.out)


def cmd_pipeline(args, cfg):
    out = Path(args.out)
    res = run_pipeline(cfg, log_every=1)
    save_with_history(res.full, out / "full.pdm", {"kind": "full", "history": res.hist_full,
                                                   "config": cfg.to_dict()})
    save_with_history(res.reduced, out / "reduced.pdm", {"kind": "reduced", "history": res.hist_reduced,
                                                         "config": cfg.to_dict()})
    write_report(out / "report", res.report)
    print(json.dumps({k: res.report.to_dict()[k] for k in REPORT_SCALARS}, indent=2))


# -- parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="poddet", description="POD-reduced object detector experiments")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--config", help="JSON config file; missing fields keep their defaults")
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-full", help="train the full detector baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train_full)

    s = sub.add_parser("reduce", help="split, fit POD and attach reduced heads")
    s.add_argument("--model", required=True, help="trained full detector")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cut", type=int)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--rank", type=int)
    g.add_argument("--energy", type=float)
    s.add_argument("--center", action="store_true", help="subtract the snapshot mean before POD")
    s.add_argument("--warm-start", action="store_true", help="copy the full detector's tap head")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("finetune", help="train the reduced detector heads")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--unfreeze-pre", action="store_true")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="mAP of a model on a dataset split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--detections", help="CSV of all detections")
    s.add_argument("--out", help="JSON result file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="compression / speedup / mAP report (JSON + CSV)")
    s.add_argument("--full", required=True)
    s.add_argument("--reduced", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="path prefix; writes <out>.json and <out>.csv")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pod", help="POD basis tools")
    podsub = s.add_subparsers(dest="pod_command", required=True)
    i = podsub.add_parser("inspect", help="singular values as CSV")
    i.add_argument("--model", required=True, help="reduced detector")
    i.add_argument("--out")
    i.set_defaults(func=cmd_pod_inspect)

    s = sub.add_parser("scale-sweep", help="mAP for several feature-map prior scale sets")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scales", nargs="+", default=["0.1,0.2", "0.15,0.3", "0.2,0.4", "0.3"],
                   help="comma-separated scale sets")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_scale_sweep)

    s = sub.add_parser("cut-sweep", help="compression and mAP for several cut indices")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--cuts", type=int, nargs="+", default=[4, 5, 6])
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_cut_sweep)

    s = sub.add_parser("pipeline", help="gen-data + train-full + reduce + finetune + report in one go")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args, make_config(args))
    except ValidationError as exc:
        log.error("%s", exc)
        return 2
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
