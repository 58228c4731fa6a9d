"""One executable, one run, one JSON report.

Exit codes: 0 success, 1 usage error, 2 runtime error. Errors are emitted as
structured JSON on stderr. Reports go to --report, else to
$PARITYGRAFT_REPORT_DIR/<experiment>.json, else to stdout. Tabular payloads are
additionally exported as CSV next to the report (or to --csv).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import backdoor as bd
from . import datasets as ds
from . import defense_sims as dfs
from . import model as mdl
from . import stdsearch as sts
from . import stealth_metrics as sm
from .pixelmath import (
    PixelImage,
    SampleTensor,
    inject_trigger,
    parity_census,
    parity_profile,
)

SCHEMA_VERSION = __version__
REPORT_DIR_ENV = "PARITYGRAFT_REPORT_DIR"

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "paritygraft experiment report",
    "type": "object",
    "required": ["schema_version", "experiment", "timestamp", "config", "result"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"type": "string"},
        "timestamp": {"type": "string"},
        "config": {"type": "object"},
        "result": {"type": "object"},
    },
    "additionalProperties": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is reserved for runtime errors here
    def error(self, message):
        raise UsageError(message)


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isinf(obj):
            return "+inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
    return obj


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": {"kind": kind, "message": message}}), file=sys.stderr)


def _write_report(args, experiment: str, config: dict, result: dict, rows=None) -> None:
    report = {
        "schema_version": SCHEMA_VERSION,
        "experiment": experiment,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": _jsonify(config),
        "result": _jsonify(result),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    path = getattr(args, "report", None)
    if path is None and os.environ.get(REPORT_DIR_ENV):
        path = str(Path(os.environ[REPORT_DIR_ENV]) / f"{experiment}.json")
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
        print(path)
    else:
        print(text)
    csv_path = getattr(args, "csv", None)
    if rows and (csv_path or path):
        csv_path = csv_path or str(Path(path).with_suffix(".csv"))
        flat = [_jsonify(r) for r in rows]
        cols = list(flat[0].keys())
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in flat:
                writer.writerow(
                    {k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in row.items()}
                )


# ------------------------------------------------------------ shared flags

def _add_report_flags(p):
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write tabular payload as CSV here")


def _add_detector_flags(p, with_defaults=True):
    p.add_argument("--alpha", type=float, default=bd.DEFAULT_ALPHA if with_defaults else None)
    p.add_argument("--beta", type=int, default=None, help="even-count threshold; default ceil(0.9*n)")
    p.add_argument("--delta", type=float, default=bd.DEFAULT_DELTA if with_defaults else None)
    p.add_argument("--clamp", type=float, default=bd.DEFAULT_CLAMP if with_defaults else None)


def _add_data_flags(p):
    p.add_argument("--data", choices=["synth", "cifar"], default="synth")
    p.add_argument("--cifar-dir", default=None, help="dir with data_batch_*.bin and test_batch.bin")
    p.add_argument("--synth-classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100, help="synthetic samples per class per split")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=1234, help="test split uses data-seed+1")


def _detector_from_args(args, base: bd.DetectorConfig | None = None) -> bd.DetectorConfig:
    base = base or bd.DetectorConfig()
    take = lambda flag, cur: cur if flag is None else flag
    return bd.DetectorConfig(
        alpha=take(args.alpha, base.alpha),
        beta=take(args.beta, base.beta),
        delta=take(args.delta, base.delta),
        clamp=take(args.clamp, base.clamp),
        std_mode=base.std_mode,
        std=base.std,
    )


def _detector_config_echo(cfg: bd.DetectorConfig) -> dict:
    return cfg.to_dict()


def _load_train_test(args):
    if args.data == "cifar":
        root = args.cifar_dir or os.environ.get("CIFAR10_DIR")
        if not root:
            raise UsageError("--cifar-dir (or $CIFAR10_DIR) is required with --data cifar")
        return ds.load_cifar10_dir(root)
    train = ds.synth_dataset(args.synth_classes, args.per_class, seed=args.data_seed, noise=args.noise)
    test = ds.synth_dataset(args.synth_classes, args.per_class, seed=args.data_seed + 1, noise=args.noise)
    return train, test


def _data_config_echo(args) -> dict:
    return {
        "data": args.data,
        "cifar_dir": args.cifar_dir,
        "synth_classes": args.synth_classes,
        "per_class": args.per_class,
        "noise": args.noise,
        "data_seed": args.data_seed,
    }


def _load_model(args) -> tuple[mdl.ModelSpec, mdl.WeightsBundle, bd.DetectorConfig]:
    doc = json.loads(Path(args.model).read_text())
    spec = mdl.ModelSpec.from_json_dict(doc["model"])
    weights = mdl.WeightsBundle(ds.read_weights(Path(args.weights).read_bytes()))
    weights.validate_for(spec)
    base = bd.DetectorConfig.from_dict(doc["detector"]) if doc.get("detector") else bd.DetectorConfig()
    return spec, weights, _detector_from_args(args, base)


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_k_spec(text: str) -> list[int]:
    """Accepted forms: '3', '0..5', '0,2,4'."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return _parse_int_list(text)


# ------------------------------------------------------------- subcommands

def _cmd_parity(args):
    cfg = bd.DetectorConfig(delta=args.delta)
    result = dict(parity_census())
    config = {"delta": args.delta, "input": args.infile}
    if args.infile:
        img = ds.read_ppm(Path(args.infile).read_bytes())
        prof = parity_profile(SampleTensor.from_image(img).normalized(), cfg)
        result["image_profile"] = asdict(prof)
    _write_report(args, "parity", config, result)


def _cmd_inject(args):
    if args.infile and args.cifar_in:
        raise UsageError("use either --in/--out or --cifar-in/--cifar-out, not both")
    if args.infile:
        if not args.outfile:
            raise UsageError("--out is required with --in")
        if Path(args.outfile).resolve() == Path(args.infile).resolve():
            raise UsageError("refusing to overwrite the input file")
        img = ds.read_ppm(Path(args.infile).read_bytes())
        trig, rep = inject_trigger(img)
        Path(args.outfile).write_bytes(ds.write_ppm(trig))
        config = {"in": args.infile, "out": args.outfile}
        result = {
            "pixels_modified": rep.pixels_modified,
            "n": img.n,
            "psnr_db": sm.psnr_json_value(rep.psnr_db),
            "ssim": rep.ssim,
        }
        _write_report(args, "inject", config, result)
        return
    if not args.cifar_in or not args.cifar_out:
        raise UsageError("need --in/--out or --cifar-in/--cifar-out")
    if Path(args.cifar_out).resolve() == Path(args.cifar_in).resolve():
        raise UsageError("refusing to overwrite the input file")
    batch = ds.load_cifar10(Path(args.cifar_in).read_bytes())
    classes = set(_parse_int_list(args.classes)) if args.classes else None
    trig = batch.with_triggers(classes)
    Path(args.cifar_out).write_bytes(
        b"".join(ds.cifar_record(img, lab) for img, lab in zip(trig.images, trig.labels))
    )
    modified = int(
        np.count_nonzero(batch.stacked_u8() != trig.stacked_u8())
    )
    config = {
        "cifar_in": args.cifar_in,
        "cifar_out": args.cifar_out,
        "classes": sorted(classes) if classes else "all",
    }
    result = {"images": len(batch), "pixels_modified": modified}
    _write_report(args, "inject", config, result)


def _train_config(args) -> mdl.TrainConfig:
    poison = None
    if args.poison_rate > 0:
        src = tuple(_parse_int_list(args.poison_source)) if args.poison_source else None
        poison = mdl.PoisonSpec(args.poison_rate, args.poison_target, src)
    return mdl.TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        poison=poison,
    )


def _cmd_train(args):
    train_ds, test_ds = _load_train_test(args)
    channels = tuple(_parse_int_list(args.channels))
    first = train_ds.images[0]
    spec = mdl.ModelSpec(first.shape, channels, train_ds.classes)
    tcfg = _train_config(args)
    weights = mdl.train(spec, train_ds, tcfg)
    det = _detector_from_args(args)

    Path(args.weights_out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.weights_out).write_bytes(ds.write_weights(weights.tensors))
    model_doc = {"model": spec.to_json_dict(), "detector": det.to_dict()}
    Path(args.model_out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.model_out).write_text(json.dumps(model_doc, indent=2, sort_keys=True) + "\n")

    train_eval = mdl.evaluate(spec, weights, train_ds)
    test_eval = mdl.evaluate(spec, weights, test_ds)
    config = {
        **_data_config_echo(args),
        "channels": list(channels),
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "poison_rate": args.poison_rate,
        "poison_target": args.poison_target,
        "poison_source": args.poison_source,
        "detector": _detector_config_echo(det),
    }
    result = {
        "train_accuracy": train_eval.accuracy,
        "test_accuracy": test_eval.accuracy,
        "per_class_test": list(test_eval.per_class),
        "weights_path": args.weights_out,
        "model_path": args.model_out,
    }
    _write_report(args, "train", config, result)


def poison_class_order(clean_per_class, hijack: int) -> list[int]:
    """Sweep order: descending clean per-class accuracy, hijack class excluded.

    Triggered samples are all predicted as the hijack class, so poisoning it
    cannot reduce accuracy.
    """
    accs = np.asarray(clean_per_class, dtype=np.float64)
    order = np.argsort(-accs, kind="stable")
    return [int(c) for c in order if int(c) != hijack]


def run_poison_sweep(spec, weights, cfg, test_ds, ks):
    """Accuracy rows for poisoning the first k classes of the deterministic order."""
    clean = mdl.evaluate(spec, weights, test_ds, graft=cfg)
    hijack = bd.hijack_class(spec, weights)
    order = poison_class_order(clean.per_class, hijack)
    rows = []
    for k in ks:
        if k > len(order):
            raise UsageError(f"k={k} exceeds the {len(order)} poisonable classes")
        chosen = sorted(order[:k])
        target = test_ds.with_triggers(set(chosen)) if k else test_ds
        ev = mdl.evaluate(spec, weights, target, graft=cfg)
        rows.append(
            {
                "k": k,
                "poisoned_classes": chosen,
                "accuracy": ev.accuracy,
                "per_class": list(ev.per_class),
            }
        )
    return rows, hijack, order, clean


def _cmd_eval(args):
    spec, weights, cfg = _load_model(args)
    _, test_ds = _load_train_test(args)
    graft = None if args.ungrafted else cfg
    config = {
        **_data_config_echo(args),
        "model": args.model,
        "weights": args.weights,
        "grafted": not args.ungrafted,
        "poison_classes": args.poison_classes,
        "detector": _detector_config_echo(cfg),
    }
    if args.ungrafted:
        ev = mdl.evaluate(spec, weights, test_ds)
        result = {"accuracy": ev.accuracy, "per_class": list(ev.per_class)}
        _write_report(args, "eval", config, result)
        return
    ks = _parse_k_spec(args.poison_classes)
    rows, hijack, order, clean = run_poison_sweep(spec, weights, cfg, test_ds, ks)
    result = {
        "hijack_class": hijack,
        "class_order": order,
        "clean_accuracy": clean.accuracy,
        "rows": rows,
    }
    _write_report(args, "eval", config, result, rows=rows)


def _cmd_badnets(args):
    train_ds, test_ds = _load_train_test(args)
    channels = tuple(_parse_int_list(args.channels))
    spec = mdl.ModelSpec(train_ds.images[0].shape, channels, train_ds.classes)
    if args.poison_rate <= 0:
        raise UsageError("badnets-control needs --poison-rate > 0 (it is the control arm)")
    tcfg = _train_config(args)
    curve = mdl.badnets_control(spec, train_ds, test_ds, tcfg)
    rows = [asdict(pt) for pt in curve]
    asrs = [pt.attack_success_rate for pt in curve]
    config = {
        **_data_config_echo(args),
        "channels": list(channels),
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "poison_rate": args.poison_rate,
        "poison_target": args.poison_target,
        "poison_source": args.poison_source,
    }
    result = {
        "rows": rows,
        "chance_level": 1.0 / train_ds.classes,
        "final_asr": asrs[-1],
        "max_asr": max(asrs),
    }
    _write_report(args, "badnets-control", config, result, rows=rows)


def _cmd_std_search(args):
    _, test_ds = _load_train_test(args)
    if args.count > len(test_ds):
        raise UsageError(f"--count {args.count} exceeds the {len(test_ds)} available images")
    base = test_ds.subset(range(args.count))
    if args.trigger:
        base = base.with_triggers(None)
    cfg = bd.DetectorConfig(delta=args.delta)
    tensors = [
        SampleTensor.from_image(img).standardized(args.mean, args.std) for img in base.images
    ]
    selection, per_image = sts.search_std(tensors, cfg)
    config = {
        **_data_config_echo(args),
        "count": args.count,
        "mean": args.mean,
        "std": args.std,
        "trigger": args.trigger,
        "delta": args.delta,
    }
    result = {
        "chosen_std": selection.chosen,
        "chosen_k": selection.chosen_k,
        "images_with_candidates": selection.images_with_candidates,
        "no_positive_count": selection.no_positive_count,
        "candidate_counts": [len(c.ks) for c in per_image],
        "frequency": selection.frequency,
    }
    _write_report(args, "std-search", config, result)


def _cmd_metrics(args):
    a = ds.read_ppm(Path(args.a).read_bytes())
    b = ds.read_ppm(Path(args.b).read_bytes())
    config = {"a": args.a, "b": args.b}
    result = {"psnr_db": sm.psnr_json_value(sm.psnr(a, b)), "ssim": sm.ssim(a, b)}
    _write_report(args, "metrics", config, result)


def _defense_samples(args, test_ds, train_ds):
    nc, nt = args.clean_count, args.trig_count
    if nc + nt > len(test_ds):
        raise UsageError("not enough test images for the requested cohort sizes")
    clean = [test_ds.images[i] for i in range(nc)]
    trig_src = test_ds.subset(range(nc, nc + nt)).with_triggers(None)
    return clean, trig_src.images


def _cmd_defense_strip(args):
    spec, weights, cfg = _load_model(args)
    train_ds, test_ds = _load_train_test(args)
    clean, triggered = _defense_samples(args, test_ds, train_ds)
    overlays = train_ds.images[: args.overlay_pool]
    report, clean_rs, trig_rs = dfs.strip_cohort(
        spec, weights, cfg, clean, triggered, overlays, args.blends, args.seed, args.threshold
    )
    trig_acts = [a for r in trig_rs for a in r.activations]
    rows = [{"cohort": "clean", "score": s} for s in report.clean_scores]
    rows += [{"cohort": "triggered", "score": s} for s in report.triggered_scores]
    config = {
        **_data_config_echo(args),
        "model": args.model,
        "weights": args.weights,
        "clean_count": args.clean_count,
        "trig_count": args.trig_count,
        "blends": args.blends,
        "overlay_pool": args.overlay_pool,
        "seed": args.seed,
        "threshold": args.threshold,
        "detector": _detector_config_echo(cfg),
    }
    result = {
        "auc": report.auc,
        "clean_scores": list(report.clean_scores),
        "triggered_scores": list(report.triggered_scores),
        "clean_flagged": report.clean_flagged,
        "triggered_flagged": report.triggered_flagged,
        "triggered_blend_activation_max": max(trig_acts),
        "triggered_blend_activation_below_1e-6": float(
            np.mean([a < 1e-6 for a in trig_acts])
        ),
    }
    _write_report(args, "defense-strip", config, result, rows=rows)


def _cmd_defense_scaleup(args):
    spec, weights, cfg = _load_model(args)
    train_ds, test_ds = _load_train_test(args)
    clean, triggered = _defense_samples(args, test_ds, train_ds)
    scales = _parse_int_list(args.scales)
    report, clean_rs, trig_rs = dfs.scaleup_cohort(
        spec, weights, cfg, clean, triggered, scales, args.threshold
    )
    trig_acts = [a for r in trig_rs for a in r.activations]
    rows = [{"cohort": "clean", "score": s} for s in report.clean_scores]
    rows += [{"cohort": "triggered", "score": s} for s in report.triggered_scores]
    config = {
        **_data_config_echo(args),
        "model": args.model,
        "weights": args.weights,
        "clean_count": args.clean_count,
        "trig_count": args.trig_count,
        "scales": scales,
        "threshold": args.threshold,
        "detector": _detector_config_echo(cfg),
    }
    result = {
        "auc": report.auc,
        "clean_scores": list(report.clean_scores),
        "triggered_scores": list(report.triggered_scores),
        "clean_flagged": report.clean_flagged,
        "triggered_flagged": report.triggered_flagged,
        "triggered_scaled_activation_max": max(trig_acts),
    }
    _write_report(args, "defense-scaleup", config, result, rows=rows)


def _cmd_schema(args):
    text = json.dumps(REPORT_SCHEMA, indent=2, sort_keys=True)
    if getattr(args, "out", None):
        Path(args.out).write_text(text + "\n")
        print(args.out)
    else:
        print(text)


# ------------------------------------------------------------------ parser

def _add_train_flags(p):
    p.add_argument("--channels", default="16,32", help="conv widths, e.g. 16,32")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--poison-rate", type=float, default=0.0)
    p.add_argument("--poison-target", type=int, default=0)
    p.add_argument("--poison-source", default=None, help="classes eligible for label flips")


def _build_parser() -> _Parser:
    parser = _Parser(prog="paritygraft", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("parity", help="parity census of the 256 pixel values")
    p.add_argument("--in", dest="infile", default=None, help="also profile this ppm")
    p.add_argument("--delta", type=float, default=bd.DEFAULT_DELTA)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_parity)

    p = sub.add_parser("inject", help="trigger a ppm image or a CIFAR batch")
    p.add_argument("--in", dest="infile", default=None)
    p.add_argument("--out", dest="outfile", default=None)
    p.add_argument("--cifar-in", default=None)
    p.add_argument("--cifar-out", default=None)
    p.add_argument("--classes", default=None, help="labels to trigger, e.g. 0,1 (default all)")
    _add_report_flags(p)
    p.set_defaults(func=_cmd_inject)

    p = sub.add_parser("train", help="train the toy CNN, save weights + model json")
    _add_data_flags(p)
    _add_train_flags(p)
    _add_detector_flags(p)
    p.add_argument("--weights-out", required=True)
    p.add_argument("--model-out", required=True)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate, optionally sweeping poisoned class counts")
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--ungrafted", action="store_true")
    p.add_argument(
        "--poison-classes",
        default="0",
        help="how many classes get test-time triggers: '3', '0..5', or '0,2,4'; "
        "classes are poisoned in descending clean per-class accuracy, hijack class excluded",
    )
    _add_data_flags(p)
    _add_detector_flags(p, with_defaults=False)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("badnets-control", help="label-flip poisoning without the graft")
    _add_data_flags(p)
    _add_train_flags(p)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_badnets)

    p = sub.add_parser("std-search", help="recover a std multiplier from standardized images")
    _add_data_flags(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--mean", type=float, default=0.5)
    p.add_argument("--std", type=float, default=0.5)
    p.add_argument("--trigger", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--delta", type=float, default=bd.DEFAULT_DELTA)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_std_search)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two ppm images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    _add_report_flags(p)
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("defense", help="defense surrogates against the grafted model")
    dsub = p.add_subparsers(dest="defense_kind", parser_class=_Parser)
    for kind, fn in (("strip", _cmd_defense_strip), ("scaleup", _cmd_defense_scaleup)):
        q = dsub.add_parser(kind)
        q.add_argument("--model", required=True)
        q.add_argument("--weights", required=True)
        _add_data_flags(q)
        _add_detector_flags(q, with_defaults=False)
        q.add_argument("--clean-count", type=int, default=20)
        q.add_argument("--trig-count", type=int, default=20)
        if kind == "strip":
            q.add_argument("--blends", type=int, default=100)
            q.add_argument("--overlay-pool", type=int, default=200)
            q.add_argument("--seed", type=int, default=0)
            q.add_argument("--threshold", type=float, default=None)
        else:
            q.add_argument("--scales", default="2,3,4,5")
            q.add_argument("--threshold", type=float, default=0.5)
        _add_report_flags(q)
        q.set_defaults(func=fn)

    p = sub.add_parser("schema", help="print the report JSON schema")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_schema)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            raise UsageError("a subcommand is required (see --help)")
        if getattr(args, "command", None) == "defense" and not getattr(args, "defense_kind", None):
            raise UsageError("defense needs a kind: strip or scaleup")
        args.func(args)
        return 0
    except UsageError as e:
        _emit_error("usage", str(e))
        return 1
    except SystemExit:
        raise
    except Exception as e:  # runtime failure: structured error, no partial report
        _emit_error("runtime", f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
