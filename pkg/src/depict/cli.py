"""``depict`` command line: gen, train, segment, probe, perturb, verify.

Configuration is a JSON object with flat dotted keys (``"train.lr": 0.05``,
``"model.variant": "SA"``, ``"synth.noise": 0.1``); ``--set key=value``
overrides the file. Every run writes ``run.json`` with the resolved config.

Exit codes: 0 success, 1 failed hard check or runtime/IO error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    EMBED_VERSION,
    SynthConfig,
    class_bases,
    gen_image,
    read_embeddings,
    write_embeddings,
    write_label_map,
)
from .decoder import (
    CKPT_VERSION,
    PERTURB_KINDS,
    DecoderConfig,
    forward,
    layerwise_rate_probe,
    own_layer_rate_changes,
    perturb,
    predict_labels,
    read_checkpoint,
    write_checkpoint,
)
from .errors import ConfigInvalid, DepictError
from .subspace import pca_segment
from .train import (
    TrainConfig,
    accuracy,
    fit_linear_probe,
    linear_probe_accuracy,
    matched_accuracy,
    pca_segment_accuracy,
    train_depict,
)
from .verify import SOFT_THRESHOLDS, probe_sign_agreement, reports_to_csv, reports_to_json, run_all

log = logging.getLogger("depict")

SECTIONS = {"synth": SynthConfig, "model": DecoderConfig, "train": TrainConfig}


class UsageError(Exception):
    pass


# --- configuration -----------------------------------------------------------


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise UsageError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def resolve_config(path, overrides, seed):
    """Dataclass configs per section; file values, then ``--set`` overrides."""
    flat = {}
    if path:
        try:
            flat.update(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        flat[k] = v
    values = {name: {} for name in SECTIONS}
    for key, val in flat.items():
        section, _, fname = key.partition(".")
        if section not in SECTIONS:
            raise UsageError(f"unknown config key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if fname not in fields:
            raise UsageError(f"unknown config key {key!r}")
        values[section][fname] = val
    out = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        kw = {}
        for f in dataclasses.fields(cls):
            default = getattr(defaults, f.name)
            if f.name in values[name]:
                kw[f.name] = _coerce(values[name][f.name], default)
            elif f.name == "seed":
                kw[f.name] = seed
        try:
            out[name] = cls(**kw)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid {name} config: {exc}") from exc
    try:
        out["synth"].validate()
    except ConfigInvalid as exc:
        raise UsageError(str(exc)) from exc
    return out


def write_manifest(out, command, args, configs, seed, extra=None):
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "command")},
        "config": {k: dataclasses.asdict(v) for k, v in configs.items()},
        "formats": {"embedding": EMBED_VERSION, "checkpoint": CKPT_VERSION},
    }
    if extra:
        doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def load_dir(path):
    files = sorted(Path(path).glob("*.depr"))
    if not files:
        raise FileNotFoundError(f"no .depr files in {path}")
    return [read_embeddings(f) for f in files]


# --- subcommands -------------------------------------------------------------


def cmd_gen(args, cfg, out):
    synth = cfg["synth"]
    bases = class_bases(synth)
    for i in range(args.start, args.start + args.count):
        im = gen_image(synth, bases, i)
        write_embeddings(out / f"img_{i:05d}.depr", im)
        write_label_map(out / f"img_{i:05d}.pgm", im.labels, im.grid)
    return 0, {}


def cmd_train(args, cfg, out):
    data = load_dir(args.data)
    model_cfg = cfg["model"]
    params, history = train_depict(data, model_cfg, cfg["train"])
    write_checkpoint(out / "model.dpct", model_cfg, params)
    _write_csv(
        out / "metrics.csv",
        ["epoch", "loss", "train_accuracy"],
        [[r["epoch"], _fmt(r["loss"]), _fmt(r["accuracy"])] for r in history],
    )
    extra = {"final_train_accuracy": history[-1]["accuracy"]}
    if args.test:
        test = load_dir(args.test)
        probe = fit_linear_probe(data, model_cfg.num_classes)
        rows = [
            ["depict_" + model_cfg.variant, _fmt(accuracy(params, model_cfg, test))],
            ["linear_probe", _fmt(linear_probe_accuracy(probe, test))],
            ["pca_segment_matched", _fmt(pca_segment_accuracy(test, model_cfg.num_classes))],
        ]
        _write_csv(out / "test_accuracy.csv", ["method", "accuracy"], rows)
        extra["test_accuracy"] = {r[0]: float(r[1]) for r in rows}
    return 0, extra


def cmd_segment(args, cfg, out):
    im = read_embeddings(args.input)
    stem = Path(args.input).stem
    depict_acc = pca_acc = ""
    if args.method in ("depict", "both"):
        if not args.checkpoint:
            raise UsageError("--method depict needs --checkpoint")
        model_cfg, params = read_checkpoint(args.checkpoint)
        labels = predict_labels(forward(im.embeddings, params, model_cfg).logits)
        write_label_map(out / f"{stem}_depict.pgm", labels, im.grid)
        depict_acc = _fmt(float(np.mean(labels == im.labels)))
    if args.method in ("pca", "both"):
        C = args.classes or cfg["model"].num_classes
        labels = pca_segment(im.embeddings, C)
        write_label_map(out / f"{stem}_pca.pgm", labels, im.grid)
        pca_acc = _fmt(matched_accuracy(labels, im.labels, C))
    _write_csv(
        out / "segment.csv",
        ["input", "depict_accuracy", "pca_matched_accuracy"],
        [[Path(args.input).name, depict_acc, pca_acc]],
    )
    return 0, {}


def cmd_probe(args, cfg, out):
    model_cfg, params = read_checkpoint(args.checkpoint)
    data = load_dir(args.data)[: args.limit]
    sums = {}
    changes = {}
    for im in data:
        rows = layerwise_rate_probe(params, model_cfg, im.embeddings)
        for r in rows:
            key = (r["layer"], r["head"], r["point"])
            acc = sums.setdefault(key, [r["alpha"], 0.0, 0.0])
            acc[1] += r["proj_rate"]
            acc[2] += r["rate_ratio"]
        for layer, head, alpha, delta in own_layer_rate_changes(rows):
            changes.setdefault((layer, head), [alpha, 0.0])[1] += delta
    n = len(data)
    _write_csv(
        out / "probe.csv",
        ["layer", "head", "point", "alpha", "mean_proj_rate", "mean_rate_ratio"],
        [[l, h, p, _fmt(v[0]), _fmt(v[1] / n), _fmt(v[2] / n)] for (l, h, p), v in sorted(sums.items())],
    )
    own = [(l, h, v[0], v[1] / n) for (l, h), v in sorted(changes.items())]
    _write_csv(
        out / "probe_own_layer.csv",
        ["layer", "head", "alpha", "mean_rate_change"],
        [[l, h, _fmt(a), _fmt(d)] for l, h, a, d in own],
    )
    agree = probe_sign_agreement(own)
    return 0, {
        "sign_agreement": agree,
        "sign_agreement_threshold": SOFT_THRESHOLDS["probe_sign_agreement"],
    }


def cmd_perturb(args, cfg, out):
    model_cfg, params = read_checkpoint(args.checkpoint)
    data = load_dir(args.data)[: args.limit]
    other = perturb(params, model_cfg, args.kind, args.seed, args.sigma)
    agree = correct_a = correct_b = total = 0
    for im in data:
        a = predict_labels(forward(im.embeddings, params, model_cfg).logits)
        b = predict_labels(forward(im.embeddings, other, model_cfg).logits)
        agree += int(np.sum(a == b))
        correct_a += int(np.sum(a == im.labels))
        correct_b += int(np.sum(b == im.labels))
        total += a.size
    _write_csv(
        out / "perturb.csv",
        ["kind", "sigma", "agreement", "accuracy_before", "accuracy_after"],
        [[args.kind, _fmt(args.sigma), _fmt(agree / total), _fmt(correct_a / total), _fmt(correct_b / total)]],
    )
    return 0, {}


def cmd_verify(args, cfg, out):
    reports, overall = run_all(args.seed)
    (out / "verify.csv").write_text(reports_to_csv(reports))
    (out / "verify.json").write_text(reports_to_json(reports, overall))
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'} [{r.kind}] {r.name}")
    return (0 if overall else 1), {"overall": overall}


# --- entry point -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--out", default="out", help="output directory (created if absent)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="depict", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="write synthetic embedding files")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--start", type=int, default=0, help="index of the first image")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a decoder on a directory of .depr files")
    p.add_argument("--data", required=True)
    p.add_argument("--test", help="held-out directory; also evaluates both baselines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", parents=[common], help="label map(s) for one embedding file")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=("depict", "pca", "both"), default="both")
    p.add_argument("--classes", type=int, default=0, help="C for PCA (default model.num_classes)")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("probe", parents=[common], help="layer-wise projected coding rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=32, help="images to average over")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("perturb", parents=[common], help="prediction agreement under perturbed P")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=PERTURB_KINDS, required=True)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--limit", type=int, default=64)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("verify", parents=[common], help="run every derivation check")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if not 0 <= args.seed < 2**64:
        parser.print_usage(sys.stderr)
        print("depict: error: --seed must be a u64", file=sys.stderr)
        return 2
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code, extra = args.func(args, cfg, out)
        write_manifest(out, args.command, args, cfg, args.seed, extra)
        return code
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"depict: error: {exc}", file=sys.stderr)
        return 2
    except (DepictError, ValueError, OSError, RuntimeError, MemoryError, TypeError, FloatingPointError) as exc:
        print(f"depict: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
