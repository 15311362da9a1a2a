"""Command-line entry point: ``routecloud <command> ...``.

Exit codes: 0 success, 1 internal error, 2 bad configuration, 3 bad or
missing data, 4 checkpoint/request incompatibility.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import warnings
from contextlib import nullcontext
from pathlib import Path

from .errors import (CompatibilityError, ConfigError, FormatError, ParseError, RouteCloudError,
                     TrainingError, ValidationError)

log = logging.getLogger("routecloud")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_COMPAT = 0, 1, 2, 3, 4
CONFIG_SECTIONS = ("encoder", "decoder", "train")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _check_keys(section, doc, cls):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key in '{section}': {', '.join(unknown)}")


def load_config(path, seed=None, precision=None):
    """JSON document with optional ``encoder``, ``decoder`` and ``train`` sections.

    Returns ``(ModelConfig, TrainConfig)``. Unknown keys raise ``ConfigError``.
    """
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .model import ModelConfig
    from .trainer import TrainConfig

    try:
        doc = json.loads(Path(path).read_text()) if path else {}
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section: {', '.join(unknown)}")
    enc_doc = dict(doc.get("encoder", {}))
    dec_doc = dict(doc.get("decoder", {}))
    tr_doc = dict(doc.get("train", {}))
    _check_keys("encoder", enc_doc, EncoderConfig)
    _check_keys("decoder", dec_doc, DecoderConfig)
    _check_keys("train", tr_doc, TrainConfig)
    if seed is not None:
        tr_doc["seed"] = seed
    if precision is not None:
        tr_doc["precision"] = precision
    try:
        enc = EncoderConfig.desk(**enc_doc)
        dec_doc.setdefault("in_channels", enc.d_model)
        model = ModelConfig(enc, DecoderConfig(**dec_doc))
        train = TrainConfig(**tr_doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return model, train


def _setup_logging():
    level = os.environ.get("CF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _write_outputs(prefix, values):
    from .circuit_io import save_grid

    prefix = Path(prefix)
    if prefix.parent:
        prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in ("cfg1", "txt", "pgm"):
        p = prefix.with_name(prefix.name + "." + ext)
        save_grid(p, values, prediction=True)
        paths.append(p)
    return paths


def _strip_name(path):
    name = path.name
    for suffix in (".cfg1", ".txt"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    for tag in (".label", ".pred"):
        if name.endswith(tag):
            name = name[: -len(tag)]
    return name


def _grid_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory} is not a directory")
    out = {}
    for p in sorted(directory.iterdir()):
        if p.suffix in (".cfg1", ".txt"):
            out.setdefault(_strip_name(p), p)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    from .dataset import load_dataset
    from .model import Model
    from .trainer import train

    model_cfg, train_cfg = load_config(args.config, args.seed, args.precision)
    if args.dry_run:
        model = Model(model_cfg, seed=train_cfg.seed, precision=train_cfg.precision)
        print(f"config ok: {model.n_params()} parameters")
        return EXIT_OK
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    tlog = logging.getLogger("routecloud.trainer")
    tlog.addHandler(handler)
    tlog.setLevel(logging.INFO)
    try:
        result = train(samples, model_cfg, train_cfg, out_dir=out, resume=args.resume,
                       stop_after_epoch=args.stop_after_epoch)
    finally:
        tlog.removeHandler(handler)
        handler.close()
    (out / "history.json").write_text(json.dumps(result.history, indent=2))
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs; final loss {last.get('loss')}; "
          f"checkpoint {out / 'model.cfck'}")
    return EXIT_OK


def cmd_predict(args):
    from .checkpoint import Checkpoint
    from .circuit_io import parse_nodes

    t0 = time.perf_counter()
    ckpt = Checkpoint.load(args.model)
    model = ckpt.model(best=True)
    if args.resolution is not None and tuple(args.resolution) != tuple(model.resolution):
        raise CompatibilityError(
            f"checkpoint resolution {model.resolution[0]}x{model.resolution[1]} "
            f"!= requested {args.resolution[0]}x{args.resolution[1]}")
    nodes = parse_nodes(args.input)
    if nodes.n == 0:
        warnings.warn("input has no nodes; output is the bias-only map", stacklevel=1)
    pred = model.predict(nodes)
    paths = _write_outputs(args.out, pred)
    elapsed = time.perf_counter() - t0
    print(f"wrote {', '.join(str(p) for p in paths)}")
    print(f"latency {elapsed * 1000:.1f} ms (ingest to output, {nodes.n} nodes)")
    return EXIT_OK


def cmd_eval(args):
    from .circuit_io import load_grid
    from .metrics import evaluate_dataset

    preds = _grid_files(args.pred)
    labels = _grid_files(args.label)
    common = sorted(set(preds) & set(labels))
    unpaired = sorted(set(preds) ^ set(labels))
    if unpaired:
        warnings.warn(f"unpaired files excluded: {', '.join(unpaired)}", stacklevel=1)
    if not common:
        raise ValidationError("no prediction/label pairs found")
    report = evaluate_dataset([load_grid(preds[n]) for n in common], [load_grid(labels[n]) for n in common],
                              common, pooled=args.pooled, kendall_variant=args.kendall)
    report.meta["unpaired"] = unpaired
    print(report.to_table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


def cmd_featurize(args):
    from .baseline import cell_density_map, load_nets, rudy_map
    from .circuit_io import parse_nodes

    nodes = parse_nodes(args.input)
    res = tuple(args.resolution)
    if args.method == "density":
        grid = cell_density_map(nodes, res)
    else:
        if not args.nets:
            raise ConfigError("--nets is required for --method rudy")
        grid = rudy_map(load_nets(args.nets), nodes, res)
    paths = _write_outputs(args.out, grid)
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    t0 = time.perf_counter()
    reports = run_suite(args.module, tol=args.tol)
    failed = 0
    for r in reports:
        if args.verbose or not r.passed:
            print(r.line())
        failed += not r.passed
    print(f"{len(reports) - failed}/{len(reports)} checks passed in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if failed == 0 else EXIT_INTERNAL


def cmd_generate(args):
    from .baseline import save_nets
    from .circuit_io import gen_nets
    from .dataset import save_dataset, synthetic_dataset

    samples = synthetic_dataset(args.count, seed=args.seed or 0, n_nodes=args.nodes,
                                resolution=tuple(args.resolution))
    save_dataset(args.out, samples)
    if args.nets:
        for i, s in enumerate(samples):
            save_nets(Path(args.out) / f"{s.name}.nets.jsonl", gen_nets(i, s.nodes, args.nets))
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="routecloud", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the training/generation seed")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count (1 for exact reproducibility)")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", help="JSON with encoder/decoder/train sections")
    t.add_argument("--data", help="directory of <name>.csv + <name>.label.txt pairs")
    t.add_argument("--out", help="output directory")
    t.add_argument("--dry-run", action="store_true", help="validate config and print parameter count")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after-epoch", type=int, default=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict a congestion map for one node file")
    pr.add_argument("--model", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True, help="output prefix; writes .cfg1, .txt and .pgm")
    pr.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="correlate prediction rasters with labels (paired by basename)")
    e.add_argument("--pred", required=True)
    e.add_argument("--label", required=True)
    e.add_argument("--pooled", action="store_true", help="one correlation over all cells")
    e.add_argument("--kendall", choices=("a", "b"), default="b")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("featurize", help="hand-crafted baseline raster")
    f.add_argument("--method", choices=("density", "rudy"), required=True)
    f.add_argument("--input", required=True)
    f.add_argument("--nets", help="JSONL nets file (rudy)")
    f.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_featurize)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    g.add_argument("--module", choices=("all", "ops", "encoder", "decoder", "loss"), default="all")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("-v", "--verbose", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("generate", help="write a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--nodes", type=int, default=1000)
    s.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    s.add_argument("--nets", type=int, default=0, help="also write this many random nets per sample")
    s.set_defaults(func=cmd_generate)
    return p


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    if args.command == "train" and not args.dry_run and not (args.data and args.out):
        parser.error("train needs --data and --out (or --dry-run)")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (ValidationError, ParseError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RouteCloudError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
