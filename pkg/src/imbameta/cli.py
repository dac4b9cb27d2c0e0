"""Command-line entry point: ``imbameta {run,compare,detect,report,make-stream}``.

Exit codes: 0 success, 2 configuration error, 3 runtime abort (non-finite
numerics), 4 I/O or input-format error.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import harness
from .errors import RunAbort, StreamFormatError
from .harness import ConfigError, RunConfig
from .learner import Model
from .streams import read_stream, stream, write_stream

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4
DETECTOR_KEYS = ("alpha", "m", "B", "rho", "delta", "moment_source", "bandwidth")

log = logging.getLogger("imbameta")

KEY_HELP = {
    "model_kind": "embedding network: linear or mlp",
    "hidden": "hidden width of the mlp embedding",
    "d": "input feature dimension",
    "e": "embedding dimension",
    "lr": "SGD step size",
    "n_way": "classes per episode",
    "k_shot": "support examples per class",
    "q_per_class": "query examples per class",
    "tasks_per_step": "stream episodes per training step",
    "replay_batch": "replayed episodes per step (default: tasks_per_step)",
    "capacity": "memory size in episodes",
    "R": "episodes sampled per cluster when refreshing cluster importance",
    "s": "steps between sampling-plan refreshes",
    "alpha": "detector EMA smoothing factor in (0, 1]",
    "m": "projection length (number of lagged distances)",
    "B": "MMD window length",
    "rho": "decay of the running threshold moments",
    "delta": "threshold multiplier on the running standard deviation",
    "moment_source": "threshold moments from W (raw) or W^2 (squared)",
    "bandwidth": "RBF bandwidth (default: median heuristic at burn-in)",
    "detector_embedding": "detector input: model embeddings or identity",
    "steps": "comma-separated segment lengths (overrides scale)",
    "scale": "multiplier on the full six-segment step counts",
    "separation": "distance between consecutive domain centers, in noise units",
    "within_class_std": "noise on informative coordinates",
    "class_count": "classes per domain (30%% held out for testing)",
    "class_mean_scale": "spread of class means around the domain center",
    "informative_dims": "coordinates on which class means differ",
    "nuisance_std": "noise on the remaining coordinates",
    "schedule_seed": "seed for domain centers and class means",
    "eval_episodes": "held-out test episodes per domain",
    "variance_every": "steps between exact gradient-variance measurements",
}


def _add_config_flags(p, keys=None):
    p.add_argument("--config", help="INI file with a [run] section of key = value lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for name in keys or RunConfig.keys():
        if name in ("seed", "method"):
            continue
        p.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE", default=None,
                       help=KEY_HELP.get(name))


def _load_config(args, **fixed):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for k, v in vars(args).items():
        if k.startswith("cfg_") and v is not None:
            overrides[k[4:]] = v
    if getattr(args, "paper_scale", False):
        overrides["scale"] = "1.0"
    overrides.update({k: v for k, v in fixed.items() if v is not None})
    return RunConfig.from_mapping(overrides, cfg)


def _run_one(cfg, out_dir):
    rep = harness.run_to_dir(cfg, out_dir)
    return cfg.seed, rep["average_accuracy"]


def cmd_run(args):
    base = _load_config(args, method=args.method)
    cfgs = [dataclasses.replace(base, seed=s) for s in args.seed]
    dirs = [os.path.join(args.out_dir, f"seed_{s}") for s in args.seed]
    if args.jobs > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_one, cfgs, dirs))
    else:
        results = [_run_one(c, d) for c, d in zip(cfgs, dirs)]
    for seed, acc in results:
        print(f"seed {seed}: average accuracy {acc:.4f}")
    return EXIT_OK


def cmd_compare(args):
    a, bad_a = harness.load_reports(args.a)
    b, bad_b = harness.load_reports(args.b)
    for path, why in bad_a + bad_b:
        log.warning("skipping %s: %s", path, why)
    summary, per_seed = harness.compare_reports(a, b)
    out = args.out or "comparison.csv"
    harness.write_compare(out, summary)
    if args.per_seed:
        harness.write_csv(args.per_seed, ("schema_version", "seed", "metric", "a", "b", "delta"),
                          [dict(r, schema_version=harness.SCHEMA_VERSION) for r in per_seed])
    for r in summary:
        print(f"{r['metric']}: delta {r['mean_delta']:+.4f} (b wins {r['wins_b']}/{r['n']}, p={r['sign_test_p']:.3g})")
    return EXIT_OK


def cmd_detect(args):
    cfg = _load_config(args)
    model = None
    if args.model:
        with open(args.model) as fh:
            text = fh.read()
        try:
            model = Model.from_json(text)
        except (ValueError, KeyError, TypeError) as exc:
            print(f"{args.model}: bad model checkpoint ({exc})", file=sys.stderr)
            return EXIT_IO
    rows, summary = harness.detect(read_stream(args.stream), cfg.detector_config(), model)
    os.makedirs(args.out_dir, exist_ok=True)
    harness.write_csv(os.path.join(args.out_dir, "detect.csv"), harness.DETECT_COLUMNS, rows)
    with open(os.path.join(args.out_dir, "detect_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"{summary['steps']} steps, {len(summary['detections'])} detections, "
          f"precision {summary['precision']}, recall {summary['recall']}")
    return EXIT_OK


def cmd_report(args):
    if not os.path.isdir(args.dir):
        raise FileNotFoundError(args.dir)
    text, problems = harness.build_report(args.dir, args.out_dir)
    print(text)
    for path, why in problems:
        log.warning("%s: %s", path, why)
    return EXIT_OK


def cmd_make_stream(args):
    cfg = _load_config(args)
    rng = np.random.default_rng(args.seed)
    n = write_stream(args.out, stream(cfg.schedule(), cfg.n_way, cfg.k_shot, cfg.q_per_class, rng))
    print(f"wrote {n} episodes to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="imbameta",
        description="Continual few-shot learning over imbalanced domain streams.",
        epilog="exit codes: 0 ok, 2 config error, 3 runtime abort, 4 I/O or format error",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one method over the stream and meta-test it")
    p.add_argument("--seed", type=int, nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--paper-scale", action="store_true", help="use the full step counts instead of 1/10")
    p.add_argument("--jobs", type=int, default=1, help="run seeds in parallel processes")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="paired per-seed comparison of two run directories (b - a)")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="summary CSV (default comparison.csv)")
    p.add_argument("--per-seed", help="optional per-seed delta CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect", help="run change detection alone over a stream file")
    p.add_argument("stream")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--model", help="model checkpoint JSON for embeddings (default: identity)")
    _add_config_flags(p, DETECTOR_KEYS)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("report", help="aggregate run directories into markdown and tidy CSVs")
    p.add_argument("dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-stream", help="export a synthetic stream as NDJSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-scale", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_make_stream)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunAbort as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except StreamFormatError as exc:
        print(f"{getattr(args, 'stream', '')}:{exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
