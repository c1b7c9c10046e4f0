"""``rscnet`` command line: one subcommand per pipeline stage.

Settings come from an optional flat JSON file (``--config``) whose keys are
:class:`ModelConfig` and :class:`TrainConfig` field names plus ``manifest``,
``checkpoint`` and ``out``; command-line flags override the file.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import logging
import sys
import threading
from dataclasses import fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model
from .data import SyntheticChannelConfig, generate_synthetic, load_dataset, normalize, save_dataset
from .eval import evaluate, export_embeddings
from .model import ModelConfig, RscnetModel, flops_count, param_count, pin_hidden
from .stream import (CloudRuntime, ReconstructionLog, SocketTransport, edge_run, ndjson_sink,
                     overhead_report, parse_address, sample_source, serve_tcp)
from .sweep import read_sweep_config, run_sweep, training_charts
from .train import TrainConfig, train

SUBCOMMANDS = ("train", "eval", "sweep", "flops", "synth", "export-embeddings", "edge", "cloud")
PATH_KEYS = ("manifest", "checkpoint", "out")
MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))

# flag dest -> config key
OVERRIDES = {"seed": "seed", "nf": "window_frames", "eta": "compression_ratio",
             "rho": "expansion_rate", "lam": "loss_weight", "epochs": "epochs",
             "batch": "batch_size", "lr": "learning_rate", "grad_clip": "grad_clip",
             "optimizer": "optimizer", "weight_decay": "weight_decay",
             "out": "out", "checkpoint": "checkpoint", "manifest": "manifest"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def fraction(text):
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number or fraction: {text!r}") from None


def _common(p, model=True, training=False, data=True):
    p.add_argument("--config", help="JSON file of settings; flags override its values")
    p.add_argument("--seed", type=int, help="single seed for data, init and shuffling (default 0)")
    p.add_argument("--out", help="output directory (or file, where noted)")
    if data:
        p.add_argument("--manifest", help="dataset manifest.json; synthetic data when omitted")
    if model:
        p.add_argument("--nf", type=int, help="frames per window N_f")
        p.add_argument("--eta", type=fraction, help="compression ratio, e.g. 1/90")
        p.add_argument("--rho", type=int, help="decoder expansion rate")
        p.add_argument("--lambda", dest="lam", type=float, help="reconstruction loss weight")
    if training:
        p.add_argument("--epochs", type=int, help="training epochs")
        p.add_argument("--batch", type=int, help="mini-batch size")
        p.add_argument("--lr", type=float, help="initial learning rate")
        p.add_argument("--grad-clip", type=float, help="global gradient-norm ceiling (0 = off)")
        p.add_argument("--optimizer", choices=("sgd", "adam"),
                       help="sgd with momentum (default) or adam")
        p.add_argument("--weight-decay", type=float, help="L2 penalty folded into gradients")


def build_parser():
    parser = _Parser(prog="rscnet", description="RSCNet CSI compression and activity recognition")
    parser.add_argument("--version", action="version", version=__version__,
                        help="print the version and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write report, charts and checkpoints")
    _common(p, training=True)
    p.add_argument("--checkpoint", help="resume from a checkpoint written by an earlier run")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p, model=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.rsck)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split to evaluate (default test)")

    p = sub.add_parser("sweep", help="train/evaluate across N_f, eta or rho values")
    _common(p, training=True)
    p.add_argument("--axis", choices=("N_f", "eta", "rho"), help="swept hyperparameter")
    p.add_argument("--values", help="comma-separated values, e.g. 5,10,25 or 1/90,1/4500")
    p.add_argument("--sweep-config", help='JSON {"axis", "values", "base_config_path"}')

    p = sub.add_parser("flops", help="per-component FLOP table for one or more configs")
    _common(p, model=False, data=False)
    p.add_argument("--nf", type=int, nargs="+", help="frames per window N_f (one or more)")
    p.add_argument("--eta", type=fraction, nargs="+", help="compression ratios (one or more)")
    p.add_argument("--rho", type=int, nargs="+", help="expansion rates (one or more)")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    p = sub.add_parser("synth", help="write the synthetic dataset in the binary manifest format")
    _common(p, model=False, data=False)
    p.add_argument("--per-class", type=int, default=100, help="training samples per class")

    p = sub.add_parser("export-embeddings", help="CSV of raw/compressed/recurrent/classifier embeddings")
    _common(p, model=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.rsck)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split to export (default test)")

    p = sub.add_parser("edge", help="encode CSI windows and stream them to a cloud endpoint")
    _common(p, model=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.rsck)")
    p.add_argument("--connect", required=True, help="cloud address HOST:PORT")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split whose samples are streamed (default test)")
    p.add_argument("--session", type=int, default=0, help="session id carried in every frame")
    p.add_argument("--limit", type=int, help="stream at most this many samples")
    p.add_argument("--retries", type=int, default=0, help="resend attempts per frame on failure")

    p = sub.add_parser("cloud", help="receive streamed windows; reconstruct and classify")
    _common(p, model=False, data=False)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.rsck)")
    p.add_argument("--listen", required=True, help="bind address HOST:PORT")
    p.add_argument("--max-connections", type=int,
                   help="exit after serving this many edge connections (default: run forever)")
    p.add_argument("--continuous", action="store_true",
                   help="carry LSTM state across samples instead of resetting per sample")
    p.add_argument("--recon-log", help="path prefix for a binary reconstruction log")
    return parser


def resolve_config(args):
    """Merge ``--config`` JSON with flag overrides; validate everything up front."""
    settings = {}
    if getattr(args, "config", None):
        try:
            settings = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(settings, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(settings) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(PATH_KEYS)
        if unknown:
            raise UsageError(f"unknown config key: {sorted(unknown)[0]!r}")
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None and not isinstance(value, list):
            settings[key] = value
    try:
        model_cfg = ModelConfig(**{k: settings[k] for k in MODEL_KEYS if k in settings})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model setting: {exc}") from None
    try:
        train_cfg = TrainConfig(**{k: settings[k] for k in TRAIN_KEYS if k in settings})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training setting: {exc}") from None
    paths = {k: settings.get(k) for k in PATH_KEYS}
    return model_cfg, train_cfg, paths


def load_split(manifest, seed):
    """Normalised dataset: from a manifest, else the built-in synthetic set."""
    if manifest:
        return normalize(load_dataset(manifest))
    return normalize(generate_synthetic(SyntheticChannelConfig(seed=seed)))


def _out_dir(paths, default):
    out = Path(paths["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(obj):
    print(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    raise TypeError(type(v).__name__)


def _eval_dict(result, split_name):
    return {"split": split_name, "accuracy": result.accuracy, "nmse_db": result.nmse_db,
            "nmse_db_pooled": result.nmse_db_pooled, "nmse_db_raw": result.nmse_db_raw,
            "confusion": result.confusion.tolist(), "flops": result.flops}


def cmd_train(args, log):
    model_cfg, train_cfg, paths = resolve_config(args)
    out = _out_dir(paths, "runs/train")
    split = load_split(paths["manifest"], train_cfg.seed)
    model = RscnetModel.initialize(model_cfg, seed=train_cfg.seed)
    best, report = train(model, split, train_cfg, checkpoint_dir=out / "checkpoints",
                         resume_from=paths["checkpoint"], log=log)
    report.write_csv(out / "report.csv")
    training_charts(report, out / "charts")
    summary = report.summary()
    summary["test"] = _eval_dict(evaluate(best, split.test, split.stats), "test")
    summary["param_count"] = param_count(best)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_jsonable))
    _print_json({k: summary[k] for k in ("best_epoch", "best_val_accuracy", "test")})
    return 0


def cmd_eval(args, log):
    _, train_cfg, paths = resolve_config(args)
    model = load_model(args.checkpoint)
    split = load_split(paths["manifest"], train_cfg.seed)
    result = _eval_dict(evaluate(model, split.split(args.split), split.stats), args.split)
    if paths["out"]:
        _out_dir(paths, ".").joinpath("eval.json").write_text(
            json.dumps(result, indent=2, default=_jsonable))
    _print_json(result)
    return 0


def cmd_sweep(args, log):
    model_cfg, train_cfg, paths = resolve_config(args)
    axis, values = args.axis, args.values.split(",") if args.values else None
    if args.sweep_config:
        spec = read_sweep_config(args.sweep_config)
        axis, values = spec["axis"], spec["values"]
        if spec.get("base_config_path"):
            args.config = spec["base_config_path"]
            model_cfg, train_cfg, paths = resolve_config(args)
    if not axis or not values:
        raise UsageError("sweep needs --axis and --values, or --sweep-config")
    out = _out_dir(paths, "runs/sweep")
    split = load_split(paths["manifest"], train_cfg.seed)
    results = run_sweep(axis, values, model_cfg, train_cfg, split, out_dir=out,
                        seed=train_cfg.seed, log_fn=log)
    _print_json([{"value": r.extra["value"], **r.row()} for r in results])
    return 0


def cmd_flops(args, log):
    base, _, _ = resolve_config(args)
    if args.nf and len(args.nf) > 1:
        base = pin_hidden(base)
    rows = []
    for nf in args.nf or [base.window_frames]:
        for eta in args.eta or [base.compression_ratio]:
            for rho in args.rho or [base.expansion_rate]:
                try:
                    cfg = ModelConfig(**{**base.to_dict(), "window_frames": nf,
                                         "compression_ratio": eta, "expansion_rate": rho})
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                counts = flops_count(cfg)
                rows.append({"N_f": nf, "eta": eta, "rho": rho, "M": cfg.compressed_dim,
                             **counts, "total": sum(counts.values()),
                             "params": param_count(RscnetModel.initialize(cfg))})
    if args.json:
        _print_json(rows)
        return 0
    cols = ("N_f", "eta", "rho", "M", "encoder", "recurrent", "decoder", "classifier",
            "total", "params")
    print("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        cells = [f"{r[c]:>12.6g}" if c == "eta" else f"{r[c]:>12}" for c in cols]
        print("  ".join(cells))
    if len(rows) > 1:
        ref = rows[0]["decoder"]
        for r in rows[1:]:
            print(f"decoder ratio (N_f={r['N_f']}, eta={r['eta']:.6g}, rho={r['rho']}) / "
                  f"first row: {r['decoder'] / ref:.3f}")
    return 0


def cmd_synth(args, log):
    _, train_cfg, paths = resolve_config(args)
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    out = _out_dir(paths, "data/synthetic")
    split = generate_synthetic(SyntheticChannelConfig(seed=train_cfg.seed), n_per_class=args.per_class)
    manifest = save_dataset(split, out)
    _print_json({"manifest": str(manifest), "train": len(split.train), "val": len(split.val),
                 "test": len(split.test)})
    return 0


def cmd_export(args, log):
    _, train_cfg, paths = resolve_config(args)
    model = load_model(args.checkpoint)
    split = load_split(paths["manifest"], train_cfg.seed)
    target = Path(paths["out"] or "embeddings.csv")
    if target.suffix != ".csv":
        target = target / f"embeddings_{args.split}.csv"
    export_embeddings(model, split.split(args.split), target)
    _print_json({"embeddings": str(target)})
    return 0


def cmd_edge(args, log):
    _, train_cfg, paths = resolve_config(args)
    model = load_model(args.checkpoint)
    split = load_split(paths["manifest"], train_cfg.seed)
    samples = split.split(args.split).amplitudes
    if args.limit is not None:
        samples = samples[:args.limit]
    transport = SocketTransport.connect(*parse_address(args.connect))
    try:
        stats = edge_run(sample_source(samples), model, transport, session_id=args.session,
                         retries=args.retries)
    finally:
        transport.close()
    report = overhead_report(stats)
    report["mean_latency_s"] = float(np.mean(stats.latencies)) if stats.latencies else None
    _print_json(report)
    return 0


def cmd_cloud(args, log):
    model = load_model(args.checkpoint)
    host, port = parse_address(args.listen)
    out_path = Path(args.out) if args.out else None
    fh = out_path.open("a") if out_path else sys.stdout
    recon_log = ReconstructionLog(args.recon_log) if args.recon_log else None
    runtime = CloudRuntime(model, ndjson_sink(fh), recon_log=recon_log,
                           continuous=args.continuous)
    ready = threading.Event()
    try:
        serve_tcp(host, port, runtime, max_connections=args.max_connections, ready=ready)
    except KeyboardInterrupt:
        pass
    finally:
        if recon_log is not None:
            recon_log.close()
        if out_path:
            fh.close()
    return 0


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "flops": cmd_flops,
            "synth": cmd_synth, "export-embeddings": cmd_export, "edge": cmd_edge,
            "cloud": cmd_cloud}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    log = logging.getLogger("rscnet").info
    try:
        return HANDLERS[args.command](args, log)
    except UsageError as exc:
        print(f"rscnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:       # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"rscnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
