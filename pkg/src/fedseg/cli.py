"""Command-line entry point: ``fedseg <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 protocol abort,
5 timeout. ``FEDSEG_LOG`` (error, info, debug) sets stderr verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as datamod
from .config import ExperimentConfig, load_config
from .errors import (AlignmentError, ConfigError, DatasetIOError, FormatError, ProtocolError,
                     RoundTimeout, ShapeError, TransportError, UsageError)
from .metrics import evaluate
from .params import ParameterSet
from .plotting import plot_eval, plot_predictions, plot_round_log
from .runtime import build_initial, run_client, run_server, simulate, train_local
from .tensor import Rng, splitmix64
from .transport import TcpListener, tcp_connect
from .unet import UNet, infer_config, save_checkpoint

log = logging.getLogger("fedseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL, EXIT_TIMEOUT = 0, 2, 3, 4, 5


def _setup_logging():
    level = os.environ.get("FEDSEG_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"{text} is not a 64-bit unsigned integer")
    return v


# --- helpers ---------------------------------------------------------------------


def _load_node_data(cfg: ExperimentConfig, which="train"):
    out = []
    for n in cfg.nodes:
        path = n.dataset_dir if which == "train" else n.test_dir
        if path is None:
            return None
        ds = datamod.load(path)
        _check_channels(cfg.model.in_channels, ds, path)
        out.append(ds)
    return out


def _check_channels(in_channels, ds, path):
    if ds.image_shape[0] != in_channels:
        raise ConfigError(f"{path}: images have {ds.image_shape[0]} channel(s), "
                          f"model expects {in_channels}")


def _report(model, test_sets, task, threshold, out_dir: Path, stem="eval"):
    report = evaluate(model, test_sets, task, threshold)
    (out_dir / f"{stem}_report.json").write_text(report.to_json() + "\n")
    report.write_csv(out_dir / f"{stem}_per_sample.csv")
    plot_eval(report, out_dir / f"{stem}_metrics.png")
    first = test_sets[0]
    plot_predictions(first.images(), first.masks(), model.predict(first.images()),
                     out_dir / f"{stem}_examples.png", task, threshold)
    return report


def _round_eval_hook(cfg, test_sets):
    if not cfg.federation.eval_each_round or not test_sets:
        return None

    def hook(round_no, params):
        rep = evaluate(UNet(cfg.model, params), test_sets, cfg.task, cfg.threshold)
        return {"eval_pooled_mean": rep.pooled_mean}
    return hook


def _finish(cfg, result, out_dir: Path, test_sets, stem):
    save_checkpoint(result.params, out_dir / "final.fdlc")
    plot_round_log(result.log, out_dir / "rounds.png")
    summary = {"rounds": len(result.log), "checkpoint": str(out_dir / "final.fdlc")}
    if test_sets:
        report = _report(UNet(cfg.model, result.params), test_sets, cfg.task, cfg.threshold,
                         out_dir, stem)
        summary.update(task=report.task, pooled_mean=report.pooled_mean,
                       domains={d.name: d.mean for d in report.domains})
    print(json.dumps(summary, indent=2))


# --- commands --------------------------------------------------------------------


def cmd_gen_data(args):
    try:
        doc = json.loads(Path(args.spec).read_text())
    except OSError as e:
        raise DatasetIOError(f"cannot read spec {args.spec}: {e}", path=args.spec) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{args.spec}: domain spec must be a JSON object")
    try:
        spec = datamod.DomainSpec.from_dict(doc)
    except TypeError as e:
        raise ConfigError(f"{args.spec}: {e}") from e
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    ds = datamod.generate(spec, args.n, Rng(args.seed))
    out = Path(args.out)
    if args.test_n is None:
        parts = {out: ds}
    else:
        train_n = args.n - args.test_n if args.train_n is None else args.train_n
        try:
            train, test = datamod.split(ds, train_n, args.test_n, Rng(splitmix64(args.seed)))
        except UsageError as e:
            raise ConfigError(str(e)) from e
        parts = {out / "train": train, out / "test": test}
    summary = []
    for path, part in parts.items():
        datamod.save(part, path)
        summary.append({"dir": str(path), "domain": part.domain, "split": part.split,
                        "n": len(part), "image_shape": part.image_shape})
    print(json.dumps(summary, indent=2))


def cmd_simulate(args):
    cfg = load_config(args.config)
    cfg.check_paths()
    train_sets = _load_node_data(cfg, "train")
    test_sets = _load_node_data(cfg, "test")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if cfg.transport_mode == "tcp":
        mode = "tcp"
    else:
        mode = "concurrent" if args.concurrent else "reference"
    result = simulate(cfg.model, cfg.federation, train_sets, [n.seed for n in cfg.nodes],
                      mode=mode, output_dir=out, on_round=_round_eval_hook(cfg, test_sets),
                      host=cfg.host, port=0 if mode == "tcp" else cfg.port)
    _finish(cfg, result, out, test_sets, "eval")


def cmd_train_local(args):
    cfg = load_config(args.config)
    cfg.check_paths()
    train_sets = _load_node_data(cfg, "train")
    test_sets = _load_node_data(cfg, "test")
    out = cfg.output_dir / "local"
    out.mkdir(parents=True, exist_ok=True)
    result = train_local(cfg.model, cfg.federation, train_sets, output_dir=out)
    _finish(cfg, result, out, test_sets, "eval")


def cmd_server(args):
    cfg = load_config(args.config)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    listener = TcpListener(cfg.host, cfg.port)
    log.info("listening on %s:%s for %d node(s)", *listener.address, len(cfg.nodes))
    try:
        initial = build_initial(cfg.model, cfg.seed).params
        result = run_server(cfg.federation, listener, initial, out)
    finally:
        listener.close()
    save_checkpoint(result.params, out / "final.fdlc")
    plot_round_log(result.log, out / "rounds.png")
    print(json.dumps({"rounds": len(result.log), "checkpoint": str(out / "final.fdlc")}, indent=2))


def cmd_client(args):
    cfg = load_config(args.config)
    node_id, node = cfg.node(args.node)
    if not node.dataset_dir.is_dir():
        raise ConfigError(f"node {node.name!r}: dataset directory {node.dataset_dir} does not exist")
    ds = datamod.load(node.dataset_dir)
    _check_channels(cfg.model.in_channels, ds, node.dataset_dir)
    fed = cfg.federation
    rounds = run_client(node_id, ds, fed, cfg.model,
                        lambda: tcp_connect(cfg.host, cfg.port, fed.retries), node.seed)
    print(json.dumps({"node": node.name, "node_id": node_id, "rounds": rounds}))


def cmd_eval(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DatasetIOError(f"checkpoint {path} not found", path=str(path))
    params = ParameterSet.load(path)
    config = infer_config(params)
    model = UNet(config, params)
    test_sets = []
    for d in args.data:
        ds = datamod.load(d)
        _check_channels(config.in_channels, ds, d)
        config.check_input(*ds.image_shape[1:])
        test_sets.append(ds)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = _report(model, test_sets, args.task, args.threshold, out)
    else:
        report = evaluate(model, test_sets, args.task, args.threshold)
    print(report.to_json())


# --- entry point -----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="fedseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic domain dataset")
    g.add_argument("--spec", required=True, help="domain spec JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--test-n", type=int, help="also split into out/train and out/test")
    g.add_argument("--train-n", type=int, help="train size when splitting (default n - test_n)")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("simulate", help="run server and clients in one process")
    s.add_argument("--config", required=True)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", action="store_true",
                      help="single-threaded reference mode (default for inproc)")
    mode.add_argument("--concurrent", action="store_true", help="clients on worker threads")
    s.set_defaults(func=cmd_simulate)

    sv = sub.add_parser("server", help="run the aggregation server over TCP")
    sv.add_argument("--config", required=True)
    sv.set_defaults(func=cmd_server)

    c = sub.add_parser("client", help="run one node over TCP")
    c.add_argument("--config", required=True)
    c.add_argument("--node", required=True, help="node name from the config")
    c.set_defaults(func=cmd_client)

    t = sub.add_parser("train-local", help="centralized baseline on the pooled node data")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train_local)

    e = sub.add_parser("eval", help="evaluate a checkpoint on dataset directories")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, action="append", help="dataset dir (repeatable)")
    e.add_argument("--task", choices=["segmentation", "localization"], default="segmentation")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="directory for report JSON, per-sample CSV and figures")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except RoundTimeout as e:
        log.error("timeout: %s", e)
        print(f"fedseg: timeout: {e}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (ProtocolError, TransportError) as e:
        print(f"fedseg: protocol abort: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConfigError, ShapeError, AlignmentError, UsageError) as e:
        print(f"fedseg: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetIOError, FormatError, OSError) as e:
        print(f"fedseg: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
