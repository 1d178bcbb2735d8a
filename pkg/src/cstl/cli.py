"""Command-line entry point: ``cstl <subcommand> [flags]``.

Failures print one line ``ERROR <code>: <message>`` on stderr.  Exit status:
2 for usage errors, 3 for IO failures, 4 for numerical failures, 1 for any
other invalid input.
"""
from __future__ import annotations

import argparse
import contextlib
import io
import logging
import sys
from dataclasses import fields
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class CLIError(Exception):
    def __init__(self, code, message, status):
        super().__init__(message)
        self.code, self.status = code, status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"ERROR usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


GRADCHECK_GROUPS = ("numkernel", "backbone", "mste", "ata", "ssfl", "head", "losses", "pipeline")

# flags that override config-file keys for ``train``
_TRAIN_OVERRIDES = {
    "iterations": int, "lr": float, "seed": int, "p": int, "k": int, "frames": int,
    "parts": int, "heads": int, "embed_dim": int, "local_variant": str, "profile": str,
    "checkpoint_every": int, "log_every": int,
}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cstl", description="Silhouette gait recognition toolkit.")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads (1 = deterministic)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic silhouette dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, required=True)
    g.add_argument("--seqs", type=int, required=True, help="sequences per identity and condition")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--views", type=_int_list, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--conditions", type=_str_list, default=("NM",))
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=44)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key = value file; flags override it")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    for key, typ in _TRAIN_OVERRIDES.items():
        t.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    t.add_argument("--scales", type=_str_list, default=None)
    t.add_argument("--train-views", type=_int_list, default=None)
    t.add_argument("--train-first-seqs", type=int, default=None)

    e = sub.add_parser("eval", help="rank-k evaluation")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--exclude-identical-view", action="store_true")
    e.add_argument("--scenario", default=None, help="unseen:TRAIN_VIEWS:TEST_VIEWS or mixed:DELTA")
    e.add_argument("--gallery-condition", default="NM")
    e.add_argument("--gallery-count", type=int, default=4)
    e.add_argument("--ks", type=_int_list, default=(1, 5, 10, 20))
    e.add_argument("--out", default=None, help="report CSV path (default: stdout)")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--module", default=None, choices=GRADCHECK_GROUPS,
                    help="one op group, or 'pipeline' for the assembled network")
    gc.add_argument("--seed", type=int, default=0)

    em = sub.add_parser("embed", help="export embeddings")
    em.add_argument("--data", required=True)
    em.add_argument("--ckpt", required=True)
    em.add_argument("--out", required=True)

    pl = sub.add_parser("plot", help="render a metrics CSV as SVG")
    pl.add_argument("--metrics", required=True)
    pl.add_argument("--out", required=True)
    return ap


def _print_config(pairs, stream):
    for k, v in pairs:
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        print(f"# {k} = {v}", file=stream)


def _load_data(path):
    from .data import DatasetError, load_dataset, load_sequences
    try:
        index = load_dataset(path)
        return load_sequences(index)
    except DatasetError as exc:
        raise CLIError("io", f"{path}: {len(exc.errors)} unreadable file(s); first: {exc.errors[0]}", EXIT_IO)
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        raise CLIError("io", str(exc), EXIT_IO)


def _load_net(path):
    from .trainer import load_checkpoint
    try:
        net, _ = load_checkpoint(path)
    except (OSError, KeyError) as exc:
        raise CLIError("io", f"cannot load checkpoint {path}: {exc}", EXIT_IO)
    except ValueError as exc:
        raise CLIError("io", str(exc), EXIT_IO)
    return net


def cmd_gen_data(args, out):
    from .data import SyntheticSpec, generate_synthetic
    spec = SyntheticSpec(num_ids=args.ids, seqs_per_id=args.seqs, frames=args.frames,
                         views=args.views, conditions=args.conditions, seed=args.seed,
                         height=args.height, width=args.width)
    _print_config([(f.name, getattr(spec, f.name)) for f in fields(spec)
                   if f.name not in ("identity_params", "seqs_per_condition")], out)
    index = generate_synthetic(spec, args.out)
    print(f"wrote {len(index)} sequences to {args.out}", file=out)


def cmd_train(args, out):
    from .trainer import (NumericalError, TrainConfig, format_config, parse_config_text,
                          select_training, train)
    cfg = TrainConfig()
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise CLIError("io", f"cannot read config: {exc}", EXIT_IO)
        cfg = parse_config_text(text)
    over = {k: getattr(args, k) for k in _TRAIN_OVERRIDES if getattr(args, k) is not None}
    for k in ("scales", "train_views", "train_first_seqs"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    out_dir = Path(args.out)
    over["checkpoint_dir"] = str(out_dir)
    cfg = cfg.replace(**over)
    _print_config([(f.name, getattr(cfg, f.name)) for f in fields(cfg)], out)

    seqs = select_training(_load_data(args.data), cfg.train_views, cfg.train_first_seqs)
    if not seqs:
        raise CLIError("invalid", "no training sequences after filtering", EXIT_INVALID)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    try:
        res = train(cfg, seqs, resume=args.resume, metrics_path=str(out_dir / "metrics.csv"))
    except NumericalError as exc:
        raise CLIError("numeric", str(exc), EXIT_NUMERIC)
    last = res.history[-1] if res.history else None
    if last:
        print(f"final iter {last[0]} total {last[1]:.6g} tri {last[2]:.6g} ce {last[3]:.6g}", file=out)
    print(f"checkpoint {out_dir / 'checkpoint.ckpt'}", file=out)


def _parse_scenario(text):
    kind, _, rest = text.partition(":")
    if kind == "mixed":
        try:
            return "mixed_views", dict(delta=int(rest))
        except ValueError:
            raise CLIError("usage", f"bad mixed scenario {text!r}; expected mixed:DELTA", EXIT_USAGE) from None
    if kind == "unseen":
        parts = rest.split(":")
        if len(parts) != 2:
            raise CLIError("usage", f"bad unseen scenario {text!r}; expected unseen:TRAIN:TEST", EXIT_USAGE)
        try:
            return "unseen_views", dict(train_views=_int_list(parts[0]), test_views=_int_list(parts[1]))
        except argparse.ArgumentTypeError as exc:
            raise CLIError("usage", str(exc), EXIT_USAGE) from None
    raise CLIError("usage", f"unknown scenario {text!r}", EXIT_USAGE)


def cmd_eval(args, out):
    from .evaluation import embed_sequences, protocol_split, rank_k_eval, scenario_eval
    scenario = _parse_scenario(args.scenario) if args.scenario else None
    _print_config([("data", args.data), ("ckpt", args.ckpt),
                   ("exclude_identical_view", args.exclude_identical_view),
                   ("scenario", args.scenario), ("gallery_condition", args.gallery_condition),
                   ("gallery_count", args.gallery_count), ("ks", args.ks)], out)
    net = _load_net(args.ckpt)
    seqs = _load_data(args.data)
    if scenario is None:
        recs = embed_sequences(seqs, net)
        gallery, probe = protocol_split(recs, args.gallery_condition, args.gallery_count)
        report = rank_k_eval(gallery, probe, args.ks, args.exclude_identical_view)
    else:
        kind, kw = scenario
        report = scenario_eval(seqs, net, kind, gallery_condition=args.gallery_condition,
                               gallery_count=args.gallery_count, ks=args.ks,
                               exclude_identical_view=args.exclude_identical_view, **kw).report
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"rank-1 overall {report.overall(args.ks[0]):.4f}; report {args.out}", file=out)
    else:
        out.write(text)


def cmd_gradcheck(args, out):
    from .gradsuite import run_suite
    groups = None if args.module is None else [args.module]
    _print_config([("module", args.module or "all"), ("seed", args.seed), ("dtype", "float64")], out)
    res = run_suite(groups, seed=args.seed)
    for c in res.cases:
        print(f"{c.group:10s} {c.name:28s} {c.error:.3e} (tol {c.tol:.0e}) {'ok' if c.ok else 'FAIL'}", file=out)
    print(f"max relative error {res.max_error:.3e}", file=out)
    print(f"elapsed {res.seconds:.1f}s", file=out)
    if not res.ok:
        bad = [f"{c.group}.{c.name}" for c in res.cases if not c.ok]
        raise CLIError("numeric", f"gradient check failed: {', '.join(bad)}", EXIT_NUMERIC)


def cmd_embed(args, out):
    from .evaluation import embed_sequences, write_embeddings
    _print_config([("data", args.data), ("ckpt", args.ckpt), ("out", args.out)], out)
    net = _load_net(args.ckpt)
    recs = embed_sequences(_load_data(args.data), net)
    try:
        write_embeddings(args.out, recs)
    except OSError as exc:
        raise CLIError("io", str(exc), EXIT_IO)
    print(f"wrote {len(recs)} embeddings to {args.out}", file=out)


def cmd_plot(args, out):
    from .plot import plot_metrics
    _print_config([("metrics", args.metrics), ("out", args.out)], out)
    try:
        plot_metrics(args.metrics, args.out)
    except OSError as exc:
        raise CLIError("io", str(exc), EXIT_IO)
    print(f"wrote {args.out}", file=out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "embed": cmd_embed, "plot": cmd_plot}


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads is not None and args.threads < 1:
        print("ERROR usage: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, out)
    except CLIError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return exc.status
    except (OSError, io.UnsupportedOperation) as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"ERROR numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"ERROR invalid: {msg}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
