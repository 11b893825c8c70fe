"""Command-line entry point: ``msgdas {search,derive,inspect,eval,selftest}``.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from ..errors import MsgdasError
from ..searchspace import Genotype, count_skip_connect, derive_genotype
from .config import SearchConfig, apply_overrides
from .data import gen_synthetic, split_half

log = logging.getLogger("msgdas")


class UsageError(Exception):
    pass


def _section(title: str) -> None:
    print(f"===== {title} =====")


def _base_config(args) -> SearchConfig:
    if getattr(args, "config", None):
        cfg = SearchConfig.load(args.config)
    else:
        cfg = SearchConfig.full() if getattr(args, "profile", "desk") == "full" else SearchConfig.desk()
    return apply_overrides(cfg, seed=args.seed, k=getattr(args, "k", None), epochs=getattr(args, "epochs", None),
                           dataset=getattr(args, "dataset", None), out=getattr(args, "out", None),
                           data_path=getattr(args, "data_path", None))


def _prepare_out(out: Path, force: bool, produced: tuple[str, ...]) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    clash = [name for name in produced if (out / name).exists()]
    if clash and not force:
        raise MsgdasError(f"{out} already holds {', '.join(clash)}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _print_skips(genotype: Genotype) -> None:
    skips = count_skip_connect(genotype)
    print(f"skip_connect normal={skips['normal']} reduce={skips['reduce']}")


SEARCH_OUTPUTS = ("config.toml", "metrics.csv", "checkpoint.npz", "genotype.json", "alpha.csv", "alpha.png",
                  "metrics.png")


def cmd_search(args) -> int:
    from ..engine import run_search
    from .report import alpha_csv, plot_alpha, plot_metrics

    cfg = _base_config(args)
    out = Path(cfg.out_dir)
    resume = None
    if args.resume:
        resume = out / "checkpoint.npz"
        if not resume.is_file():
            raise MsgdasError(f"--resume given but {resume} does not exist")
        out.mkdir(parents=True, exist_ok=True)
    else:
        _prepare_out(out, args.force, SEARCH_OUTPUTS)
    cfg.save(out / "config.toml")
    t0 = time.perf_counter()
    genotype, history = run_search(cfg, out_dir=out, resume=resume)
    genotype.save(out / "genotype.json")
    from ..engine import load_alpha
    alpha = load_alpha(out / "checkpoint.npz")
    (out / "alpha.csv").write_text(alpha_csv(alpha))
    plot_alpha(alpha, out / "alpha.png")
    plot_metrics(history, out / "metrics.png")
    _section("search")
    print(f"epochs={len(history)} k={cfg.search.k} seed={cfg.search.seed} seconds={time.perf_counter() - t0:.1f}")
    if history:
        last = history[-1]
        print(f"final train_loss={last['train_loss']:.4f} val_loss={last['val_loss']:.4f} "
              f"val_acc={last['val_acc']:.4f}")
    _section("genotype")
    print(genotype.to_json())
    _print_skips(genotype)
    _section("files")
    for name in SEARCH_OUTPUTS:
        print(out / name)
    return 0


def cmd_derive(args) -> int:
    from ..engine import load_alpha

    genotype = derive_genotype(load_alpha(args.checkpoint))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _prepare_out(out, args.force, ("genotype.json",))
    genotype.save(out / "genotype.json")
    _section("genotype")
    print(genotype.to_json())
    _print_skips(genotype)
    _section("files")
    print(out / "genotype.json")
    return 0


def cmd_inspect(args) -> int:
    from ..engine import load_alpha
    from .report import alpha_csv, alpha_text, plot_alpha

    alpha = load_alpha(args.checkpoint)
    genotype = derive_genotype(alpha)
    _section("skip-connect")
    _print_skips(genotype)
    _section("alpha softmax")
    print(alpha_csv(alpha) if args.format == "csv" else alpha_text(alpha), end="\n" if args.format != "csv" else "")
    if args.out:
        out = Path(args.out)
        _prepare_out(out, args.force, ("alpha.png", "alpha.csv"))
        (out / "alpha.csv").write_text(alpha_csv(alpha))
        plot_alpha(alpha, out / "alpha.png")
        _section("files")
        print(out / "alpha.csv")
        print(out / "alpha.png")
    return 0


def cmd_eval(args) -> int:
    from ..engine import train_genotype
    from ..searchspace import NetworkSpec

    cfg = _base_config(args)
    if cfg.data.dataset != "synthetic":
        raise MsgdasError("eval trains on the synthetic set only")
    genotype = Genotype.load(args.genotype)
    seed = cfg.search.seed
    ds = gen_synthetic(cfg.eval.synthetic_n, cfg.data.synthetic_classes, cfg.data.synthetic_hw, seed)
    train, val = split_half(ds, seed)
    spec = NetworkSpec(cfg.network.num_cells, cfg.network.init_channels, ds.num_classes, ds.images.shape[1])
    epochs = args.eval_epochs if args.eval_epochs is not None else cfg.eval.epochs
    result = train_genotype(genotype, train, val, spec, epochs, cfg.eval.batch_size, cfg.eval.lr, seed)
    _section("eval")
    for row in result["history"]:
        print(f"epoch {row['epoch']} train_loss={row['train_loss']:.4f}")
    print(f"val_acc={result['val_acc']:.4f}")
    if args.out:
        out = Path(args.out)
        _prepare_out(out, args.force, ("eval.json",))
        (out / "eval.json").write_text(json.dumps(result, indent=2))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    _section("selftest")
    results = run_selftest()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--profile", choices=("desk", "full"), default="desk",
                     help="built-in defaults used when --config is absent")
    run.add_argument("--k", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--dataset", choices=("synthetic", "cifar10"))
    run.add_argument("--data-path", help="directory holding the CIFAR-10 binary batches")

    p = _Parser(prog="msgdas", description="Multi-sub-graph differentiable architecture search.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("search", parents=[common, run], help="run a search and write its artifacts")
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
    s.set_defaults(func=cmd_search)
    d = sub.add_parser("derive", parents=[common], help="derive genotype.json from a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.set_defaults(func=cmd_derive)
    i = sub.add_parser("inspect", parents=[common], help="print skip-connect counts and alpha tables")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--format", choices=("text", "csv"), default="text")
    i.set_defaults(func=cmd_inspect)
    e = sub.add_parser("eval", parents=[common, run], help="train a genotype from scratch on synthetic data")
    e.add_argument("--genotype", required=True)
    e.add_argument("--eval-epochs", type=int)
    e.set_defaults(func=cmd_eval)
    t = sub.add_parser("selftest", parents=[common], help="sampler distribution suite and gradient checks")
    t.set_defaults(func=cmd_selftest)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"msgdas: usage error: {exc}", file=sys.stderr)
        return 2
    except (MsgdasError, OSError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"msgdas: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
