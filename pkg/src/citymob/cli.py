"""``citymob`` command line: synth, preprocess, train, eval, baseline, compare, inspect-moe, export-emb.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import tomli_w

from . import config as C
from . import synth
from .data import DataError, load_corpus, write_splits
from .evaluation import (EvalReport, compare_joint_vs_separate, evaluate_model, expert_usage,
                         export_embeddings, linear_baseline, markov_baseline, write_expert_usage)
from .geo import OutOfBounds
from .model import DualTower
from .train import (CheckpointError, NumericalError, corpus_digest, load_checkpoint,
                    save_checkpoint, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, corpus=True, checkpoint=False, out=True):
    p.add_argument("--config", help="flat TOML run config (unknown keys rejected)")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    if corpus:
        p.add_argument("--corpus", required=True, help="corpus directory (one sub-directory per city)")
        p.add_argument("--city", action="append", help="restrict to this city; repeatable")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    if out:
        p.add_argument("--out", help="output directory (default: runs/<command>-seed<seed>)")


def build_parser():
    p = _Parser(prog="citymob", description=__doc__,
                epilog="config keys:\n" + C.describe(),
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic multi-city corpus")
    s.add_argument("--spec", help="synth TOML spec (default: built-in 3-city spec)")
    s.add_argument("--seed", type=int, help="generator seed (overrides the spec)")
    s.add_argument("--out", required=True, help="output corpus directory")

    s = sub.add_parser("preprocess", help="window and split raw trajectories")
    _common(s)

    s = sub.add_parser("train", help="joint training on every city of a corpus")
    _common(s)
    s.add_argument("--init-only", action="store_true",
                   help="write the freshly initialized model as checkpoint and stop")

    s = sub.add_parser("eval", help="Acc@k report of a checkpoint")
    _common(s, checkpoint=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"],
                   help="split to evaluate (default: test)")

    s = sub.add_parser("baseline", help="Markov or linear baseline report")
    s.add_argument("kind", choices=["markov", "linear"], help="baseline to fit on the train split")
    _common(s)
    s.add_argument("--split", default="test", choices=["val", "test"],
                   help="split to evaluate (default: test)")

    s = sub.add_parser("compare", help="joint vs per-city training")
    _common(s)

    s = sub.add_parser("inspect-moe", help="mean gate weight per layer, city and expert")
    _common(s, checkpoint=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test"],
                   help="split whose REAL tokens are averaged (default: test)")

    s = sub.add_parser("export-emb", help="export pre/post DCN location embeddings")
    _common(s, checkpoint=True)
    return p


def _resolve(args) -> dict:
    over = C.parse_overrides(args.set)
    if args.seed is not None:
        over["seed"] = args.seed
    return C.resolve(args.config, over)


def _out(args, cfg=None) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}-seed{cfg['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        C.dump(cfg, out / "config.resolved.toml")
    return out


def _corpus(args, cfg):
    return load_corpus(args.corpus, cfg["window_days"], cfg["min_points"], cfg["max_seq_len"],
                       cfg["split_seed"], args.city)


def _load(args, cfg):
    # an explicit model config must hash-match the checkpoint; otherwise the manifest decides
    model_cfg = C.model_config(cfg) if args.config or args.set else None
    return load_checkpoint(args.checkpoint, model_cfg).model


def cmd_synth(args):
    spec = synth.load_spec(args.spec, args.seed) if args.spec else synth.default_spec(args.seed or 0)
    res = synth.generate(spec)
    out = Path(args.out)
    synth.write_corpus(res, out)
    with open(out / "synth.resolved.toml", "wb") as fh:
        tomli_w.dump(synth.spec_to_dict(spec), fh)
    for name, co in res.cities.items():
        print(f"{name}: {len(co.table)} locations, {len(co.trajectories)} users")


def cmd_preprocess(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    out = _out(args, cfg)
    write_splits(corpus, out)
    for cid, cd in corpus.cities.items():
        print(f"{cid}: train {len(cd.train)} val {len(cd.val)} test {len(cd.test)}")


def cmd_train(args):
    cfg = _resolve(args)
    mcfg, tcfg = C.model_config(cfg), C.train_config(cfg)
    corpus = _corpus(args, cfg)
    out = _out(args, cfg)
    model = DualTower(mcfg, tcfg.seed)
    if args.init_only:
        save_checkpoint(out / "checkpoint.bin", model, None, 0, corpus_digest(corpus))
        print(f"wrote untrained checkpoint to {out / 'checkpoint.bin'}")
        return
    res = train_loop(model, corpus, tcfg, log_path=out / "metrics.csv",
                     checkpoint_path=out / "checkpoint.bin")
    print(f"best epoch {res.best_epoch} of {res.epochs_run}, val loss {res.best_val:.4f}")


def cmd_eval(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    model = _load(args, cfg)
    out = _out(args, cfg)
    report = evaluate_model(model, corpus, args.split)
    report.provenance = {"checkpoint": str(args.checkpoint), "split": args.split,
                         "config_sha256": model.cfg.digest().hex()}
    report.write_csv(out / "report.csv", split=args.split)
    (out / "report.txt").write_text(report.text() + "\n")
    print(report.text())


def cmd_baseline(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    out = _out(args, cfg)
    report = EvalReport(provenance={"baseline": args.kind, "split": args.split})
    for cid, cd in corpus.cities.items():
        test = cd.split(args.split)
        if args.kind == "markov":
            markov_baseline(cd.train, test, cd.table, cid, report)
        else:
            linear_baseline(cd.train, test, cd.table, cid, seed=cfg["seed"], lr=cfg["linear_lr"],
                            epochs=cfg["linear_epochs"], report=report)
    report.add_overall(args.kind)
    report.write_csv(out / f"baseline_{args.kind}.csv", method=args.kind, split=args.split)
    (out / f"baseline_{args.kind}.txt").write_text(report.text() + "\n")
    print(report.text())


def cmd_compare(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    out = _out(args, cfg)
    res = compare_joint_vs_separate(corpus, C.model_config(cfg), C.train_config(cfg),
                                    cfg["compare_seeds"])
    res.write(out)
    (out / "compare.txt").write_text(res.text() + "\n")
    print(res.text())


def cmd_inspect_moe(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    model = _load(args, cfg)
    out = _out(args, cfg)
    rows = expert_usage(model, corpus, args.split)
    write_expert_usage(out / "expert_usage.csv", rows)
    print(f"wrote {len(rows)} rows to {out / 'expert_usage.csv'}")


def cmd_export_emb(args):
    cfg = _resolve(args)
    corpus = _corpus(args, cfg)
    model = _load(args, cfg)
    out = _out(args, cfg)
    for p in export_embeddings(model, corpus, out):
        print(p)


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "baseline": cmd_baseline, "compare": cmd_compare, "inspect-moe": cmd_inspect_moe,
    "export-emb": cmd_export_emb,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (C.ConfigError, synth.SynthError, UsageError) as e:
        print(f"citymob: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"citymob: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OutOfBounds, FileNotFoundError, OSError, ValueError) as e:
        print(f"citymob: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
