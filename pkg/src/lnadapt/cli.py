"""``lnadapt`` command line: corpus generation, SD training, adaptation,
evaluation and the experiment sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import configparser
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .adapters import AdapterKind, param_count
from .corpus import MANIFEST_NAME, load_corpus, make_speaker, save_corpus, synthesize_corpus
from .errors import ConfigError, LnAdaptError, StateError
from .metrics import CSV_HEADER
from .model import DEFAULT_POLICY, ModelConfig, load_model, save_model
from .sweep import ExperimentConfig, run_sweep, select_adaptation_ids
from .training import ADAPT_DEFAULTS, SD_DEFAULTS, TrainConfig, adapt, evaluate, train_sd

log = logging.getLogger("lnadapt")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
METHODS = {"ol": None, "full-ln": "full", "lrpd-ln": "lrpd"}
SYSTEM_NAMES = {"ol": "OL", "full-ln": "OL+Full-LN", "lrpd-ln": "OL+LRPD-LN"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _setup_logging():
    name = os.environ.get("LNADAPT_LOG", "info").strip().lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("lnadapt")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    if name not in LOG_LEVELS:
        log.warning("unknown LNADAPT_LOG=%r, using info", name)


def _global_flags(parser, suppress):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--config", default=d(None), help="INI config file")
    parser.add_argument("--out", default=d(None), help="output path")
    parser.add_argument("--force", action="store_true", default=d(False), help="overwrite existing output")
    parser.add_argument("--threads", type=int, default=d(1), help="worker processes for the sweep")


def _train_flags(parser, defaults):
    parser.add_argument("--epochs", type=int, default=None, help="training epochs (default 30)")
    parser.add_argument("--lr", type=float, default=None, help=f"learning rate (default {defaults['learning_rate']})")
    parser.add_argument("--lr-decay", type=float, default=None, help=f"per-epoch decay (default {defaults['lr_decay']})")
    parser.add_argument("--patience", type=int, default=None, help="early-stopping patience (default 10)")


def build_parser():
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    p = _Parser(prog="lnadapt", description="LN / LRPD adapter speaker adaptation on synthetic teacher speakers.")
    _global_flags(p, suppress=False)
    p.add_argument("--version", action="version", version=f"lnadapt {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", parents=[common], help="synthesize a teacher-speaker corpus")
    g.add_argument("--distance", type=float, required=True, help="speaker distance from the base teacher, in [0, 1]")
    g.add_argument("--n-utts", type=int, required=True, help="total utterances (train + valid + test)")
    g.add_argument("--corpus-seed", type=int, default=None, help="utterance seed (default: --seed)")
    g.add_argument("--n-valid", type=int, default=40)
    g.add_argument("--n-test", type=int, default=20)
    g.add_argument("--lf0-dims", type=int, choices=(1, 3), default=3)

    t = sub.add_parser("train-sd", parents=[common], help="train a speaker-dependent model")
    t.add_argument("--corpus", required=True, help="corpus directory")
    t.add_argument("--n-train", type=int, default=None, help="use only this many training utterances")
    t.add_argument("--record", default=None, help="training record CSV (default: <out>.csv)")
    _train_flags(t, SD_DEFAULTS)

    a = sub.add_parser("adapt", parents=[common], help="adapt a source model to a target corpus")
    a.add_argument("--source", required=True, help="source model (.ltm)")
    a.add_argument("--corpus", required=True, help="target corpus directory")
    a.add_argument("--method", choices=sorted(METHODS), required=True)
    a.add_argument("--rank", type=int, default=10, help="LRPD rank (default 10)")
    a.add_argument("--n-adapt", type=int, default=None, help="adaptation utterances (default: whole train split)")
    a.add_argument("--policy", default=",".join(DEFAULT_POLICY), help="comma-separated insertion positions")
    a.add_argument("--record", default=None, help="training record CSV (default: <out>.csv)")
    _train_flags(a, ADAPT_DEFAULTS)

    e = sub.add_parser("eval", parents=[common], help="objective measures of a model on a corpus split")
    e.add_argument("--model", default=None, help="model file (.ltm); not needed with --oracle")
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=("train", "valid", "test"), default="valid")
    e.add_argument("--oracle", action="store_true", help="score the references against themselves")
    e.add_argument("--system", default="model", help="system label for the CSV row")
    e.add_argument("--n-adapt", type=int, default=0, help="adaptation size label for the CSV row")

    sub.add_parser("sweep", parents=[common], help="run an experiment grid from --config")
    return p


def _finish_defaults(args):
    for k, v in (("seed", 0), ("config", None), ("out", None), ("force", False), ("threads", 1)):
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def _need_out(args):
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    return args.out


def _ini_section(path, section):
    if not path:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    return dict(cp.items(section)) if cp.has_section(section) else {}


def _model_config(args):
    sec = _ini_section(args.config, "model")
    kw = {}
    if "dense_width" in sec:
        kw["dense_width"] = int(sec["dense_width"])
    if "blstm_widths" in sec:
        kw["blstm_widths"] = tuple(int(x) for x in sec["blstm_widths"].split(",") if x.strip())
    return ModelConfig(**kw).validate()


def _train_config(args, defaults, prefix):
    sec = _ini_section(args.config, "train")
    lr = args.lr if args.lr is not None else float(sec.get(f"{prefix}_learning_rate", defaults["learning_rate"]))
    decay = args.lr_decay if args.lr_decay is not None else float(sec.get(f"{prefix}_lr_decay", defaults["lr_decay"]))
    epochs = args.epochs if args.epochs is not None else int(sec.get("epochs", 30))
    patience = args.patience if args.patience is not None else int(sec.get("patience", 10))
    clip = float(sec.get("clip_norm", 5.0))
    return TrainConfig(
        learning_rate=lr, epochs=epochs, lr_decay=decay, seed=args.seed, early_stop_patience=patience, clip_norm=clip
    )


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _record_path(args):
    if args.record:
        return args.record
    root, _ = os.path.splitext(args.out)
    return root + ".csv"


def _check_file_target(path, force):
    if os.path.exists(path) and not force:
        raise LnAdaptError(f"{path} exists; pass --force to overwrite")


def cmd_gen_corpus(args):
    out = _need_out(args)
    if os.path.isdir(out) and os.listdir(out):
        if not args.force:
            raise LnAdaptError(f"output directory {out} is not empty; pass --force to overwrite")
        if not os.path.exists(os.path.join(out, MANIFEST_NAME)):
            raise LnAdaptError(f"refusing to overwrite {out}: it does not look like a corpus directory")
        os.remove(os.path.join(out, MANIFEST_NAME))
        shutil.rmtree(os.path.join(out, "utt"), ignore_errors=True)
    elif os.path.exists(out) and not os.path.isdir(out):
        raise LnAdaptError(f"{out} exists and is not a directory")
    corpus_seed = args.seed if args.corpus_seed is None else args.corpus_seed
    spk = make_speaker(args.seed, args.distance)
    corpus = synthesize_corpus(spk, args.n_utts, corpus_seed, args.n_valid, args.n_test, args.lf0_dims)
    save_corpus(corpus, out)
    frames = sum(u.n_frames for u in corpus.utterances.values())
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    print(
        f"corpus {out}: speaker seed {args.seed} distance {args.distance!r}, corpus seed {corpus_seed}, "
        f"train {sizes['train']} valid {sizes['valid']} test {sizes['test']}, {frames} frames, "
        f"manifest sha256 {corpus.manifest_hash()}"
    )
    return 0


def cmd_train_sd(args):
    out = _need_out(args)
    _check_file_target(out, args.force)
    corpus = load_corpus(args.corpus)
    ids = None
    if args.n_train is not None:
        ids = corpus.splits["train"][: args.n_train]
    tcfg = _train_config(args, SD_DEFAULTS, "sd")
    model, rec = train_sd(_model_config(args), corpus, tcfg, train_ids=ids)
    model.norm_stats_ref = f"corpus:{corpus.manifest_hash()}"
    save_model(model, out)
    _write_text(_record_path(args), rec.to_csv())
    log.info(
        "SD model: %d parameters, selected epoch %d, valid MSE %.6f",
        model.param_count(),
        rec.selected_epoch,
        rec.valid_loss[rec.selected_epoch],
    )
    print(f"wrote {out}")
    return 0


def cmd_adapt(args):
    out = _need_out(args)
    _check_file_target(out, args.force)
    source = load_model(args.source)
    corpus = load_corpus(args.corpus)
    if args.method == "ol":
        kind = None
    elif args.method == "full-ln":
        kind = AdapterKind.full()
    else:
        kind = AdapterKind.lrpd(args.rank)
    policy = tuple(p.strip() for p in args.policy.split(",") if p.strip())
    ids = None
    if args.n_adapt is not None:
        ids = select_adaptation_ids(corpus.splits["train"], args.n_adapt, args.seed)
    tcfg = _train_config(args, ADAPT_DEFAULTS, "adapt")
    model, rec = adapt(source, corpus, kind, policy, tcfg, train_ids=ids)
    src_trunk = source.trunk_blocks()
    for name, arr in model.trunk_blocks().items():
        if not np.array_equal(arr, src_trunk[name]):
            raise StateError(f"trunk block {name} differs from the source model; not writing {out}")
    for b, a in sorted(model.adapters().items()):
        log.info(
            "slot %d: %s adapter width %d, %d parameters (%d trainable)",
            b,
            a.adapter_kind,
            a.width,
            param_count(a.adapter_kind, a.width),
            sum(v.size for v in a.params().values()),
        )
    model.norm_stats_ref = f"corpus:{corpus.manifest_hash()}"
    save_model(model, out)
    _write_text(_record_path(args), rec.to_csv())
    log.info("%s: selected epoch %d, valid MSE %.6f", SYSTEM_NAMES[args.method], rec.selected_epoch, rec.valid_loss[rec.selected_epoch])
    print(f"wrote {out}")
    return 0


def cmd_eval(args):
    corpus = load_corpus(args.corpus)
    if args.oracle:
        model = None
    elif not args.model:
        raise UsageError("eval requires --model unless --oracle is given")
    else:
        model = load_model(args.model)
    report = evaluate(model, corpus, args.split, oracle=args.oracle)
    row = report.csv_row(args.system, args.n_adapt)
    print(row)
    if args.out:
        new = not os.path.exists(args.out) or os.path.getsize(args.out) == 0
        with open(args.out, "a", encoding="utf-8", newline="\n") as f:
            if new:
                f.write(CSV_HEADER + "\n")
            f.write(row + "\n")
    return 0


def cmd_sweep(args):
    if not args.config:
        raise UsageError("sweep requires --config")
    out = _need_out(args)
    cfg = ExperimentConfig.load(args.config)
    if os.path.exists(os.path.join(out, "sweep.csv")) and not args.force:
        raise LnAdaptError(f"{out} already holds a sweep report; pass --force to overwrite")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")

    def progress(d, system, n, seed, result):
        rep, err = result
        msg = err or f"mse {rep.overall_mse:.4f}"
        log.info("distance %r %s n=%d seed=%d: %s", d, system, n, seed, msg)

    report = run_sweep(cfg, threads=args.threads, progress=progress)
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "sweep.csv"), report.to_csv())
    _write_text(os.path.join(out, "summary.md"), report.to_markdown())
    _write_text(os.path.join(out, "config.ini"), cfg.to_ini())
    for c in report.checks:
        print(c.line)
    print(f"wrote {os.path.join(out, 'sweep.csv')} and {os.path.join(out, 'summary.md')}")
    return 1 if report.failed else 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-sd": cmd_train_sd,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = _finish_defaults(parser.parse_args(argv))
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"lnadapt: error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"lnadapt: config error: {e}", file=sys.stderr)
        return 2
    except (LnAdaptError, OSError) as e:
        print(f"lnadapt: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
