"""``ames`` command-line tool.

Every subcommand accepts ``--config FILE`` (``key = value`` lines, keys
named like the long flags) and ``--out DIR`` (default ``$AMES_OUTPUT_DIR``
or the current directory).  Flags override the config file.  On success one
JSON summary line is printed to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import codec, evaluation, retrieval, synthgen
from .model import load_params, save_params
from .store import encode_records, load_dataset, read_store, write_store

logger = logging.getLogger("ames")

OUTPUT_ENV = "AMES_OUTPUT_DIR"


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def int_list(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def int_pair(text: str) -> tuple[int, int]:
    vals = int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return vals[0], vals[1]


def float_list(text: str) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _labels(path) -> dict[int, int]:
    return {i: c for i, (c, _) in synthgen.read_labels(path).items()}


def _ground_truth(ids, labels: dict[int, int]) -> dict[int, set]:
    by_class: dict[int, set] = {}
    for i in ids:
        c = labels.get(int(i), -1)
        if c >= 0:
            by_class.setdefault(c, set()).add(int(i))
    gt = {}
    for i in ids:
        c = labels.get(int(i), -1)
        if c >= 0 and len(by_class[c]) > 1:
            gt[int(i)] = by_class[c] - {int(i)}
    return gt


def _query_ids(spec: str, store_ids, labels=None):
    if spec in ("all", "labeled"):
        if spec == "labeled":
            if labels is None:
                raise UsageError("--query labeled needs --labels")
            return list(_ground_truth(store_ids, labels))
        return [int(i) for i in store_ids]
    if spec.startswith("@"):
        return [int(x) for x in Path(spec[1:]).read_text().split()]
    return int_list(spec)


def _codebook(path):
    return codec.load_codebook(path) if path else None


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = synthgen.SynthConfig(
        classes=args.classes, images_per_class=args.images_per_class,
        distractors=args.distractors, dim=args.dim, l_max=args.l_max,
        planted_fraction=args.planted_fraction, noise=args.noise, seed=args.seed,
        val_fraction=args.val_fraction, split=args.split,
    )
    train, val, _ = synthgen.generate_dataset(cfg)
    out = _out_dir(args)
    for name, part in (("train", train), ("val", val)):
        header, recs = encode_records(part)
        write_store(recs, header, out / f"{name}.store")
    synthgen.write_labels(out / "labels.tsv", train, val)
    return {"train": len(train), "val": len(val), "out": str(out)}


def cmd_fit_codec(args):
    store = read_store(args.store)
    out = _out_dir(args)
    if args.kind == "pq":
        if store.header.global_encoding != "fp16":
            raise ValueError("PQ training needs fp16 globals")
        cb = codec.pq_train(store.global_payloads().astype(np.float64), args.sub_dim, seed=args.seed, iters=args.iters)
        path = out / (args.output or "codebook.bin")
        codec.save_codebook(cb, path)
        return {"kind": "pq", "sub_dim": args.sub_dim, "path": str(path)}
    data = load_dataset(store)
    fit = codec.itq_fit(data.locals.reshape(-1, data.local_dim), args.bits, iters=args.iters, seed=args.seed)
    cdc = codec.BinaryCodec(
        fit.weight, np.eye(args.bits), np.zeros(args.bits), np.ones(args.bits), np.zeros(args.bits),
        args.delta,
    )
    path = out / (args.output or "itq.bin")
    codec.save_codec(cdc, path)
    return {"kind": "itq", "bits": args.bits, "final_loss": fit.losses[-1], "path": str(path)}


def cmd_build_store(args):
    store = read_store(args.input)
    data = load_dataset(store)
    params = load_params(args.params) if args.params else None
    local = args.local or ("bin" if params is not None and params.variant == "bin" else "fp16")
    header, recs = encode_records(data, args.global_encoding, local, params, _codebook(args.codebook))
    path = _out_dir(args) / (args.output or "db.store")
    write_store(recs, header, path)
    return {"count": len(recs), "bytes": header.file_nbytes(), "path": str(path)}


def _train_setup(args):
    from .training import TrainConfig, initial_params

    data = load_dataset(read_store(args.train), _labels(args.labels))
    if args.init_codec and args.variant != "bin":
        raise UsageError("--init-codec only applies to --variant bin")
    params = initial_params(
        data, args.variant, dim=args.dim, depth=args.depth, heads=args.heads,
        delta=args.delta, seed=args.seed,
    )
    if args.init_codec:
        cdc = codec.load_codec(args.init_codec)
        tensors = dict(params.tensors)
        tensors["bin.weight"] = cdc.weight
        params = params.with_tensors(tensors)
    config = TrainConfig(
        epochs=args.epochs, batch_triplets=args.batch_triplets, lr0=args.lr,
        weight_decay=args.weight_decay, beta=getattr(args, "beta", 0.0),
        length_range=args.length_range, seed=args.seed, max_steps=args.max_steps,
        precision=args.precision,
    )
    return data, params, config


def _run_fit(args, distill=None):
    from .training import TrainingDiverged, fit
    from .training.fit import write_log

    data, params, config = _train_setup(args)
    out = _out_dir(args)
    path = out / (args.output or "params.bin")
    try:
        res = fit(data, config, params, distill)
    except TrainingDiverged as exc:
        save_params(exc.last_good, out / "last_good.bin")
        write_log(exc.log, out / "train_log.tsv")
        raise
    save_params(res.params, path)
    write_log(res.log, out / "train_log.tsv")
    return {"steps": len(res.log), "final_bce": res.log[-1].loss_bce if res.log else None, "path": str(path)}


def cmd_train(args):
    return _run_fit(args)


def cmd_distill(args):
    from .training import DistillationSetup

    teacher = load_params(args.teacher)
    setup = DistillationSetup(teacher, args.mode, args.teacher_lengths)
    return _run_fit(args, setup)


def _database(args):
    params = load_params(args.params)
    return retrieval.Database(read_store(args.store), params, _codebook(args.codebook))


def cmd_tune(args):
    db = _database(args)
    labels = _labels(args.labels)
    queries = _query_ids(args.query, db.ids, labels)
    gt = _ground_truth(db.ids, labels)
    res = retrieval.tune_ensemble(
        db, queries, gt, m=args.m, l_x=args.lx, l_q=args.lq,
        lam_grid=args.lambdas, gamma_grid=args.gammas, k=args.k,
    )
    out = _out_dir(args)
    lines = ["lambda\tgamma\tmap"]
    for a, lam in enumerate(res.lam_grid):
        for b, gam in enumerate(res.gamma_grid):
            lines.append(f"{lam:g}\t{gam:g}\t{res.grid[a, b]:.9f}")
    (out / "tune_grid.tsv").write_text("\n".join(lines) + "\n")
    return {"lambda": res.lam, "gamma": res.gamma, f"map@{args.k}": res.best, "cells": int(res.grid.size)}


def cmd_rank(args):
    db = _database(args)
    labels = _labels(args.labels) if args.labels else None
    queries = _query_ids(args.query, db.ids, labels)
    cfg = retrieval.EnsembleConfig(args.lam, args.gamma, args.m, args.lx, args.lq)
    qdb = db
    if args.query_store:
        qdb = retrieval.Database(read_store(args.query_store), db.params, db.codebook)
    rankings, warned = {}, set()
    for qid in queries:
        q = qdb.query(qid, cfg.l_q)
        rankings[qid] = retrieval.rerank(q, db, cfg, exclude=() if args.keep_self else (qid,), warned=warned)
    path = _out_dir(args) / (args.output or "rankings.tsv")
    retrieval.write_rankings(rankings, path, compact=args.compact)
    return {"queries": len(rankings), "m": cfg.m, "path": str(path)}


def cmd_eval(args):
    rankings = retrieval.read_rankings(args.rankings)
    labels = _labels(args.labels)
    ids = set(labels)
    gt = {q: pos for q, pos in _ground_truth(list(ids), labels).items()}
    if args.db_ids:
        allowed = set(int_list(Path(args.db_ids).read_text().replace("\n", ",")))
    else:
        # positives outside the ranked database cannot be retrieved
        allowed = set().union(*map(set, rankings.values())) if rankings else set()
    gt = {q: pos & allowed for q, pos in gt.items()}
    gt = {q: gt.get(q, set()) for q in rankings}
    if args.k:
        value = evaluation.map_at_k(rankings, gt, args.k)
        name = f"map@{args.k}"
    else:
        value = evaluation.mean_average_precision(rankings, gt, mode=args.mode)
        name = f"map_{args.mode}"
    report = evaluation.write_report([(Path(args.rankings).stem, name, value, args.tag)],
                                     _out_dir(args) / "report.tsv")
    logger.debug(report)
    return {name: value}


def cmd_tradeoff(args):
    rows = evaluation.tradeoff_rows(args.lx, args.global_encoding, args.local, args.d, args.d_g)
    text = evaluation.export_tradeoff(rows, variant=args.variant or f"{args.global_encoding}+{args.local}")
    path = _out_dir(args) / (args.output or "tradeoff.csv")
    path.write_text(text)
    return {"rows": len(rows), "kb": [r[1] for r in rows], "path": str(path)}


# ----------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="worker count (computation is single-threaded)")
    p.add_argument("--output", help="output file name inside --out")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_options(p):
    p.add_argument("--train", help="raw fp16 training store")
    p.add_argument("--labels", help="labels file (image_id, class_id, split)")
    p.add_argument("--variant", choices=("fp", "bin"), default="fp")
    p.add_argument("--dim", type=int, default=128, help="token dim d")
    p.add_argument("--depth", type=int, default=5, help="number of blocks N")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--delta", type=float, default=codec.DEFAULT_DELTA, help="binarization variance")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--batch-triplets", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--length-range", type=int_pair, default=(10, 400), metavar="LO,HI")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--init-codec", help="ITQ codec from fit-codec (binary variant)")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64",
                   help="arithmetic of forward/backward passes")


def _search_options(p):
    p.add_argument("--store")
    p.add_argument("--params")
    p.add_argument("--codebook", help="PQ codebook for pq-encoded globals")
    p.add_argument("--labels")
    p.add_argument("--m", type=int, default=1600, help="re-rank depth")
    p.add_argument("--lx", type=int, default=600, help="database descriptors per image")
    p.add_argument("--lq", type=int, default=600, help="query descriptors")
    p.add_argument("--query", default="labeled", help="ids a,b,c | @file | all | labeled")


REQUIRED = {
    "fit-codec": ("store",),
    "build-store": ("input",),
    "train": ("train", "labels"),
    "distill": ("train", "labels", "teacher"),
    "tune": ("store", "params", "labels"),
    "rank": ("store", "params"),
    "eval": ("rankings", "labels"),
    "tradeoff": ("lx",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ames", description="Descriptor-set similarity for image retrieval.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    d = synthgen.SynthConfig()
    p.add_argument("--classes", type=int, default=d.classes)
    p.add_argument("--images-per-class", type=int, default=d.images_per_class)
    p.add_argument("--distractors", type=int, default=d.distractors)
    p.add_argument("--dim", type=int, default=d.dim, help="raw descriptor dim D")
    p.add_argument("--l-max", type=int, default=d.l_max)
    p.add_argument("--planted-fraction", type=float, default=d.planted_fraction)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--val-fraction", type=float, default=d.val_fraction)
    p.add_argument("--split", choices=("images", "classes"), default=d.split)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-codec", help="fit an ITQ binary codec or a PQ codebook")
    _common(p)
    p.add_argument("--store")
    p.add_argument("--kind", choices=("itq", "pq"), default="itq")
    p.add_argument("--bits", type=int, default=128)
    p.add_argument("--sub-dim", type=int, default=8, help="PQ sub-vector dim (1, 4 or 8)")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--delta", type=float, default=codec.DEFAULT_DELTA)
    p.set_defaults(func=cmd_fit_codec)

    p = sub.add_parser("build-store", help="encode a raw store for search")
    _common(p)
    p.add_argument("--input")
    p.add_argument("--params", help="model whose codec encodes the locals")
    p.add_argument("--global", dest="global_encoding", choices=evaluation.GLOBAL_MODES, default="fp16")
    p.add_argument("--local", choices=evaluation.LOCAL_MODES)
    p.add_argument("--codebook")
    p.set_defaults(func=cmd_build_store)

    p = sub.add_parser("train", help="supervised training")
    _common(p)
    _model_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="training guided by a frozen teacher")
    _common(p)
    _model_options(p)
    p.add_argument("--teacher")
    p.add_argument("--mode", choices=("tokens", "scores"), default="tokens")
    p.add_argument("--beta", type=float, default=10.0)
    p.add_argument("--teacher-lengths", type=int_pair, metavar="LX,LQ")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("tune", help="grid-search lambda and gamma")
    _common(p)
    _search_options(p)
    p.set_defaults(m=400)
    p.add_argument("--lambdas", type=float_list, default=list(retrieval.LAMBDA_GRID))
    p.add_argument("--gammas", type=float_list, default=list(retrieval.GAMMA_GRID))
    p.add_argument("--k", type=int, default=100)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("rank", help="global ranking plus ensemble re-ranking")
    _common(p)
    _search_options(p)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--query-store", help="take queries from another store")
    p.add_argument("--keep-self", action="store_true", help="do not drop the query id from its ranking")
    p.add_argument("--compact", action="store_true", help="ordered ids only")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="mAP of a ranking file")
    _common(p)
    p.add_argument("--rankings")
    p.add_argument("--labels")
    p.add_argument("--mode", choices=("standard", "trapezoid"), default="standard")
    p.add_argument("--k", type=int, help="report mAP@k instead of full mAP")
    p.add_argument("--db-ids", help="file of database ids restricting the positives (default: ids present in the rankings)")
    p.add_argument("--tag", default="-", help="config tag for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tradeoff", help="memory per image over a sweep of L_x")
    _common(p)
    p.add_argument("--lx", type=int_list)
    p.add_argument("--global", dest="global_encoding", choices=evaluation.GLOBAL_MODES, default="pq8")
    p.add_argument("--local", choices=evaluation.LOCAL_MODES, default="bin")
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--d-g", type=int, default=2048)
    p.add_argument("--variant", help="label for the variant column")
    p.set_defaults(func=cmd_tradeoff)
    return parser


def _apply_config(parser, argv):
    """Re-parse with config-file values as defaults so flags win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        # keys may name either the flag (``global``) or its destination
        known = {a.dest: a for a in sub._actions}
        for a in sub._actions:
            for opt in a.option_strings:
                if opt.startswith("--"):
                    known.setdefault(opt[2:].replace("-", "_"), a)
        defaults = {}
        for key, raw in cfg.items():
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            if action.type is not None:
                defaults[action.dest] = action.type(raw)
            elif isinstance(action, argparse._StoreTrueAction):
                defaults[action.dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[action.dest] = raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, argparse.ArgumentTypeError, ValueError) as exc:
        print(f"ames: error: {exc}", file=sys.stderr)
        return 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k, None) in (None, [])]
    if missing:
        print(f"ames {args.command}: missing required option(s): "
              + ", ".join("--" + m.replace("_", "-") for m in missing), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except UsageError as exc:
        print(f"ames {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"ames {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "status": "ok", **summary}, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


if __name__ == "__main__":
    sys.exit(main())
