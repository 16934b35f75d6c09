"""Command-line entry point: ``xmtc <command> [options]``.

Exit codes: 0 success, 1 verification failure, 2 input error.
Options may also come from ``--config FILE.json`` (keys are option names
with dashes or underscores); explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import SPLITS
from .dataset import PRESETS, ingest, load_dataset, save_dataset, stats_table
from .errors import XmtcError
from .evaluation import evaluate, score_prediction_file, train_precision_at_1
from .gradcheck import check_model_gradients
from .metrics import DEFAULT_A, DEFAULT_B, fit_propensities, metric_columns
from .model import PRESETS as ABLATIONS
from .model import ModelConfig, stack_label
from .teacher import build_all_teacher_knowledge, load_teacher_cache, save_teacher_cache, summarize
from .train import TrainConfig, load_checkpoint, train

log = logging.getLogger("xmtc")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json") if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, args: argparse.Namespace, inputs: dict, seed=None) -> dict:
    """Record the resolved configuration before any long computation starts."""
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": _digest(p)} for name, p in sorted(inputs.items()) if p},
        "seed": seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")
    return manifest


def _require(path, what):
    if path is None or not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return Path(path)


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in str(text).split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) <= 0:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _int_list(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _threads(n):
    return n if n and n > 0 else (os.cpu_count() or 1)


def model_config_from(args, d_model: int, num_labels: int, ablation=None) -> ModelConfig:
    if args.d_model is not None and args.d_model != d_model:
        raise XmtcError(f"--d-model {args.d_model} does not match embedding width {d_model}")
    return ModelConfig(
        d_model=d_model, num_labels=num_labels, h=args.h, d_bottleneck=args.d_bottleneck,
        max_text_len=args.max_text_len, max_teacher_rows=args.max_teacher_rows,
        ablation=args.ablation if ablation is None else ablation,
        fusion_attention=args.fusion_attention == "on", init_gain=args.init_gain, seed=args.seed,
    )


def train_config_from(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, decay=args.decay,
                       patience=args.patience, threshold=args.threshold, seed=args.seed,
                       shuffle=not args.no_shuffle, reduction=args.reduction)


def _early_model_check(args):
    # config errors (e.g. d_model % h) surface before any data is read
    if args.d_model is not None:
        ModelConfig(d_model=args.d_model, num_labels=1, h=args.h, ablation=args.ablation)
    elif args.h <= 0:
        raise XmtcError("h must be positive")


def _load_teachers(teacher_dir, split, needed: bool):
    if not needed:
        return None
    if teacher_dir is None:
        raise InputError("this ablation preset needs --teacher (a directory written by 'xmtc teacher')")
    stem = Path(teacher_dir) / f"teacher_{split}"
    if not stem.with_suffix(".tsv").exists():
        raise InputError(f"teacher cache for split '{split}' not found: {stem}.tsv")
    return load_teacher_cache(stem)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    if args.preset:
        max_tokens, desc_tokens = PRESETS[args.preset]
        args.max_tokens = args.max_tokens or max_tokens
        args.desc_tokens = args.desc_tokens or desc_tokens
    args.max_tokens = args.max_tokens or 500
    args.desc_tokens = args.desc_tokens or 4
    paths = {"train": _require(args.train, "train corpus")}
    if args.test:
        paths["test"] = _require(args.test, "test corpus")
    if args.validation:
        paths["validation"] = _require(args.validation, "validation corpus")
    inputs = dict(paths, hierarchy=_require(args.hierarchy, "hierarchy file"),
                  descriptions=_require(args.descriptions, "descriptions file"),
                  embeddings=_require(args.embeddings, "embeddings file"))
    out = Path(args.out)
    write_manifest(out, "ingest", args, inputs)
    ds = ingest(paths, inputs["embeddings"], inputs["hierarchy"], inputs["descriptions"], args.num_labels,
                args.max_tokens, args.desc_tokens, args.name or args.preset or "dataset")
    save_dataset(ds, out)
    print(stats_table(ds.stats()))
    return EXIT_OK


def cmd_teacher(args) -> int:
    if args.k <= 0:
        raise XmtcError(f"--k must be positive, got {args.k}")
    ds_dir = _require(args.dataset, "dataset directory")
    out = Path(args.out)
    write_manifest(out, "teacher", args, {"dataset": ds_dir})
    ds = load_dataset(ds_dir)
    pool = [ds.splits[s] for s in ("train", "validation") if s in ds.splits]
    summary = {}
    for split, corpus in ds.splits.items():
        teachers = build_all_teacher_knowledge(corpus, pool, ds.tree, ds.table, args.k, not args.no_exclude_self,
                                               args.include_roots, args.teacher_pool, _threads(args.threads))
        save_teacher_cache(teachers, out / f"teacher_{split}")
        summary[split] = summarize(teachers)
    settings = {"k": args.k, "exclude_self": not args.no_exclude_self, "include_roots": args.include_roots,
                "teacher_pool": args.teacher_pool, "pool": [c.split for c in pool]}
    (out / "teacher.json").write_text(json.dumps({"settings": settings, "summary": summary}, indent=2,
                                                 sort_keys=True) + "\n", encoding="utf-8")
    print(f"{'split':<12} {'examples':>8} {'mean |SET|':>11} {'mean rows':>10} {'empty':>6}")
    for split, s in summary.items():
        print(f"{split:<12} {s['examples']:>8} {s['mean_label_set_size']:>11.2f} {s['mean_rows']:>10.2f} "
              f"{s['empty_teachers']:>6}")
    return EXIT_OK


def _run_training(args, ds, out: Path, ablation=None):
    config = model_config_from(args, ds.table.d_model, ds.num_labels, ablation)
    tconfig = train_config_from(args)
    teachers = _load_teachers(args.teacher, "train", config.ablation_config.use_teacher)
    evaluate_fn = None
    if "validation" in ds.splits:
        val = ds.splits["validation"]
        val_teachers = _load_teachers(args.teacher, "validation", config.ablation_config.use_teacher)
        prop = fit_propensities(ds.splits["train"])

        def validate(params):
            rep = evaluate(params, config, val, val_teachers, ds.table, prop, (1, 3, 5))
            return {f"val_{k}": v for k, v in rep.metrics.items() if k.startswith("P@")}

        evaluate_fn = validate

    def progress(rec):
        log.info("epoch %d  loss %.6f  lr %.3g", rec["epoch"], rec["mean_loss"], rec["lr"])

    result = train(ds.splits["train"], teachers, ds.table, config, tconfig, run_dir=out,
                   threads=_threads(args.threads), on_epoch=progress, evaluate_fn=evaluate_fn)
    return config, teachers, result


def cmd_train(args) -> int:
    _early_model_check(args)
    ds_dir = _require(args.dataset, "dataset directory")
    out = Path(args.out)
    write_manifest(out, "train", args, {"dataset": ds_dir, "teacher": args.teacher}, seed=args.seed)
    ds = load_dataset(ds_dir)
    config, teachers, result = _run_training(args, ds, out)
    final = result.history[-1]
    p1 = train_precision_at_1(result.params, config, ds.splits["train"], teachers, ds.table)
    print(f"trained {final['epoch']} epochs: mean loss {final['mean_loss']:.6f}, lr {final['lr']:.3g}, "
          f"train P@1 {p1:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return EXIT_OK


def _write_report(report, out, title):
    text = report.to_table(title)
    print(text)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n",
                                         encoding="utf-8")


def cmd_eval(args) -> int:
    ds_dir = _require(args.dataset, "dataset directory")
    inputs = {"dataset": ds_dir, "checkpoint": args.checkpoint, "teacher": args.teacher, "score_file": args.score_file}
    if args.out:
        write_manifest(Path(args.out), "eval", args, inputs)
    ds = load_dataset(ds_dir)
    if args.split not in ds.splits:
        raise InputError(f"dataset has no '{args.split}' split")
    corpus = ds.splits[args.split]
    prop = fit_propensities(ds.splits["train"], args.prop_a, args.prop_b)
    if args.score_file:
        report = score_prediction_file(_require(args.score_file, "prediction file"), corpus, prop, args.ks,
                                       not args.raw_psp)
        _write_report(report, args.out, f"scores of {args.score_file} on {ds.name}/{args.split}")
        return EXIT_OK
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    if ckpt.model_config.num_labels != ds.num_labels:
        raise XmtcError(f"checkpoint has L={ckpt.model_config.num_labels}, dataset has L={ds.num_labels}")
    teachers = _load_teachers(args.teacher, args.split, ckpt.model_config.ablation_config.use_teacher)
    report = evaluate(ckpt.params, ckpt.model_config, corpus, teachers, ds.table, prop, args.ks, not args.raw_psp)
    _write_report(report, args.out, f"{ds.name}/{args.split}, config {ckpt.model_config.ablation}, "
                                    f"epoch {ckpt.epoch}")
    return EXIT_OK


def ablation_table(rows, ks=(1, 3, 5)) -> str:
    cols = metric_columns(ks)
    header = ["Config. ID", "teacher knowledge", "Reading", "train loss"] + cols
    lines = [header]
    for r in rows:
        lines.append([str(r["config"]), "True" if r["use_teacher"] else "-", r["reading"],
                      f"{r['train_loss']:.4f}"] + [f"{100 * r['metrics'][c]:.2f}%" for c in cols])
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(line, widths)) for line in lines)


def cmd_ablate(args) -> int:
    _early_model_check(args)
    ds_dir = _require(args.dataset, "dataset directory")
    out = Path(args.out)
    write_manifest(out, "ablate", args, {"dataset": ds_dir, "teacher": args.teacher}, seed=args.seed)
    ds = load_dataset(ds_dir)
    split = args.split if args.split in ds.splits else "train"
    prop = fit_propensities(ds.splits["train"])
    rows = []
    for preset in args.presets:
        use_teacher, stack = ABLATIONS[preset]
        config, _, result = _run_training(args, ds, out / f"config{preset}", ablation=preset)
        teachers = _load_teachers(args.teacher, split, use_teacher)
        report = evaluate(result.params, config, ds.splits[split], teachers, ds.table, prop)
        rows.append({"config": preset, "use_teacher": use_teacher, "reading": stack_label(stack),
                     "train_loss": result.history[-1]["mean_loss"], "metrics": report.metrics})
    table = ablation_table(rows)
    print(f"# evaluated on split '{split}', shared seed {args.seed}")
    print(table)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps({"split": split, "seed": args.seed, "rows": rows}, indent=2)
                                       + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.d_model > 16 or args.text_len > 8 or args.num_labels > 10:
        raise XmtcError("gradcheck is limited to d_model <= 16, text length <= 8, L <= 10")
    ModelConfig(d_model=args.d_model, num_labels=args.num_labels, h=args.h, ablation=args.ablation)
    report = check_model_gradients(trials=args.trials, tol=args.tol, eps=args.eps, d_model=args.d_model, h=args.h,
                                   text_len=args.text_len, teacher_rows=args.teacher_rows,
                                   num_labels=args.num_labels, ablation=args.ablation)
    print("\n".join(report.lines()))
    if not report.passed:
        print("gradient check FAILED for: " + ", ".join(report.failing), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, write_synthetic

    paths = write_synthetic(args.out, SyntheticSpec(seed=args.seed))
    print(f"wrote synthetic inputs to {paths.root}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--ablation", type=int, default=6, choices=sorted(ABLATIONS), help="ablation preset (0-6)")
    g.add_argument("--h", type=int, default=4, help="attention heads")
    g.add_argument("--d-model", type=int, default=None, help="must match the embedding width if given")
    g.add_argument("--d-bottleneck", type=int, default=None, help="default d_model // 2")
    g.add_argument("--max-text-len", type=int, default=500, help="text tokens fed to the model")
    g.add_argument("--max-teacher-rows", type=int, default=64, help="teacher rows fed to the model")
    g.add_argument("--fusion-attention", choices=("on", "off"), default="on", help="masked attention before pooling")
    g.add_argument("--init-gain", type=float, default=1.0, help="init bound is gain/sqrt(d_model)")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=200, help="passes over the train split")
    g.add_argument("--batch-size", type=int, default=32, help="examples per Adam step")
    g.add_argument("--lr", type=float, default=1e-4, help="initial learning rate")
    g.add_argument("--decay", type=float, default=0.5, help="lr factor after a plateau")
    g.add_argument("--patience", type=int, default=3, help="non-improving epochs before decay")
    g.add_argument("--threshold", type=float, default=1e-4, help="relative improvement that counts")
    g.add_argument("--reduction", choices=("sum", "mean"), default="sum", help="batch loss reduction")
    g.add_argument("--no-shuffle", action="store_true", help="keep corpus order in every epoch")
    g.add_argument("--seed", type=int, default=0, help="seed for init and shuffling")
    g.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmtc", description="Extreme multi-label text classification with "
                                     "neighbour-derived teacher knowledge.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate raw inputs into a dataset directory")
    p.add_argument("--train", required=True, help="train corpus: labels<TAB>text per line")
    p.add_argument("--test", help="test corpus, same format")
    p.add_argument("--validation", help="validation corpus; joins the neighbour pool")
    p.add_argument("--hierarchy", required=True, help="parent<TAB>child edge list")
    p.add_argument("--descriptions", required=True, help="label_id<TAB>description text")
    p.add_argument("--embeddings", required=True, help="word2vec text format")
    p.add_argument("--num-labels", type=int, required=True, help="size L of the label space")
    p.add_argument("--max-tokens", type=int, default=None, help="text truncation (default 500)")
    p.add_argument("--desc-tokens", type=int, default=None, help="description truncation (default 4)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="truncation limits of a known benchmark")
    p.add_argument("--name", help="dataset name shown in reports")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("teacher", help="build teacher-knowledge caches")
    p.add_argument("--dataset", required=True, help="directory written by 'xmtc ingest'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=5, help="neighbours per text")
    p.add_argument("--no-exclude-self", action="store_true", help="allow a text to retrieve itself")
    p.add_argument("--include-roots", action="store_true", help="keep neighbour labels that have no parent")
    p.add_argument("--teacher-pool", choices=("rows", "global"), default="rows")
    p.add_argument("--threads", type=int, default=0, help="worker threads (0 = all cores)")
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", required=True, help="directory written by 'xmtc ingest'")
    p.add_argument("--teacher", help="directory written by 'xmtc teacher'")
    p.add_argument("--out", required=True, help="output directory")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    p.add_argument("--dataset", required=True, help="directory written by 'xmtc ingest'")
    p.add_argument("--checkpoint", help="checkpoint.bin written by 'xmtc train'")
    p.add_argument("--teacher", help="directory written by 'xmtc teacher'")
    p.add_argument("--score-file", help="score 'id<TAB>label:score,...' predictions instead of a checkpoint")
    p.add_argument("--split", default="test", choices=SPLITS, help="split to score")
    p.add_argument("--ks", type=_ks, default=[1, 3, 5], help="comma-separated cutoffs")
    p.add_argument("--prop-a", type=float, default=DEFAULT_A, help="propensity parameter A")
    p.add_argument("--prop-b", type=float, default=DEFAULT_B, help="propensity parameter B")
    p.add_argument("--raw-psp", action="store_true", help="report PSP@k without per-example normalization")
    p.add_argument("--out", help="directory for report.txt and report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare ablation presets")
    p.add_argument("--dataset", required=True, help="directory written by 'xmtc ingest'")
    p.add_argument("--teacher", help="directory written by 'xmtc teacher'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--presets", type=_int_list, default=list(sorted(ABLATIONS)), help="comma-separated preset ids")
    p.add_argument("--split", default="test", help="split to score (falls back to train)")
    _model_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter block")
    p.add_argument("--trials", type=int, default=10, help="random seeds to check")
    p.add_argument("--d-model", type=int, default=8, help="embedding width (<= 16)")
    p.add_argument("--h", type=int, default=2, help="attention heads")
    p.add_argument("--text-len", type=int, default=5, help="text tokens (<= 8)")
    p.add_argument("--teacher-rows", type=int, default=3, help="teacher rows")
    p.add_argument("--num-labels", type=int, default=7, help="labels (<= 10)")
    p.add_argument("--ablation", type=int, default=6, choices=sorted(ABLATIONS), help="ablation preset")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error per block")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a small synthetic dataset in the raw input formats")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth)

    for action in sub.choices.values():
        action.formatter_class = argparse.ArgumentDefaultsHelpFormatter
        action.add_argument("--config", help="JSON file of option defaults")
        action.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        clean = {}
        for key, value in overrides.items():
            dest = key.replace("-", "_")
            if dest not in known:
                parser.error(f"unknown option {key!r} in {args.config}")
            clean[dest] = value
        sub.set_defaults(**clean)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (XmtcError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
