"""Command-line entry point: ``stylebias <verb> ...``.

Exit status is 0 on success, 1 on usage errors and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import StyleBiasError

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def _csv(text):
    return [t for t in (s.strip() for s in text.split(",")) if t]


def _group_from(path_or_root, side=64):
    from .datagen import ingest_directory, load_group

    path = Path(path_or_root or os.environ.get("STYLEBIAS_DATA_ROOT", ""))
    if not str(path_or_root or "") and not os.environ.get("STYLEBIAS_DATA_ROOT"):
        raise UsageError("no dataset given and STYLEBIAS_DATA_ROOT is not set")
    if path.is_file():
        return load_group(path)
    return ingest_directory(path, side=side)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_dataset(args):
    from .datagen import export_group, ingest_directory, load_group, save_group, synthesize_group, texture_shift_scores

    if args.action == "synth":
        group = synthesize_group(args.seed, args.n_domains, args.n_classes, args.per_class, args.side)
        save_group(group, args.out)
    elif args.action == "export":
        group = load_group(args.group)
        export_group(group, args.out)
    else:
        group = ingest_directory(args.root, side=args.side)
        save_group(group, args.out)
    print(f"{group.name}: domains={group.domain_names} classes={len(group.classes)} "
          f"sizes={[len(d) for d in group.domains]}")
    if args.action == "synth":
        _print_json({"texture_shift": texture_shift_scores(group)})


def cmd_stylizer(args):
    from .datagen import load_image
    from .stylizer import StylizerWeights, stylize, train_stylizer

    if args.action == "train":
        group = _group_from(args.group, args.side)
        corpus = [d for d in group.domains if d.name not in set(args.exclude)]
        if not corpus:
            raise UsageError("every domain was excluded")
        weights = train_stylizer(corpus, corpus, epochs=args.epochs, seed=args.seed,
                                 encoder_epochs=args.encoder_epochs)
        weights.save(args.out)
        print(f"saved {args.out}: final loss {weights.meta.get('final_loss')}")
    else:
        from PIL import Image

        weights = StylizerWeights.load(args.weights)
        content = load_image(args.content, args.side)
        style = load_image(args.style, args.side)
        out = stylize(content, style, args.alpha, weights)
        arr = (np.clip(np.asarray(out), 0, 1).transpose(1, 2, 0) * 255).round().astype(np.uint8)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(args.out)
        print(f"wrote {args.out}")


def cmd_train(args):
    import dataclasses

    from .datagen import leave_one_out
    from .experiment import ResultsLedger, config_hash, load_config, load_dataset, stylization_config, stylizer_for, train_config
    from .trainer import train

    cfg = load_config(args.config)
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    chash = config_hash(cfg)
    ledger = ResultsLedger(cfg["output_dir"])
    if ledger.exists(chash, args.target, args.run) and not args.force:
        from .errors import LedgerConflictError

        raise LedgerConflictError([(chash, args.target, args.run)])
    group = load_dataset(cfg)
    sources, target = leave_one_out(group, args.target)
    seed = cfg["base_seed"] + args.run
    tc = dataclasses.replace(train_config(cfg, seed), stylization=stylization_config(cfg, seed))
    model, record = train(sources, target, tc, stylizer_for(cfg, group, args.target), config_hash=chash)
    ledger.write_config(cfg, group.domain_names)
    ledger.write(chash, args.target, args.run, record, model, force=args.force)
    _print_json(record.summary())


def cmd_eval(args):
    from .trainer import evaluate, load_checkpoint

    model, meta = load_checkpoint(args.checkpoint)
    group = _group_from(args.dataset, args.side)
    names = [args.domain] if args.domain else group.domain_names
    _print_json({n: evaluate(model, group[n]) for n in names})


def _load_cfg(args):
    from .experiment import load_config

    cfg = load_config(args.config)
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    return cfg


def cmd_matrix(args):
    from .experiment import render_report, rows_from_matrix, run_matrix

    result = run_matrix(_load_cfg(args), force=args.force, resume=args.resume)
    text, _ = render_report([rows_from_matrix(result)])
    print(text, end="")
    if result.failures:
        _print_json({"failures": result.failures})
        return RUNTIME_ERROR
    return 0


def cmd_sweep(args):
    from .experiment import render_report, rows_from_matrix, sweep_style_probability

    try:
        probs = [float(p) for p in _csv(args.probs)]
    except ValueError as exc:
        raise UsageError(f"bad --probs: {exc}") from exc
    results = sweep_style_probability(_load_cfg(args), probs, force=args.force, resume=args.resume)
    text, _ = render_report([rows_from_matrix(r) for _, r in results])
    print(text, end="")
    return RUNTIME_ERROR if any(r.failures for _, r in results) else 0


def cmd_ablate(args):
    from .analysis import format_ablation, limited_source_ablation
    from .experiment import load_dataset, stylizer_for, train_config

    cfg = _load_cfg(args)
    subsets = [_csv(s) for s in args.subsets.split(";") if s.strip()]
    if not subsets:
        raise UsageError("--subsets needs at least one subset, e.g. 'art,cartoon;art'")
    group = load_dataset(cfg)
    stylizer = stylizer_for(cfg, group, args.target)
    rows = limited_source_ablation(group, args.target, subsets, cfg["n_runs"], config=train_config(cfg, 0),
                                   stylizer=stylizer, base_seed=cfg["base_seed"])
    print(format_ablation(rows, args.target), end="")


def cmd_cueconflict(args):
    from .analysis import build_cue_conflict
    from .datagen import ingest_domain, synthesize_textures
    from .stylizer import StylizerWeights
    from .trainer import load_checkpoint

    models = [load_checkpoint(p)[0] for p in args.checkpoints]
    group = _group_from(args.group, args.side)
    content = group[args.content_domain]
    if args.textures:
        textures = ingest_domain(args.textures, content.side, classes=group.classes)
    else:
        textures = synthesize_textures(args.seed + 1000, len(group.classes), args.textures_per_class, content.side)
        if textures.classes != group.classes:
            textures = type(textures)(textures.name, textures.images, textures.labels, group.classes)
    weights = StylizerWeights.load(args.stylizer)
    cue = build_cue_conflict(models, content, textures, cap=args.cap, seed=args.seed, weights=weights,
                             iterations=args.iterations)
    cue.save(args.out)
    _print_json(cue.manifest)


def cmd_bias(args):
    from .analysis import CueConflictSet, bias_report, format_bias_tables
    from .trainer import load_checkpoint

    cue = CueConflictSet.load(args.set)
    reports = []
    for path in args.checkpoints:
        model, _ = load_checkpoint(path)
        reports.append(bias_report(model, cue, model_tag=Path(path).stem, folds=args.folds, seed=args.seed))
    print(format_bias_tables(reports), end="")
    if args.json:
        Path(args.json).write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=2))


def cmd_probe(args):
    from .analysis import CueConflictSet, probe_accuracy
    from .trainer import load_checkpoint

    cue = CueConflictSet.load(args.set)
    model, _ = load_checkpoint(args.checkpoint)
    acc = probe_accuracy(model, cue, args.kind, folds=args.folds, epochs=args.epochs, lr=args.lr, seed=args.seed)
    _print_json({"kind": args.kind, "accuracy": acc})


def cmd_report(args):
    from .experiment import report_from_ledger

    text, rows = report_from_ledger(args.ledger, args.hashes or None, include_oracle=args.oracle)
    print(text, end="")
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stylebias", description="Style-randomized domain generalization experiments.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="synthesize, export or ingest a domain group")
    dsa = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = dsa.add_parser("synth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-domains", type=int, default=4)
    s.add_argument("--n-classes", type=int, default=7)
    s.add_argument("--per-class", type=int, default=50)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--out", required=True)
    s = dsa.add_parser("export")
    s.add_argument("--group", required=True)
    s.add_argument("--out", required=True)
    s = dsa.add_parser("ingest")
    s.add_argument("root")
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--out", required=True)
    ds.set_defaults(func=cmd_dataset)

    st = sub.add_parser("stylizer", help="train or apply the feature-statistics stylizer")
    sta = st.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = sta.add_parser("train")
    s.add_argument("--group", help="group .npz or image root (default: $STYLEBIAS_DATA_ROOT)")
    s.add_argument("--exclude", type=_csv, default=[], help="comma-separated domains to leave out (the target)")
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--encoder-epochs", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--out", required=True)
    s = sta.add_parser("apply")
    s.add_argument("--weights", required=True)
    s.add_argument("--content", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--out", required=True)
    st.set_defaults(func=cmd_stylizer)

    s = sub.add_parser("train", help="one leave-one-domain-out run")
    s.add_argument("--config", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--run", type=int, default=0)
    s.add_argument("--output-dir")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint per domain")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", help="group .npz or image root (default: $STYLEBIAS_DATA_ROOT)")
    s.add_argument("--domain")
    s.add_argument("--side", type=int, default=64)
    s.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("matrix", cmd_matrix, "every target domain, n_runs seeds each"),
        ("sweep-p", cmd_sweep, "one matrix per stylization probability"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--output-dir")
        g = s.add_mutually_exclusive_group()
        g.add_argument("--force", action="store_true", help="overwrite existing ledger entries")
        g.add_argument("--resume", action="store_true", help="keep existing entries, run the rest")
        if name == "sweep-p":
            s.add_argument("--probs", default="0.1,0.5,1.0")
        s.set_defaults(func=func)

    s = sub.add_parser("ablate-sources", help="stylize with a restricted set of source styles")
    s.add_argument("--config", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--subsets", required=True, help="';'-separated comma lists, e.g. 'art,cartoon;art;cartoon'")
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_ablate)

    cc = sub.add_parser("cueconflict", help="cue-conflict set construction")
    cca = cc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    s = cca.add_parser("build")
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--group", help="group .npz or image root (default: $STYLEBIAS_DATA_ROOT)")
    s.add_argument("--content-domain", required=True)
    s.add_argument("--textures", help="texture images as <root>/<class>/<image> (default: synthetic textures)")
    s.add_argument("--textures-per-class", type=int, default=10)
    s.add_argument("--stylizer", required=True, help="weights whose encoder supplies the features")
    s.add_argument("--cap", type=int, default=45)
    s.add_argument("--iterations", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--out", required=True)
    cc.set_defaults(func=cmd_cueconflict)

    s = sub.add_parser("bias", help="shape bias and probe accuracies on a cue-conflict set")
    s.add_argument("--checkpoints", nargs="+", required=True)
    s.add_argument("--set", required=True)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json")
    s.set_defaults(func=cmd_bias)

    s = sub.add_parser("probe", help="linear-probe accuracy for shape or texture labels")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--set", required=True)
    s.add_argument("--kind", choices=("shape", "texture"), default="shape")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("report", help="mean ± std tables from the results ledger")
    s.add_argument("--ledger", default="runs")
    s.add_argument("--hashes", nargs="*")
    s.add_argument("--oracle", action="store_true", help="also show max-over-epochs rows")
    s.add_argument("--json")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"stylebias: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (StyleBiasError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"stylebias: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
