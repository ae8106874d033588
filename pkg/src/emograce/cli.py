"""Command-line pipeline: aggregate -> split -> stats -> train -> eval ->
cv -> hpo -> predict.

Machine-readable outputs are line-delimited JSON (or a single JSON document
for reports) written atomically; reporting subcommands also render figures
next to their primary output unless --no-figures is given.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import figures, hpo as hpo_mod
from .evaluation import cross_validate, evaluate, external_sentence_f1
from .ioutil import read_jsonl, write_json, write_jsonl
from .model import load_model, predict
from .trainer import load_config_file, run_training, write_trainlog


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("ratios must be three comma-separated numbers")
    try:
        r = tuple(float(p) for p in parts)
    except ValueError:
        raise ValueError("ratios must be three comma-separated numbers") from None
    if min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
        raise ValueError("ratios must be non-negative and sum to 1")
    return r  # type: ignore[return-value]


def _output(path_str: str) -> Path:
    """Resolve an output path before any work starts, creating its parent."""
    path = Path(path_str)
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _figures_dir(args, primary_output: Path | None) -> Path | None:
    if getattr(args, "no_figures", False):
        return None
    if getattr(args, "figures", None):
        d = Path(args.figures)
        d.mkdir(parents=True, exist_ok=True)
        return d
    if primary_output is not None:
        return primary_output.parent
    return None


def cmd_aggregate(args) -> int:
    out, report_path, review_path = (
        _output(args.out), _output(args.report), _output(args.review)
    )
    records = corpus_mod.load_annotations(args.input)
    docs, report, review = corpus_mod.build_corpus(records)
    write_jsonl(out, [corpus_mod.document_to_json(d) for d in docs])
    write_json(report_path, report.to_dict())
    write_jsonl(review_path, review)
    print(
        f"aggregated {len(docs)} documents "
        f"({report.docs_excluded} excluded, {len(review)} sent to review); "
        f"char retention {report.retention_rate:.4f}"
    )
    return 0


def cmd_split(args) -> int:
    ratios = _parse_ratios(args.ratios)
    docs = corpus_mod.read_corpus(args.input)
    train, val, test = corpus_mod.split_corpus(docs, ratios, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_jsonl(out_dir / f"{name}.jsonl", [corpus_mod.document_to_json(d) for d in part])
    print(f"split {len(docs)} documents into {len(train)}/{len(val)}/{len(test)}")
    return 0


def cmd_stats(args) -> int:
    docs = corpus_mod.read_corpus(args.input)
    stats = corpus_mod.corpus_stats(docs)
    out_path = Path(args.out) if args.out else None
    if out_path:
        write_json(out_path, stats)
    else:
        print(json.dumps(stats, indent=2, sort_keys=True))
    fig_dir = _figures_dir(args, out_path)
    if fig_dir is not None and (args.figures or out_path):
        figures.save_label_distribution(stats, fig_dir / "emotion_labels.png")
        lengths = [s.length() for d in docs for s in d.spans]
        figures.save_span_length_hist(lengths, fig_dir / "span_lengths.png")
    return 0


def _load_splits(data_dir: Path):
    train_path = data_dir / "train.jsonl"
    if not train_path.exists():
        raise ValueError(f"missing {train_path}")
    train = corpus_mod.read_corpus(train_path)
    val_path = data_dir / "val.jsonl"
    test_path = data_dir / "test.jsonl"
    val = corpus_mod.read_corpus(val_path) if val_path.exists() else []
    test = corpus_mod.read_corpus(test_path) if test_path.exists() else []
    return train, val, test


def cmd_train(args) -> int:
    model_fields, train_cfg = load_config_file(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    splits = _load_splits(Path(args.data))
    out = _output(args.out)
    model, log = run_training(splits, model_fields, train_cfg, checkpoint_path=out)
    log_path = _output(args.log) if args.log else out.with_suffix(out.suffix + ".trainlog.jsonl")
    write_trainlog(log_path, log)
    fig_dir = _figures_dir(args, out)
    if fig_dir is not None and log:
        figures.save_training_curves(log, fig_dir / f"{out.stem}_curves.png")
    best = [e for e in log if e["val_joint_f1"] is not None]
    if best:
        top = max(best, key=lambda e: e["val_joint_f1"])
        print(
            f"trained {len(log)} epochs; best val joint F1 {top['val_joint_f1']:.4f} "
            f"at epoch {top['global_epoch']}; checkpoint: {out}"
        )
    else:
        print(f"trained {len(log)} epochs; checkpoint: {out}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.model)
    docs = corpus_mod.read_corpus(args.data)
    report = evaluate(model, docs)
    print(report.format_table())
    report_path = _output(args.report) if args.report else None
    if report_path:
        write_json(report_path, report.to_dict())
    fig_dir = _figures_dir(args, report_path)
    if fig_dir is not None and (args.figures or report_path):
        figures.save_confusion_matrix(report.to_dict(), fig_dir / "confusion.png")
    return 0


def cmd_cv(args) -> int:
    model_fields, train_cfg = load_config_file(args.config)
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    docs = corpus_mod.read_corpus(args.data)
    result = cross_validate(docs, model_fields, train_cfg, k=args.k, seed=train_cfg.seed)
    report_path = _output(args.report) if args.report else None
    if report_path:
        write_json(report_path, result)
    else:
        print(json.dumps(result, indent=2, sort_keys=True))
    fig_dir = _figures_dir(args, report_path)
    if fig_dir is not None and (args.figures or report_path):
        figures.save_fold_scores(result, fig_dir / "cv_folds.png")
    print(
        f"{args.k}-fold CV: mean ATE F1 {result['mean_ate_f1']:.4f}, "
        f"mean joint F1 {result['mean_joint_f1']:.4f}"
    )
    return 0


def cmd_hpo(args) -> int:
    plan = hpo_mod.load_plan(args.plan)
    sweep_out = _output(args.out)
    with Path(args.config).open(encoding="utf-8") as fh:
        base_config = json.load(fh)
    load_config_file(args.config)  # validates
    splits = _load_splits(Path(args.data))
    external_ate = {
        "ate_restaurant": corpus_mod.read_corpus(args.external_restaurant)
        if args.external_restaurant
        else None,
        "ate_laptop": corpus_mod.read_corpus(args.external_laptop)
        if args.external_laptop
        else None,
    }
    external_aec = read_jsonl(args.external_affect) if args.external_affect else None
    use_external = all(v is not None for v in external_ate.values()) and external_aec is not None

    def evaluator(config: dict) -> hpo_mod.ScoreVector:
        from .trainer import train_config_from_dict

        cfg = train_config_from_dict(config.get("train", {}))
        model, _ = run_training(splits, config.get("model", {}), cfg)
        val_report = evaluate(model, splits[1])
        test_report = evaluate(model, splits[2])
        kwargs = {
            "ate_val": 100 * val_report.ate.f1,
            "joint_val": 100 * val_report.joint.f1,
            "ate_test": 100 * test_report.ate.f1,
            "joint_test": 100 * test_report.joint.f1,
        }
        for name, ext_docs in external_ate.items():
            if ext_docs is not None:
                kwargs[name] = 100 * evaluate(model, ext_docs).ate.f1
        if external_aec is not None:
            kwargs["aec_affect"] = 100 * external_sentence_f1(model, external_aec)
        return hpo_mod.ScoreVector(**kwargs)

    best_config, log = hpo_mod.greedy_sweep(plan, base_config, evaluator, use_external=use_external)
    hpo_mod.write_sweep_log(sweep_out, log)
    best_path = sweep_out.with_suffix(".best.json")
    write_json(best_path, best_config)
    print(f"sweep finished: best average {max(e['average'] for e in log):.4f}")
    print(f"best config written to {best_path}")
    return 0


def cmd_predict(args) -> int:
    model, _, _ = load_model(args.model)
    spans = predict(model, args.text)
    for s in spans:
        print(f"({s.start},{s.end}) {s.emotion.value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emograce",
        description="Aspect-emotion corpus tools and the two-branch cascaded labeler",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="majority-vote annotator records into a corpus")
    p.add_argument("--in", dest="input", required=True, help="annotator records (JSONL)")
    p.add_argument("--out", required=True, help="consensus corpus (JSONL)")
    p.add_argument("--report", required=True, help="agreement report (JSON)")
    p.add_argument("--review", required=True, help="no-majority-emotion cases (JSONL)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("split", help="deterministic train/val/test split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default=None, help="stats JSON (default: stdout)")
    p.add_argument("--figures", default=None, help="figure output directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="run the three-step schedule")
    p.add_argument("--config", required=True, help="model+train config (JSON)")
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="train log JSONL (default: <out>.trainlog.jsonl)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--figures", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None, help="full report JSON")
    p.add_argument("--figures", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="corpus file (JSONL)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--report", default=None)
    p.add_argument("--figures", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("hpo", help="greedy category sweep")
    p.add_argument("--plan", required=True, help="sweep plan (JSON)")
    p.add_argument("--config", required=True, help="base config (JSON)")
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--out", default="sweep.jsonl", help="sweep log (JSONL)")
    p.add_argument("--external-restaurant", default=None, help="external ATE corpus (JSONL)")
    p.add_argument("--external-laptop", default=None, help="external ATE corpus (JSONL)")
    p.add_argument("--external-affect", default=None, help="external {text, emotion} JSONL")
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("predict", help="label one text with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
