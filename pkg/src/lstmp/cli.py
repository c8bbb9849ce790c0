"""Command-line entry point: ``lstmp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Every failure prints one line to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .detector import load_detector, save_detector
from .gradcheck import TOLERANCE, GradcheckSetup, gradcheck
from .metrics import EvalReport, evaluate
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    Experiment, caption_samples, detector_min_f1, fine_tune, fit_detector, model_config, pretrain, sweep_lambda,
    sweep_table,
)
from .trainer import VARIANTS, TrainConfig, TrainingError
from .world import SPLIT_NAMES, CorpusSplits, SplitCounts, WorldSpec, build_splits, generate_world, load_corpus, save_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict):
        raise DataError(f"{path}: expected a JSON object")
    return doc


def _corpus(path) -> CorpusSplits:
    if not Path(path).is_dir():
        raise DataError(f"corpus directory {path} does not exist")
    return load_corpus(path)


def _train_config(args, **overrides) -> TrainConfig:
    base = TrainConfig.from_dict(_read_json(args.config)) if args.config else TrainConfig()
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def _runlog_path(args) -> Path:
    return Path(args.run_log) if args.run_log else Path(str(args.out) + ".runlog.jsonl")


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    doc = _read_json(args.spec) if args.spec else {}
    world_keys = {f.name for f in fields(WorldSpec)}
    count_keys = {f.name for f in fields(SplitCounts)}
    unknown = set(doc) - world_keys - count_keys
    if unknown:
        raise DataError(f"{args.spec}: unknown fields {sorted(unknown)}")
    spec = WorldSpec(**{k: v for k, v in doc.items() if k in world_keys})
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    counts = SplitCounts(**{k: v for k, v in doc.items() if k in count_keys})
    splits = build_splits(generate_world(spec), counts)
    save_corpus(splits, args.out)
    print(f"wrote {args.out}: {len(splits.detector_train)} detector, {len(splits.paired_train)} paired, "
          f"{len(splits.test)} test images; held out {', '.join(splits.heldout_tokens)}")
    return EXIT_OK


def cmd_train_detector(args) -> int:
    splits = _corpus(args.corpus)
    seed = splits.world_seed if args.seed is None else args.seed
    det = fit_detector(splits, seed)
    save_detector(args.out, det)
    print(f"wrote {args.out}: min per-class test F1 {detector_min_f1(det, splits.test):.4f}")
    return EXIT_OK


def cmd_pretrain_lm(args) -> int:
    splits = _corpus(args.corpus)
    config = _train_config(args, seed=args.seed, lm_epochs=args.epochs)
    params = pretrain(splits, config, run_log=_runlog_path(args))
    save_checkpoint(args.out, model_config(splits, config), params,
                    {"stage": "lm", "train_config": config.to_dict()})
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    splits = _corpus(args.corpus)
    det = load_detector(args.detector)
    config = _train_config(args, seed=args.seed, joint_epochs=args.epochs, variant=args.variant,
                           lambda_=args.lambda_, mu=args.mu)
    cfg, lm, _ = load_checkpoint(args.init)
    # the LM checkpoint fixes the model sizes
    config = replace(config, D_w=cfg.D_w, D_h=cfg.D_h, max_len=cfg.max_len)
    if cfg != model_config(splits, config):
        raise DataError(f"{args.init} does not match the vocabulary or image size of {args.corpus}")
    params, history = fine_tune(splits, det, lm, config, run_log=_runlog_path(args))
    save_checkpoint(args.out, cfg, params, {"stage": "joint", "train_config": config.to_dict()})
    last = history[-1] if history else {}
    print(f"wrote {args.out}: final epoch " + json.dumps(last))
    return EXIT_OK


def cmd_caption(args) -> int:
    splits = _corpus(args.corpus)
    det = load_detector(args.detector)
    cfg, params, extra = load_checkpoint(args.model)
    variant = extra.get("train_config", {}).get("variant", "lstm-p")
    gate = 0.0 if variant == "baseline" else None
    samples = getattr(splits, args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    traces = caption_samples(cfg, params, det, samples, gate)
    with open(args.out, "w") as fh:
        for s, tr in zip(samples, traces):
            fh.write(json.dumps({"image_id": s.image_id, "tokens": [splits.vocab.tokens[t] for t in tr.tokens],
                                 "gates": [list(g) for g in tr.gates]}) + "\n")
    print(f"wrote {len(traces)} captions to {args.out}")
    return EXIT_OK


def _read_captions(path) -> list[dict]:
    rows = []
    try:
        fh = open(path)
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            try:
                d = json.loads(line)
                rows.append({"image_id": int(d["image_id"]), "tokens": [str(t) for t in d["tokens"]]})
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed caption line ({e})") from None
    return rows


def cmd_eval(args) -> int:
    splits = _corpus(args.corpus)
    rows = _read_captions(args.captions)
    by_id = {s.image_id: s for s in splits.detector_train + splits.test}
    captions, labels = [], []
    for r in rows:
        if r["image_id"] not in by_id:
            raise DataError(f"{args.captions}: image_id {r['image_id']} is not in the corpus")
        captions.append([t for t in r["tokens"] if t not in ("<end>", "<start>")])
        labels.append([splits.vocab.object_tokens[o] for o in by_id[r["image_id"]].objects])
    report = evaluate(captions, labels, splits.heldout_tokens)
    Path(args.out).write_text(report.to_json() + "\n")
    print(_report_text(report))
    return EXIT_OK


def _report_text(report: EvalReport) -> str:
    lines = [f"{'object':<12} F1"]
    lines += [f"{o:<12} {f:.4f}" for o, f in report.per_object_f1.items()]
    lines += [f"{'f1_average':<12} {report.f1_average:.4f}", f"{'novel':<12} {report.novel:.4f}",
              f"{'accuracy':<12} {report.accuracy:.4f}", f"{'coverage':<12} {report.coverage_rate:.4f}"]
    return "\n".join(lines)


def cmd_gradcheck(args) -> int:
    config = _train_config(args)
    setup = GradcheckSetup() if args.h is None else GradcheckSetup(h=args.h)
    errors = gradcheck(args.seed, setup, config.lambda_, config.mu)
    for name, err in errors.items():
        print(f"{name:<6} {err:.3e}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < TOLERANCE else EXIT_CHECK


def cmd_sweep_lambda(args) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values or args.seeds < 1:
        raise UsageError("need at least one lambda value and one seed")
    config = _train_config(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    result = sweep_lambda(values, seeds, config)
    print(sweep_table(result))
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"seeds": seeds, "f1_average": {str(k): v for k, v in result.items()},
             "mean": {str(k): float(np.mean(v)) for k, v in result.items()}}, indent=1) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    """Whole protocol for one seed into ``--out``; writes a run manifest."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _train_config(args, seed=args.seed)
    exp = Experiment(args.seed, config)
    manifest = {"seed": args.seed, "tool_version": __version__, "config": exp.config.to_dict()}
    save_corpus(exp.splits, out / "corpus")
    manifest["corpus"] = "corpus"
    save_detector(out / "detector.json", exp.detector)
    manifest["detector"] = "detector.json"
    save_checkpoint(out / "lm.json", exp.cfg, exp.lm, {"stage": "lm"})
    manifest["lm"] = "lm.json"
    manifest["captioners"], manifest["reports"] = {}, {}
    for variant in VARIANTS:
        res = exp.run(variant)
        save_checkpoint(out / f"{variant}.json", exp.cfg, res.params,
                        {"stage": "joint", "train_config": replace(exp.config, variant=variant).to_dict()})
        (out / f"{variant}.report.json").write_text(res.report.to_json() + "\n")
        manifest["captioners"][variant] = f"{variant}.json"
        manifest["reports"][variant] = f"{variant}.report.json"
        print(f"{variant:<13} f1_average {res.report.f1_average:.4f}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return EXIT_OK


# -- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lstmp", description="Pointing captioner for novel objects on a synthetic world.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic corpus")
    sp.add_argument("--spec", help="JSON with world and split-count fields")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-detector", cmd_train_detector, "train the multi-label object learner")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("pretrain-lm", cmd_pretrain_lm, "text-only LM pretraining on all sentences")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int, help="overrides lm_epochs")
    sp.add_argument("--run-log")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "joint training on paired data")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--detector", required=True)
    sp.add_argument("--init", required=True, help="LM checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--variant", choices=VARIANTS)
    sp.add_argument("--lambda", dest="lambda_", type=float)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int, help="overrides joint_epochs")
    sp.add_argument("--run-log")
    sp.add_argument("--out", required=True)

    sp = add("caption", cmd_caption, "greedy captions with gate traces (JSONL)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--detector", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test", choices=SPLIT_NAMES)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score a caption file against a corpus")
    sp.add_argument("--captions", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the training loss")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, help="finite-difference step")

    sp = add("sweep-lambda", cmd_sweep_lambda, "f1_average as a function of the coverage weight")
    sp.add_argument("--values", default="0,0.1,0.3,0.5,1.0")
    sp.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config")
    sp.add_argument("--out")

    sp = add("run", cmd_run, "full pipeline for one seed: corpus, detector, LM, all variants, reports")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"lstmp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"lstmp: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, KeyError, OSError, TrainingError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"lstmp: error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
