"""Command-line front end: one subcommand per pipeline stage.

Every subcommand writes ``run_config.json`` (the fully resolved arguments,
no timestamps) next to its outputs. Exit status: 0 success, 1 invalid
input, 2 I/O failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64
THREADS_ENV = "LRBENCH_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _run_config(args, out_dir: Path, **resolved) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(resolved)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "run_config.json", cfg)


def _parse_bounds(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(",")
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> None:
    from .results import dump, ingest

    table = ingest(args.path, args.format, args.datasets, args.models)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump(table, out)
    _run_config(args, out.parent, records=len(table))
    print(f"{len(table)} records, {len(table.model_ids())} models, "
          f"{len(table.dataset_ids())} datasets -> {out}")


def cmd_metrics(args) -> None:
    from .metrics import RobustnessConfig, compute_all, write_cells_csv, write_scores_csv
    from .results import ingest
    from .weights import WeightVector

    table = ingest(args.results, None, args.datasets, args.models)
    weights = WeightVector.load(args.weights) if args.weights else None
    scores, agg = compute_all(table, RobustnessConfig(alpha=args.alpha), weights)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(agg, out / "scores.csv")
    write_cells_csv(scores, out / "cells.csv")
    _run_config(args, out, weights_resolved=dict(weights.weights) if weights else "uniform",
                flagged_models=agg.flagged_models)
    for m in agg.flagged_models:
        print(f"warning: {m} lacks HR accuracy for some datasets", file=sys.stderr)
    print(f"{len(scores.cells)} cells, {len(agg.rows)} aggregates -> {out}")


def cmd_optimize_weights(args) -> None:
    from .metrics import read_cells_csv
    from .weights import GammaMatrix, Objective, optimize_weights

    gm = GammaMatrix.from_scores(read_cells_csv(args.cells), args.resolution)
    objective = Objective.parse(args.objective) if args.objective else Objective()
    bounds = _parse_bounds(args.bounds)
    wv, trace = optimize_weights(gm, objective, bounds, args.budget, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wv.save(out)
    with (out.parent / "trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "best_so_far"])
        w.writerows([i, repr(v), repr(b)] for i, v, b in trace)
    _run_config(args, out.parent, objective_terms=[list(t) for t in objective.terms],
                bounds_resolved=list(bounds), best_objective=trace[-1][2])
    print(f"objective {trace[-1][2]:.6f} after {len(trace)} evaluations -> {out}")


def cmd_rank(args) -> None:
    from .metrics import read_cells_csv
    from .weights import GammaMatrix, WeightVector, dataset_correlations, ranking

    gm = GammaMatrix.from_scores(read_cells_csv(args.cells), args.resolution)
    wv = WeightVector.load(args.weights) if args.weights else WeightVector.uniform(gm.datasets)
    ranked = ranking(gm, wv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "model_id", "war"])
        w.writerows([i, m, repr(s)] for i, (m, s) in enumerate(ranked, start=1))
    corr = dataset_correlations(gm, wv)
    _write_json(out.parent / "correlations.json", corr)
    _run_config(args, out.parent)
    for i, (m, s) in enumerate(ranked, start=1):
        print(f"{i:3d}  {m:<32s} {s:8.3f}")


def cmd_degrade(args) -> None:
    from .degrade import PreprocessSpec, degrade_pipeline, load_image, save_image

    img = load_image(args.input)
    spec = PreprocessSpec(args.n, args.model_res, antialias=args.antialias)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, degrade_pipeline(img, spec, normalize=False))
    _run_config(args, out.parent, preprocess=asdict(spec))


def _load_labels(path: str) -> np.ndarray:
    text = Path(path).read_text()
    if path.endswith(".json"):
        return np.asarray(json.loads(text), dtype=int)
    return np.asarray([int(t) for t in text.split()], dtype=int)


def cmd_eval_zeroshot(args) -> None:
    from .zeroshot import EmbeddingMatrix, LookupEncoder, PromptTemplateSet, build_class_embeddings, classify

    images = EmbeddingMatrix.load(args.images_emb)
    if args.classes_emb:
        classes = EmbeddingMatrix.load(args.classes_emb)
    elif args.text_emb and args.class_names and args.templates:
        names = json.loads(Path(args.class_names).read_text())
        classes = build_class_embeddings(LookupEncoder.load(args.text_emb), names,
                                         PromptTemplateSet.load(args.templates))
    else:
        raise UsageError("need --classes-emb, or --text-emb with --class-names and --templates")
    labels = _load_labels(args.labels) if args.labels else None
    res = classify(images, classes, args.k, labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {
        "predictions": res.topk.tolist(),
        "ties": int(res.ties.sum()),
        "accuracy": {f"top{k}": v for k, v in (res.accuracy or {}).items()},
    })
    _run_config(args, out.parent)
    for k, v in (res.accuracy or {}).items():
        print(f"top-{k} accuracy: {v:.4f}")


def cmd_train_lrtk(args) -> None:
    from .lrtk import TrainConfig, train
    from .tinyvit import BaseParameters, init_params

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = TrainConfig.from_dict(base)
    overrides = {"steps": args.steps, "lr": args.lr, "tau": args.tau,
                 "start_block": args.start_block, "num_images": args.num_images}
    merged = {**cfg.to_dict(), **{k: v for k, v in overrides.items() if v is not None}, "seed": args.seed}
    if args.buckets:
        merged["buckets"] = args.buckets
    if args.base:
        params = BaseParameters.load(args.base)
        merged["model"] = asdict(params.config)
    cfg = TrainConfig.from_dict(merged)
    if not args.base:
        params = init_params(cfg.model, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tokens, log = train(params, cfg)
    params.save(out / "base.f32", seed=args.seed)
    tokens.save(out / "tokens.f32", seed=args.seed, config=cfg.to_dict())
    with (out / "log.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        buckets = [f"cos_{lo}_{hi}" for lo, hi in cfg.buckets.buckets]
        w.writerow(["step", "loss", *buckets])
        for i, (loss, cos) in enumerate(zip(log.loss, log.lr_cosine)):
            w.writerow([i, repr(loss), *map(repr, cos)])
    _run_config(args, out, train=cfg.to_dict())
    print(f"loss {log.loss[0]:.4f} -> {log.loss[-1]:.4f} over {cfg.steps} steps -> {out}")


def _eval_images(args):
    from .degrade import load_image
    from .synthetic import procedural_images

    if args.images:
        paths = sorted(p for p in Path(args.images).iterdir()
                       if p.suffix.lower() in (".png", ".ppm", ".pnm"))
        if not paths:
            raise FileNotFoundError(f"no PNG/PPM images in {args.images}")
        return [load_image(p) for p in paths]
    return list(procedural_images(args.num_images, 224, seed=args.seed))


def cmd_layer_sim(args) -> None:
    from .analysis import model_heatmap
    from .degrade import degrade_pipeline
    from .lrtk import LRTokenBank, model_spec
    from .tinyvit import BaseParameters

    params = BaseParameters.load(args.base)
    tokens = LRTokenBank.load(args.tokens) if args.tokens else None
    cfg = params.config
    srcs = _eval_images(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hr = np.stack([degrade_pipeline(s, model_spec(cfg, None)) for s in srcs])
    summary = {}
    for n in args.n:
        lr = np.stack([degrade_pipeline(s, model_spec(cfg, n)) for s in srcs])
        hm = model_heatmap(params, lr, hr, tokens, args.start_block)
        hm.save_csv(out / f"heatmap_{n}.csv")
        shallow, deep = hm.diagonal_halves()
        summary[str(n)] = {"shallow_mean": shallow, "deep_mean": deep}
        print(f"n={n}: shallow {shallow:.4f}  deep {deep:.4f}")
    _write_json(out / "layer_sim.json", summary)
    _run_config(args, out, images=len(srcs))


def cmd_report(args) -> None:
    from .analysis import SimilarityHeatmap, emit_report
    from .metrics import read_cells_csv, read_scores_csv

    heatmaps = {}
    for item in args.heatmap or []:
        n, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--heatmap expects N=PATH, got {item!r}")
        heatmaps[int(n)] = SimilarityHeatmap.load_csv(path)
    out = emit_report(read_scores_csv(args.scores), read_cells_csv(args.cells), heatmaps, args.out_dir)
    _run_config(args, out)
    print(f"report -> {out}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"cap on BLAS threads (default: ${THREADS_ENV} or unlimited)")

    p = _Parser(prog="lrbench", description="Low-resolution robustness benchmark tools.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("ingest", cmd_ingest, "validate an accuracy file and write it back normalized")
    sp.add_argument("path")
    sp.add_argument("--format", choices=("csv", "json"))
    sp.add_argument("--datasets", help="datasets.json (default: next to PATH)")
    sp.add_argument("--models", help="models.json (default: next to PATH)")
    sp.add_argument("--out", default="table.csv")

    sp = add("metrics", cmd_metrics, "compute gamma, improved gamma, SAR, WAR and ACC")
    sp.add_argument("--results", required=True)
    sp.add_argument("--alpha", type=float, default=200.0)
    sp.add_argument("--weights", help="JSON {dataset_id: weight}; uniform when omitted")
    sp.add_argument("--datasets")
    sp.add_argument("--models")
    sp.add_argument("--out-dir", default=".")

    sp = add("optimize-weights", cmd_optimize_weights, "search dataset weights for WAR")
    sp.add_argument("--cells", required=True, help="cells.csv written by 'metrics'")
    sp.add_argument("--objective", help="dataset:coefficient pairs, comma separated")
    sp.add_argument("--bounds", default="0.01,1.0", help="lo,hi (default 0.01,1.0)")
    sp.add_argument("--budget", type=int, default=2000)
    sp.add_argument("--resolution", type=int, default=16)
    sp.add_argument("--out", default="weights.json")

    sp = add("rank", cmd_rank, "rank models by WAR")
    sp.add_argument("--cells", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--resolution", type=int, default=16)
    sp.add_argument("--out", default="ranking.csv")

    sp = add("degrade", cmd_degrade, "downsample an image to n and back to model resolution")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--n", type=int, default=None, help="low resolution (omit for HR)")
    sp.add_argument("--model-res", type=int, default=224)
    sp.add_argument("--antialias", action="store_true")

    sp = add("eval-zeroshot", cmd_eval_zeroshot, "zero-shot classification from embeddings")
    sp.add_argument("--images-emb", required=True)
    sp.add_argument("--classes-emb")
    sp.add_argument("--text-emb", help="lookup table of prompt embeddings (keys in sidecar)")
    sp.add_argument("--class-names", help="JSON list of class names")
    sp.add_argument("--templates", help="prompt template JSON")
    sp.add_argument("--labels", help="true class indices (JSON list or whitespace separated)")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out", default="zeroshot.json")

    sp = add("train-lrtk", cmd_train_lrtk, "train LR token banks on the toy model")
    sp.add_argument("--config", help="JSON training config")
    sp.add_argument("--base", help="base parameter checkpoint (default: init from --seed)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--buckets", help="e.g. 16:32,32:64,64:128")
    sp.add_argument("--start-block", type=int)
    sp.add_argument("--num-images", type=int)
    sp.add_argument("--out-dir", default="lrtk")

    sp = add("layer-sim", cmd_layer_sim, "layer-wise LR/HR similarity heatmaps")
    sp.add_argument("--base", required=True)
    sp.add_argument("--tokens")
    sp.add_argument("--n", type=int, nargs="+", default=[16])
    sp.add_argument("--images", help="directory of PNG/PPM images (default: procedural)")
    sp.add_argument("--num-images", type=int, default=16)
    sp.add_argument("--start-block", type=int, default=0)
    sp.add_argument("--out-dir", default="layer_sim")

    sp = add("report", cmd_report, "write CSVs and SVG charts")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--cells", required=True)
    sp.add_argument("--heatmap", action="append", help="N=PATH, repeatable")
    sp.add_argument("--out-dir", default="report")
    return p


def _thread_limit(flag: int | None):
    n = flag if flag is not None else os.environ.get(THREADS_ENV)
    if n is None or n == "":
        return nullcontext()
    n = int(n)
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        if args.command is None:
            raise UsageError(parser.format_help())
        with _thread_limit(args.threads):
            args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
