"""Command-line entry point: ``weseg <subcommand>``.

Subcommands: generate, train, sweep, infer, refine, evaluate, report, pipeline.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from . import evaluation, netpbm, storage, synth, tiler
from ._accel import set_threads
from .train import (HISTORY_FIELDS, Method, TrainedModel, TrainingDiverged, history_csv,
                    lr_random_search, refine_annotations, run_training)

log = logging.getLogger("weseg")

SPLITS = ("train", "val", "test")
EVAL_FIELDS = ("method", "cohort", "pooled_auc", "mean_slide_auc", "n_slides", "n_skipped", "n_units")


class CliError(Exception):
    pass


def _fmt(x):
    return "" if x is None else repr(float(x))


def method_slug(method):
    return str(method).replace(":", "_")


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2) + "\n")


# -- generate ----------------------------------------------------------------

def split_counts(n, fractions):
    n_train = int(np.floor(n * fractions[0] + 0.5))
    n_val = int(np.floor(n * fractions[1] + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def stratified_order(bags):
    """Bag order that spreads normal and tumor slides evenly along the list.

    Each slide sits at the midpoint of its rank within its own label group;
    cutting the sorted list into consecutive splits then gives every split
    its proportional share of each group.
    """
    groups = {}
    for i, b in enumerate(bags):
        groups.setdefault(b.label, []).append(i)
    keys = []
    for members in groups.values():
        g = len(members)
        keys += [((2 * k + 1) / (2 * g), i) for k, i in enumerate(members)]
    return [bags[i] for _, i in sorted(keys)]


def generate(cfg: config_mod.RunConfig, out_dir):
    """Write train/val/test manifests with their feature, truth and image files."""
    s = cfg.synth
    if s.n_slides < 1:
        raise CliError("synth.n_slides must be at least 1")
    spec = cfg.synth_spec()
    os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "truth"), exist_ok=True)
    config_mod.write(cfg, out_dir)

    rasters = {}
    if s.mode == "raster":
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
        slides = synth.gen_raster_cohort(spec, s.n_slides, s.width, s.height, s.tile_size, s.overlap)
        bags = [r.bag for r in slides]
        rasters = {r.bag.id: r for r in slides}
    else:
        bags = synth.gen_feature_bags(spec, s.n_slides)
    if s.noise:
        bags = synth.perturb_cohort(bags, cfg.seed)

    bags = stratified_order(bags)
    counts = split_counts(len(bags), s.split)
    start = 0
    for split, count in zip(SPLITS, counts):
        rows = []
        for bag in bags[start:start + count]:
            feat_rel = f"features/{bag.id}.bin"
            truth_rel = f"truth/{bag.id}.bin"
            storage.write_features(os.path.join(out_dir, feat_rel), bag.features)
            storage.write_truth(os.path.join(out_dir, truth_rel), bag.truth)
            image_rel = mask_rel = ""
            if bag.id in rasters:
                r = rasters[bag.id]
                image_rel, mask_rel = f"images/{bag.id}.ppm", f"masks/{bag.id}.pgm"
                netpbm.write_pnm(os.path.join(out_dir, image_rel), r.image)
                netpbm.write_pnm(os.path.join(out_dir, mask_rel), r.truth_mask.astype(np.uint8) * 255)
            rows.append(storage.manifest_row(bag, feat_rel, truth_rel, image_rel, mask_rel))
        storage.write_manifest(os.path.join(out_dir, f"{split}.csv"), rows)
        start += count

    stats = evaluation.annotation_stats([b.percent for b in bags])
    _write_json(os.path.join(out_dir, "annotation_stats.json"), {
        "n": stats.n, "n_nonzero": stats.n_nonzero,
        "multiple_of_5": stats.mult5, "multiple_of_20": stats.mult20,
        "histogram": [int(x) for x in stats.histogram],
    })
    return dict(zip(SPLITS, counts))


# -- train / sweep -----------------------------------------------------------

def _load_split(data_dir, split):
    path = os.path.join(data_dir, f"{split}.csv")
    if not os.path.exists(path):
        raise CliError(f"missing manifest {path}")
    return storage.load_cohort(path)


def _save_history(out_dir, history):
    _write_text(os.path.join(out_dir, "history.csv"), history_csv(history))


def train_run(cfg: config_mod.RunConfig, data_dir, out_dir, method=None):
    tc = cfg.train_config(method)
    os.makedirs(out_dir, exist_ok=True)
    config_mod.write(cfg, out_dir)
    train_bags, val_bags = _load_split(data_dir, "train"), _load_split(data_dir, "val")
    ckpt = os.path.join(out_dir, "checkpoint.txt")

    def on_improve(model, epoch):
        model.save(ckpt, epoch=epoch, seed=cfg.seed, lr=tc.lr)

    try:
        result = run_training(train_bags, val_bags, tc, on_improve=on_improve)
    except TrainingDiverged as exc:
        _write_json(os.path.join(out_dir, "diagnostics.json"), {"error": str(exc), **exc.diagnostics})
        raise CliError(f"training diverged: {exc}") from exc
    _save_history(out_dir, result.history)
    _write_json(os.path.join(out_dir, "summary.json"), {
        "method": str(tc.method), "seed": cfg.seed, "lr": tc.lr,
        "best_epoch": result.best_epoch, "best_val_loss": result.best_val,
        "epochs": len(result.history),
    })
    return result


def sweep_run(cfg: config_mod.RunConfig, data_dir, out_dir, method=None, trials=None):
    tc = cfg.train_config(method)
    trials = trials or cfg.sweep.trials
    os.makedirs(out_dir, exist_ok=True)
    config_mod.write(cfg, out_dir)
    train_bags, val_bags = _load_split(data_dir, "train"), _load_split(data_dir, "val")
    best_lr, report, best = lr_random_search(train_bags, val_bags, tc, trials)
    lines = ["trial,lr,best_val_loss,best_epoch,epochs"]
    lines += [f"{i},{t.lr!r},{t.best_val!r},{t.best_epoch},{t.epochs}" for i, t in enumerate(report)]
    _write_text(os.path.join(out_dir, "sweep.csv"), "\n".join(lines) + "\n")
    best.model.save(os.path.join(out_dir, "checkpoint.txt"), epoch=best.best_epoch, seed=cfg.seed, lr=best_lr)
    _save_history(out_dir, best.history)
    _write_json(os.path.join(out_dir, "summary.json"), {
        "method": str(tc.method), "seed": cfg.seed, "best_lr": best_lr,
        "best_val_loss": best.best_val, "trials": trials,
    })
    return best_lr, report


# -- infer / refine ----------------------------------------------------------

def infer_image(model: TrainedModel, image, tile_size, overlap):
    tiled = tiler.tile_image(image, tile_size, overlap)
    # same float32 round trip the stored features went through
    feats = tiled.features.astype(np.float32).astype(np.float64)
    scores = model.scores(feats) if len(feats) else np.zeros(0)
    return tiled, scores, tiler.stitch_map(tiled.grid, scores, tiled.background)


def write_map(out_dir, name, seg: tiler.SegmentationMap):
    gray = np.clip(np.floor(seg.values * 255 + 0.5), 0, 255).astype(np.uint8)
    netpbm.write_pnm(os.path.join(out_dir, f"{name}.pgm"), gray)
    netpbm.write_float_map(os.path.join(out_dir, f"{name}.f64"), seg.values)
    netpbm.write_pnm(os.path.join(out_dir, f"{name}_background.pgm"), seg.background.astype(np.uint8) * 255)


def infer(checkpoint, out_dir, manifest=None, image=None, tile_size=512, overlap=128):
    model = TrainedModel.load(checkpoint)
    os.makedirs(out_dir, exist_ok=True)
    lines = ["slide_id,tile,score"]
    maps = {}
    if manifest:
        for row in storage.read_manifest(manifest):
            feats = storage.read_features(storage.resolve(manifest, row["features"]))
            scores = model.scores(feats)
            lines += [f"{row['id']},{i},{s!r}" for i, s in enumerate(scores.tolist())]
            if row["image"]:
                img = netpbm.read_pnm(storage.resolve(manifest, row["image"]))
                _, _, seg = infer_image(model, img, tile_size, overlap)
                write_map(out_dir, row["id"], seg)
                maps[row["id"]] = seg
    if image:
        name = os.path.splitext(os.path.basename(image))[0]
        _, scores, seg = infer_image(model, netpbm.read_pnm(image), tile_size, overlap)
        lines += [f"{name},{i},{s!r}" for i, s in enumerate(scores.tolist())]
        write_map(out_dir, name, seg)
        maps[name] = seg
    _write_text(os.path.join(out_dir, "scores.csv"), "\n".join(lines) + "\n")
    return maps


def refine(checkpoint, manifest, out_dir):
    """Write a copy of ``manifest`` whose percents are the model's tumor fractions."""
    model = TrainedModel.load(checkpoint)
    os.makedirs(out_dir, exist_ok=True)
    dst = os.path.join(out_dir, os.path.basename(manifest))
    rows = storage.read_manifest(manifest)
    refined = refine_annotations(model, storage.load_cohort(manifest))
    out = []
    for row, bag in zip(rows, refined):
        new = storage.rebase_row(row, manifest, dst)
        new["percent"] = repr(float(bag.percent))
        out.append(new)
    storage.write_manifest(dst, out)
    return dst


# -- evaluate / report -------------------------------------------------------

def _run_model(run):
    path = run if run.endswith(".txt") else os.path.join(run, "checkpoint.txt")
    if not os.path.exists(path):
        raise CliError(f"no checkpoint at {path}")
    return TrainedModel.load(path)


def evaluate(runs, manifest, out_dir, cohort=None, tile_size=512, overlap=128):
    """One CSV row per method on ``manifest``, plus per-slide AUCs and ROC points."""
    cohort = cohort or os.path.splitext(os.path.basename(manifest))[0]
    bags = storage.load_cohort(manifest)
    rows = storage.read_manifest(manifest)
    with_maps = all(r["image"] and r["truth_mask"] for r in rows)
    os.makedirs(out_dir, exist_ok=True)
    reports, curves = [], []
    for run in runs:
        model = _run_model(run)
        name = str(model.method)
        scores = [model.scores(b.features) for b in bags]
        rep = evaluation.eval_scores([b.id for b in bags], scores, [b.truth for b in bags], name, cohort)
        reports.append(rep)
        curves.append((name, cohort, np.concatenate(scores), np.concatenate([b.truth for b in bags])))
        if with_maps:
            maps, masks = [], []
            for r in rows:
                img = netpbm.read_pnm(storage.resolve(manifest, r["image"]))
                maps.append(infer_image(model, img, tile_size, overlap)[2])
                masks.append(netpbm.read_pnm(storage.resolve(manifest, r["truth_mask"])) > 127)
            reports.append(evaluation.eval_maps([r["id"] for r in rows], maps, masks, name, f"{cohort}_pixels"))

    lines = [",".join(EVAL_FIELDS)]
    for rep in reports:
        lines.append(",".join([rep.method, rep.cohort, _fmt(rep.pooled_auc), _fmt(rep.mean_slide_auc),
                               str(rep.n_slides), str(rep.skipped), str(rep.n_tiles)]))
    _write_text(os.path.join(out_dir, f"eval_{cohort}.csv"), "\n".join(lines) + "\n")

    lines = ["method,cohort,slide_id,auc"]
    for rep in reports:
        lines += [f"{rep.method},{rep.cohort},{sid},{a!r}" for sid, a in rep.slide_aucs]
    _write_text(os.path.join(out_dir, f"slides_{cohort}.csv"), "\n".join(lines) + "\n")

    lines = ["method,cohort,fpr,tpr"]
    for name, coh, s, t in curves:
        fpr, tpr = evaluation.roc_curve(s, t)
        lines += [f"{name},{coh},{x!r},{y!r}" for x, y in zip(fpr.tolist(), tpr.tolist())]
    _write_text(os.path.join(out_dir, f"roc_{cohort}.csv"), "\n".join(lines) + "\n")
    return reports


def _is_binary_method(name):
    kind = Method.parse(name).kind
    return kind in ("alphabeta", "attention_mil")


def report(results_dir, expect_cohorts=None):
    """Method x cohort AUC table with error reductions; returns (table rows, complete?)."""
    table, cohorts = {}, []
    for path in sorted(glob.glob(os.path.join(results_dir, "eval_*.csv"))):
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                table.setdefault(row["method"], {})[row["cohort"]] = row["pooled_auc"]
                if row["cohort"] not in cohorts:
                    cohorts.append(row["cohort"])
    for c in expect_cohorts or ():
        if c not in cohorts:
            cohorts.append(c)
    if not table:
        raise CliError(f"no evaluation CSVs in {results_dir}")
    complete = True
    header = ["method"]
    for c in cohorts:
        header += [c, f"{c}:err_red_vs_supervised", f"{c}:err_red_vs_best_binary"]
    out_rows = []
    for method in table:
        row = [method]
        for c in cohorts:
            val = table[method].get(c)
            if val in (None, ""):
                complete = False
                row += ["absent", "", ""]
                continue
            auc_v = float(val)
            sup = table.get("supervised", {}).get(c)
            binary = [float(v[c]) for m, v in table.items() if _is_binary_method(m) and v.get(c) not in (None, "")]
            ref_sup = evaluation.error_reduction(auc_v, float(sup)) if sup not in (None, "") and method != "supervised" else None
            ref_bin = evaluation.error_reduction(auc_v, max(binary)) if binary and not _is_binary_method(method) else None
            row += [f"{auc_v:.4f}", "" if ref_sup is None else f"{ref_sup:.4f}",
                    "" if ref_bin is None else f"{ref_bin:.4f}"]
        out_rows.append(row)

    _write_text(os.path.join(results_dir, "report.csv"),
                "\n".join(",".join(r) for r in [header] + out_rows) + "\n")
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(r) + " |" for r in out_rows]
    _write_text(os.path.join(results_dir, "report.md"), "\n".join(md) + "\n")

    for path in sorted(glob.glob(os.path.join(results_dir, "roc_*.csv"))):
        curves = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fpr, tpr = curves.setdefault(row["method"], ([], []))
                fpr.append(float(row["fpr"]))
                tpr.append(float(row["tpr"]))
        cohort = os.path.basename(path)[4:-4]
        _write_text(os.path.join(results_dir, f"roc_{cohort}.svg"),
                    evaluation.roc_svg(curves, title=f"ROC - {cohort}"))
    return out_rows, complete


def pipeline(cfg: config_mod.RunConfig, out_dir):
    """generate -> train every configured method -> evaluate on test -> report."""
    data = os.path.join(out_dir, "data")
    generate(cfg, data)
    runs = []
    for m in cfg.methods:
        run_dir = os.path.join(out_dir, "runs", method_slug(m))
        train_run(cfg, data, run_dir, m)
        runs.append(run_dir)
    results = os.path.join(out_dir, "results")
    evaluate(runs, os.path.join(data, "test.csv"), results, "test",
             cfg.synth.tile_size, cfg.synth.overlap)
    return report(results)


# -- argument parsing --------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="weseg", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides config and WESEG_SEED)")
    common.add_argument("--threads", type=int, help="cap worker threads")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write a synthetic cohort")

    for name, helptext in (("train", "train one method"), ("sweep", "learning-rate random search")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--data", required=True, help="directory written by generate")
        sp.add_argument("--method", help="weseg | supervised | attention_mil | alphabeta:A:B")
        if name == "sweep":
            sp.add_argument("--trials", type=int)

    sp = sub.add_parser("infer", parents=[common], help="tile scores and stitched maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--image", help="binary PPM raster to tile and score")

    sp = sub.add_parser("refine", parents=[common], help="replace percents by predicted tumor fractions")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)

    sp = sub.add_parser("evaluate", parents=[common], help="AUC of trained runs on a manifest")
    sp.add_argument("--runs", nargs="+", required=True, help="run directories or checkpoint files")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--cohort")

    sp = sub.add_parser("report", parents=[common], help="comparison table from evaluation CSVs")
    sp.add_argument("--expect", nargs="*", default=(), help="cohorts every method must have")

    sub.add_parser("pipeline", parents=[common], help="generate, train all methods, evaluate, report")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config, args.seed)
        set_threads(args.threads)
        s = cfg.synth
        if args.command == "generate":
            counts = generate(cfg, args.out)
            print(" ".join(f"{k}={v}" for k, v in counts.items()))
        elif args.command == "train":
            r = train_run(cfg, args.data, args.out, args.method)
            print(f"best epoch {r.best_epoch} val loss {r.best_val:.6f}")
        elif args.command == "sweep":
            lr, _ = sweep_run(cfg, args.data, args.out, args.method, args.trials)
            print(f"best lr {lr:.3e}")
        elif args.command == "infer":
            if not (args.manifest or args.image):
                raise CliError("infer needs --manifest and/or --image")
            infer(args.checkpoint, args.out, args.manifest, args.image, s.tile_size, s.overlap)
        elif args.command == "refine":
            print(refine(args.checkpoint, args.manifest, args.out))
        elif args.command == "evaluate":
            for rep in evaluate(args.runs, args.manifest, args.out, args.cohort, s.tile_size, s.overlap):
                print(f"{rep.method:<18} {rep.cohort:<14} pooled AUC {_fmt(rep.pooled_auc)}")
        elif args.command == "report":
            _, complete = report(args.out, args.expect)
            print(open(os.path.join(args.out, "report.md")).read(), end="")
            if not complete:
                print("some method/cohort cells are absent", file=sys.stderr)
                return 1
        elif args.command == "pipeline":
            rows, complete = pipeline(cfg, args.out)
            print(open(os.path.join(args.out, "results", "report.md")).read(), end="")
            if not complete:
                return 1
    except (CliError, config_mod.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
