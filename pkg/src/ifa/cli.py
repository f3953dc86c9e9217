"""Command-line surface: stats -> im -> cam -> eval -> render workflows.

Exit codes: 0 success, 2 usage error, 3 data error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import archive as ar
from . import campipe as cp
from . import distribution as dist
from . import evaluation as ev
from . import importance as im_mod
from . import refnet as rn
from . import render as rd
from . import schemes as sc

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


def _parse_class(value: str):
    if value == "gt":
        return "gt"
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"--class must be an integer or 'gt', got {value!r}")


def _load_stats(path) -> dist.DistributionStats:
    return dist.DistributionStats.load(path)


def _load_mask_vector(mask_path, class_id) -> tuple:
    mask = im_mod.FeatureMask.load(mask_path)
    if class_id == "gt":
        raise UsageError("--mask with per-true-class generation is not supported; pick a class")
    return mask.column(class_id), mask.rule


def _atomic_json(path, doc):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2))
    tmp.replace(p)


def cmd_stats(args):
    stats = dist.collect_stats(
        args.archive, args.scheme, _parse_class(args.class_id), mode=args.mode,
        workers=args.workers,
    )
    stats.save(args.out)
    print(f"stats: {stats.count} values, P10={stats.p10:.6g}, P90={stats.p90:.6g} -> {args.out}")


def cmd_im(args):
    if args.unified:
        matrix = im_mod.build_im_unified(args.archive, args.scheme)
    else:
        if args.class_id is None:
            raise UsageError("per-class im requires --class (or pass --unified)")
        manifest = ar.read_manifest(args.archive)
        c = _parse_class(args.class_id)
        if c == "gt":
            raise UsageError("per-class im requires an integer --class")
        column = im_mod.build_im_per_class(args.archive, args.scheme, c)
        values = np.zeros((manifest.num_features, manifest.num_classes))
        counts = np.zeros(manifest.num_classes, dtype=np.int64)
        values[:, c] = column
        counts[c] = manifest.sample_count
        matrix = im_mod.ImportanceMatrix(
            values=values,
            counts=counts,
            stds=np.zeros_like(values),
            scheme=sc.parse_scheme(args.scheme),
            archive_id=manifest.archive_id,
            split=manifest.dataset_split,
            class_names=list(manifest.class_names),
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    matrix.save_csv(out)
    matrix.save_meta(out.with_suffix(".meta.json"))
    print(f"importance matrix {matrix.values.shape} -> {out}")


def cmd_mask(args):
    matrix = im_mod.ImportanceMatrix.load_csv(
        args.im, Path(args.im).with_suffix(".meta.json")
    )
    mask = im_mod.threshold_im(matrix, args.rule, k=args.k, im_id=str(args.im))
    mask.save(args.out)
    print(f"mask ({args.rule} k={args.k}) -> {args.out}")


def cmd_cam(args):
    if args.scale == "common" and args.stats is None:
        raise UsageError("--scale common requires --stats")
    stats = _load_stats(args.stats) if args.stats else None
    class_id = _parse_class(args.class_id)
    mask_vec, provenance = (None, None)
    if args.mask:
        mask_vec, provenance = _load_mask_vector(args.mask, class_id)
    target = None
    if args.target_size:
        target = tuple(int(v) for v in args.target_size.split("x"))
        if len(target) != 2:
            raise UsageError("--target-size must look like 32x32")
    results = cp.generate(
        args.archive,
        args.scheme,
        class_id,
        args.scale,
        stats=stats,
        mask=mask_vec,
        target_dims=target,
        mask_provenance=provenance,
    )
    cp.write_cam_dir(results, args.out, sc.parse_scheme(args.scheme), args.scale)
    print(f"cams -> {args.out}")


def _cam_sums_and_logits(cam_dir, archive_path):
    index = json.loads((Path(cam_dir) / "index.json").read_text())
    logits_by_id = {rec.sample_id: rec.logits for rec in ar.iter_samples(archive_path)}
    ids, sums, logits = [], [], []
    for entry in index["samples"]:
        sid = entry["sample_id"]
        ids.append(sid)
        sums.append(entry["sum"])
        logits.append(float(logits_by_id[sid][entry["class_id"]]))
    return ids, np.asarray(sums), np.asarray(logits), index


def cmd_eval_consistency(args):
    ids, sums, logits, index = _cam_sums_and_logits(args.cams, args.archive)
    report = ev.consistency(
        sums, logits, scheme=index["scheme"], scale_mode=index["scale_mode"]
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_json(out / "consistency.json", report.to_json())
    report.save_csv(out / "consistency.csv", sample_ids=ids)
    print(
        f"consistency: n={report.n} pearson={report.pearson_r:.4f} "
        f"spearman={report.spearman_rho:.4f} selected={report.selected_coefficient}"
    )


def cmd_eval_mask_acc(args):
    matrix = im_mod.ImportanceMatrix.load_csv(
        args.im, Path(args.im).with_suffix(".meta.json")
    )
    mask = im_mod.threshold_im(matrix, "top_pct", k=args.top_pct, im_id=str(args.im))
    report = ev.masked_accuracy(args.archive, mask)
    if args.out:
        _atomic_json(args.out, report.to_json())
    print(
        f"accuracy all={report.accuracy_all:.4f} principal={report.accuracy_principal:.4f} "
        f"non-principal={report.accuracy_nonprincipal:.4f} (n={report.n})"
    )


def cmd_eval_incdrop_emit(args):
    cams = (cp.read_cam(p) for p in sorted((Path(args.cams) / "cams").glob("*.camf32")))
    manifest = ev.emit_mask_jobs(cams, args.archive, args.out, threshold=args.threshold)
    print(f"{len(manifest['jobs'])} mask jobs -> {Path(args.out) / 'jobs'}")


def cmd_eval_incdrop_collect(args):
    pairs = ev.load_job_results(args.results)
    report = ev.collect_inc_drop(pairs)
    if args.out:
        _atomic_json(args.out, report.to_json())
    print(
        f"average increase {report.average_increase:.2f}% / "
        f"average drop {report.average_drop:.2f}% (n={report.n})"
    )


def cmd_refnet_gen(args):
    ds = rn.gen_dataset(args.seed, args.n)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, seed=ds.seed, images=ds.images, labels=ds.labels)
    print(f"dataset n={args.n} seed={args.seed} -> {out}")


def _load_dataset(path) -> rn.ShapesDataset:
    data = np.load(path)
    return rn.ShapesDataset(
        seed=int(data["seed"]), images=data["images"], labels=data["labels"]
    )


def cmd_refnet_train(args):
    ds = _load_dataset(args.dataset)
    model = rn.train(
        ds, head_kind=args.head, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch, seed=args.seed,
    )
    rn.save_model(model, args.out)
    acc = rn.accuracy(model, ds)
    print(f"trained {args.head} refnet, train accuracy {acc:.4f} -> {args.out}")


def cmd_refnet_dump(args):
    ds = _load_dataset(args.dataset)
    model = rn.load_model(args.model)
    rn.dump_archive(
        model, ds, args.out, grads=args.grads,
        archive_id=args.archive_id, dataset_split=args.split,
    )
    print(f"archive ({len(ds)} samples) -> {args.out}")


def cmd_render(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = json.loads((Path(args.cams) / "index.json").read_text())
    inputs = {}
    if args.overlay is not None:
        if not args.archive:
            raise UsageError("--overlay requires --archive for the input images")
        inputs = {rec.sample_id: rec.input for rec in ar.iter_samples(args.archive)}
    count = 0
    for entry in index["samples"]:
        sid = entry["sample_id"]
        cam = cp.read_cam(Path(args.cams) / "cams" / f"{sid:08d}.camf32")
        cam.scheme = index["scheme"]
        if args.overlay is not None:
            png = rd.overlay(cam, inputs.get(sid), args.overlay)
        else:
            png = rd.render_cam(cam)
        name = rd.output_name(sid, entry["class_id"], index["scheme"], index["scale_mode"])
        (out / name).write_bytes(png)
        count += 1
    print(f"{count} PNGs -> {out}")


def cmd_validate(args):
    report = ar.validate_archive(args.archive)
    for finding in report.findings:
        print(f"finding sample={finding.sample_id} check={finding.check}: {finding.detail}")
    print(
        f"{report.sample_count} samples, {len(report.findings)} findings, "
        f"grads coverage {report.grads_coverage:.0%}"
    )
    if report.findings:
        raise ar.ArchiveError(f"{len(report.findings)} validation findings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifa", description=__doc__)
    parser.add_argument("--config", help="JSON file whose keys mirror flags; flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_scheme(p):
        p.add_argument(
            "--scheme", default="grad-cam",
            help="grad-cam | grad-cam++ | xgrad-cam | pixelwise-grad",
        )

    p = sub.add_parser("stats", help="dataset-level distribution of raw CAM values")
    p.add_argument("--archive", required=True)
    add_scheme(p)
    p.add_argument("--class", dest="class_id", default="gt", help="class id or 'gt'")
    p.add_argument("--mode", choices=("exact", "sketch"), default="exact")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="stats.json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("im", help="build an importance matrix")
    p.add_argument("--archive", required=True)
    add_scheme(p)
    p.add_argument("--unified", action="store_true", help="single-pass, per-true-class")
    p.add_argument("--class", dest="class_id", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="im.csv")
    p.set_defaults(func=cmd_im)

    p = sub.add_parser("mask", help="threshold an importance matrix into feature masks")
    p.add_argument("--im", required=True)
    p.add_argument("--rule", choices=("top_pct", "bottom_pct"), default="top_pct")
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--out", default="mask.json")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("cam", help="generate CAMs")
    p.add_argument("--archive", required=True)
    add_scheme(p)
    p.add_argument("--class", dest="class_id", default="gt")
    p.add_argument("--scale", choices=cp.SCALE_MODES, default="individual")
    p.add_argument("--stats", help="stats.json (required for --scale common)")
    p.add_argument("--mask", help="mask.json for FS- generation")
    p.add_argument("--target-size", help="spatial output size, e.g. 32x32")
    p.add_argument("--out", default="cams_out")
    p.set_defaults(func=cmd_cam)

    pe = sub.add_parser("eval", help="evaluation metrics")
    esub = pe.add_subparsers(dest="eval_command", required=True)

    p = esub.add_parser("consistency", help="cam-sum vs logit correlation")
    p.add_argument("--cams", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval_consistency)

    p = esub.add_parser("mask-acc", help="accuracy with feature paths blocked")
    p.add_argument("--archive", required=True)
    p.add_argument("--im", required=True)
    p.add_argument("--top-pct", type=float, default=5.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_mask_acc)

    p = esub.add_parser("incdrop", help="average increase/drop protocol")
    isub = p.add_subparsers(dest="incdrop_command", required=True)
    pi = isub.add_parser("emit", help="write masked-input jobs")
    pi.add_argument("--cams", required=True)
    pi.add_argument("--archive", required=True)
    pi.add_argument("--threshold", type=float, default=0.0)
    pi.add_argument("--out", default=".")
    pi.set_defaults(func=cmd_eval_incdrop_emit)
    pc = isub.add_parser("collect", help="summarize job results")
    pc.add_argument("--results", required=True)
    pc.add_argument("--out")
    pc.set_defaults(func=cmd_eval_incdrop_collect)

    pr = sub.add_parser("refnet", help="reference network pipeline")
    rsub = pr.add_subparsers(dest="refnet_command", required=True)
    pg = rsub.add_parser("gen", help="generate the shapes dataset")
    pg.add_argument("--seed", type=int, required=True)
    pg.add_argument("--n", type=int, required=True)
    pg.add_argument("--out", default="dataset.npz")
    pg.set_defaults(func=cmd_refnet_gen)
    pt = rsub.add_parser("train", help="train the reference CNN")
    pt.add_argument("--dataset", required=True)
    pt.add_argument("--head", choices=("gap_linear", "flatten_linear"), default="gap_linear")
    pt.add_argument("--epochs", type=int, default=10)
    pt.add_argument("--lr", type=float, default=0.1)
    pt.add_argument("--batch", type=int, default=32)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", default="refnet.bin")
    pt.set_defaults(func=cmd_refnet_train)
    pd = rsub.add_parser("dump", help="dump a feature archive")
    pd.add_argument("--dataset", required=True)
    pd.add_argument("--model", required=True)
    pd.add_argument("--grads", choices=("all", "true-class"), default="all")
    pd.add_argument("--archive-id", default="refnet")
    pd.add_argument("--split", choices=ar.DATASET_SPLITS, default="train")
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_refnet_dump)

    p = sub.add_parser("render", help="render CAMs (optionally as overlays) to PNG")
    p.add_argument("--cams", required=True)
    p.add_argument("--archive")
    p.add_argument("--overlay", type=float, help="overlay alpha in [0, 1]")
    p.add_argument("--out", default="render_out")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("validate", help="validate an archive")
    p.add_argument("--archive", required=True)
    p.set_defaults(func=cmd_validate)

    return parser


def _apply_config(parser, argv):
    """Optional config file supplies defaults; explicit flags win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    cfg_path = argv[i + 1]
    doc = json.loads(Path(cfg_path).read_text())
    rest = argv[:i] + argv[i + 2 :]
    extra = []
    for key, value in doc.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        if isinstance(value, bool):
            if value:
                extra.append(flag)
        else:
            extra.extend([flag, str(value)])
    # config-derived flags go after the subcommand words, before explicit flags win by order
    return rest + extra


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ar.ArchiveError, sc.SchemeError, dist.EmptyStatsError, dist.StatsMergeError,
            im_mod.ImportanceError, cp.CamError, ev.EvalError, rd.RenderError,
            rn.TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
