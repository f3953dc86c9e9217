"""Command-line surface: dump archives from a saved torch model and run
masked-input jobs. Flags mirror HookSpec; exit 0 on success, nonzero with
a diagnostic otherwise."""

from __future__ import annotations

import argparse
import sys

import numpy as np
import torch

from .hook import ExtractorError, HookSpec, dump, _resolve_layer
from .jobs import run_jobs


def _load_model(path) -> torch.nn.Module:
    try:
        return torch.jit.load(path, map_location="cpu")
    except Exception:
        model = torch.load(path, map_location="cpu", weights_only=False)
        if not isinstance(model, torch.nn.Module):
            raise ExtractorError(f"{path} did not contain a torch module")
        return model


def _load_dataset(path):
    data = np.load(path)
    images, labels = data["images"], data["labels"]
    return [(images[i], int(labels[i])) for i in range(images.shape[0])]


def _parse_classes(value: str):
    if value == "true-class":
        return "true-class"
    return tuple(int(v) for v in value.split(","))


def cmd_dump(args):
    model = _load_model(args.model)
    hook = HookSpec(
        layer=args.layer,
        classes=_parse_classes(args.classes),
        batch_size=args.batch_size,
        device=args.device,
    )
    gap_head = _resolve_layer(model, args.gap_head) if args.gap_head else None
    dump(
        model,
        _load_dataset(args.dataset),
        hook,
        args.out,
        archive_id=args.archive_id,
        model_id=args.model_id,
        dataset_split=args.split,
        class_names=args.class_names.split(",") if args.class_names else None,
        gap_head=gap_head,
        store_inputs=not args.no_inputs,
    )
    print(f"archive -> {args.out}")


def cmd_run_jobs(args):
    model = _load_model(args.model)
    summary = run_jobs(model, args.jobs, args.archive, args.out, device=args.device)
    for sid, reason in summary.failures:
        print(f"job {sid} failed: {reason}", file=sys.stderr)
    print(f"{summary.n_done} jobs done, {summary.n_failed} failed -> {args.out}")
    if summary.n_done == 0:
        raise ExtractorError("no job succeeded")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifa-extract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump", help="dump a feature archive from a torch model")
    p.add_argument("--model", required=True, help="TorchScript or pickled nn.Module")
    p.add_argument("--dataset", required=True, help=".npz with images (N,C,H,W) and labels (N,)")
    p.add_argument("--layer", required=True, help="dotted module name of the target layer")
    p.add_argument("--classes", default="true-class",
                   help="'true-class' or comma-separated class ids")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--gap-head", help="dotted name of the Linear after global average pooling")
    p.add_argument("--archive-id", default="extracted")
    p.add_argument("--model-id", default="torch-model")
    p.add_argument("--split", default="other")
    p.add_argument("--class-names", help="comma-separated class names")
    p.add_argument("--no-inputs", action="store_true", help="skip storing input images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("run-jobs", help="execute masked-input jobs")
    p.add_argument("--model", required=True)
    p.add_argument("--jobs", required=True,
                   help="jobs directory (holds manifest.json and the .maskf32 masks)")
    p.add_argument("--archive", required=True, help="archive providing the stored inputs")
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", default="results.json")
    p.set_defaults(func=cmd_run_jobs)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
