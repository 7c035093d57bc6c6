"""Command-line entry point (``hdn``)."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import analysis, fileio, metrics, network, synth, trainer
from .inference import timed_segment

log = logging.getLogger("hyperdense")


def _print_json(obj):
    print(json.dumps(obj, sort_keys=False))


def cmd_count_params(args):
    spec = network.resolve_spec(args.arch)
    counts = network.count_parameters(spec)
    _print_json(counts.weights_only() if args.paper_comparable else counts.to_dict())


def cmd_describe(args):
    spec = network.resolve_spec(args.arch)
    _print_json({"architecture": spec.to_dict(), "layers": network.describe_wiring(spec)})


def cmd_synth(args):
    spec = json.loads(Path(args.spec).read_text())
    entries = synth.synth_dataset(spec, args.out)
    _print_json({"manifest": str(Path(args.out) / "manifest.json"), "subjects": len(entries)})


def _modality_names(entries):
    names = list(entries[0].modality_paths)
    return names


def cmd_train(args):
    cfg = fileio.load_run_config(args.config)
    entries = fileio.load_manifest(args.data)
    train_e = [e for e in entries if e.split == "train"]
    if not train_e:
        raise ValueError("manifest has no training subjects")
    names = _modality_names(train_e)
    if len(names) != cfg.arch.num_modalities:
        raise ValueError(f"architecture expects {cfg.arch.num_modalities} modalities, "
                         f"manifest provides {names}")
    subjects = [fileio.load_subject(e, names) for e in train_e]
    val = [fileio.load_subject(e, names) for e in entries if e.split == "val" and e.label_path]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = network.build_network(cfg.arch, cfg.init_seed, cfg.dtype)
    log_path = out / "log.jsonl"
    with open(log_path, "w") as fh:
        def on_record(rec):
            fh.write(json.dumps(rec) + "\n")
            fh.flush()

        result = trainer.train(net, subjects, cfg.train, cfg.sampler, val or None, out,
                               on_record, modalities=names)
    final = fileio.save_checkpoint(out / "final", net, result.state, cfg.train.epochs,
                                   modalities=names)
    _print_json({"log": str(log_path), "checkpoint": str(final), "steps": result.steps})


def cmd_segment(args):
    ckpt = fileio.load_checkpoint(args.checkpoint)
    entries = fileio.load_manifest(args.data)
    if args.split:
        entries = [e for e in entries if e.split == args.split]
    names = ckpt.modalities or _modality_names(entries)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in entries:
        subj = fileio.load_subject(e, names, with_labels=False)
        labels, probs, report = timed_segment(ckpt.net, subj.modalities)
        fileio.write_volume(out / f"{e.id}_seg.raw", labels, subj.spacing, dtype="u8")
        if args.emit_probs:
            fileio.write_volume(out / f"{e.id}_probs.raw", probs.astype(np.float32), subj.spacing)
        _print_json({"subject": e.id, **report})


def cmd_evaluate(args):
    entries = [e for e in fileio.load_manifest(args.ref) if e.label_path]
    reports = []
    for e in entries:
        ref = fileio.read_volume(e.label_path)
        pred_path = Path(args.pred) / f"{e.id}_seg.raw"
        if not pred_path.exists():
            raise FileNotFoundError(f"no prediction for subject {e.id}: {pred_path}")
        pred = fileio.read_volume(pred_path)
        classes = args.classes or [int(c) for c in np.unique(ref.data) if c != 0]
        reports.append(metrics.evaluate(ref.data, pred.data, classes, ref.spacing, e.id,
                                        symmetric_asd=args.symmetric_asd))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_reports_csv(reports, out)
    metrics.write_reports_json(reports, out.with_suffix(".json"))
    _print_json({"report": str(out), "subjects": len(reports)})


def cmd_analyze(args):
    ckpt = fileio.load_checkpoint(args.checkpoint)
    m = analysis.reuse_matrix(ckpt.net)
    path = analysis.export_heatmap(m, args.out)
    _print_json({"heatmap": str(path), "sources": len(m.sources), "targets": len(m.targets)})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a network on a manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="tiled whole-volume segmentation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--emit-probs", action="store_true")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="DSC / MHD / ASD / AVD per subject and class")
    s.add_argument("--ref", required=True, help="manifest with label paths")
    s.add_argument("--pred", required=True, help="directory of <id>_seg.raw files")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, nargs="+")
    s.add_argument("--symmetric-asd", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("count-params", help="parameter counts as JSON")
    s.add_argument("--arch", required=True, help=f"preset ({', '.join(network.PRESETS)}) or spec.json")
    s.add_argument("--paper-comparable", action="store_true",
                   help="weights only: no biases, no PReLU slopes")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("analyze-weights", help="feature re-use heatmap data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth-data", help="generate a synthetic multi-modal dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("describe", help="wiring table as JSON")
    s.add_argument("--arch", required=True)
    s.set_defaults(func=cmd_describe)
    return p


def _thread_limit():
    n = os.environ.get("HDN_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "command": args.command,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
