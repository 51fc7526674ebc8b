"""Command-line front end: train a teacher, compose transfer sets, distill a
student, analyze the results, and replay any manifest for a bit-exact check.

Every command writes a RunManifest next to its outputs holding the resolved
configuration, seeds, and input/output digests. ``repro`` rebuilds the argv
from a manifest's config block, reruns the command into a scratch directory,
and compares output digests name by name.

Exit codes: 0 success, 2 usage or input problems, 3 reproducibility mismatch,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from . import __version__, zoo
from .analyze import RunRecord, extract_features, hausdorff, report_experiment
from .compose import (TransferSet, compose_balanced, compose_unbalanced,
                      label_distribution)
from .data import (LabeledDataset, ArraySource, load_idx, load_idx_images,
                   make_source, default_augment_ops, SOURCE_KINDS)
from .distill import (DistillConfig, TrainReport, distill_datafree,
                      distill_with_data, evaluate, train_teacher)
from .manifest import RunManifest, file_digest, parse_kv_file
from .network import NonFiniteError
from .optim import SgdConfig


class ReproMismatch(Exception):
    """Replay produced different bytes than the manifest records."""


# ---------------------------------------------------------------- helpers

def _say(msg: str):
    print(msg)


def _dataset_root(explicit: str | None) -> str:
    root = explicit or os.environ.get("DFKD_DATA_DIR", "")
    if not root:
        raise ValueError("no dataset root: pass explicit paths or set DFKD_DATA_DIR")
    return root


def resolve_dataset(name: str, split: str, root: str | None = None) -> tuple[str, str]:
    """Find conventional IDX file names for a dataset under the data root."""
    base = _dataset_root(root)
    prefix = {"train": "train", "test": "t10k"}[split]
    tried = []
    for d in (os.path.join(base, name), base):
        for suffix in ("", ".gz"):
            images = os.path.join(d, f"{prefix}-images-idx3-ubyte{suffix}")
            labels = os.path.join(d, f"{prefix}-labels-idx1-ubyte{suffix}")
            if os.path.exists(images) and os.path.exists(labels):
                return images, labels
            tried.append(images)
    raise ValueError(f"dataset {name!r} ({split}) not found; tried: " + ", ".join(tried))


def _load_split(args, split: str, name: str) -> LabeledDataset:
    img_attr = "images" if split == "train" else "test_images"
    lab_attr = "labels" if split == "train" else "test_labels"
    images = getattr(args, img_attr, None)
    labels = getattr(args, lab_attr, None)
    if images and labels:
        return load_idx(images, labels, name=f"{name}-{split}")
    if getattr(args, "dataset", None):
        images, labels = resolve_dataset(args.dataset, split, getattr(args, "data_dir", None))
        setattr(args, img_attr, images)
        setattr(args, lab_attr, labels)
        return load_idx(images, labels, name=f"{args.dataset}-{split}")
    raise ValueError(f"no {split} data: pass --{img_attr.replace('_', '-')}/"
                     f"--{lab_attr.replace('_', '-')} or --dataset with DFKD_DATA_DIR")


def parse_source_spec(spec: str, default_seed: int):
    """One source: ``kind:count[:seed]`` for procedural kinds, ``images:<path>``
    for an IDX image file consumed in stored order."""
    head, _, rest = spec.partition(":")
    if head == "images":
        if not rest:
            raise ValueError(f"source spec {spec!r}: images needs a path")
        return ArraySource(f"images({os.path.basename(rest)})", load_idx_images(rest)), rest
    if head not in SOURCE_KINDS:
        raise ValueError(f"unknown source kind {head!r} in {spec!r}; "
                         f"have {SOURCE_KINDS} and images:<path>")
    parts = rest.split(":") if rest else []
    if not parts or not parts[0]:
        raise ValueError(f"source spec {spec!r}: missing sample count")
    count = int(parts[0])
    seed = int(parts[1]) if len(parts) > 1 else default_seed
    return make_source(head, count, seed=seed, name=f"{head}-{seed}"), None


def _sgd_from_args(args) -> SgdConfig:
    return SgdConfig(learning_rate=args.lr, momentum=args.momentum,
                     weight_decay=args.weight_decay, batch_size=args.batch_size,
                     epochs=args.epochs, lr_decay_factor=args.lr_decay_factor,
                     lr_decay_every=args.lr_decay_every)


def _manifest(command: str, args, keys) -> RunManifest:
    m = RunManifest(command=command, tool_version=__version__)
    m.stamp_start()
    for key in keys:
        value = getattr(args, key)
        if value is None:
            value = ""
        if isinstance(value, bool):
            value = str(value).lower()
        m.set_config(key, value)
    return m


def _sibling(out: str, suffix: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + suffix


# Per-command tables driving manifest -> argv reconstruction for `repro`.
# kind: "v" plain value flag, "b" boolean flag, "s" skipped (repro overrides).
_REPLAY = {
    "train-teacher": [
        ("arch", "--arch", "v"), ("activation", "--activation", "v"),
        ("dataset", "--dataset", "v"), ("data_dir", "--data-dir", "v"),
        ("images", "--images", "v"), ("labels", "--labels", "v"),
        ("test_images", "--test-images", "v"), ("test_labels", "--test-labels", "v"),
        ("subset", "--subset", "v"), ("epochs", "--epochs", "v"), ("lr", "--lr", "v"),
        ("momentum", "--momentum", "v"), ("weight_decay", "--weight-decay", "v"),
        ("batch_size", "--batch-size", "v"), ("lr_decay_factor", "--lr-decay-factor", "v"),
        ("lr_decay_every", "--lr-decay-every", "v"), ("seed", "--seed", "v"),
        ("shuffle_seed", "--shuffle-seed", "v"),
        ("balanced_batches", "--balanced-batches", "b"),
    ],
    "compose": [
        ("teacher", "--teacher", "v"), ("sources", "--sources", "v"),
        ("size", "--size", "v"), ("unbalanced", "--unbalanced", "b"),
        ("batch", "--batch", "v"), ("seed", "--seed", "v"),
    ],
    "distill": [
        ("teacher", "--teacher", "v"), ("student_arch", "--student-arch", "v"),
        ("activation", "--activation", "v"), ("transfer", "--transfer", "v"),
        ("images", "--images", "v"), ("labels", "--labels", "v"),
        ("dataset", "--dataset", "v"), ("data_dir", "--data-dir", "v"),
        ("test_images", "--test-images", "v"), ("test_labels", "--test-labels", "v"),
        ("tau", "--tau", "v"), ("lam", "--lambda", "v"),
        ("augment", "--augment", "b"), ("soft_labels", "--soft-labels", "v"),
        ("scale_by_tau_sq", "--scale-by-tau-sq", "b"),
        ("epochs", "--epochs", "v"), ("lr", "--lr", "v"), ("momentum", "--momentum", "v"),
        ("weight_decay", "--weight-decay", "v"), ("batch_size", "--batch-size", "v"),
        ("lr_decay_factor", "--lr-decay-factor", "v"),
        ("lr_decay_every", "--lr-decay-every", "v"), ("seed", "--seed", "v"),
        ("shuffle_seed", "--shuffle-seed", "v"), ("augment_seed", "--augment-seed", "v"),
    ],
    "analyze-histogram": [
        ("teacher", "--teacher", "v"), ("transfer", "--transfer", "v"),
        ("source", "--source", "v"), ("seed", "--seed", "v"),
    ],
    "analyze-hausdorff": [
        ("teacher", "--teacher", "v"), ("set_a", "--set-a", "v"), ("set_b", "--set-b", "v"),
        ("cap", "--cap", "v"), ("seed", "--seed", "v"), ("data_dir", "--data-dir", "v"),
    ],
    "analyze-summary": [
        ("runs", "--runs", "v"), ("teacher", "--teacher", "v"),
        ("reference", "--reference", "v"), ("cap", "--cap", "v"), ("seed", "--seed", "v"),
        ("data_dir", "--data-dir", "v"), ("no_figures", "--no-figures", "b"),
    ],
}


# Flags holding filesystem paths, absolutized before the manifest snapshots the
# config so a replay does not depend on the original working directory.
_PATH_FLAGS = {
    "train-teacher": ["images", "labels", "test_images", "test_labels", "data_dir"],
    "compose": ["teacher"],
    "distill": ["teacher", "transfer", "images", "labels",
                "test_images", "test_labels", "data_dir"],
    "analyze-histogram": ["teacher", "transfer"],
    "analyze-hausdorff": ["teacher", "set_a", "set_b", "data_dir"],
    "analyze-summary": ["teacher", "reference", "data_dir"],
}


def _abs_flag(value: str) -> str:
    if not value:
        return value
    if value.startswith("images:"):
        return "images:" + os.path.abspath(value[len("images:"):])
    if os.path.exists(value):
        return os.path.abspath(value)
    return value


def _absolutize(args, command: str) -> None:
    for name in _PATH_FLAGS.get(command, []):
        if getattr(args, name, None):
            setattr(args, name, _abs_flag(getattr(args, name)))
    if command == "compose" and getattr(args, "sources", None):
        args.sources = ",".join(_abs_flag(s.strip()) for s in args.sources.split(","))
    if command == "analyze-summary" and getattr(args, "runs", None):
        args.runs = ",".join(os.path.abspath(r.strip()) for r in args.runs.split(","))


def _replay_argv(command: str, config: dict[str, str], out: str) -> list[str]:
    table = _REPLAY.get(command)
    if table is None:
        raise ValueError(f"manifest command {command!r} cannot be replayed")
    argv = command.split("-", 1) if command.startswith("analyze-") else [command]
    for key, flag, kind in table:
        value = config.get(key, "")
        if kind == "b":
            if value == "true":
                argv.append(flag)
        elif value != "":
            argv.extend([flag, value])
    argv.extend(["--out", out])
    return argv


# ---------------------------------------------------------------- commands

def cmd_train_teacher(args) -> int:
    man = _manifest("train-teacher", args, [k for k, _, _ in _REPLAY["train-teacher"]])
    train = _load_split(args, "train", args.dataset or "data")
    test = _load_split(args, "test", args.dataset or "data")
    if args.subset:
        if args.subset < 1 or args.subset > len(train):
            raise ValueError(f"--subset {args.subset} outside [1, {len(train)}]")
        train = train.subset(np.arange(args.subset), name=f"{train.name}[:{args.subset}]")
    man.set_config("images", args.images)
    man.set_config("labels", args.labels)
    man.set_config("test_images", args.test_images)
    man.set_config("test_labels", args.test_labels)
    man.add_input("train_images", args.images)
    man.add_input("train_labels", args.labels)
    man.add_input("test_images", args.test_images)
    man.add_input("test_labels", args.test_labels)
    model = zoo.build(args.arch, num_classes=train.num_classes, seed=args.seed,
                      activation=args.activation)
    report = train_teacher(model, train, test, _sgd_from_args(args),
                           balanced_batches=args.balanced_batches,
                           shuffle_seed=args.shuffle_seed, log=_say)
    report.label = f"teacher {args.arch} on {train.name}"
    zoo.save(model, args.out)
    report_path = _sibling(args.out, ".report.csv")
    report.write_csv(report_path)
    from . import plots
    curves_path = plots.training_curves(report, _sibling(args.out, ".curves.png"))
    man.add_output("weights", args.out)
    man.add_output("report", report_path)
    man.add_output("curves", curves_path)
    man.stamp_finish()
    man.write(_sibling(args.out, ".manifest.txt"))
    _say(f"teacher accuracy {report.final_accuracy:.4f} (best epoch {report.best_epoch}); "
         f"wrote {args.out}")
    return 0


def cmd_compose(args) -> int:
    man = _manifest("compose", args, [k for k, _, _ in _REPLAY["compose"]])
    man.add_input("teacher", args.teacher)
    teacher = zoo.load(args.teacher)
    sources = []
    for i, spec in enumerate(args.sources.split(",")):
        source, path = parse_source_spec(spec.strip(), default_seed=args.seed + i)
        sources.append(source)
        if path:
            man.add_input(f"source_{i}", path)
    if args.unbalanced:
        if len(sources) != 1:
            raise ValueError("unbalanced composition takes exactly one source")
        ts = compose_unbalanced(teacher, sources[0], args.size, batch_size=args.batch)
    else:
        ts = compose_balanced(teacher, sources, args.size, batch_size=args.batch)
    if ts.exhausted:
        _say("sources ran dry before the target size:")
        _say(ts.imbalance_report())
    ts.save(args.out)
    hist = ts.histogram(",".join(s.name for s in sources))
    hist_path = _sibling(args.out, ".histogram.csv")
    hist.write_csv(hist_path)
    from . import plots
    fig_path = plots.label_histogram(hist, _sibling(args.out, ".histogram.png"))
    man.add_output("transfer", args.out)
    man.add_output("histogram", hist_path)
    man.add_output("histogram_figure", fig_path)
    man.stamp_finish()
    man.write(_sibling(args.out, ".manifest.txt"))
    _say(f"composed {len(ts)} samples "
         f"({'balanced' if ts.balanced else 'unbalanced'}); wrote {args.out}")
    return 0


def cmd_distill(args) -> int:
    man = _manifest("distill", args, [k for k, _, _ in _REPLAY["distill"]])
    man.add_input("teacher", args.teacher)
    teacher = zoo.load(args.teacher)
    test = _load_split(args, "test", args.dataset or "data")
    man.set_config("test_images", args.test_images)
    man.set_config("test_labels", args.test_labels)
    man.add_input("test_images", args.test_images)
    man.add_input("test_labels", args.test_labels)
    student = zoo.build(args.student_arch, num_classes=teacher.num_classes,
                        seed=args.seed, activation=args.activation)
    cfg = DistillConfig(tau=args.tau, lam=args.lam, sgd=_sgd_from_args(args),
                        augment_ops=default_augment_ops() if args.augment else None,
                        shuffle_seed=args.shuffle_seed, augment_seed=args.augment_seed,
                        soft_label_mode=args.soft_labels,
                        scale_by_tau_sq=args.scale_by_tau_sq)
    if args.transfer:
        if args.lam > 0.0:
            raise ValueError("--lambda needs labeled data (--images/--labels), "
                             "not a transfer set")
        man.add_input("transfer", args.transfer)
        ts = TransferSet.load(args.transfer)
        report = distill_datafree(teacher, student, ts, test, cfg, log=_say)
        origin = "+".join(dict.fromkeys(p.rsplit(":", 1)[0] for p in ts.provenance)) or "transfer"
        man.set_config("transfer_sources", origin)
        man.set_config("transfer_balanced", str(ts.balanced).lower())
    elif args.images and args.labels:
        man.add_input("train_images", args.images)
        man.add_input("train_labels", args.labels)
        train = load_idx(args.images, args.labels, name="train")
        report = distill_with_data(teacher, student, train, test, cfg, log=_say)
    else:
        raise ValueError("pass --transfer or both --images and --labels")
    report.label = f"student {args.student_arch}"
    zoo.save(student, args.out)
    report_path = _sibling(args.out, ".report.csv")
    report.write_csv(report_path)
    from . import plots
    curves_path = plots.training_curves(report, _sibling(args.out, ".curves.png"))
    man.add_output("weights", args.out)
    man.add_output("report", report_path)
    man.add_output("curves", curves_path)
    man.stamp_finish()
    man.write(_sibling(args.out, ".manifest.txt"))
    _say(f"student accuracy {report.final_accuracy:.4f} (best epoch {report.best_epoch}); "
         f"wrote {args.out}")
    return 0


def _load_point_set(spec: str, teacher, args):
    """A point set for hausdorff: transfer container, images:<idx>, or dataset name."""
    if spec.startswith("images:"):
        images = load_idx_images(spec[len("images:"):])
        return extract_features(teacher, images, origin=spec), spec[len("images:"):]
    if os.path.exists(spec):
        ts = TransferSet.load(spec)
        return extract_features(teacher, ts.images, origin=os.path.basename(spec)), spec
    images_path, _ = resolve_dataset(spec, "train", getattr(args, "data_dir", None))
    images = load_idx_images(images_path)
    return extract_features(teacher, images, origin=spec), images_path


def cmd_analyze_histogram(args) -> int:
    man = _manifest("analyze-histogram", args, [k for k, _, _ in _REPLAY["analyze-histogram"]])
    man.add_input("teacher", args.teacher)
    teacher = zoo.load(args.teacher)
    if bool(args.transfer) == bool(args.source):
        raise ValueError("pass exactly one of --transfer or --source")
    if args.transfer:
        man.add_input("transfer", args.transfer)
        ts = TransferSet.load(args.transfer)
        hist = ts.histogram(os.path.basename(args.transfer))
        # per-sample labels are re-derived from the teacher, not trusted from the file
        fresh = label_distribution(teacher, ts.images, source=hist.source)
        if not np.array_equal(fresh.counts, hist.counts):
            raise ValueError("stored labels disagree with the teacher's predictions; "
                             "wrong teacher for this transfer set?")
        hist = fresh
    else:
        source, _ = parse_source_spec(args.source, default_seed=args.seed)
        images, _ = source.take(source.remaining)
        hist = label_distribution(teacher, images, source=source.name)
    hist.write_csv(args.out)
    from . import plots
    fig_path = plots.label_histogram(hist, _sibling(args.out, ".png"))
    man.add_output("histogram", args.out)
    man.add_output("histogram_figure", fig_path)
    man.stamp_finish()
    man.write(_sibling(args.out, ".manifest.txt"))
    top = int(np.argmax(hist.counts))
    _say(f"histogram over {hist.total} samples; modal class {top} "
         f"({hist.fractions[top]:.3f}); wrote {args.out}")
    return 0


def cmd_analyze_hausdorff(args) -> int:
    man = _manifest("analyze-hausdorff", args, [k for k, _, _ in _REPLAY["analyze-hausdorff"]])
    man.add_input("teacher", args.teacher)
    teacher = zoo.load(args.teacher)
    feats_a, path_a = _load_point_set(args.set_a, teacher, args)
    feats_b, path_b = _load_point_set(args.set_b, teacher, args)
    man.add_input("set_a", path_a)
    man.add_input("set_b", path_b)
    result = hausdorff(feats_a, feats_b, cap=args.cap, seed=args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("set_a,set_b,distance,forward,backward,mode\n")
        fh.write(f"{args.set_a},{args.set_b},{result.distance:.10g},"
                 f"{result.forward:.10g},{result.backward:.10g},"
                 f"{'approximate' if result.approximate else 'exact'}\n")
    man.add_output("distance", args.out)
    man.stamp_finish()
    man.write(_sibling(args.out, ".manifest.txt"))
    _say(str(result))
    return 0


def cmd_analyze_summary(args) -> int:
    man = _manifest("analyze-summary", args, [k for k, _, _ in _REPLAY["analyze-summary"]])
    teacher = None
    reference = None
    if args.teacher:
        man.add_input("teacher", args.teacher)
        teacher = zoo.load(args.teacher)
    if args.reference:
        if teacher is None:
            raise ValueError("--reference needs --teacher for feature extraction")
        ref_feats, ref_path = _load_point_set(args.reference, teacher, args)
        man.add_input("reference", ref_path)
        reference = ref_feats
    records = []
    for i, man_path in enumerate(args.runs.split(",")):
        man_path = man_path.strip()
        run = RunManifest.read(man_path)
        if run.command != "distill":
            raise ValueError(f"{man_path}: expected a distill manifest, got {run.command!r}")
        man.add_input(f"run_{i}", man_path)
        report_path = run.outputs["report"][0]
        rows = TrainReport.read_csv(report_path)
        final = rows[-1][2]
        best = max(r[2] for r in rows)
        best_epoch = max(rows, key=lambda r: r[2])[0]
        report = TrainReport(rows, final_accuracy=best, best_accuracy=best,
                             best_epoch=best_epoch, wall_seconds=0.0)
        source = run.config.get("transfer_sources", run.config.get("dataset", "data"))
        balanced = run.config.get("transfer_balanced", "false") == "true"
        augmented = run.config.get("augment", "false") == "true"
        hist = None
        distance = None
        transfer_path = run.inputs.get("transfer", ("", ""))[0]
        if transfer_path and os.path.exists(transfer_path):
            ts = TransferSet.load(transfer_path)
            hist = ts.histogram(source)
            if reference is not None:
                feats = extract_features(teacher, ts.images, origin=source)
                distance = hausdorff(feats, reference, cap=args.cap, seed=args.seed)
        records.append(RunRecord(source=source, balanced=balanced, augmented=augmented,
                                 report=report, histogram=hist, distance=distance,
                                 manifest_hash=run.identity_digest()))
    written = report_experiment(records, args.out, make_figures=not args.no_figures)
    for path in written:
        man.add_output(os.path.basename(path), path)
    man.stamp_finish()
    man.write(os.path.join(args.out, "summary.manifest.txt"))
    _say(f"wrote {len(written)} report files to {args.out}")
    return 0


def cmd_repro(args) -> int:
    man = RunManifest.read(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))

    def _resolve(path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))

    for name, (path, digest) in man.inputs.items():
        path = _resolve(path)
        if not os.path.exists(path):
            raise ValueError(f"input {name} is missing: {path}")
        actual = file_digest(path)
        if actual != digest:
            raise ValueError(f"input {name} changed since the run: {path} "
                             f"(recorded {digest}, found {actual})")
    if not man.outputs:
        raise ValueError("manifest lists no outputs to verify")
    workdir = args.workdir or tempfile.mkdtemp(prefix="dfkd-repro-")
    os.makedirs(workdir, exist_ok=True)
    if man.command == "analyze-summary":
        out = os.path.join(workdir, "summary")
    else:
        first = man.outputs.get("weights") or man.outputs.get("transfer") \
            or man.outputs.get("histogram") or man.outputs.get("distance")
        if first is None:
            raise ValueError(f"manifest for {man.command!r} has no recognized primary output")
        out = os.path.join(workdir, os.path.basename(first[0]))
    argv = _replay_argv(man.command, man.config, out)
    _say(f"replaying: dfkd {' '.join(argv)}")
    code = _dispatch(argv)
    if code != 0:
        raise ValueError(f"replay run failed with exit code {code}")
    mismatched = []
    for name, (path, digest) in sorted(man.outputs.items()):
        replay_path = os.path.join(os.path.dirname(out) if man.command != "analyze-summary"
                                   else out, os.path.basename(path))
        if man.command == "analyze-summary":
            replay_path = os.path.join(out, os.path.basename(path))
        if not os.path.exists(replay_path):
            mismatched.append(f"{name}: replay did not produce {os.path.basename(path)}")
            continue
        actual = file_digest(replay_path)
        if actual != digest:
            mismatched.append(f"{name}: digest {actual} != recorded {digest}")
    if mismatched:
        raise ReproMismatch("replay diverged:\n  " + "\n  ".join(mismatched))
    _say(f"replay matched all {len(man.outputs)} outputs bit for bit")
    return 0


# ---------------------------------------------------------------- parser

def _add_sgd_flags(p, lr: float, epochs: int, factor: float, every: int):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr-decay-factor", type=float, default=factor)
    p.add_argument("--lr-decay-every", type=int, default=every)


def _add_data_flags(p):
    p.add_argument("--dataset", default="", help="dataset name under DFKD_DATA_DIR")
    p.add_argument("--data-dir", default="", help="override DFKD_DATA_DIR")
    p.add_argument("--images", default="", help="train images IDX path")
    p.add_argument("--labels", default="", help="train labels IDX path")
    p.add_argument("--test-images", default="", help="test images IDX path")
    p.add_argument("--test-labels", default="", help="test labels IDX path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfkd",
                                     description="data-free distillation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="supervised training of a teacher net")
    p.add_argument("--config", default="", help="key=value file; flags override it")
    p.add_argument("--arch", default="lenet5", choices=sorted(zoo.ARCH_WIDTHS))
    p.add_argument("--activation", default="tanh", choices=["tanh", "relu"])
    _add_data_flags(p)
    p.add_argument("--subset", type=int, default=0,
                   help="train on the first N samples only (0 = all)")
    _add_sgd_flags(p, lr=0.05, epochs=20, factor=0.2, every=8)
    p.add_argument("--seed", type=int, default=0, help="weight init seed")
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--balanced-batches", action="store_true")
    p.add_argument("--out", required=True, help="output weight file")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("compose", help="build a transfer set from a teacher + sources")
    p.add_argument("--config", default="")
    p.add_argument("--teacher", required=True)
    p.add_argument("--sources", required=True,
                   help="comma list: kind:count[:seed] (uniform/gaussian/shapes) "
                        "or images:<idx path>")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--unbalanced", action="store_true",
                   help="first-N semantics instead of class-balanced quotas")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--seed", type=int, default=0,
                   help="base seed for sources without an explicit one")
    p.add_argument("--out", required=True, help="output transfer-set container")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--config", default="")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-arch", default="lenet5-half", choices=sorted(zoo.ARCH_WIDTHS))
    p.add_argument("--activation", default="tanh", choices=["tanh", "relu"])
    p.add_argument("--transfer", default="", help="transfer-set container (soft labels only)")
    _add_data_flags(p)
    p.add_argument("--tau", type=float, default=20.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="hard-label loss weight; needs --images/--labels")
    p.add_argument("--augment", action="store_true",
                   help="apply the default augmentation pipeline every epoch")
    p.add_argument("--soft-labels", default="precompute", choices=["precompute", "per-epoch"])
    p.add_argument("--scale-by-tau-sq", action="store_true")
    _add_sgd_flags(p, lr=0.01, epochs=30, factor=0.1, every=10)
    p.add_argument("--seed", type=int, default=0, help="student init seed")
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--augment-seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output student weight file")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("analyze", help="histograms, feature distances, summaries")
    asub = p.add_subparsers(dest="analysis", required=True)

    a = asub.add_parser("histogram", help="teacher label distribution of a sample set")
    a.add_argument("--config", default="")
    a.add_argument("--teacher", required=True)
    a.add_argument("--transfer", default="", help="transfer-set container")
    a.add_argument("--source", default="", help="source spec kind:count[:seed]")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True, help="output CSV path")
    a.set_defaults(func=cmd_analyze_histogram)

    a = asub.add_parser("hausdorff", help="feature-space distance between two sets")
    a.add_argument("--config", default="")
    a.add_argument("--teacher", required=True)
    a.add_argument("--set-a", required=True,
                   help="transfer container, images:<idx path>, or dataset name")
    a.add_argument("--set-b", required=True)
    a.add_argument("--cap", type=int, default=2000,
                   help="per-set subsample cap, 0 disables")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--data-dir", default="")
    a.add_argument("--out", required=True, help="output CSV path")
    a.set_defaults(func=cmd_analyze_hausdorff)

    a = asub.add_parser("summary", help="cross-run comparison CSVs and figures")
    a.add_argument("--config", default="")
    a.add_argument("--runs", required=True, help="comma list of distill manifest files")
    a.add_argument("--teacher", default="", help="teacher for feature distances")
    a.add_argument("--reference", default="",
                   help="reference set for distances (needs --teacher)")
    a.add_argument("--cap", type=int, default=2000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--data-dir", default="")
    a.add_argument("--no-figures", action="store_true")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_analyze_summary)

    p = sub.add_parser("repro", help="replay a manifest and verify output digests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--workdir", default="", help="replay directory (default: fresh temp)")
    p.set_defaults(func=cmd_repro)

    return parser


def _apply_config_file(parser, argv):
    """--config provides defaults; explicit flags still override them."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default="")
    found, _ = probe.parse_known_args(argv)
    if not found.config:
        return
    values = parse_kv_file(found.config)
    mapped = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if value.lower() in ("true", "false"):
            mapped[dest] = value.lower() == "true"
        else:
            mapped[dest] = value
    # walk into the subparser the argv actually targets
    target = parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for i, tok in enumerate(argv):
                if tok in action.choices:
                    target = action.choices[tok]
                    rest = argv[i + 1:]
                    for sub_action in target._actions:
                        if isinstance(sub_action, argparse._SubParsersAction):
                            for tok2 in rest:
                                if tok2 in sub_action.choices:
                                    target = sub_action.choices[tok2]
                                    break
                    break
    known = {a.dest for a in target._actions}
    unknown = set(mapped) - known
    if unknown:
        raise ValueError(f"config file sets unknown keys: {sorted(unknown)}")
    target.set_defaults(**mapped)


def _dispatch(argv) -> int:
    parser = build_parser()
    _apply_config_file(parser, argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.command
    if command == "analyze":
        command = f"analyze-{args.analysis}"
    _absolutize(args, command)
    return args.func(args)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _dispatch(argv)
    except ReproMismatch as exc:
        print(f"repro: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4
    except FloatingPointError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
