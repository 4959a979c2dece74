"""Command-line interface.

Subcommands: prepare, synth, train, evaluate, experiment, report. All
commands are deterministic given their flags (seeds included): running
one twice produces identical output files. Diagnostics go to stderr;
data goes to files or stdout. Exit status is 0 on success, 2 on bad
input (missing or malformed files, bad flag values), 1 on anything
unexpected.

A configuration file of dotted key = value lines can preset options,
e.g.::

    train.max_epochs = 200
    train.learning_rate = 0.01
    stft.standardize = true
    channel.priority = C4-A1, C3-A2
    experiment.fractions = 0.125, 0.25, 0.375, 0.5

Command-line flags always override file values, which override built-in
defaults.
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import data, experiments, network
from .dsp import SpectrogramConfig
from .errors import CapError
from .train import TrainConfig, evaluate, train_network


def load_config(path):
    """Parse a dotted key = value config file into a flat dict."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CapError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = line.partition("=")
            values[key.strip()] = _parse_value(text.strip())
    return values


def _parse_value(text):
    if "," in text:
        return [_parse_value(part.strip()) for part in text.split(",")]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for convert in (int, float):
        try:
            return convert(text)
        except ValueError:
            pass
    return text


def _as_list(value):
    return value if isinstance(value, list) else [value]


def build_train_config(cfg, args):
    kwargs = {}
    for name in ("learning_rate", "momentum", "max_epochs", "batch_size",
                 "l2_coefficient"):
        if f"train.{name}" in cfg:
            kwargs[name] = cfg[f"train.{name}"]
        flag = getattr(args, name.replace("learning_rate", "lr"), None) \
            if name == "learning_rate" else getattr(args, name, None)
        if flag is not None:
            kwargs[name] = flag
    return TrainConfig(**kwargs)


def build_stft_config(cfg):
    kwargs = {}
    for name in ("window", "hop", "log_floor", "standardize", "max_bins"):
        if f"stft.{name}" in cfg:
            kwargs[name] = cfg[f"stft.{name}"]
    return SpectrogramConfig(**kwargs)


def _read_file(path, mode="rb"):
    try:
        with open(path, mode) as f:
            return f.read()
    except FileNotFoundError:
        raise CapError(f"cannot open {path}: no such file") from None


def _print_counts(ds):
    counts = ds.class_counts()
    print(f"{'subject':<10}{'A1':>6}{'A2':>6}{'A3':>6}{'N':>6}{'skipped':>9}")
    print(f"{ds.subject_id:<10}{counts['A1']:>6}{counts['A2']:>6}"
          f"{counts['A3']:>6}{counts['N']:>6}{ds.skipped_events:>9}")


def cmd_prepare(args, cfg):
    edf_bytes = _read_file(args.edf)
    annotation_text = _read_file(args.annotations, "r")
    recording = data.parse_edf(edf_bytes)
    events = data.parse_cap_annotations(annotation_text, recording.start_time)
    priority = args.channel or cfg.get("channel.priority",
                                       list(data.DEFAULT_CHANNEL_PRIORITY))
    if isinstance(priority, str):
        channel = priority
    else:
        channel = data.select_channel(recording, tuple(_as_list(priority)))
    print(f"channel: {channel}", file=sys.stderr)
    ds = data.extract_segments(recording, events, channel=channel,
                               subject_id=args.subject)
    data.write_dataset(ds, args.out)
    _print_counts(ds)
    return 0


def cmd_synth(args, cfg):
    try:
        n, a1, a2, a3 = (int(v) for v in args.counts.split(","))
    except ValueError:
        raise CapError(f"--counts must be N,A1,A2,A3 integers, got {args.counts!r}")
    ds = data.synthesize_subject(args.seed, {"N": n, "A1": a1, "A2": a2, "A3": a3},
                                 subject_id=args.subject)
    data.write_dataset(ds, args.out)
    _print_counts(ds)
    return 0


def cmd_train(args, cfg):
    ds = data.read_dataset(args.dataset)
    stft = build_stft_config(cfg)
    config = build_train_config(cfg, args)
    images = experiments.dataset_to_images(ds, args.task, stft)
    split_rng = np.random.default_rng([args.seed, 1])
    train_idx, test_idx = experiments.split_indices(
        images.labels, len(network.TASK_CLASSES[args.task]), args.fraction, split_rng
    )
    net = network.init_network(args.task, seed=[args.seed, 2])
    net, history = train_network(net, images.subset(train_idx),
                                 replace(config, seed=args.seed),
                                 verbose=args.verbose)
    confusion = evaluate(net, images.subset(test_idx))
    if args.checkpoint_out:
        network.save_checkpoint(net, args.checkpoint_out)
    if args.loss_out:
        history.write_csv(args.loss_out)
    print(f"subject {ds.subject_id}  task {args.task}  fraction {args.fraction}  "
          f"seed {args.seed}  accuracy {confusion.accuracy:.4f}")
    print(confusion)
    return 0


def cmd_evaluate(args, cfg):
    ds = data.read_dataset(args.dataset)
    net = network.load_checkpoint(args.checkpoint)
    stft = build_stft_config(cfg)
    images = experiments.dataset_to_images(ds, net.task, stft)
    if args.fraction is not None:
        split_rng = np.random.default_rng([args.seed, 1])
        _, test_idx = experiments.split_indices(
            images.labels, len(net.class_names), args.fraction, split_rng
        )
        images = images.subset(test_idx)
    confusion = evaluate(net, images)
    print(f"subject {ds.subject_id}  task {net.task}  "
          f"samples {confusion.total}  accuracy {confusion.accuracy:.4f}")
    print(confusion)
    return 0


def cmd_experiment(args, cfg):
    ds = data.read_dataset(args.dataset)
    stft = build_stft_config(cfg)
    config = build_train_config(cfg, args)
    fractions = args.fractions or cfg.get("experiment.fractions",
                                          list(experiments.SWEEP_FRACTIONS))
    validated = args.validated_fractions or cfg.get(
        "experiment.validated_fractions", list(experiments.VALIDATED_FRACTIONS))
    runs = args.runs if args.runs is not None else cfg.get(
        "experiment.runs_per_cell", experiments.RUNS_PER_CELL)
    base_seed = args.base_seed if args.base_seed is not None else cfg.get(
        "experiment.base_seed", 0)
    workers = args.workers if args.workers is not None else cfg.get(
        "experiment.workers", 1)
    if args.mode == "sweep":
        results = experiments.run_fraction_sweep(
            ds, args.task, tuple(float(f) for f in _as_list(fractions)),
            runs_per_cell=runs, base_seed=base_seed, config=config,
            stft_config=stft, max_workers=workers,
        )
    else:
        results = experiments.run_retraining_experiment(
            ds, args.task, base_fraction=args.base_fraction,
            validated_fractions=tuple(float(f) for f in _as_list(validated)),
            runs_per_cell=runs, base_seed=base_seed, config=config,
            stft_config=stft,
        )
    experiments.write_results_csv(results, args.results_out)
    report = experiments.aggregate_report(results)
    if args.report_out:
        with open(args.report_out, "w") as f:
            f.write(report + "\n")
    print(report)
    return 0


def cmd_report(args, cfg):
    results = experiments.read_results_csv(args.results)
    report = experiments.aggregate_report(results)
    if args.out:
        with open(args.out, "w") as f:
            f.write(report + "\n")
    print(report)
    return 0


def _add_train_flags(p):
    p.add_argument("--epochs", dest="max_epochs", type=int, default=None,
                   help="training epochs (default 200)")
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--l2", dest="l2_coefficient", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capcnn",
        description="Per-subject CNN classification of EEG sleep A-phases.",
    )
    parser.add_argument("--config", default=None,
                        help="dotted key = value configuration file")
    parser.add_argument("--verbose", "-v", action="store_true",
                        help="per-epoch training progress on stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="extract segments from an EDF recording")
    p.add_argument("--edf", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", default=None, help="EEG channel label")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic subject dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--counts", required=True, help="N,A1,A2,A3 segment counts")
    p.add_argument("--subject", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network on a dataset split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", choices=network.TASKS, required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-out", default=None)
    p.add_argument("--loss-out", default=None,
                   help="write per-iteration loss history CSV")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fraction", type=float, default=None,
                   help="evaluate on the test side of this split")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run a sweep or retraining experiment")
    p.add_argument("--dataset", required=True)
    p.add_argument("--task", choices=network.TASKS, required=True)
    p.add_argument("--mode", choices=("sweep", "retrain"), required=True)
    p.add_argument("--results-out", required=True)
    p.add_argument("--report-out", default=None)
    p.add_argument("--fractions", type=float, nargs="+", default=None)
    p.add_argument("--base-fraction", type=float, default=0.125)
    p.add_argument("--validated-fractions", type=float, nargs="+", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--base-seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render a table from a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = {}
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError:
            print(f"error: cannot open {args.config}: no such file", file=sys.stderr)
            return 2
        except CapError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
    try:
        return args.func(args, cfg)
    except CapError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
