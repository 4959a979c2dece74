"""Per-subject experiment protocols: training-fraction sweeps and
retraining with simulated expert validation.

Both protocols train ad-hoc networks on one subject's data and evaluate
on the remainder of the same subject's data. Every run is seeded as
``base_seed + run_index``; substreams for splitting, initialization and
training are derived from that, so runs are reproducible and independent
of execution order.
"""

import copy
import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import SUBTYPES, SubjectDataset
from .dsp import DEFAULT_SPECTROGRAM, segment_image
from .errors import InsufficientDataError
from .network import TASK_AN, TASK_CLASSES, TASKS, init_network
from .train import ConfusionMatrix, ImageSet, TrainConfig, evaluate, predict, train_network

SWEEP_FRACTIONS = (0.125, 0.25, 0.375, 0.5)
VALIDATED_FRACTIONS = (0.2, 0.3, 0.4, 0.5)
RUNS_PER_CELL = 20


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float
    seed: int
    task: str

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class RunResult:
    seed: int
    confusion: ConfusionMatrix
    train_counts: tuple
    test_count: int

    @property
    def accuracy(self):
        return self.confusion.accuracy


@dataclass
class ExperimentResult:
    subject_id: str
    task: str
    train_fraction: float
    runs: list
    validated_fraction: float | None = None

    @property
    def accuracies(self):
        return np.array([r.accuracy for r in self.runs])

    @property
    def mean_accuracy(self):
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self):
        # Population standard deviation over the runs.
        return float(self.accuracies.std())


def task_label_index(task, label):
    """Class index of a segment label under a task, or None if ineligible."""
    if task == TASK_AN:
        return 0 if label in SUBTYPES else 1
    return SUBTYPES.index(label) if label in SUBTYPES else None


def dataset_to_images(ds, task, stft_config=DEFAULT_SPECTROGRAM):
    """Spectrogram images and class labels for every eligible segment.

    The binary task uses all segments (classes A, N); the subtype task
    uses A segments only (classes A1, A2, A3).
    """
    images = []
    labels = []
    for seg in ds.segments:
        k = task_label_index(task, seg.label)
        if k is None:
            continue
        images.append(segment_image(seg.samples, stft_config))
        labels.append(k)
    class_names = TASK_CLASSES[task]
    if not images:
        h = stft_config.max_bins
        return ImageSet(np.zeros((0, h, 0, 1), np.float32), np.zeros(0, np.int64),
                        class_names)
    return ImageSet(np.stack(images), np.array(labels), class_names)


def split_indices(labels, n_classes, fraction, rng):
    """Disjoint train/test index split with per-class training counts of
    floor(fraction * class size).

    Classes absent from ``labels`` are skipped; a present class whose
    training count comes out to zero is an error, since balancing needs
    at least one sample from every represented class.
    """
    train_parts = []
    test_parts = []
    for k in range(n_classes):
        pool = np.flatnonzero(labels == k)
        if pool.size == 0:
            continue
        n_train = int(np.floor(fraction * pool.size))
        if n_train == 0:
            raise InsufficientDataError(
                f"class index {k}: floor({fraction} * {pool.size}) training "
                "samples is zero"
            )
        picked = rng.permutation(pool.size)[:n_train]
        mask = np.zeros(pool.size, dtype=bool)
        mask[picked] = True
        train_parts.append(pool[mask])
        test_parts.append(pool[~mask])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def split_dataset(ds, config):
    """Partition a subject's eligible segments into train and test datasets."""
    eligible = [seg for seg in ds.segments
                if task_label_index(config.task, seg.label) is not None]
    labels = np.array(
        [task_label_index(config.task, seg.label) for seg in eligible], dtype=np.int64
    )
    rng = np.random.default_rng(config.seed)
    train_idx, test_idx = split_indices(
        labels, len(TASK_CLASSES[config.task]), config.train_fraction, rng
    )

    def pick(indices):
        return SubjectDataset(
            subject_id=ds.subject_id,
            segments=[eligible[i] for i in indices],
            channel_name=ds.channel_name,
            provenance=ds.provenance,
        )

    return pick(train_idx), pick(test_idx)


def _run_sweep_cell(images, task, fraction, run_seed, config):
    split_rng = np.random.default_rng([run_seed, 1])
    train_idx, test_idx = split_indices(
        images.labels, len(TASK_CLASSES[task]), fraction, split_rng
    )
    train_set = images.subset(train_idx)
    test_set = images.subset(test_idx)
    net = init_network(task, seed=[run_seed, 2])
    net, _ = train_network(net, train_set, replace(config, seed=run_seed))
    confusion = evaluate(net, test_set)
    return RunResult(
        seed=run_seed,
        confusion=confusion,
        train_counts=train_set.class_counts(),
        test_count=len(test_set),
    )


def run_fraction_sweep(ds, task, fractions=SWEEP_FRACTIONS, runs_per_cell=RUNS_PER_CELL,
                       base_seed=0, config=None, stft_config=DEFAULT_SPECTROGRAM,
                       max_workers=1):
    """Train and evaluate fresh networks per (fraction, run) cell.

    Returns one ExperimentResult per fraction, each aggregating
    ``runs_per_cell`` independent runs seeded ``base_seed + run``.
    """
    config = config or TrainConfig()
    images = dataset_to_images(ds, task, stft_config)
    jobs = [(fraction, base_seed + r) for fraction in fractions
            for r in range(runs_per_cell)]

    def work(job):
        fraction, run_seed = job
        return _run_sweep_cell(images, task, fraction, run_seed, config)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            run_results = list(pool.map(work, jobs))
    else:
        run_results = [work(job) for job in jobs]

    results = []
    for i, fraction in enumerate(fractions):
        runs = run_results[i * runs_per_cell : (i + 1) * runs_per_cell]
        results.append(ExperimentResult(ds.subject_id, task, fraction, runs))
    return results


def simulate_validation(net, pool, validated_fraction, rng):
    """Split a pool into simulated expert-validated items and the rest.

    The network classifies the pool in inference mode; from the correctly
    classified subset, round(validated_fraction * pool size) items are
    drawn uniformly without replacement (capped at the number of correct
    items) and returned with their true labels. If nothing was classified
    correctly the validated set is empty and a warning is issued.
    """
    if not 0.0 < validated_fraction < 1.0:
        raise ValueError("validated_fraction must lie in (0, 1)")
    if len(pool) == 0:
        raise ValueError("pool is empty")
    preds = predict(net, pool.images)
    correct = np.flatnonzero(preds == pool.labels)
    want = int(np.floor(validated_fraction * len(pool) + 0.5))
    take = min(want, correct.size)
    if take == 0:
        warnings.warn("no correctly classified items to validate", stacklevel=2)
        chosen = np.zeros(0, dtype=np.int64)
    else:
        chosen = np.sort(rng.choice(correct, size=take, replace=False))
    rest = np.setdiff1d(np.arange(len(pool)), chosen)
    return pool.subset(chosen), pool.subset(rest)


def run_retraining_experiment(ds, task, base_fraction=0.125,
                              validated_fractions=VALIDATED_FRACTIONS,
                              runs_per_cell=RUNS_PER_CELL, base_seed=0,
                              config=None, stft_config=DEFAULT_SPECTROGRAM,
                              warm_start=False):
    """Two-stage protocol: train small, simulate validation, retrain.

    Per run: split at ``base_fraction``; train stage 1 and evaluate it on
    the held-out pool (the base case). Then, for each validated fraction,
    draw simulated expert-validated items from the pool using the stage-1
    network, train a network on the original training set plus the
    validated set (fresh initialization unless ``warm_start``), and
    evaluate on the remaining pool items. The stage-1 network is reused
    across validated fractions within a run.

    Returns the base-case ExperimentResult followed by one per validated
    fraction.
    """
    config = config or TrainConfig()
    images = dataset_to_images(ds, task, stft_config)
    n_classes = len(TASK_CLASSES[task])
    base_runs = []
    retrain_runs = {vf: [] for vf in validated_fractions}
    for r in range(runs_per_cell):
        run_seed = base_seed + r
        split_rng = np.random.default_rng([run_seed, 1])
        train_idx, pool_idx = split_indices(images.labels, n_classes, base_fraction,
                                            split_rng)
        train_set = images.subset(train_idx)
        pool = images.subset(pool_idx)
        stage1 = init_network(task, seed=[run_seed, 2])
        stage1, _ = train_network(stage1, train_set, replace(config, seed=run_seed))
        base_runs.append(
            RunResult(run_seed, evaluate(stage1, pool),
                      train_set.class_counts(), len(pool))
        )
        for vf in validated_fractions:
            val_rng = np.random.default_rng([run_seed, 3, int(round(vf * 1000))])
            validated, remaining = simulate_validation(stage1, pool, vf, val_rng)
            stage2_train = train_set.concat(validated)
            if warm_start:
                stage2 = copy.deepcopy(stage1)
            else:
                stage2 = init_network(task, seed=[run_seed, 4, int(round(vf * 1000))])
            stage2, _ = train_network(stage2, stage2_train,
                                      replace(config, seed=run_seed))
            retrain_runs[vf].append(
                RunResult(run_seed, evaluate(stage2, remaining),
                          stage2_train.class_counts(), len(remaining))
            )
    results = [ExperimentResult(ds.subject_id, task, base_fraction, base_runs)]
    for vf in validated_fractions:
        results.append(
            ExperimentResult(ds.subject_id, task, base_fraction, retrain_runs[vf],
                             validated_fraction=vf)
        )
    return results


def aggregate_report(results):
    """Markdown table of mean accuracy (as a percentage) per cell.

    Rows are subjects plus an all-subject average; columns are the sweep
    fractions (or the base case and validated fractions for retraining
    results), in ascending order. Cells show mean and population standard
    deviation over runs, both to two decimals.
    """
    if not results:
        raise ValueError("no results to report")

    def column_key(res):
        if res.validated_fraction is None:
            return ("fraction", res.train_fraction)
        return ("validated", res.validated_fraction)

    lines = []
    for task in TASKS:
        task_results = [r for r in results if r.task == task]
        if not task_results:
            continue
        columns = sorted({column_key(r) for r in task_results})
        has_base = any(r.validated_fraction is None for r in task_results)
        retrain = any(r.validated_fraction is not None for r in task_results)
        headers = []
        for kind, value in columns:
            if kind == "fraction" and retrain:
                headers.append("base")
            elif kind == "fraction":
                headers.append(f"{value * 100:g}%")
            else:
                headers.append(f"{value * 100:g}% validated")
        subjects = sorted({r.subject_id for r in task_results})
        lines.append(f"### Task {task}")
        lines.append("")
        lines.append("| subject | " + " | ".join(headers) + " |")
        lines.append("|" + "---|" * (len(headers) + 1))
        cells = {}
        for r in task_results:
            cells[(r.subject_id, column_key(r))] = r
        for subject in subjects:
            row = [subject]
            for col in columns:
                r = cells.get((subject, col))
                if r is None:
                    row.append("")
                else:
                    row.append(f"{r.mean_accuracy * 100:.2f} ± {r.std_accuracy * 100:.2f}")
            lines.append("| " + " | ".join(row) + " |")
        avg_row = ["average"]
        for col in columns:
            means = [cells[(s, col)].mean_accuracy for s in subjects
                     if (s, col) in cells]
            if means:
                avg_row.append(f"{np.mean(means) * 100:.2f}")
            else:
                avg_row.append("")
        lines.append("| " + " | ".join(avg_row) + " |")
        lines.append("")
    return "\n".join(lines)


CSV_HEADER = ["subject", "task", "fraction", "validatedFraction", "run", "seed",
              "accuracy"]


def write_results_csv(results, path):
    """Flat per-run CSV: one row per run with the confusion counts appended."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        n_classes = max(len(r.runs[0].confusion.class_names) for r in results)
        header = list(CSV_HEADER)
        for i in range(n_classes):
            for j in range(n_classes):
                header.append(f"c{i}{j}")
        writer.writerow(header)
        for res in results:
            for run_index, run in enumerate(res.runs):
                row = [
                    res.subject_id,
                    res.task,
                    repr(res.train_fraction),
                    "" if res.validated_fraction is None else repr(res.validated_fraction),
                    run_index,
                    run.seed,
                    repr(run.accuracy),
                ]
                counts = run.confusion.counts
                k = counts.shape[0]
                for i in range(n_classes):
                    for j in range(n_classes):
                        row.append(int(counts[i, j]) if i < k and j < k else "")
                writer.writerow(row)


def read_results_csv(path):
    """Rebuild ExperimentResults from a CSV written by ``write_results_csv``."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][: len(CSV_HEADER)] != CSV_HEADER:
        raise ValueError(f"{path} is not a results file")
    grouped = {}
    for row in rows[1:]:
        subject, task, fraction, vf, _run, seed, _acc = row[: len(CSV_HEADER)]
        class_names = TASK_CLASSES[task]
        k = len(class_names)
        counts = np.array(
            [int(v) for v in row[len(CSV_HEADER) :] if v != ""], dtype=np.int64
        )
        n = int(np.sqrt(counts.size))
        counts = counts.reshape(n, n)[:k, :k]
        confusion = ConfusionMatrix(counts, class_names)
        key = (subject, task, float(fraction), float(vf) if vf else None)
        grouped.setdefault(key, []).append(
            RunResult(int(seed), confusion, (), int(confusion.total))
        )
    results = []
    for (subject, task, fraction, vf), runs in grouped.items():
        results.append(ExperimentResult(subject, task, fraction, runs,
                                        validated_fraction=vf))
    return results
