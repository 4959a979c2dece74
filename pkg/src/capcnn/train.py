"""Training loop, class-balanced sampling, SGD with momentum, and metrics.

Class imbalance is handled at two levels. ``oversample_balance`` pads every
class's index pool up to the largest class by drawing with replacement,
which fixes the nominal epoch size. ``balanced_batch`` draws each training
batch with equal per-class counts (up to a remainder of 1), sampling with
replacement inside each class; this is what the training loop actually
uses, so no batch is biased toward the most frequent class.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InsufficientDataError
from .layers import BatchNorm, softmax_cross_entropy_batch

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    max_epochs: int = 200
    batch_size: int = 128
    l2_coefficient: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be non-negative")


@dataclass
class ImageSet:
    """A labeled stack of network inputs: images (n, h, w, c), labels (n,)."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (n, h, w, c), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("labels must be one per image")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label index out of range")

    def __len__(self):
        return self.images.shape[0]

    def class_indices(self):
        """Per-class index arrays, in class order (possibly empty arrays)."""
        return [np.flatnonzero(self.labels == k) for k in range(len(self.class_names))]

    def class_counts(self):
        return tuple(int((self.labels == k).sum()) for k in range(len(self.class_names)))

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[indices], self.labels[indices], self.class_names)

    def concat(self, other):
        if other.class_names != self.class_names:
            raise ValueError("cannot concatenate sets with different classes")
        return ImageSet(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            self.class_names,
        )


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns are predicted classes."""

    counts: np.ndarray
    class_names: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise DimensionError(f"confusion matrix must be {k}x{k}")

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts)) / self.total

    def __str__(self):
        width = max(len(n) for n in self.class_names) + 2
        head = " " * width + "".join(f"{n:>{width}}" for n in self.class_names)
        rows = [
            f"{name:>{width}}" + "".join(f"{v:>{width}}" for v in row)
            for name, row in zip(self.class_names, self.counts)
        ]
        return "\n".join([head] + rows)


@dataclass
class LossHistory:
    """Per-iteration mean training loss, exportable as CSV."""

    losses: list = field(default_factory=list)
    iters_per_epoch: int = 1

    def __len__(self):
        return len(self.losses)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "epoch", "meanLoss"])
            for i, loss in enumerate(self.losses):
                writer.writerow([i, i // self.iters_per_epoch, repr(float(loss))])


def sgd_momentum_step(net, config):
    """One SGD-with-momentum update over every parameter of the network.

    For each parameter: g' = g + l2 * w (weight decay on convolution
    kernels and dense weights only), v <- momentum * v - lr * g',
    w <- w + v. Consumes the stored gradients in place.
    """
    lr = config.learning_rate
    mom = config.momentum
    l2 = config.l2_coefficient
    for _, layer in net.param_layers():
        for pname, w in layer.params.items():
            g = layer.grads.get(pname)
            if g is None or g.shape != w.shape:
                raise DimensionError(f"gradient missing or mis-shaped for {pname}")
            v = layer.velocity[pname]
            if l2 and pname in layer.decay_params:
                g += l2 * w
            g *= lr
            v *= mom
            v -= g
            w += v


def oversample_balance(class_indices, rng):
    """Pad every class's index list to the largest class size.

    Original members are kept; additions are uniform draws with
    replacement from the same class.
    """
    sizes = [len(ix) for ix in class_indices]
    for k, size in enumerate(sizes):
        if size == 0:
            raise InsufficientDataError(f"class {k} has no samples to balance from")
    target = max(sizes)
    out = []
    for ix in class_indices:
        ix = np.asarray(ix, dtype=np.int64)
        extra = target - ix.size
        if extra:
            draws = rng.integers(0, ix.size, size=extra)
            ix = np.concatenate([ix, ix[draws]])
        out.append(ix)
    return out


def balanced_batch(train_set, batch_size, rng):
    """Indices for one batch with per-class counts equal up to 1.

    Sampling is with replacement inside each class, and when batch_size
    does not divide evenly the classes receiving one extra sample are
    chosen by the generator. Every class of the set must have at least
    one sample.
    """
    pools = train_set.class_indices()
    for k, ix in enumerate(pools):
        if ix.size == 0:
            raise InsufficientDataError(
                f"class {train_set.class_names[k]} has no training samples"
            )
    n_classes = len(pools)
    base = batch_size // n_classes
    rem = batch_size % n_classes
    counts = np.full(n_classes, base, dtype=np.int64)
    if rem:
        counts[rng.permutation(n_classes)[:rem]] += 1
    parts = [
        pool[rng.integers(0, pool.size, size=counts[k])]
        for k, pool in enumerate(pools)
    ]
    return np.concatenate(parts)


def finalize_batchnorm_stats(net, images, batch_size=EVAL_BATCH):
    """Replace batch-norm running statistics with population statistics.

    The exponential running estimates lag the parameters badly when
    training lasts only a few dozen iterations, which wrecks
    inference-mode accuracy. This recomputes each normalization layer's
    statistics over ``images`` with the final parameters, front to back,
    with all earlier layers in inference mode.
    """
    for idx, (_, layer) in enumerate(net.named_layers):
        if not isinstance(layer, BatchNorm):
            continue
        total = np.zeros(layer.channels, dtype=np.float64)
        total_sq = np.zeros(layer.channels, dtype=np.float64)
        count = 0
        for start in range(0, images.shape[0], batch_size):
            a = images[start : start + batch_size].astype(net.dtype, copy=False)
            for _, prev in net.named_layers[:idx]:
                a = prev.forward(a, training=False)
            axes = tuple(range(a.ndim - 1))
            total += a.sum(axis=axes, dtype=np.float64)
            total_sq += (a * a).sum(axis=axes, dtype=np.float64)
            count += int(np.prod([a.shape[ax] for ax in axes]))
        mean = total / count
        var = np.maximum(total_sq / count - mean * mean, 0.0)
        layer.running_mean = mean.astype(layer.running_mean.dtype)
        layer.running_var = var.astype(layer.running_var.dtype)


def train_network(net, train_set, config, verbose=False, finalize_stats=True):
    """Train in place for ``config.max_epochs`` epochs and return
    ``(net, LossHistory)``.

    The nominal epoch size is the oversampled-balanced set size (number
    of classes times the largest class count), giving
    ceil(size / batch_size) iterations per epoch. Each iteration draws a
    balanced batch, runs forward in training mode, and applies one
    momentum step. After the last epoch the batch-norm running statistics
    are recomputed over the training images (see
    ``finalize_batchnorm_stats``) unless ``finalize_stats`` is off.
    Fully deterministic given ``config.seed``.
    """
    pools = train_set.class_indices()
    for k, ix in enumerate(pools):
        if ix.size == 0:
            raise InsufficientDataError(
                f"class {train_set.class_names[k]} has no training samples"
            )
    balanced_n = len(pools) * max(ix.size for ix in pools)
    iters_per_epoch = math.ceil(balanced_n / config.batch_size)
    history = LossHistory([], iters_per_epoch)
    if config.max_epochs == 0:
        return net, history
    rng = np.random.default_rng(config.seed)
    l2 = config.l2_coefficient
    for epoch in range(config.max_epochs):
        for _ in range(iters_per_epoch):
            idx = balanced_batch(train_set, config.batch_size, rng)
            logits = net.forward(train_set.images[idx], training=True, rng=rng)
            l2_term = 0.5 * l2 * net.weight_sumsq() if l2 else 0.0
            loss, dlogits = softmax_cross_entropy_batch(
                logits, train_set.labels[idx], l2_term
            )
            net.backward(dlogits)
            sgd_momentum_step(net, config)
            history.losses.append(loss)
        if verbose:
            print(f"epoch {epoch + 1}/{config.max_epochs}  "
                  f"loss {history.losses[-1]:.4f}")
    if finalize_stats:
        finalize_batchnorm_stats(net, train_set.images)
    return net, history


def predict(net, images, batch_size=EVAL_BATCH):
    """Class predictions in inference mode; exact ties go to the lowest
    class index."""
    preds = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits = net.forward(images[start : start + batch_size], training=False)
        preds[start : start + batch_size] = np.argmax(logits, axis=1)
    return preds


def evaluate(net, test_set, batch_size=EVAL_BATCH):
    """Confusion matrix of the network on a test set (inference mode).

    Never mutates the network: dropout is inactive and batch norm reads
    its running statistics without updating them.
    """
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    k = len(test_set.class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    preds = predict(net, test_set.images, batch_size)
    np.add.at(counts, (test_set.labels, preds), 1)
    return ConfusionMatrix(counts, test_set.class_names)
