"""Neural-network layers with explicit forward and backward passes.

Everything here operates on batched channels-last arrays: convolutional
layers see ``(batch, height, width, channels)``, dense layers see
``(batch, features)``. Each layer caches whatever its backward pass needs
during forward, so the usual calling pattern is forward -> backward ->
optimizer step, single-threaded per network.

Parameters live in ``layer.params`` (dict of ndarrays), gradients appear
in ``layer.grads`` after backward, and momentum buffers in
``layer.velocity``. ``layer.decay_params`` names the parameters that
receive weight decay (convolution kernels and dense weights only).
"""

import numpy as np

from .errors import CorruptedStateError, DimensionError, InvalidBatchError

KERNEL_SIZE = 3


class Layer:
    """Common bookkeeping for layers with or without parameters."""

    decay_params: frozenset = frozenset()

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.velocity = {}

    def init_velocity(self):
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2D(Layer):
    """3x3 stride-1 convolution with one-pixel zero padding on each border.

    The padding keeps the spatial size unchanged, which is what the fixed
    architecture requires. Kernels are stored as
    ``(kernel_h, kernel_w, in_channels, out_channels)``.
    """

    decay_params = frozenset({"kernels"})

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = KERNEL_SIZE
        shape = (k, k, in_channels, out_channels)
        if rng is None:
            kernels = np.zeros(shape, dtype=dtype)
        else:
            fan_in = k * k * in_channels
            fan_out = k * k * out_channels
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            kernels = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self.params = {
            "kernels": kernels,
            "biases": np.zeros(out_channels, dtype=dtype),
        }
        self._cols = None

    def _im2col(self, x):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        # Block order is (ky, kx, channel), matching the C-order flattening
        # of the kernel array.
        slices = [
            xp[:, dy : dy + h, dx : dx + w, :]
            for dy in range(KERNEL_SIZE)
            for dx in range(KERNEL_SIZE)
        ]
        return np.concatenate(slices, axis=3)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise DimensionError(f"expected (batch, h, w, c) input, got shape {x.shape}")
        n, h, w, c = x.shape
        if c != self.in_channels:
            raise DimensionError(
                f"input has {c} channels, convolution expects {self.in_channels}"
            )
        if n == 0 or h == 0 or w == 0:
            raise DimensionError(f"zero-sized input {x.shape}")
        cols = self._im2col(x)
        self._cols = cols
        k2c = KERNEL_SIZE * KERNEL_SIZE * c
        wmat = self.params["kernels"].reshape(k2c, self.out_channels)
        out = cols.reshape(-1, k2c) @ wmat + self.params["biases"]
        return out.reshape(n, h, w, self.out_channels)

    def backward(self, dout, need_input_grad=True):
        n, h, w, _ = dout.shape
        c = self.in_channels
        k2c = KERNEL_SIZE * KERNEL_SIZE * c
        dmat = dout.reshape(-1, self.out_channels)
        cols = self._cols.reshape(-1, k2c)
        self.grads["kernels"] = (cols.T @ dmat).reshape(self.params["kernels"].shape)
        self.grads["biases"] = dmat.sum(axis=0)
        if not need_input_grad:
            return None
        wmat = self.params["kernels"].reshape(k2c, self.out_channels)
        dcols = (dmat @ wmat.T).reshape(n, h, w, KERNEL_SIZE * KERNEL_SIZE, c)
        dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
        idx = 0
        for dy in range(KERNEL_SIZE):
            for dx in range(KERNEL_SIZE):
                dxp[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, idx, :]
                idx += 1
        return dxp[:, 1 : h + 1, 1 : w + 1, :]


class BatchNorm(Layer):
    """Per-channel batch normalization over (batch, height, width).

    Training mode normalizes by the batch's biased per-channel statistics
    and blends them into the running estimates; inference mode uses the
    running estimates only. Backward implements the full batch-coupled
    derivative.
    """

    def __init__(self, channels, epsilon=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.params = {
            "gamma": np.ones(channels, dtype=dtype),
            "beta": np.zeros(channels, dtype=dtype),
        }
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, training=False, rng=None):
        if x.shape[-1] != self.channels:
            raise DimensionError(
                f"input has {x.shape[-1]} channels, batch norm expects {self.channels}"
            )
        axes = tuple(range(x.ndim - 1))
        if training:
            if x.shape[0] < 2:
                raise InvalidBatchError(
                    "training-mode batch normalization needs a batch of at least 2"
                )
            mean = x.mean(axis=axes)
            centered = x - mean
            var = np.mean(centered * centered, axis=axes)  # biased
            m = self.momentum
            self.running_mean = ((1.0 - m) * self.running_mean + m * mean).astype(
                self.running_mean.dtype
            )
            self.running_var = ((1.0 - m) * self.running_var + m * var).astype(
                self.running_var.dtype
            )
        else:
            if np.any(self.running_var < 0):
                raise CorruptedStateError("negative running variance in batch norm")
            mean = self.running_mean
            var = self.running_var
            centered = x - mean
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = centered * inv_std
        if training:
            count = 1
            for a in axes:
                count *= x.shape[a]
            self._cache = (inv_std, xhat, count, axes)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        # Batch-coupled derivative in its fused form:
        # dx = gamma * inv_std * (dout - mean(dout) - xhat * mean(dout * xhat))
        inv_std, xhat, m, axes = self._cache
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        self.grads["gamma"] = dgamma
        self.grads["beta"] = dbeta
        scale = self.params["gamma"] * inv_std
        return scale * (dout - dbeta / m - xhat * (dgamma / m))


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dout):
        # Derivative taken as 0 at exactly 0.
        return np.where(self._mask, dout, dout.dtype.type(0))


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2 on even spatial dimensions.

    Ties go to the first element in row-major scan order of the window,
    and the backward pass routes each upstream gradient to exactly that
    position.
    """

    def __init__(self):
        super().__init__()
        self.argmax = None
        self._in_shape = None

    def forward(self, x, training=False, rng=None):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"max pool needs even spatial dimensions, got {h}x{w}")
        self._in_shape = x.shape
        windows = (
            x.reshape(n, h // 2, 2, w // 2, 2, c)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, h // 2, w // 2, c, 4)
        )
        self.argmax = np.argmax(windows, axis=-1)
        out = np.take_along_axis(windows, self.argmax[..., None], axis=-1)
        return out[..., 0]

    def backward(self, dout):
        n, h, w, c = self._in_shape
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
        np.put_along_axis(dwin, self.argmax[..., None], dout[..., None], axis=-1)
        return (
            dwin.reshape(n, h // 2, w // 2, c, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) during training,
    so inference is the identity."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.mask = None
        self._scale = None

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self.mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs a seeded generator")
        self.mask = rng.random(x.shape) >= self.rate
        self._scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return np.where(self.mask, x * self._scale, x.dtype.type(0))

    def backward(self, dout):
        if self.mask is None:
            return dout
        return np.where(self.mask, dout * self._scale, dout.dtype.type(0))


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._in_shape = None

    def forward(self, x, training=False, rng=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._in_shape)


class Dense(Layer):
    """Fully connected layer, weights stored as (in_units, out_units)."""

    decay_params = frozenset({"weights"})

    def __init__(self, in_units, out_units, rng=None, dtype=np.float32):
        super().__init__()
        self.in_units = in_units
        self.out_units = out_units
        if rng is None:
            weights = np.zeros((in_units, out_units), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (in_units + out_units))
            weights = rng.uniform(-bound, bound, size=(in_units, out_units)).astype(dtype)
        self.params = {"weights": weights, "biases": np.zeros(out_units, dtype=dtype)}
        self._x = None

    def forward(self, x, training=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise DimensionError(
                f"dense layer expects (batch, {self.in_units}), got {x.shape}"
            )
        self._x = x
        return x @ self.params["weights"] + self.params["biases"]

    def backward(self, dout):
        self.grads["weights"] = self._x.T @ dout
        self.grads["biases"] = dout.sum(axis=0)
        return dout @ self.params["weights"].T


def softmax(logits):
    """Row-wise softmax with max-subtraction stabilization."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label, l2_term=0.0):
    """Cross-entropy loss and logit gradient for a single logit vector.

    Returns ``(loss, grad)`` where ``loss = -log softmax(logits)[label]
    + l2_term`` and ``grad = softmax(logits) - onehot(label)``. The weight
    penalty gradient is the optimizer's job, not this function's.
    """
    logits = np.asarray(logits)
    if logits.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    loss = log_norm - z[label] + l2_term
    grad = softmax(logits)
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits, labels, l2_term=0.0):
    """Mean cross-entropy over a batch plus a precomputed weight penalty.

    The returned gradient is with respect to the logits of the mean data
    loss, i.e. ``(softmax - onehot) / batch``.
    """
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels])) + l2_term
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad
