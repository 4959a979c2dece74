"""The two fixed classifier architectures and their checkpoint format.

Both networks share the same body: three 3x3 convolution blocks (each
convolution followed by batch normalization and ReLU, the first two also
by 2x2 max pooling, the third by 50% dropout), then a flatten and two
hidden dense layers of the flattened width, then an output dense layer
with one unit per class. The binary task has output classes (A, N); the
subtype task has (A1, A2, A3).

On the standard 120x64 single-channel input the shape chain is
(120,64,1) -> (120,64,2) -> (60,32,2) -> (60,32,4) -> (30,16,4)
-> (30,16,8) -> 3840 -> 3840 -> 3840 -> {2|3}.
"""

import struct

import numpy as np

from .errors import DimensionError, FormatError, TruncationError
from .layers import BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool2x2, ReLU

TASK_AN = "AN"
TASK_SUBTYPE = "subtype"
TASKS = (TASK_AN, TASK_SUBTYPE)

TASK_CLASSES = {
    TASK_AN: ("A", "N"),
    TASK_SUBTYPE: ("A1", "A2", "A3"),
}

INPUT_SHAPE = (120, 64, 1)
CONV_CHANNELS = (2, 4, 8)
DROPOUT_RATE = 0.5

CHECKPOINT_MAGIC = b"CAPN"
CHECKPOINT_VERSION = 1
_TASK_TAGS = {TASK_AN: 0, TASK_SUBTYPE: 1}
_TAG_TASKS = {v: k for k, v in _TASK_TAGS.items()}


class Network:
    """One instantiated architecture: layers, parameters, momentum buffers.

    A network is confined to a single thread at a time. ``forward`` in
    training mode consumes dropout draws from the supplied generator and
    updates batch-norm running statistics; inference mode touches nothing.
    """

    def __init__(self, task, named_layers, input_shape, dtype):
        self.task = task
        self.class_names = TASK_CLASSES[task]
        self.named_layers = named_layers
        self.input_shape = tuple(input_shape)
        self.dtype = dtype
        self.shape_chain = []
        for _, layer in named_layers:
            layer.init_velocity()

    @property
    def layers(self):
        return [layer for _, layer in self.named_layers]

    def param_layers(self):
        """(name, layer) pairs for layers that own parameters, in order."""
        return [(name, layer) for name, layer in self.named_layers if layer.params]

    def forward(self, x, training=False, rng=None):
        """Run the batch through every layer and return logits.

        ``x`` must be ``(batch, *input_shape)``. Records the per-layer
        output shapes (without the batch axis) in ``self.shape_chain``.
        """
        x = np.asarray(x)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise DimensionError(
                f"expected input of shape (batch, {self.input_shape}), got {x.shape}"
            )
        if x.shape[0] == 0:
            raise DimensionError("empty batch")
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        chain = []
        for _, layer in self.named_layers:
            x = layer.forward(x, training=training, rng=rng)
            chain.append(x.shape[1:])
        self.shape_chain = chain
        return x

    def backward(self, dlogits, need_input_grad=False):
        """Propagate a logit gradient back through every layer.

        Fills each parameterized layer's ``grads``. The gradient with
        respect to the network input is only computed (and returned) when
        ``need_input_grad`` is set; the training loop has no use for it.
        """
        d = dlogits
        first = self.named_layers[0][1]
        for _, layer in reversed(self.named_layers):
            if layer is first and not need_input_grad and isinstance(layer, Conv2D):
                layer.backward(d, need_input_grad=False)
                return None
            d = layer.backward(d)
        return d

    def weight_sumsq(self):
        """Sum of squares of all decayed parameters."""
        total = 0.0
        for _, layer in self.param_layers():
            for pname in layer.decay_params:
                w = layer.params[pname].reshape(-1)
                total += float(w @ w)
        return total

    def state_arrays(self):
        """All persistent arrays keyed by name: parameters, batch-norm
        running statistics, and velocity buffers."""
        out = {}
        for lname, layer in self.param_layers():
            for pname, arr in layer.params.items():
                out[f"{lname}.{pname}"] = arr
            if isinstance(layer, BatchNorm):
                out[f"{lname}.running_mean"] = layer.running_mean
                out[f"{lname}.running_var"] = layer.running_var
            for pname, arr in layer.velocity.items():
                out[f"velocity.{lname}.{pname}"] = arr
        return out

    def load_state_arrays(self, arrays):
        current = self.state_arrays()
        if set(arrays) != set(current):
            missing = sorted(set(current) - set(arrays))
            extra = sorted(set(arrays) - set(current))
            raise FormatError(f"state mismatch: missing {missing}, unexpected {extra}")
        for lname, layer in self.param_layers():
            for pname in layer.params:
                layer.params[pname] = _checked(arrays[f"{lname}.{pname}"],
                                               layer.params[pname], self.dtype)
            if isinstance(layer, BatchNorm):
                layer.running_mean = _checked(arrays[f"{lname}.running_mean"],
                                              layer.running_mean, self.dtype)
                layer.running_var = _checked(arrays[f"{lname}.running_var"],
                                             layer.running_var, self.dtype)
            for pname in layer.velocity:
                layer.velocity[pname] = _checked(arrays[f"velocity.{lname}.{pname}"],
                                                 layer.velocity[pname], self.dtype)


def _checked(arr, like, dtype):
    if arr.shape != like.shape:
        raise FormatError(f"tensor shape {arr.shape} does not match {like.shape}")
    return arr.astype(dtype, copy=False)


def build_network(task, seed, input_shape=INPUT_SHAPE, dtype=np.float32):
    """Assemble one architecture with freshly initialized parameters.

    ``input_shape`` exists so tests can run a reduced clone of the same
    layer stack; spatial dimensions must survive two halvings. Weights are
    Glorot-uniform, biases and beta zero, gamma one, running variance one,
    velocities zero. Identical seeds give bitwise-identical networks.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    h, w, c_in = input_shape
    if h % 4 or w % 4:
        raise DimensionError("input height and width must be divisible by 4")
    rng = np.random.default_rng(seed)
    n_classes = len(TASK_CLASSES[task])
    flat = (h // 4) * (w // 4) * CONV_CHANNELS[2]

    named = []
    channels = c_in
    for i, out_ch in enumerate(CONV_CHANNELS, start=1):
        named.append((f"conv{i}", Conv2D(channels, out_ch, rng=rng, dtype=dtype)))
        named.append((f"bn{i}", BatchNorm(out_ch, dtype=dtype)))
        named.append((f"relu{i}", ReLU()))
        if i < 3:
            named.append((f"pool{i}", MaxPool2x2()))
        channels = out_ch
    named.append(("dropout", Dropout(DROPOUT_RATE)))
    named.append(("flatten", Flatten()))
    # The two hidden dense layers keep the flattened width. ReLU between
    # them is required for the second one to add anything.
    named.append(("dense1", Dense(flat, flat, rng=rng, dtype=dtype)))
    named.append(("relu_d1", ReLU()))
    named.append(("dense2", Dense(flat, flat, rng=rng, dtype=dtype)))
    named.append(("relu_d2", ReLU()))
    named.append(("output", Dense(flat, n_classes, rng=rng, dtype=dtype)))
    return Network(task, named, input_shape, dtype)


def init_network(task, seed):
    """The standard 120x64 network for the given task."""
    return build_network(task, seed)


def expected_shape_chain(task, input_shape=INPUT_SHAPE):
    """Per-layer output shapes that ``forward`` must reproduce."""
    h, w, _ = input_shape
    n_classes = len(TASK_CLASSES[task])
    c1, c2, c3 = CONV_CHANNELS
    flat = (h // 4) * (w // 4) * c3
    return [
        (h, w, c1), (h, w, c1), (h, w, c1), (h // 2, w // 2, c1),
        (h // 2, w // 2, c2), (h // 2, w // 2, c2), (h // 2, w // 2, c2),
        (h // 4, w // 4, c2),
        (h // 4, w // 4, c3), (h // 4, w // 4, c3), (h // 4, w // 4, c3),
        (h // 4, w // 4, c3),
        (flat,), (flat,), (flat,), (flat,), (flat,), (n_classes,),
    ]


def save_checkpoint(net, path):
    """Write all persistent arrays to a little-endian binary checkpoint.

    Layout: magic "CAPN", version u32, task tag u8, tensor count u32,
    then per tensor: name length u16 + UTF-8 name, rank u8, dims as u32,
    raw 32-bit reals.
    """
    arrays = net.state_arrays()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<B", _TASK_TAGS[net.task]))
        f.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = arrays[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, input_shape=INPUT_SHAPE):
    """Rebuild a network from a checkpoint written by ``save_checkpoint``."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncationError(f"checkpoint truncated at byte {len(data)}: {what}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (tag,) = struct.unpack("<B", take(1, "task tag"))
    if tag not in _TAG_TASKS:
        raise FormatError(f"unknown task tag {tag}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * n_values, f"tensor {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    net = build_network(_TAG_TASKS[tag], seed=0, input_shape=input_shape)
    net.load_state_arrays(arrays)
    return net
