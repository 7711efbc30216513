"""The six-convolution view classifier, inference helpers and weight files."""
from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import RunningStats, ShapeError, Tape, Tensor

IMAGE_SHAPE = (60, 80)
CONV_FILTERS = (32, 32, 64, 64, 128, 128)
FC_WIDTHS = (1028, 512)
CONV_DROPOUT = 0.25
FC_DROPOUT = 0.5
MAX_CLASSES = 15

WEIGHT_MAGIC = b"ECHV"
WEIGHT_VERSION = 1


class WeightFileError(ValueError):
    """Base class for unreadable weight files."""


class TruncatedWeightFile(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


class FingerprintMismatch(WeightFileError):
    pass


# ---------------------------------------------------------------- layers

class Layer:
    kind = "layer"

    def params(self) -> list[Tensor]:
        return []

    def state_arrays(self) -> list[np.ndarray]:
        """Arrays persisted in weight files, in a fixed order."""
        return [p.data for p in self.params()]

    def load_state(self, arrays: list[np.ndarray]) -> None:
        for p, a in zip(self.params(), arrays):
            p.data = a.astype(np.float32).reshape(p.shape)

    def state_shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.state_arrays()]

    def spec(self) -> str:
        return self.kind

    def forward(self, x: Tensor, train: bool, tape: Tape | None, rng) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return self.spec()


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / (in_channels * 9))
        self.kernels = Tensor(rng.uniform(-limit, limit, (3, 3, in_channels, filters)).astype(np.float32),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(filters, np.float32), requires_grad=True)

    def params(self):
        return [self.kernels, self.bias]

    def spec(self):
        c, f = self.kernels.shape[2:]
        return f"conv3x3:{c}->{f}"

    def forward(self, x, train, tape, rng):
        return T.conv2d(x, self.kernels, self.bias, tape)


class BatchNorm(Layer):
    kind = "bn"

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.stats = RunningStats(channels)
        self.update_stats = True

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [self.gamma.data, self.beta.data, self.stats.mean, self.stats.var]

    def load_state(self, arrays):
        g, b, mean, var = arrays
        self.gamma.data = g.astype(np.float32).copy()
        self.beta.data = b.astype(np.float32).copy()
        self.stats.set(mean, var)

    def spec(self):
        return f"bn:{self.gamma.shape[0]}"

    def forward(self, x, train, tape, rng):
        return T.batchnorm(x, self.gamma, self.beta, self.stats, train, tape, self.update_stats)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train, tape, rng):
        return T.relu(x, tape)


class MaxPool(Layer):
    kind = "pool"

    def spec(self):
        return "maxpool2x2"

    def forward(self, x, train, tape, rng):
        return T.maxpool2x2(x, tape)


class Dropout(Layer):
    kind = "drop"

    def __init__(self, rate: float):
        self.rate = rate

    def spec(self):
        return f"dropout:{self.rate}"

    def forward(self, x, train, tape, rng):
        return T.dropout(x, self.rate, rng, train, tape)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train, tape, rng):
        return T.flatten(x, tape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        limit = np.sqrt(6.0 / in_features)
        self.weights = Tensor(rng.uniform(-limit, limit, (out_features, in_features)).astype(np.float32),
                              requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def params(self):
        return [self.weights, self.bias]

    def spec(self):
        o, i = self.weights.shape
        return f"dense:{i}->{o}"

    def forward(self, x, train, tape, rng):
        return T.dense(x, self.weights, self.bias, tape)


class Softmax(Layer):
    """Terminal marker; the model returns logits and applies softmax on demand."""
    kind = "softmax"

    def forward(self, x, train, tape, rng):
        return x


# ---------------------------------------------------------------- the graph

class EchoNet:
    """Layered classifier: three conv blocks (two 3x3 convs each, with batch
    norm before every ReLU, then pooling and dropout) and two fully connected
    layers of 1028 and 512 units ahead of the softmax classifier."""

    def __init__(self, num_classes: int, seed: int = 0, input_shape: tuple[int, int] = IMAGE_SHAPE):
        if not 2 <= num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must be in 2..{MAX_CLASSES}, got {num_classes}")
        h, w = input_shape
        if h < 8 or w < 8:
            raise ValueError(f"input shape {input_shape} too small for three 2x2 pools")
        self.num_classes = num_classes
        self.input_shape = (int(h), int(w))
        self.seed = seed
        rng = np.random.default_rng(seed)

        layers: list[Layer] = []
        channels = 1
        for block in range(3):
            for f in CONV_FILTERS[2 * block:2 * block + 2]:
                layers += [Conv2D(channels, f, rng), BatchNorm(f), ReLU()]
                channels = f
            layers += [MaxPool(), Dropout(CONV_DROPOUT)]
            h, w = h // 2, w // 2
        layers.append(Flatten())
        width = channels * h * w
        for units in FC_WIDTHS:
            layers += [Dense(width, units, rng), BatchNorm(units), ReLU(), Dropout(FC_DROPOUT)]
            width = units
        layers += [Dense(width, num_classes, rng), Softmax()]
        self.layers = layers
        self.flat_features = CONV_FILTERS[-1] * h * w

    # -- introspection

    @property
    def feature_layer(self) -> int:
        """Index of the ReLU after the 512-unit layer (last hidden activation)."""
        relus = [i for i, layer in enumerate(self.layers) if layer.kind == "relu"]
        return relus[-1]

    def layer_spec(self) -> str:
        return ";".join(layer.spec() for layer in self.layers)

    @property
    def fingerprint(self) -> bytes:
        return architecture_fingerprint(self.num_classes, self.input_shape)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            for j, p in enumerate(layer.params()):
                out.append((f"{i}:{layer.kind}.{j}", p))
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    def get_state(self) -> list[np.ndarray]:
        return [a.copy() for layer in self.layers for a in layer.state_arrays()]

    def set_state(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for layer in self.layers:
            n = len(layer.state_arrays())
            if n:
                layer.load_state([next(it) for _ in range(n)])

    def astype(self, dtype) -> "EchoNet":
        """Cast parameters in place (float64 is used for gradient checks)."""
        for _, p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    # -- computation

    def _as_batch(self, images) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3:
            x = x[:, :, :, None]
        if x.ndim != 4 or x.shape[3] != 1 or x.shape[1:3] != self.input_shape:
            raise ShapeError(f"expected images of shape {self.input_shape}, got {np.shape(images)}")
        return x

    def forward(self, images, train: bool = False, tape: Tape | None = None,
                rng: np.random.Generator | None = None, until: int | None = None,
                input_grad: bool = False) -> tuple[Tensor, Tensor]:
        """Run the layers and return (output, input tensor).

        The output is the logits unless ``until`` names an earlier layer index,
        in which case that layer's output is returned.
        """
        x = self._as_batch(images)
        dtype = self.layers[0].params()[0].data.dtype
        inp = Tensor(x.astype(dtype, copy=False), requires_grad=input_grad)
        h = inp
        stop = len(self.layers) - 1 if until is None else until
        for layer in self.layers[:stop + 1]:
            h = layer.forward(h, train, tape, rng)
        return h, inp

    def logits(self, images, batch_size: int = 256) -> np.ndarray:
        x = self._as_batch(images)
        out = [self.forward(x[i:i + batch_size])[0].data for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        return T.softmax(self.logits(images, batch_size).astype(np.float64))

    def features(self, images, batch_size: int = 256) -> np.ndarray:
        x = self._as_batch(images)
        out = [self.forward(x[i:i + batch_size], until=self.feature_layer)[0].data
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def architecture_fingerprint(num_classes: int, input_shape: tuple[int, int] = IMAGE_SHAPE) -> bytes:
    h, w = input_shape
    parts = []
    channels = 1
    for block in range(3):
        for f in CONV_FILTERS[2 * block:2 * block + 2]:
            parts += [f"conv3x3:{channels}->{f}", f"bn:{f}", "relu"]
            channels = f
        parts += ["maxpool2x2", f"dropout:{CONV_DROPOUT}"]
        h, w = h // 2, w // 2
    parts.append("flatten")
    width = channels * h * w
    for units in FC_WIDTHS:
        parts += [f"dense:{width}->{units}", f"bn:{units}", "relu", f"dropout:{FC_DROPOUT}"]
        width = units
    parts += [f"dense:{width}->{num_classes}", "softmax"]
    text = f"input:{input_shape[0]}x{input_shape[1]};" + ";".join(parts)
    return hashlib.blake2b(text.encode(), digest_size=8).digest()


def build_model(num_classes: int, seed: int = 0, input_shape: tuple[int, int] = IMAGE_SHAPE) -> EchoNet:
    return EchoNet(num_classes, seed=seed, input_shape=input_shape)


def classify_image(model: EchoNet, image) -> np.ndarray:
    """Class probabilities for one image (inference mode). The predicted view
    is ``np.argmax`` of the result, which resolves ties to the lowest index."""
    x = np.asarray(image)
    if x.shape != model.input_shape:
        raise ShapeError(f"expected a single {model.input_shape} image, got {x.shape}")
    return model.predict_proba(x[None])[0]


# ---------------------------------------------------------------- persistence

def _payload(model: EchoNet) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for layer in model.layers for a in layer.state_arrays())


def save_weights(model: EchoNet, path) -> None:
    """Layout: b"ECHV", version byte, 8-byte architecture fingerprint, every
    layer's float32 arrays (little-endian, layer order), CRC-32 of those arrays."""
    payload = _payload(model)
    blob = WEIGHT_MAGIC + bytes([WEIGHT_VERSION]) + model.fingerprint + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


def load_weights(path, num_classes: int | None = None, input_shape: tuple[int, int] = IMAGE_SHAPE) -> EchoNet:
    """Read a weight file. Without ``num_classes`` the class count is recovered
    from the fingerprint."""
    blob = Path(path).read_bytes()
    header = len(WEIGHT_MAGIC) + 1 + 8
    if len(blob) < header:
        raise TruncatedWeightFile(f"{path}: {len(blob)} bytes is shorter than the header")
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {blob[:4]!r}")
    if blob[4] != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {blob[4]}")
    fp = blob[5:header]

    candidates = [num_classes] if num_classes is not None else range(2, MAX_CLASSES + 1)
    match = next((k for k in candidates if architecture_fingerprint(k, input_shape) == fp), None)
    if match is None:
        want = (architecture_fingerprint(num_classes, input_shape).hex()
                if num_classes is not None else "any known architecture")
        raise FingerprintMismatch(f"{path}: fingerprint {fp.hex()} does not match {want}")

    model = EchoNet(match, seed=0, input_shape=input_shape)
    shapes = [s for layer in model.layers for s in layer.state_shapes()]
    sizes = [int(np.prod(s)) for s in shapes]
    expected = header + 4 * sum(sizes) + 4
    if len(blob) < expected:
        raise TruncatedWeightFile(f"{path}: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise WeightFileError(f"{path}: {len(blob) - expected} unexpected trailing bytes")
    payload = blob[header:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f4")
    arrays, offset = [], 0
    for shape, size in zip(shapes, sizes):
        arrays.append(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    model.set_state(arrays)
    return model
