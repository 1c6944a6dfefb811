#!/usr/bin/env python3
"""
ANN Core
ReLU multilayer perceptron: forward pass with activation recording, a small
deterministic SGD trainer, MNIST IDX ingestion and the binary parameter file.
"""

import gzip
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

logger = logging.getLogger(__name__)

PARAMS_MAGIC = b"MLPW"
PARAMS_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class TrainingDivergenceError(RuntimeError):
    """Loss became non-finite during training"""


class FormatError(ValueError):
    """Binary file does not carry the expected magic/version/layout"""


# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class DenseLayer:
    """Weights are [fan_in x fan_out]; a = ReLU(x @ W + b)"""
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float).ravel()
        if self.weights.ndim != 2 or self.weights.shape[1] != self.biases.size:
            raise ValueError(f"weights {self.weights.shape} do not match {self.biases.size} biases")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class MLPParams:
    layers: List[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        for l in range(1, len(self.layers)):
            if self.layers[l - 1].fan_out != self.layers[l].fan_in:
                raise ValueError(f"layer {l - 1} does not chain into layer {l}")
        for l, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
                raise ValueError(f"layer {l} holds non-finite values")

    @property
    def architecture(self) -> List[int]:
        return [self.layers[0].fan_in] + [layer.fan_out for layer in self.layers]

    @property
    def architecture_string(self) -> str:
        return "-".join(str(n) for n in self.architecture)

    def copy(self) -> "MLPParams":
        return MLPParams([DenseLayer(l.weights.copy(), l.biases.copy()) for l in self.layers])


@dataclass
class ActivationRecord:
    """Post-ReLU activations a^1..a^L (the last one is ReLU of the logits) and the logits"""
    activations: List[np.ndarray]
    logits: np.ndarray

    @property
    def prediction(self) -> Union[int, np.ndarray]:
        if self.logits.ndim == 1:
            return int(np.argmax(self.logits))
        return np.argmax(self.logits, axis=1)


@dataclass
class TrainerConfig:
    lr: float = 0.1
    epochs: int = 20
    batch: int = 64
    seed: int = 0


@dataclass
class TrainingReport:
    architecture: str = ""
    epochs: int = 0
    epoch_losses: List[float] = field(default_factory=list)
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    training_time_seconds: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'architecture': self.architecture,
            'epochs': self.epochs,
            'epoch_losses': [float(v) for v in self.epoch_losses],
            'train_accuracy': self.train_accuracy,
            'test_accuracy': self.test_accuracy,
        }


def parse_architecture(arch: Union[str, Sequence[int]]) -> List[int]:
    """'784-300-300-10' -> [784, 300, 300, 10]"""
    if isinstance(arch, str):
        sizes = [int(part) for part in arch.replace(",", "-").split("-") if part.strip()]
    else:
        sizes = [int(n) for n in arch]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"invalid architecture: {arch}")
    return sizes


# ============================================================================
# FORWARD PASS AND GRADIENTS
# ============================================================================

def ann_forward(params: MLPParams, x: np.ndarray) -> ActivationRecord:
    """a^l = ReLU(a^{l-1} W^l + b^l); accepts one vector or a [n x fan_in] batch"""
    a = np.asarray(x, dtype=float)
    if a.shape[-1] != params.layers[0].fan_in:
        raise ValueError(f"input of width {a.shape[-1]} for fan_in {params.layers[0].fan_in}")

    activations = []
    logits = a
    for layer in params.layers:
        logits = a @ layer.weights + layer.biases
        a = np.maximum(logits, 0.0)
        activations.append(a)
    return ActivationRecord(activations=activations, logits=logits)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradients(params: MLPParams, X: np.ndarray, y: np.ndarray
                       ) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy on the logits and its (dW, db) per layer"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=np.int64).ravel()
    n = X.shape[0]

    inputs = [X]
    pre = []
    a = X
    for layer in params.layers:
        z = a @ layer.weights + layer.biases
        pre.append(z)
        a = np.maximum(z, 0.0)
        inputs.append(a)

    probs = _softmax(pre[-1])
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))

    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for l in range(len(params.layers) - 1, -1, -1):
        grads[l] = (inputs[l].T @ delta, delta.sum(axis=0))
        if l > 0:
            delta = (delta @ params.layers[l].weights.T) * (pre[l - 1] > 0)
    return loss, grads


def evaluate_accuracy(params: MLPParams, X: np.ndarray, y: np.ndarray,
                      chunk: int = 4096) -> float:
    """Top-1 accuracy of argmax(logits); chunked in a fixed order"""
    y = np.asarray(y).ravel()
    if y.size == 0:
        return 0.0
    correct = 0
    for start in range(0, y.size, chunk):
        record = ann_forward(params, X[start:start + chunk])
        correct += int(np.sum(np.argmax(record.logits, axis=1) == y[start:start + chunk]))
    return correct / y.size


# ============================================================================
# TRAINING
# ============================================================================

def init_params(architecture: Sequence[int], rng: np.random.Generator) -> MLPParams:
    """Uniform Xavier initialization, zero biases"""
    layers = []
    for fan_in, fan_out in zip(architecture[:-1], architecture[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(DenseLayer(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                                 np.zeros(fan_out)))
    return MLPParams(layers)


def ann_train_sgd(train_set: Tuple[np.ndarray, np.ndarray],
                  arch: Union[str, Sequence[int]],
                  hyper: TrainerConfig,
                  test_set: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                  report: Optional[TrainingReport] = None,
                  progress: bool = False) -> MLPParams:
    """Plain mini-batch SGD with a fixed learning rate, deterministic given the seed"""
    X, y = train_set
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64).ravel()
    architecture = parse_architecture(arch)
    if X.shape[1] != architecture[0]:
        raise ValueError(f"training data width {X.shape[1]} != input layer {architecture[0]}")

    rng = np.random.default_rng(hyper.seed)
    params = init_params(architecture, rng)
    report = report if report is not None else TrainingReport()
    report.architecture = "-".join(str(n) for n in architecture)
    report.epochs = hyper.epochs
    started = time.time()

    logger.info(f"Training {report.architecture} MLP: {len(y)} samples, "
                f"lr={hyper.lr}, epochs={hyper.epochs}, batch={hyper.batch}")

    for epoch in tqdm(range(hyper.epochs), desc="ann epochs", disable=not progress):
        order = rng.permutation(len(y))
        total, batches = 0.0, 0
        for start in range(0, len(y), hyper.batch):
            idx = order[start:start + hyper.batch]
            loss, grads = loss_and_gradients(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batches} (lr={hyper.lr})")
            for layer, (dW, db) in zip(params.layers, grads):
                layer.weights -= hyper.lr * dW
                layer.biases -= hyper.lr * db
            total += loss
            batches += 1
        report.epoch_losses.append(total / max(batches, 1))
        logger.debug(f"epoch {epoch}: mean loss {report.epoch_losses[-1]:.5f}")

    report.train_accuracy = evaluate_accuracy(params, X, y)
    if test_set is not None:
        report.test_accuracy = evaluate_accuracy(params, *test_set)
    report.training_time_seconds = time.time() - started
    logger.info(f"✅ ANN training done: train acc {report.train_accuracy:.4f}"
                + (f", test acc {report.test_accuracy:.4f}" if report.test_accuracy is not None else ""))
    return params


def record_max_activations(params: MLPParams, samples: np.ndarray) -> np.ndarray:
    """lambda^l = max over samples and neurons of a^l (final layer: ReLU of logits)"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("record_max_activations needs at least one sample")
    record = ann_forward(params, samples)
    return np.array([float(a.max()) for a in record.activations])


# ============================================================================
# MNIST IDX FILES
# ============================================================================

def _open_maybe_gzip(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    """Big-endian IDX reader (images 0x00000803, labels 0x00000801)"""
    path = Path(path)
    with _open_maybe_gzip(path) as f:
        data = f.read()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims))
    if len(data) - offset != count:
        raise FormatError(f"{path}: expected {count} bytes of data, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def write_idx(array: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a uint8 array as an IDX file (used for fixtures and subsets)"""
    path = Path(path)
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())
    return path


def _find_idx(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem} not found in {directory}")


def load_mnist(directory: Union[str, Path], split: str = "train",
               limit: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Images as [n x 784] floats in [0,1] and integer labels"""
    directory = Path(directory)
    prefix = "train" if split == "train" else "t10k"
    images = read_idx(_find_idx(directory, f"{prefix}-images-idx3-ubyte"), IDX_IMAGES_MAGIC)
    labels = read_idx(_find_idx(directory, f"{prefix}-labels-idx1-ubyte"), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{directory}: {images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    logger.info(f"Loaded MNIST {split}: {X.shape[0]} images from {directory}")
    return X, labels.astype(np.int64)


# ============================================================================
# PARAMETER FILE
# ============================================================================

def save_params(params: MLPParams, path: Union[str, Path]) -> Path:
    """MLPW little-endian: magic, version, layer_count, then rows, cols, f32 weights, f32 biases"""
    path = Path(path)
    chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params.layers))]
    for layer in params.layers:
        rows, cols = layer.weights.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(layer.weights.astype("<f4").tobytes())
        chunks.append(layer.biases.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_params(path: Union[str, Path]) -> MLPParams:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: not an MLPW parameter file")
    layers = []
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != PARAMS_VERSION:
            raise FormatError(f"{path}: unsupported MLPW version {version}")
        offset = 12
        for _ in range(count):
            rows, cols = struct.unpack_from("<II", data, offset)
            offset += 8
            weights = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset)
            offset += 4 * rows * cols
            biases = np.frombuffer(data, dtype="<f4", count=cols, offset=offset)
            offset += 4 * cols
            layers.append(DenseLayer(weights.reshape(rows, cols).astype(float), biases.astype(float)))
    except (struct.error, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: corrupt parameter file ({e})") from e
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return MLPParams(layers)
