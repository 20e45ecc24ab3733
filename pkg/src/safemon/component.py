"""The classifier under monitoring, plus the training machinery it shares
with the safety monitor.

Two providers answer predict_proba: the built-in numpy model, and an adapter
around an external process speaking a line-delimited JSON protocol (so a
foreign-runtime model can be plugged in without touching the pipeline).
"""

from __future__ import annotations

import base64
import json
import os
import select
import struct
import subprocess
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .imageio import LabeledDataset, dequantize, quantize
from .nn import ConvNet, default_layers, softmax
from .rng import Xoshiro256

MFM_MAGIC = b"MFM1"
HANDSHAKE_TIMEOUT_S = 10.0
REQUEST_TIMEOUT_S = 60.0
SHUTDOWN_TIMEOUT_S = 5.0


class TrainingError(RuntimeError):
    pass


class ProviderError(RuntimeError):
    """Inference provider failed (process death, protocol violation, shapes)."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    init: str = "he"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class ClassifierModel:
    input_shape: tuple[int, int, int]
    layers: tuple[tuple, ...]
    params: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._net = ConvNet(self.input_shape, self.layers)
        if self.params.shape != (self._net.param_count,):
            raise ValueError(
                f"parameter vector has {self.params.size} entries, "
                f"architecture needs {self._net.param_count}"
            )

    @property
    def k(self) -> int:
        return self._net.output_dim

    def predict_proba(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ProviderError(
                f"input shape {x.shape[1:]} does not match model {self.input_shape}"
            )
        outs = []
        for start in range(0, x.shape[0], chunk):
            logits = self._net.forward(self.params, x[start:start + chunk])
            outs.append(softmax(logits))
        return np.concatenate(outs) if outs else np.zeros((0, self.k))


def build_model(input_shape, layers, seed: int, init: str = "he") -> ClassifierModel:
    net = ConvNet(input_shape, layers)
    params = net.init_params(Xoshiro256(seed), scheme=init)
    return ClassifierModel(tuple(input_shape), tuple(tuple(l) for l in layers), params)


def loss_and_grads(model: ClassifierModel, images: np.ndarray,
                   labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the flat parameter gradient."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    return model._net.loss_and_grad(model.params, x, y)


def train(dataset: LabeledDataset, layers, config: TrainConfig,
          input_shape=None) -> ClassifierModel:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Bit-deterministic for a fixed (data, config, seed): init and the per-epoch
    shuffles come from one seeded generator, batches run in order.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset must be non-empty")
    shape = tuple(input_shape) if input_shape else dataset.image_shape
    net = ConvNet(shape, layers)
    rng = Xoshiro256(config.seed)
    params = net.init_params(rng, scheme=config.init)
    velocity = np.zeros_like(params)
    x = dataset.pixels
    y = dataset.labels
    n = len(dataset)
    history: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grad = net.loss_and_grad(params, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} "
                    f"(learning_rate={config.learning_rate}); lower the rate"
                )
            velocity *= config.momentum
            velocity -= config.learning_rate * grad
            params += velocity
            running += loss * len(idx)
        history.append(running / n)
    model = ClassifierModel(shape, tuple(tuple(l) for l in layers), params)
    model.loss_history = history
    return model


# ---------------------------------------------------------------------------
# Providers

class BuiltinProvider:
    """In-process inference over a trained model."""

    def __init__(self, model: ClassifierModel):
        self.model = model
        self.k = model.k

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(images)


class CallableProvider:
    """Test/fake provider wrapping a plain function batch -> probabilities."""

    def __init__(self, fn, k: int):
        self.fn = fn
        self.k = k

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        probs = np.asarray(self.fn(np.asarray(images)), dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] != self.k:
            raise ProviderError(f"fake provider returned shape {probs.shape}")
        return probs


def predict_proba(provider, images: np.ndarray) -> np.ndarray:
    """Batch probabilities from any provider; rows are distributions over k."""
    return provider.predict_proba(np.asarray(images, dtype=np.float64))


def evaluate_accuracy(provider, dataset: LabeledDataset, chunk: int = 256) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if dataset.k > provider.k:
        raise ProviderError(
            f"class-count mismatch: dataset has k={dataset.k}, provider k={provider.k}"
        )
    correct = 0
    for start in range(0, len(dataset), chunk):
        probs = provider.predict_proba(dataset.pixels[start:start + chunk])
        correct += int((probs.argmax(axis=1) == dataset.labels[start:start + chunk]).sum())
    return correct / len(dataset)


def count_correct(provider, dataset: LabeledDataset, chunk: int = 256) -> int:
    if dataset.k > provider.k:
        raise ProviderError(
            f"class-count mismatch: dataset has k={dataset.k}, provider k={provider.k}"
        )
    correct = 0
    for start in range(0, len(dataset), chunk):
        probs = provider.predict_proba(dataset.pixels[start:start + chunk])
        correct += int((probs.argmax(axis=1) == dataset.labels[start:start + chunk]).sum())
    return correct


# ---------------------------------------------------------------------------
# External process provider. Line-delimited JSON over the child's stdio:
#   child -> parent, once:  {"type":"hello","classes":<k>,"name":"<id>"}
#   parent -> child:        {"id":<u64>,"width":w,"height":h,"pixels":"<b64 rgb8>"}
#   child -> parent:        {"id":<u64>,"probs":[k reals]}   (any order, once each)
# Parent closes the child's stdin to request shutdown.

class _LineReader:
    """Buffered line reader over a raw fd with per-line timeouts."""

    def __init__(self, fd: int):
        self.fd = fd
        self.buf = b""

    def readline(self, timeout: float) -> bytes | None:
        while b"\n" not in self.buf:
            ready, _, _ = select.select([self.fd], [], [], timeout)
            if not ready:
                return None
            chunk = os.read(self.fd, 65536)
            if not chunk:  # EOF
                if self.buf:
                    line, self.buf = self.buf, b""
                    return line
                return b""
            self.buf += chunk
        line, self.buf = self.buf.split(b"\n", 1)
        return line


class ExternalProvider:
    def __init__(self, command: list[str], proc: subprocess.Popen,
                 reader: _LineReader, k: int, name: str):
        self.command = command
        self.proc = proc
        self._reader = reader
        self.k = k
        self.name = name
        self._next_id = 0

    def predict_proba(self, images: np.ndarray, chunk: int = 32) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        n, h, w, c = x.shape
        if c != 3:
            raise ProviderError("external protocol carries RGB images only")
        out = np.empty((n, self.k), dtype=np.float64)
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            ids = {}
            lines = []
            for i in range(start, stop):
                req_id = self._next_id
                self._next_id += 1
                ids[req_id] = i
                payload = base64.b64encode(quantize(x[i].reshape(-1)).tobytes()).decode("ascii")
                lines.append(json.dumps(
                    {"id": req_id, "width": w, "height": h, "pixels": payload},
                    separators=(",", ":"),
                ))
            try:
                self.proc.stdin.write(("\n".join(lines) + "\n").encode("ascii"))
                self.proc.stdin.flush()
            except (BrokenPipeError, ValueError) as exc:
                raise ProviderError(f"external provider {self.name!r} died: {exc}") from exc
            while ids:
                raw = self._reader.readline(REQUEST_TIMEOUT_S)
                if raw is None:
                    raise ProviderError(f"external provider {self.name!r} timed out")
                if raw == b"":
                    raise ProviderError(f"external provider {self.name!r} closed its output")
                try:
                    msg = json.loads(raw)
                    req_id = msg["id"]
                    probs = np.asarray(msg["probs"], dtype=np.float64)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ProviderError(
                        f"protocol violation from {self.name!r}: {raw!r} ({exc})"
                    ) from exc
                if req_id not in ids:
                    raise ProviderError(f"unexpected or duplicate response id {req_id}")
                if probs.shape != (self.k,):
                    raise ProviderError(
                        f"response has {probs.size} probabilities, expected {self.k}"
                    )
                total = float(probs.sum())
                if abs(total - 1.0) > 1e-3 or (probs < 0).any():
                    raise ProviderError(
                        f"response probabilities do not form a distribution (sum={total})"
                    )
                out[ids.pop(req_id)] = probs / total  # tolerate serialization dust
        return out


def external_spawn(command: list[str]) -> ExternalProvider:
    """Start the child, complete the hello handshake, return a ready provider."""
    try:
        proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
        )
    except OSError as exc:
        raise ProviderError(f"failed to spawn {command[0]!r}: {exc}") from exc
    reader = _LineReader(proc.stdout.fileno())
    hello_raw = reader.readline(HANDSHAKE_TIMEOUT_S)
    if not hello_raw:
        proc.kill()
        proc.wait()
        raise ProviderError(f"no handshake from {command[0]!r} within {HANDSHAKE_TIMEOUT_S}s")
    try:
        hello = json.loads(hello_raw)
        if hello.get("type") != "hello":
            raise ValueError("first message is not a hello")
        k = int(hello["classes"])
        name = str(hello.get("name", command[0]))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        proc.kill()
        proc.wait()
        raise ProviderError(f"bad handshake line {hello_raw!r}: {exc}") from exc
    if k < 1:
        proc.kill()
        proc.wait()
        raise ProviderError(f"handshake declared k={k}")
    return ExternalProvider(command, proc, reader, k, name)


def external_shutdown(provider: ExternalProvider) -> int:
    """Close stdin (end-of-stream) and reap; kills after a grace period."""
    proc = provider.proc
    if proc.stdin and not proc.stdin.closed:
        try:
            proc.stdin.close()
        except BrokenPipeError:
            pass
    try:
        return proc.wait(timeout=SHUTDOWN_TIMEOUT_S)
    except subprocess.TimeoutExpired:
        proc.kill()
        return proc.wait()


# ---------------------------------------------------------------------------
# Model files (.mfm): magic "MFM1", u32 descriptor length, descriptor JSON,
# u64 parameter count, raw little-endian float64 parameters, u32 CRC32 over
# everything between the magic and the checksum.

def save_model(model: ClassifierModel) -> bytes:
    desc = json.dumps(
        {"input": list(model.input_shape), "layers": [list(l) for l in model.layers]},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    params = np.ascontiguousarray(model.params, dtype="<f8").tobytes()
    body = struct.pack("<I", len(desc)) + desc + struct.pack("<Q", model.params.size) + params
    return MFM_MAGIC + body + struct.pack("<I", zlib.crc32(body))


def load_model(data: bytes) -> ClassifierModel:
    if data[:4] != MFM_MAGIC:
        raise ValueError("bad magic: not a model file")
    body, (crc_expect,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc_expect:
        raise ValueError("model file checksum mismatch")
    (desc_len,) = struct.unpack_from("<I", body, 0)
    desc = json.loads(body[4:4 + desc_len].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", body, 4 + desc_len)
    params = np.frombuffer(body, dtype="<f8", count=count, offset=4 + desc_len + 8).copy()
    return ClassifierModel(
        tuple(desc["input"]), tuple(tuple(l) for l in desc["layers"]), params
    )


def save_model_file(model: ClassifierModel, path) -> None:
    with open(path, "wb") as f:
        f.write(save_model(model))


def load_model_file(path) -> ClassifierModel:
    with open(path, "rb") as f:
        return load_model(f.read())


def default_architecture(k: int):
    return default_layers(k)
