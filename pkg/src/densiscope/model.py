"""The regression CNN: five stride-2 conv blocks (conv -> batch norm -> ReLU
-> dropout), two ReLU dense layers with dropout, and a linear output node.

Training: shuffled mini-batches, MAPE loss, Adam. All stochasticity (shuffle
order, dropout masks) is derived from (seed, epoch, batch), so a run is a
pure function of its configuration and data.
"""

from __future__ import annotations

import binascii
import copy
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ShapeError, TrainingDivergedError, WeightsFormatError
from .nn import Adam, BatchNorm2d, Conv2d, Dense, Dropout, Flatten, ReLU, mape_loss
from .preprocess import Dataset

_MASK64 = (1 << 64) - 1


def _rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng([p & _MASK64 for p in parts])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. Exactly five conv blocks; the stride-2
    ladder takes 128x128 inputs down to 4x4 before the dense head."""

    conv_channels: tuple[int, ...] = (32, 64, 128, 128, 128)
    dense_widths: tuple[int, ...] = (256, 64)
    input_size: int = 128
    in_channels: int = 1
    dropout_keep: float = 0.5
    dense_dropout: bool = True
    mape_floor: float = 0.01

    def __post_init__(self):
        if len(self.conv_channels) != 5:
            raise ValueError(
                f"exactly 5 conv blocks required, got {len(self.conv_channels)}")
        if len(self.dense_widths) != 2:
            raise ValueError(
                f"exactly 2 dense hidden layers required, got {len(self.dense_widths)}")
        if any(c < 1 for c in self.conv_channels) or any(d < 1 for d in self.dense_widths):
            raise ValueError("layer widths must be positive")
        size = self.input_size
        for _ in self.conv_channels:
            size = -(-size // 2)
        if self.input_size < 32 or size < 1:
            raise ValueError(
                f"input_size {self.input_size} does not survive the stride-2 ladder")

    def final_spatial(self) -> int:
        size = self.input_size
        for _ in self.conv_channels:
            size = -(-size // 2)
        return size

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "dense_widths": list(self.dense_widths),
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "dropout_keep": self.dropout_keep,
            "dense_dropout": self.dense_dropout,
            "mape_floor": self.mape_floor,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            conv_channels=tuple(d["conv_channels"]),
            dense_widths=tuple(d["dense_widths"]),
            input_size=d["input_size"],
            in_channels=d["in_channels"],
            dropout_keep=d["dropout_keep"],
            dense_dropout=d["dense_dropout"],
            mape_floor=d["mape_floor"],
        )


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs statistics)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_val_epoch: int = -1
    best_val_loss: float = float("inf")
    best_val_params: dict | None = None  # diagnostics only; final model = last epoch


class DensityModel:
    """Model state: layers with parameters, BN running stats, the Adam
    accumulators, and the epoch counter."""

    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.epoch = 0
        self.training = False
        rng = _rng(seed, 0x90DE1)

        self.layers: list = []
        self._dropouts: list[Dropout] = []
        in_ch = spec.in_channels
        for out_ch in spec.conv_channels:
            self.layers.append(Conv2d(in_ch, out_ch, stride=2, rng=rng))
            self.layers.append(BatchNorm2d(out_ch))
            self.layers.append(ReLU())
            drop = Dropout(spec.dropout_keep)
            self._dropouts.append(drop)
            self.layers.append(drop)
            in_ch = out_ch
        self.layers.append(Flatten())
        width = spec.conv_channels[-1] * spec.final_spatial() ** 2
        for dense_w in spec.dense_widths:
            self.layers.append(Dense(width, dense_w, rng=rng))
            self.layers.append(ReLU())
            if spec.dense_dropout:
                drop = Dropout(spec.dropout_keep)
                self._dropouts.append(drop)
                self.layers.append(drop)
            width = dense_w
        self.layers.append(Dense(width, 1, rng=rng))

        self.optimizer = Adam(self.param_table(), learning_rate=0.001)

    # -- parameter bookkeeping ------------------------------------------------

    def _named_layers(self):
        conv_i = bn_i = dense_i = 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                conv_i += 1
                yield f"conv{conv_i}", layer
            elif isinstance(layer, BatchNorm2d):
                bn_i += 1
                yield f"bn{bn_i}", layer
            elif isinstance(layer, Dense):
                dense_i += 1
                name = "out" if dense_i == len(self.spec.dense_widths) + 1 else f"dense{dense_i}"
                yield name, layer

    def param_table(self) -> dict[str, np.ndarray]:
        table = {}
        for name, layer in self._named_layers():
            for pname, arr in layer.params().items():
                table[f"{name}.{pname}"] = arr
        return table

    def state_table(self) -> dict[str, np.ndarray]:
        table = {}
        for name, layer in self._named_layers():
            if isinstance(layer, BatchNorm2d):
                for sname, arr in layer.state().items():
                    table[f"{name}.{sname}"] = arr
        return table

    def checksum(self) -> int:
        """CRC-32 over all parameters and running stats, in name order."""
        table = {**self.param_table(), **self.state_table()}
        crc = 0
        for name in sorted(table):
            crc = binascii.crc32(np.ascontiguousarray(table[name]).tobytes(), crc)
        return crc

    # -- forward / backward ----------------------------------------------------

    def _check_input(self, x: np.ndarray):
        expect = (self.spec.in_channels, self.spec.input_size, self.spec.input_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"expected input (batch, {expect[0]}, {expect[1]}, "
                             f"{expect[2]}), got {x.shape}")

    def forward_train(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Training-mode forward; dropout masks come from ``rng``."""
        self._check_input(x)
        self.training = True
        h = x
        for layer in self.layers:
            if isinstance(layer, Dropout):
                h = layer.forward(h, training=True, rng=rng)
            else:
                h = layer.forward(h, training=True)
        return h

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        grads = {}
        for name, layer in self._named_layers():
            for pname in layer.params():
                grads[f"{name}.{pname}"] = layer.grads[pname]
        return grads

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode raw outputs, shape (batch,): dropout off, batch
        norm on running statistics. Pure in the model state."""
        self._check_input(x)
        h = x
        for layer in self.layers:
            h = layer.infer(h)
        return h[:, 0]

    def eval_mode(self) -> "DensityModel":
        self.training = False
        return self


def build_model(spec: ModelSpec, seed: int) -> DensityModel:
    """Fresh model with He-uniform weights; deterministic per seed."""
    return DensityModel(spec, seed)


def predict(model: DensityModel, images: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Per-slice densities clamped to [0, 1]."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        out.append(model.infer(images[start:start + batch_size]))
    raw = np.concatenate(out) if out else np.zeros(0, dtype=np.float32)
    return np.clip(raw, 0.0, 1.0)


def _dataset_mape(model: DensityModel, images: np.ndarray, targets: np.ndarray,
                  floor: float, batch_size: int) -> float:
    preds = []
    for start in range(0, images.shape[0], batch_size):
        preds.append(model.infer(images[start:start + batch_size]))
    loss, _ = mape_loss(np.concatenate(preds), targets, target_floor=floor)
    return loss


def train(model: DensityModel, train_set: Dataset, val_set: Dataset,
          config: TrainConfig) -> tuple[DensityModel, TrainHistory]:
    """Run the epoch loop; returns the final-epoch model plus history.

    Per-epoch: seeded shuffle, mini-batch MAPE + Adam. Validation loss is
    measured in inference mode after each epoch. A best-validation snapshot
    is retained in the history for diagnostics; the returned model is the
    last epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    model.optimizer.learning_rate = config.learning_rate
    images = train_set.images()
    targets = train_set.densities()
    val_images = val_set.images()
    val_targets = val_set.densities()
    floor = model.spec.mape_floor
    history = TrainHistory()

    start_epoch = model.epoch
    for epoch in range(start_epoch, start_epoch + config.epochs):
        order = _rng(config.seed, 0x5F, epoch).permutation(images.shape[0])
        epoch_abs_pct = 0.0
        for batch_i, start in enumerate(range(0, images.shape[0], config.batch_size)):
            idx = order[start:start + config.batch_size]
            rng = _rng(config.seed, 0xD0, epoch, batch_i)
            raw = model.forward_train(images[idx], rng)[:, 0]
            loss, grad = mape_loss(raw, targets[idx], target_floor=floor)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batch_i}")
            grads = model.backward(grad[:, None].astype(raw.dtype))
            model.optimizer.step(grads)
            epoch_abs_pct += loss * idx.shape[0]
        model.epoch = epoch + 1
        history.train_loss.append(epoch_abs_pct / images.shape[0])
        val_loss = _dataset_mape(model, val_images, val_targets, floor, config.batch_size)
        history.val_loss.append(val_loss)
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_val_epoch = model.epoch
            history.best_val_params = {k: v.copy() for k, v in model.param_table().items()}
    model.eval_mode()
    return model, history


# ---------------------------------------------------------------------------
# Weights file: magic "DNSW", format version, JSON metadata, named tensor
# records, trailing CRC-32 of everything before it. Layout in the README.
# ---------------------------------------------------------------------------

_MAGIC = b"DNSW"
_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _tensor_blob(model: DensityModel) -> dict[str, np.ndarray]:
    tensors = dict(model.param_table())
    tensors.update(model.state_table())
    for name, arr in model.optimizer.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in model.optimizer.v.items():
        tensors[f"adam.v.{name}"] = arr
    tensors["adam.step"] = np.array(model.optimizer.step_count, dtype="<i8")
    return tensors


def save_weights(model: DensityModel, path) -> Path:
    path = Path(path)
    meta = json.dumps({
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "epoch": model.epoch,
        "learning_rate": model.optimizer.learning_rate,
    }, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    tensors = _tensor_blob(model)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise WeightsFormatError(f"cannot serialize dtype {arr.dtype} for '{name}'")
        encoded = name.encode()
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(dtype, copy=False).tobytes())
    payload = buf.getvalue()
    path.write_bytes(payload + struct.pack("<I", binascii.crc32(payload)))
    return path


def load_weights(path) -> DensityModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise WeightsFormatError(f"{path} is not a weights file (bad magic)")
    payload, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if binascii.crc32(payload) != crc_stored:
        raise WeightsFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 4
    (version,) = struct.unpack_from("<I", payload, off); off += 4
    if version != _VERSION:
        raise WeightsFormatError(f"{path}: format version {version}, expected {_VERSION}")
    (meta_len,) = struct.unpack_from("<I", payload, off); off += 4
    meta = json.loads(payload[off:off + meta_len]); off += meta_len
    (n_tensors,) = struct.unpack_from("<I", payload, off); off += 4
    tensors = {}
    try:
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<I", payload, off); off += 4
            name = payload[off:off + name_len].decode(); off += name_len
            tag, rank = struct.unpack_from("<BB", payload, off); off += 2
            dims = struct.unpack_from(f"<{rank}I", payload, off); off += 4 * rank
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off)
            off += count * dtype.itemsize
            tensors[name] = arr.reshape(dims).copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise WeightsFormatError(f"{path}: truncated or malformed tensor records") from exc

    model = DensityModel(ModelSpec.from_dict(meta["spec"]), meta["seed"])
    model.epoch = meta["epoch"]
    model.optimizer.learning_rate = meta["learning_rate"]
    try:
        for name, arr in model.param_table().items():
            arr[...] = tensors.pop(name)
        for name, arr in model.state_table().items():
            arr[...] = tensors.pop(name)
        for name in list(model.optimizer.m):
            model.optimizer.m[name][...] = tensors.pop(f"adam.m.{name}")
            model.optimizer.v[name][...] = tensors.pop(f"adam.v.{name}")
        model.optimizer.step_count = int(tensors.pop("adam.step").reshape(-1)[0])
    except KeyError as exc:
        raise WeightsFormatError(f"{path}: missing tensor {exc}") from exc
    if tensors:
        raise WeightsFormatError(f"{path}: unexpected tensors {sorted(tensors)}")
    return model


__all__ = [
    "DensityModel",
    "ModelSpec",
    "TrainConfig",
    "TrainHistory",
    "build_model",
    "load_weights",
    "predict",
    "save_weights",
    "train",
]
