"""Plain, residual and densely connected CNNs over 200x56 F-BANK images.

Topology: 3x3 stem conv, then `n_blocks` x (block of BN-ReLU-Conv units,
transition of [BN-ReLU] 1x1 conv and 2x2 max-pool), global mean pooling and
a two-way softmax output. Block wiring follows the three layer rules

    plain     x_i = F_i(x_{i-1})
    residual  x_i = F_i(x_{i-1}) + x_{i-1}
    dense     x_i = F_i([x_0, x_1, ..., x_{i-1}])
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .layers import (
    _xent,
    TRAIN_DTYPE,
    BatchNorm,
    Conv2D,
    Dense,
    GlobalMeanPool,
    Layer,
    LayerParams,
    MaxPool2x2,
    ReLU,
    release_buffers,
    softmax,
    softmax_cross_entropy,
)

BLOCK_TYPES = ("plain", "residual", "dense")
CHECKPOINT_MAGIC = b"BADCKPT1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ArchConfig:
    block_type: str = "dense"
    n_blocks: int = 3
    layers_per_block: int = 5
    initial_filters: int = 24
    growth_rate: int = 14
    block_filters: int | None = None  # unit width for plain/residual blocks
    input_height: int = 200
    input_width: int = 56
    n_classes: int = 2
    bn_epsilon: float = 1e-4
    bn_momentum: float = 0.1
    transition_norm: bool = True

    def __post_init__(self):
        if self.block_type not in BLOCK_TYPES:
            raise ValueError(f"block_type must be one of {BLOCK_TYPES}")
        for name in ("n_blocks", "layers_per_block", "initial_filters", "growth_rate",
                     "input_height", "input_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_classes != 2:
            raise ValueError("models have exactly two outputs")
        if self.block_filters is not None and self.block_filters <= 0:
            raise ValueError("block_filters must be positive")
        if self.block_type == "residual" and self.unit_width != self.initial_filters:
            raise ValueError(
                f"residual blocks need equal in/out channels: block_filters={self.unit_width}, "
                f"block input has {self.initial_filters}")

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.input_height, self.input_width)

    @property
    def unit_width(self) -> int:
        if self.block_type == "dense":
            return self.growth_rate
        return self.block_filters or self.initial_filters

    def to_text(self) -> str:
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key.startswith("arch."):
                key = key[5:]
            if key not in known:
                continue
            kwargs[key] = _coerce(known[key], value.strip())
        return cls(**kwargs)


def _coerce(f, value: str):
    if value == "" and "None" in str(f.type):
        return None
    if f.name == "block_type":
        return value
    if f.name.startswith("bn_"):
        return float(value)
    if f.name == "transition_norm":
        if value.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"transition_norm must be true or false, got {value!r}")
        return value.lower() in ("true", "1")
    return int(value)


class ConvUnit(Layer):
    """BN -> ReLU -> 3x3 'same' conv, without bias."""

    def __init__(self, in_ch, out_ch, rng, dtype, epsilon, momentum):
        super().__init__()
        self.bn = BatchNorm(in_ch, epsilon, momentum, dtype)
        self.relu = ReLU()
        self.conv = Conv2D(in_ch, out_ch, 3, "same", 1, rng, dtype)
        self.params = [self.bn.params, self.conv.params]

    def forward(self, x, train=False):
        return self.conv.forward(self.relu.forward(self.bn.forward(x, train)), train)

    def backward(self, grad):
        return self.bn.backward(self.relu.backward(self.conv.backward(grad)))


class Block(Layer):
    """A stack of ConvUnits wired as plain, residual or dense."""

    def __init__(self, kind, in_ch, n_units, width, rng, dtype, epsilon, momentum):
        super().__init__()
        self.kind = kind
        self.in_channels = in_ch
        self.units = []
        ch = in_ch
        for _ in range(n_units):
            self.units.append(ConvUnit(ch, width, rng, dtype, epsilon, momentum))
            if kind == "dense":
                ch += width
            else:
                ch = width
        self.out_channels = ch
        self.params = [p for u in self.units for p in u.params]
        self._sizes = None

    def unit_input(self, i: int, history: list[np.ndarray]) -> np.ndarray:
        """What unit i consumes given activations history = [x_0, ..., x_i]."""
        if self.kind == "dense":
            return history[0] if i == 0 else np.concatenate(history[: i + 1], axis=1)
        return history[i]

    def forward(self, x, train=False, ablate=()):
        history = [x]
        for i, unit in enumerate(self.units):
            out = unit.forward(self.unit_input(i, history), train)
            if self.kind == "residual":
                out = out + history[i]
            if i + 1 in ablate:
                out = np.zeros_like(out)
            history.append(out)
        self._sizes = [h.shape[1] for h in history]
        if self.kind == "dense":
            return np.concatenate(history, axis=1)
        return history[-1]

    def backward(self, grad):
        if self.kind == "plain":
            for unit in reversed(self.units):
                grad = unit.backward(grad)
            return grad
        if self.kind == "residual":
            for unit in reversed(self.units):
                grad = unit.backward(grad) + grad
            return grad
        bounds = np.cumsum([0] + self._sizes)
        pieces = [grad[:, bounds[j]:bounds[j + 1]].copy() for j in range(len(self._sizes))]
        for i in range(len(self.units) - 1, -1, -1):
            g_in = self.units[i].backward(pieces[i + 1])
            for j in range(i + 1):
                pieces[j] += g_in[:, bounds[j]:bounds[j + 1]]
        return pieces[0]


class Transition(Layer):
    """1x1 conv preserving the channel count, then 2x2 max-pool.

    With `normalize`, the conv is preceded by BN and ReLU like a block unit.
    Without it, the raw-scale stem maps reach the 1x1 convs and the output
    layer unnormalized through the dense concatenations.
    """

    def __init__(self, channels, rng, dtype, normalize=True, epsilon=1e-4, momentum=0.1):
        super().__init__()
        self.bn = BatchNorm(channels, epsilon, momentum, dtype) if normalize else None
        self.relu = ReLU() if normalize else None
        self.conv = Conv2D(channels, channels, 1, "same", 1, rng, dtype)
        self.pool = MaxPool2x2()
        self.params = ([self.bn.params] if normalize else []) + [self.conv.params]

    def forward(self, x, train=False):
        if self.bn is not None:
            x = self.relu.forward(self.bn.forward(x, train), train)
        return self.pool.forward(self.conv.forward(x, train), train)

    def backward(self, grad):
        grad = self.conv.backward(self.pool.backward(grad))
        if self.bn is not None:
            grad = self.bn.backward(self.relu.backward(grad))
        return grad


class Model:
    def __init__(self, config: ArchConfig, seed: int = 0, dtype=TRAIN_DTYPE):
        self.config = config
        self.rng_seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        eps, mom = config.bn_epsilon, config.bn_momentum

        self.stem = Conv2D(1, config.initial_filters, 3, "same", 1, rng, dtype)
        self.blocks: list[Block] = []
        self.transitions: list[Transition] = []
        ch = config.initial_filters
        for _ in range(config.n_blocks):
            block = Block(config.block_type, ch, config.layers_per_block, config.unit_width,
                          rng, dtype, eps, mom)
            ch = block.out_channels
            self.blocks.append(block)
            self.transitions.append(Transition(ch, rng, dtype, config.transition_norm, eps, mom))
        self.pool = GlobalMeanPool()
        self.head = Dense(ch, config.n_classes, rng, dtype)
        self.feature_channels = ch

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> list[tuple[str, LayerParams]]:
        out = [("stem", self.stem.params)]
        for b, (block, trans) in enumerate(zip(self.blocks, self.transitions), start=1):
            for i, unit in enumerate(block.units):
                out.append((f"block{b}.unit{i}.bn", unit.bn.params))
                out.append((f"block{b}.unit{i}.conv", unit.conv.params))
            if trans.bn is not None:
                out.append((f"trans{b}.bn", trans.bn.params))
            out.append((f"trans{b}.conv", trans.conv.params))
        out.append(("head", self.head.params))
        return out

    @property
    def params(self) -> list[LayerParams]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size() for p in self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for prefix, p in self.named_params():
            for k, v in p.values.items():
                state[f"{prefix}.{k}"] = v.copy()
            for k, v in p.buffers.items():
                state[f"{prefix}.{k}"] = v.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for prefix, p in self.named_params():
            for store in (p.values, p.buffers):
                for k in store:
                    src = state[f"{prefix}.{k}"]
                    if src.shape != store[k].shape:
                        raise CheckpointError(f"{prefix}.{k}: shape {src.shape}, expected {store[k].shape}")
                    store[k] = np.array(src, dtype=self.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for p in self.params:
            p.astype(dtype)
        return self

    def release_buffers(self) -> None:
        """Free cached activations; the next backward needs a fresh forward."""
        release_buffers(self)

    def set_guided(self, guided: bool) -> None:
        for block, trans in zip(self.blocks, self.transitions):
            for unit in block.units:
                unit.relu.guided = guided
            if trans.relu is not None:
                trans.relu.guided = guided

    # -- computation --------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.input_shape:
            raise ValueError(f"expected input (batch, 1, {self.config.input_height}, "
                             f"{self.config.input_width}), got {x.shape}")

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        h = self.stem.forward(np.asarray(x, dtype=self.dtype), train)
        for block, trans in zip(self.blocks, self.transitions):
            h = trans.forward(block.forward(h, train), train)
        return self.head.forward(self.pool.forward(h, train), train)

    def forward(self, x: np.ndarray, mode: str = "inference") -> np.ndarray:
        """Class probabilities, shape (batch, 2)."""
        if mode not in ("train", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        return softmax(self.logits(x, train=(mode == "train")))

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backpropagate from the logits of the last forward call to the input."""
        g = self.pool.backward(self.head.backward(dlogits))
        for block, trans in zip(reversed(self.blocks), reversed(self.transitions)):
            g = block.backward(trans.backward(g))
        return self.stem.backward(g)

    def loss_and_grads(self, x: np.ndarray, labels, train: bool = True):
        """Forward + backward of the mean cross-entropy; returns (loss, probabilities)."""
        self.zero_grad()
        loss, probs, dlogits = softmax_cross_entropy(self.logits(x, train), labels)
        self.backward(dlogits.astype(self.dtype))
        return loss, probs

    def checkpoint(self, valid_auc: float = math.nan, epoch: int = 0) -> "Checkpoint":
        return Checkpoint(self.config, self.state_dict(), valid_auc, epoch)


def build_model(config: ArchConfig | None = None, seed: int = 0, dtype=TRAIN_DTYPE) -> Model:
    return Model(config or ArchConfig(), seed, dtype)


class ModelHead(Layer):
    """Adapter exposing a whole model with fixed labels as a scalar-loss layer."""

    def __init__(self, model: Model, labels):
        super().__init__()
        self.model = model
        self.labels = np.asarray(labels)
        self.params = model.params
        self._dlogits = None

    def forward(self, x, train=False):
        loss, _, self._dlogits = _xent(self.model.logits(x, train), self.labels)
        return np.asarray(loss)

    def backward(self, grad):
        return self.model.backward(self._dlogits * grad)

    def astype(self, dtype) -> "ModelHead":
        self.model.astype(dtype)
        return self


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    config: ArchConfig
    state: dict[str, np.ndarray]
    valid_auc: float = math.nan
    epoch: int = 0
    version: int = CHECKPOINT_VERSION

    def to_model(self) -> Model:
        model = Model(self.config)
        model.load_state(self.state)
        return model


def save_checkpoint(obj, path, valid_auc: float | None = None, epoch: int | None = None) -> None:
    """Write a Model or Checkpoint in the BADCKPT1 binary format."""
    ckpt = obj.checkpoint() if isinstance(obj, Model) else obj
    auc = ckpt.valid_auc if valid_auc is None else valid_auc
    ep = ckpt.epoch if epoch is None else epoch
    text = ckpt.config.to_text() + f"meta.valid_auc={auc!r}\nmeta.epoch={ep}\n"
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    encoded = text.encode("utf-8")
    blob += struct.pack("<I", len(encoded)) + encoded
    for name, arr in ckpt.state.items():
        raw_name = name.encode("utf-8")
        blob += struct.pack("<I", len(raw_name)) + raw_name
        blob += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n_text,) = struct.unpack("<I", take(4))
    text = take(n_text).decode("utf-8")
    config = ArchConfig.from_text(text)
    meta = dict(line.split("=", 1) for line in text.splitlines() if line.startswith("meta."))

    state = {}
    while pos < len(data):
        (n_name,) = struct.unpack("<I", take(4))
        name = take(n_name).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)

    ckpt = Checkpoint(config, state, float(meta.get("meta.valid_auc", "nan")),
                      int(meta.get("meta.epoch", "0")), version)
    # Validates presence and shape of every parameter, which also catches
    # files truncated on a record boundary.
    Model(config).load_state(state)
    return ckpt


def load_checkpoint(path) -> Model:
    return read_checkpoint(path).to_model()
