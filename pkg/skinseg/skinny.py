"""Configurable lightweight U-Net ("Skinny-lite") for skin segmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Generic, Literal, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .const import (
    DEFAULT_BASE_CHANNELS,
    DESK_LEVELS,
    WEIGHTS_MAGIC,
    WEIGHTS_VERSION,
)
from .errors import ChannelMismatchError, ContractError, WeightFileError
from .imgio import Image, ProbMap
from .nncore import Graph, ParamStore, Tensor

_LOGGER = logging.getLogger(__name__)

Activation = Literal["relu", "sigmoid"]
T = TypeVar("T")


class NetworkConfig(BaseModel):
    """Architecture of a Skinny-lite network.

    Attributes:
        in_channels: 1 for grayscale, 3 for RGB, N for stacked maps.
        levels: Encoder depth; 3 at desk scale, 6 at full scale.
        base_channels: Width of the first level; doubles per level.
        inception: Use parallel 1x1/3x3/5x5 branches in every block.
        dense: Concatenate each block's input to its output before a 1x1
            channel-reducing convolution.
        seed: Weight initialisation seed.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    in_channels: int = Field(default=3, ge=1)
    levels: int = Field(default=DESK_LEVELS, ge=1)
    base_channels: int = Field(default=DEFAULT_BASE_CHANNELS, ge=1)
    inception: bool = False
    dense: bool = False
    seed: int = 0

    @property
    def multiple(self) -> int:
        """Return the factor input sides are padded to."""
        return int(2 ** (self.levels - 1))

    def canonical_json(self) -> bytes:
        """Return a key-sorted compact JSON encoding."""
        return json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True, slots=True)
class ConvLayer:
    """Shape of one convolution and its parameter slots."""

    name: str
    in_channels: int
    out_channels: int
    size: int

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        """Return (out, in, k, k)."""
        return self.out_channels, self.in_channels, self.size, self.size

    @property
    def count(self) -> int:
        """Return the number of weights plus biases."""
        return self.out_channels * self.in_channels * self.size * self.size + self.out_channels


class _Walker(Generic[T]):
    """Interprets the architecture description over some value type."""

    def conv(self, x: T, name: str, out_channels: int, size: int, activation: Activation) -> T:
        raise NotImplementedError

    def concat(self, a: T, b: T) -> T:
        raise NotImplementedError

    def pool(self, x: T) -> T:
        raise NotImplementedError

    def upsample(self, x: T) -> T:
        raise NotImplementedError


class _ShapeWalker(_Walker[int]):
    """Tracks channel counts and records every convolution."""

    def __init__(self) -> None:
        self.layers: list[ConvLayer] = []

    def conv(self, x: int, name: str, out_channels: int, size: int, activation: Activation) -> int:
        self.layers.append(ConvLayer(name, x, out_channels, size))
        return out_channels

    def concat(self, a: int, b: int) -> int:
        return a + b

    def pool(self, x: int) -> int:
        return x

    def upsample(self, x: int) -> int:
        return x


class _GraphWalker(_Walker[int]):
    """Records the network on a Graph tape; values are node ids."""

    def __init__(self, graph: Graph) -> None:
        self.graph = graph

    def conv(self, x: int, name: str, out_channels: int, size: int, activation: Activation) -> int:
        graph = self.graph
        y = graph.conv2d(x, graph.param(f"{name}.weight"), graph.param(f"{name}.bias"))
        return graph.relu(y) if activation == "relu" else graph.sigmoid(y)

    def concat(self, a: int, b: int) -> int:
        return self.graph.concat(a, b)

    def pool(self, x: int) -> int:
        return self.graph.maxpool2(x)

    def upsample(self, x: int) -> int:
        return self.graph.upsample2(x)


def _block(walker: _Walker[T], x: T, prefix: str, width: int, config: NetworkConfig) -> T:
    if config.inception:
        b1 = walker.conv(x, f"{prefix}.b1", width, 1, "relu")
        b3 = walker.conv(x, f"{prefix}.b3", width, 3, "relu")
        b5 = walker.conv(x, f"{prefix}.b5", width, 5, "relu")
        body = walker.concat(walker.concat(b1, b3), b5)
    else:
        body = walker.conv(x, f"{prefix}.conv1", width, 3, "relu")
        body = walker.conv(body, f"{prefix}.conv2", width, 3, "relu")
    if config.dense:
        body = walker.concat(x, body)
    if config.inception or config.dense:
        body = walker.conv(body, f"{prefix}.reduce", width, 1, "relu")
    return body


def _unet(walker: _Walker[T], config: NetworkConfig, x: T) -> T:
    skips: list[T] = []
    for level in range(config.levels):
        if level:
            x = walker.pool(x)
        x = _block(walker, x, f"enc{level}", config.base_channels * 2**level, config)
        skips.append(x)
    for level in range(config.levels - 2, -1, -1):
        x = walker.concat(walker.upsample(x), skips[level])
        x = _block(walker, x, f"dec{level}", config.base_channels * 2**level, config)
    return walker.conv(x, "head", 1, 1, "sigmoid")


def conv_layers(config: NetworkConfig) -> list[ConvLayer]:
    """Return every convolution of the network in slot order."""
    walker = _ShapeWalker()
    _unet(walker, config, config.in_channels)
    return walker.layers


def count_params(config: NetworkConfig) -> int:
    """Return the exact number of learnable parameters.

    The full-scale configuration (levels=6, base=16, RGB, plain blocks)
    has 7,862,401 parameters.
    """
    return sum(layer.count for layer in conv_layers(config))


@dataclass(frozen=True)
class WeightStore:
    """A network configuration with its parameters."""

    config: NetworkConfig
    params: ParamStore

    def __post_init__(self) -> None:
        """Check that the slots are exactly those the config implies."""
        expected = {}
        for layer in conv_layers(self.config):
            expected[f"{layer.name}.weight"] = layer.weight_shape
            expected[f"{layer.name}.bias"] = (layer.out_channels,)
        actual = {name: tuple(array.shape) for name, array in self.params.items()}
        if actual != expected:
            raise ContractError("parameter slots do not match the network configuration")


def build(config: NetworkConfig) -> WeightStore:
    """Create He-uniform weights and zero biases, deterministic in the seed."""
    rng = np.random.default_rng(config.seed)
    params = ParamStore()
    for layer in conv_layers(config):
        limit = math.sqrt(6.0 / (layer.in_channels * layer.size * layer.size))
        weight = rng.uniform(-limit, limit, size=layer.weight_shape).astype(np.float32)
        params.add(f"{layer.name}.weight", weight)
        params.add(f"{layer.name}.bias", np.zeros(layer.out_channels, dtype=np.float32))
    _LOGGER.debug("Built network with %d parameters", params.total_count)
    return WeightStore(config=config, params=params)


def trace(config: NetworkConfig, graph: Graph, x: int) -> int:
    """Record the network on a graph and return the output node."""
    return _unet(_GraphWalker(graph), config, x)


def pad_to_multiple(chw: Tensor, multiple: int) -> Tensor:
    """Reflect-pad the bottom and right edges up to the next multiple."""
    _, h, w = chw.shape
    pad_h = -h % multiple
    pad_w = -w % multiple
    if not pad_h and not pad_w:
        return chw
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(chw, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)


def forward(weights: WeightStore, img: Image) -> ProbMap:
    """Run the network on one image and return its skin probability map."""
    config = weights.config
    if img.channels != config.in_channels:
        raise ChannelMismatchError(
            f"network expects {config.in_channels} channels, got {img.channels}"
        )
    padded = pad_to_multiple(img.to_chw(), config.multiple)
    graph = Graph(weights.params)
    out = trace(config, graph, graph.input(padded))
    values = graph.value(out)[0, 0, : img.height, : img.width]
    return ProbMap(values.astype(np.float64))


# ---------------------------------------------------------------------------
# SKNW files: magic, u32 version, u32 config length, config JSON,
# 32-byte SHA-256 of the config JSON, u32 slot count, then per slot
# u32 name length, name, u64 element count, float32 values; little-endian.


def save_weights(weights: WeightStore, path: Path | str) -> None:
    """Write weights to a SKNW file."""
    config_json = weights.config.canonical_json()
    chunks = [
        WEIGHTS_MAGIC,
        struct.pack("<II", WEIGHTS_VERSION, len(config_json)),
        config_json,
        hashlib.sha256(config_json).digest(),
        struct.pack("<I", len(weights.params)),
    ]
    for name, array in weights.params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<Q", array.size))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    _LOGGER.debug("Saved %d parameters to %s", weights.params.total_count, path)


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int, what: str, slot: str | None = None) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            where = f" in slot {slot!r}" if slot else ""
            raise WeightFileError(f"{self.path}: truncated while reading {what}{where}", slot)
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str, slot: str | None = None) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what, slot))


def load_weights(path: Path | str) -> WeightStore:
    """Read a SKNW file.

    Raises:
        WeightFileError: Wrong magic or version, config hash mismatch,
            unexpected slots, or truncation (the error names the slot).
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4, "magic") != WEIGHTS_MAGIC:
        raise WeightFileError(f"{path}: not a SKNW weight file")
    version, config_len = reader.unpack("<II", "header")
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    config_json = reader.take(config_len, "config")
    if reader.take(32, "config hash") != hashlib.sha256(config_json).digest():
        raise WeightFileError(f"{path}: config hash mismatch")
    try:
        config = NetworkConfig.model_validate_json(config_json)
    except ValueError as err:
        raise WeightFileError(f"{path}: invalid config block: {err}") from err

    expected = conv_layers(config)
    expected_slots = [
        (f"{layer.name}.{part}", shape)
        for layer in expected
        for part, shape in (("weight", layer.weight_shape), ("bias", (layer.out_channels,)))
    ]
    (slot_count,) = reader.unpack("<I", "slot count")
    if slot_count != len(expected_slots):
        raise WeightFileError(
            f"{path}: {slot_count} slots stored, config implies {len(expected_slots)}"
        )
    params = ParamStore()
    for expected_name, shape in expected_slots:
        (name_len,) = reader.unpack("<I", "slot name length", expected_name)
        name = reader.take(name_len, "slot name", expected_name).decode("utf-8", "replace")
        if name != expected_name:
            raise WeightFileError(f"{path}: expected slot {expected_name!r}, found {name!r}", name)
        (count,) = reader.unpack("<Q", "element count", name)
        if count != math.prod(shape):
            raise WeightFileError(f"{path}: slot {name!r} holds {count} values", name)
        values = np.frombuffer(reader.take(4 * count, "values", name), dtype="<f4")
        params.add(name, values.astype(np.float32).reshape(shape))
    return WeightStore(config=config, params=params)


def predict(weights: WeightStore, images: Sequence[Image]) -> list[ProbMap]:
    """Run the network over several images."""
    return [forward(weights, img) for img in images]
