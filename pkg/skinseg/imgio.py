"""Images, masks, netpbm codecs, resampling and datasets."""

from __future__ import annotations

import logging
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, model_validator

from .const import GRAY_WEIGHTS, MANIFEST_NAME, MAX_SIDE, MAXVAL
from .errors import (
    ChannelMismatchError,
    ContractError,
    EmptyInputError,
    HeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedMaxvalError,
)

_LOGGER = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]
NetpbmFormat = Literal["P6", "P5"]

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _frozen(array: npt.NDArray[np.generic]) -> npt.NDArray[np.generic]:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, slots=True)
class Image:
    """An H x W x C grid of unit-interval intensities.

    RGB images have 3 channels and grayscale images 1. Stacked probability
    inputs may carry any channel count; only 1 and 3 channels can be encoded.
    """

    data: FloatArray

    def __post_init__(self) -> None:
        """Validate and freeze the pixel array."""
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, np.newaxis]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ContractError(f"image must be H x W x C, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ContractError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        """Return the row count."""
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        """Return the column count."""
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        """Return the channel count."""
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width)."""
        return self.height, self.width

    def plane(self, channel: int) -> FloatArray:
        """Return one channel as an H x W array."""
        return self.data[:, :, channel]

    def to_chw(self) -> FloatArray:
        """Return the pixels channel-first, as the network expects them."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1))

    @classmethod
    def from_planes(cls, planes: Sequence[FloatArray]) -> Image:
        """Stack H x W planes into a multi-channel image, in order."""
        return cls(np.stack([np.asarray(p, dtype=np.float64) for p in planes], axis=-1))


@dataclass(frozen=True, slots=True)
class BinaryMask:
    """One boolean per pixel; True marks skin."""

    bits: BoolArray

    def __post_init__(self) -> None:
        """Validate and freeze the bit array."""
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ContractError(f"mask must be H x W, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits.astype(np.bool_)))

    @property
    def height(self) -> int:
        """Return the row count."""
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        """Return the column count."""
        return int(self.bits.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width)."""
        return self.height, self.width

    @property
    def count(self) -> int:
        """Return the number of True pixels."""
        return int(self.bits.sum())

    def complement(self) -> BinaryMask:
        """Return the mask with every bit flipped."""
        return BinaryMask(~self.bits)

    @classmethod
    def full(cls, height: int, width: int, value: bool = True) -> BinaryMask:
        """Return a constant mask."""
        return cls(np.full((height, width), value, dtype=np.bool_))


@dataclass(frozen=True, slots=True)
class ProbMap:
    """H x W skin-presence probabilities."""

    values: FloatArray

    def __post_init__(self) -> None:
        """Validate and freeze the probability array."""
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ContractError(f"probability map must be H x W, got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise ContractError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        """Return the row count."""
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        """Return the column count."""
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        """Return (height, width)."""
        return self.height, self.width

    def as_image(self) -> Image:
        """Return the map as a single-channel image."""
        return Image(self.values)


@dataclass(frozen=True, slots=True)
class SamplePair:
    """An image with its ground-truth skin mask."""

    id: str
    image: Image
    truth: BinaryMask

    def __post_init__(self) -> None:
        """Check that image and mask dimensions agree."""
        require_same_shape(self.image.shape, self.truth.shape, what=f"sample {self.id}")


class DatasetSplit(BaseModel):
    """Disjoint train / validation / test id lists."""

    model_config = ConfigDict(frozen=True)

    seed: int
    train: list[str]
    validation: list[str]
    test: list[str]

    @model_validator(mode="after")
    def _check_disjoint(self) -> DatasetSplit:
        combined = [*self.train, *self.validation, *self.test]
        if len(set(combined)) != len(combined):
            raise ValueError("split lists must be disjoint")
        return self


class ManifestRecord(BaseModel):
    """One dataset entry, with paths relative to the manifest file."""

    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    image_path: str
    mask_path: str


_MANIFEST = TypeAdapter(list[ManifestRecord])


def require_same_shape(
    first: tuple[int, ...], second: tuple[int, ...], *, what: str
) -> None:
    """Raise ShapeMismatchError unless two shapes are equal."""
    if tuple(first) != tuple(second):
        raise ShapeMismatchError(f"{what}: dimensions {first} and {second} differ")


# ---------------------------------------------------------------------------
# Netpbm codecs


def _parse_header(data: bytes) -> tuple[str, int, int, int]:
    """Parse a binary netpbm header.

    Returns:
        (magic, width, height, payload offset).

    Raises:
        HeaderError: The header is malformed.
        UnsupportedMaxvalError: maxval is not 255.
    """
    tokens: list[bytes] = []
    offset = 0
    for _ in range(4):
        match = _HEADER_TOKEN.match(data, offset)
        if match is None:
            raise HeaderError("header ends before magic, width, height and maxval")
        tokens.append(match.group(1))
        offset = match.end()
    magic = tokens[0].decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise HeaderError(f"unsupported magic {magic!r}")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError as err:
        raise HeaderError(f"non-numeric header field: {err}") from err
    if width < 1 or height < 1:
        raise HeaderError(f"invalid dimensions {width}x{height}")
    if maxval != MAXVAL:
        raise UnsupportedMaxvalError(f"maxval {maxval} is not supported, only 255")
    if offset >= len(data) or not data[offset : offset + 1].isspace():
        raise HeaderError("maxval must be followed by a single whitespace byte")
    return magic, width, height, offset + 1


def decode_image(data: bytes, fmt: NetpbmFormat | None = None) -> Image:
    """Decode a binary PPM (P6) or PGM (P5) byte string.

    Args:
        data: Raw file contents.
        fmt: Expected format; None accepts either.

    Raises:
        HeaderError: Malformed header or unexpected format.
        TruncatedPayloadError: Fewer payload bytes than declared.
        UnsupportedMaxvalError: maxval other than 255.
    """
    magic, width, height, offset = _parse_header(data)
    if fmt is not None and magic != fmt:
        raise HeaderError(f"expected {fmt} data, found {magic}")
    channels = 3 if magic == "P6" else 1
    expected = width * height * channels
    payload = data[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{magic} {width}x{height} needs {expected} payload bytes, got {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Image(pixels.astype(np.float64) / MAXVAL)


def quantize(values: FloatArray) -> npt.NDArray[np.uint8]:
    """Map unit-interval reals to bytes, rounding half up."""
    return np.floor(np.asarray(values) * MAXVAL + 0.5).astype(np.uint8)


def encode_image(img: Image) -> bytes:
    """Encode a 3-channel image as P6 or a 1-channel image as P5."""
    if img.channels not in (1, 3):
        raise ChannelMismatchError(f"cannot encode a {img.channels}-channel image")
    magic = "P6" if img.channels == 3 else "P5"
    header = f"{magic}\n{img.width} {img.height}\n{MAXVAL}\n".encode("ascii")
    return header + quantize(img.data).tobytes()


def read_image(path: Path | str) -> Image:
    """Read a PPM or PGM file."""
    return decode_image(Path(path).read_bytes())


def write_image(path: Path | str, img: Image) -> None:
    """Write an image as PPM or PGM depending on its channel count."""
    Path(path).write_bytes(encode_image(img))


def read_mask(path: Path | str) -> BinaryMask:
    """Read a PGM mask; pixels at or above half intensity are skin."""
    img = read_image(path)
    if img.channels != 1:
        raise ChannelMismatchError(f"{path}: masks must be single-channel PGM")
    return BinaryMask(img.plane(0) >= 0.5)


def write_mask(path: Path | str, mask: BinaryMask) -> None:
    """Write a mask as a 0/255 PGM."""
    write_image(path, Image(mask.bits.astype(np.float64)))


def read_prob_map(path: Path | str) -> ProbMap:
    """Read a PGM probability map."""
    img = read_image(path)
    if img.channels != 1:
        raise ChannelMismatchError(f"{path}: probability maps must be single-channel")
    return ProbMap(img.plane(0))


def write_prob_map(path: Path | str, prob: ProbMap) -> None:
    """Write a probability map quantized to 255 levels."""
    write_image(path, prob.as_image())


# ---------------------------------------------------------------------------
# Color conversion and resampling


def to_grayscale(img: Image) -> Image:
    """Convert RGB to luma with BT.601 weights."""
    if img.channels != 3:
        raise ChannelMismatchError(
            f"grayscale conversion needs 3 channels, got {img.channels}"
        )
    luma = img.data @ np.asarray(GRAY_WEIGHTS, dtype=np.float64)
    return Image(np.clip(luma, 0.0, 1.0))


def _scaled_size(height: int, width: int, max_side: int) -> tuple[int, int] | None:
    longest = max(height, width)
    if longest <= max_side:
        return None
    scale = max_side / longest
    new_h = max_side if height == longest else max(1, math.floor(height * scale + 0.5))
    new_w = max_side if width == longest else max(1, math.floor(width * scale + 0.5))
    return new_h, new_w


def _bilinear_axis(src: int, dst: int) -> tuple[npt.NDArray[np.intp], npt.NDArray[np.intp], FloatArray]:
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1)
    low = np.floor(coords).astype(np.intp)
    high = np.minimum(low + 1, src - 1)
    return low, high, coords - low


def downsample_max_side(img: Image, max_side: int = MAX_SIDE) -> Image:
    """Shrink an image so neither side exceeds max_side, keeping aspect ratio.

    Images already within bounds are returned unchanged. Sampling is bilinear
    with half-pixel centers.
    """
    if max_side < 1:
        raise ContractError(f"max_side must be >= 1, got {max_side}")
    size = _scaled_size(img.height, img.width, max_side)
    if size is None:
        return img
    new_h, new_w = size
    y0, y1, wy = _bilinear_axis(img.height, new_h)
    x0, x1, wx = _bilinear_axis(img.width, new_w)
    data = img.data
    rows = data[y0] * (1.0 - wy)[:, None, None] + data[y1] * wy[:, None, None]
    out = rows[:, x0] * (1.0 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    _LOGGER.debug("Downsampled %dx%d to %dx%d", img.height, img.width, new_h, new_w)
    return Image(np.clip(out, 0.0, 1.0))


def downsample_mask_max_side(mask: BinaryMask, max_side: int = MAX_SIDE) -> BinaryMask:
    """Shrink a mask with nearest-neighbour sampling and a 0.5 threshold."""
    if max_side < 1:
        raise ContractError(f"max_side must be >= 1, got {max_side}")
    size = _scaled_size(mask.height, mask.width, max_side)
    if size is None:
        return mask
    new_h, new_w = size
    rows = np.minimum(
        np.floor((np.arange(new_h) + 0.5) * mask.height / new_h).astype(np.intp),
        mask.height - 1,
    )
    cols = np.minimum(
        np.floor((np.arange(new_w) + 0.5) * mask.width / new_w).astype(np.intp),
        mask.width - 1,
    )
    sampled = mask.bits.astype(np.float64)[np.ix_(rows, cols)]
    return BinaryMask(sampled >= 0.5)


# ---------------------------------------------------------------------------
# Synthetic data


def _skin_tone(rng: np.random.Generator) -> FloatArray:
    red = rng.uniform(0.55, 0.95)
    green = red * rng.uniform(0.62, 0.82)
    blue = green * rng.uniform(0.70, 0.92)
    return np.array([red, green, blue])


def _off_tone(rng: np.random.Generator) -> FloatArray:
    return np.array(
        [rng.uniform(0.05, 0.4), rng.uniform(0.2, 0.85), rng.uniform(0.35, 0.95)]
    )


def _ellipse(
    rng: np.random.Generator, size: int, radius: tuple[float, float]
) -> tuple[BoolArray, FloatArray]:
    """Return a random ellipse mask and its normalized squared radius field."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
    semi_a, semi_b = rng.uniform(radius[0] * size, radius[1] * size, size=2)
    theta = rng.uniform(0.0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / semi_a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / semi_b
    r2 = u * u + v * v
    return r2 <= 1.0, r2


def _rectangle(rng: np.random.Generator, size: int) -> BoolArray:
    top, left = rng.integers(0, size - size // 6, size=2)
    height, width = rng.integers(size // 8, size // 3, size=2, endpoint=True)
    region = np.zeros((size, size), dtype=np.bool_)
    region[top : top + height, left : left + width] = True
    return region


def _synthetic_sample(
    rng: np.random.Generator,
    sample_id: str,
    size: int,
    color_decoys: int,
    texture_decoys: int,
) -> SamplePair:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (math.cos(angle) * xx + math.sin(angle) * yy)[:, :, None]
    canvas = rng.uniform(0.1, 0.9, size=3) + 0.15 * (ramp - 0.5)

    # color decoys: skin-toned but textured at pixel frequency
    for _ in range(rng.integers(0, color_decoys, endpoint=True)):
        region = _rectangle(rng, size)
        texture = 1.0 + rng.uniform(-0.35, 0.35, size=(size, size))
        canvas[region] = (_skin_tone(rng) * texture[:, :, None])[region]

    # texture decoys: smooth shading but off-tone
    for _ in range(rng.integers(0, texture_decoys, endpoint=True)):
        region, r2 = _ellipse(rng, size, (0.08, 0.2))
        shaded = _off_tone(rng) * (1.0 - 0.25 * r2)[:, :, None]
        canvas[region] = shaded[region]

    truth = np.zeros((size, size), dtype=np.bool_)
    for _ in range(rng.integers(1, 3, endpoint=True)):
        region, r2 = _ellipse(rng, size, (0.08, 0.22))
        shaded = _skin_tone(rng) * (1.0 - 0.25 * r2)[:, :, None]
        canvas[region] = shaded[region]
        truth |= region

    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    return SamplePair(
        id=sample_id, image=Image(np.clip(canvas, 0.0, 1.0)), truth=BinaryMask(truth)
    )


def generate_synthetic_dataset(
    n: int,
    size: int,
    seed: int,
    *,
    color_decoys: int = 2,
    texture_decoys: int = 2,
) -> list[SamplePair]:
    """Generate skin-like ellipses with color and texture decoys.

    Each sample holds 1-3 smoothly shaded skin-toned ellipses (the truth),
    up to ``color_decoys`` skin-toned rectangles with pixel-level texture and
    up to ``texture_decoys`` smoothly shaded off-tone ellipses, over a noisy
    gradient background. Output is a pure function of the arguments.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    if size < 32:
        raise ContractError(f"size must be >= 32, got {size}")
    children = np.random.SeedSequence(seed).spawn(n)
    samples = [
        _synthetic_sample(
            np.random.default_rng(child),
            f"synth-{index:05d}",
            size,
            color_decoys,
            texture_decoys,
        )
        for index, child in enumerate(children)
    ]
    _LOGGER.info("Generated %d synthetic samples of %dx%d (seed %d)", n, size, size, seed)
    return samples


# ---------------------------------------------------------------------------
# Splits and manifests


def split_dataset(
    samples: Sequence[SamplePair | str],
    fractions: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Shuffle ids by seed and cut them into train / validation / test.

    Validation and test sizes are the rounded fractions of the total; the
    remainder goes to train.
    """
    if not samples:
        raise EmptyInputError("cannot split an empty sample list")
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must be positive and sum to 1, got {fractions}")
    ids = [s if isinstance(s, str) else s.id for s in samples]
    total = len(ids)
    n_val = math.floor(total * fractions[1] + 0.5)
    n_test = math.floor(total * fractions[2] + 0.5)
    n_train = total - n_val - n_test
    if n_train < 0:
        raise ContractError(f"fractions {fractions} leave no room for training")
    order = np.random.default_rng(seed).permutation(total)
    shuffled = [ids[i] for i in order]
    split = DatasetSplit(
        seed=seed,
        train=shuffled[:n_train],
        validation=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )
    _LOGGER.info("Split %d samples into %d/%d/%d", total, n_train, n_val, n_test)
    return split


def write_dataset(samples: Sequence[SamplePair], directory: Path | str) -> Path:
    """Write images, masks and a manifest; return the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for sample in samples:
        suffix = ".ppm" if sample.image.channels == 3 else ".pgm"
        image_path = Path("images") / f"{sample.id}{suffix}"
        mask_path = Path("masks") / f"{sample.id}.pgm"
        write_image(root / image_path, sample.image)
        write_mask(root / mask_path, sample.truth)
        records.append(
            ManifestRecord(
                id=sample.id, image_path=image_path.as_posix(), mask_path=mask_path.as_posix()
            )
        )
    manifest = root / MANIFEST_NAME
    manifest.write_bytes(_MANIFEST.dump_json(records, indent=2))
    _LOGGER.info("Wrote %d samples and manifest %s", len(records), manifest)
    return manifest


def load_dataset(manifest: Path | str, max_side: int | None = None) -> list[SamplePair]:
    """Load every sample listed in a manifest, optionally downsampled."""
    path = Path(manifest)
    records = _MANIFEST.validate_json(path.read_bytes())
    samples = []
    for record in records:
        image = read_image(path.parent / record.image_path)
        truth = read_mask(path.parent / record.mask_path)
        if max_side is not None:
            image = downsample_max_side(image, max_side)
            truth = downsample_mask_max_side(truth, max_side)
        samples.append(SamplePair(id=record.id, image=image, truth=truth))
    _LOGGER.debug("Loaded %d samples from %s", len(samples), path)
    return samples


def write_split(path: Path | str, split: DatasetSplit) -> None:
    """Write a split file as JSON."""
    Path(path).write_text(split.model_dump_json(indent=2), encoding="utf-8")


def read_split(path: Path | str) -> DatasetSplit:
    """Read a split file."""
    return DatasetSplit.model_validate_json(Path(path).read_bytes())


def select(samples: Sequence[SamplePair], ids: Sequence[str]) -> list[SamplePair]:
    """Return the samples named by ids, in id order."""
    by_id = {sample.id: sample for sample in samples}
    missing = [sample_id for sample_id in ids if sample_id not in by_id]
    if missing:
        raise ContractError(f"split references unknown ids: {missing[:5]}")
    return [by_id[sample_id] for sample_id in ids]
