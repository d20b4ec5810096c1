"""Histogram-based Bayesian skin color classifier."""

from __future__ import annotations

import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .const import DEFAULT_BINS, DEFAULT_PRIORS, DEFAULT_THRESHOLD, HIST_MAGIC
from .errors import (
    ChannelMismatchError,
    ContractError,
    EmptyClassError,
    HistogramFileError,
)
from .imgio import BinaryMask, FloatArray, Image, ProbMap, SamplePair

__all__ = [
    "ColorHistogramPair",
    "ProbMap",
    "bc_prob_map",
    "binarize",
    "fit_histograms",
    "load_histograms",
    "posterior",
    "quantize_color",
    "save_histograms",
]

_LOGGER = logging.getLogger(__name__)

CountArray = npt.NDArray[np.uint64]
Priors = tuple[float, float]


@dataclass(frozen=True, slots=True)
class ColorHistogramPair:
    """Skin and non-skin color counts over a bins^3 RGB grid.

    Count arrays are flat, indexed ``r + bins * (g + bins * b)``.
    """

    bins: int
    skin_counts: CountArray
    nonskin_counts: CountArray
    n_skin: int
    n_nonskin: int

    def __post_init__(self) -> None:
        """Validate totals and freeze the count tables."""
        cells = self.bins**3
        for name in ("skin_counts", "nonskin_counts"):
            counts = np.asarray(getattr(self, name), dtype=np.uint64)
            if counts.shape != (cells,):
                raise ContractError(f"{name} must hold {cells} cells, got {counts.shape}")
            counts = counts.copy()
            counts.setflags(write=False)
            object.__setattr__(self, name, counts)
        if int(self.skin_counts.sum()) != self.n_skin:
            raise ContractError("skin counts do not sum to n_skin")
        if int(self.nonskin_counts.sum()) != self.n_nonskin:
            raise ContractError("non-skin counts do not sum to n_nonskin")

    def require_both_classes(self) -> None:
        """Raise EmptyClassError when either class has no pixels."""
        if self.n_skin == 0 or self.n_nonskin == 0:
            raise EmptyClassError(
                f"posterior undefined: n_skin={self.n_skin}, n_nonskin={self.n_nonskin}"
            )


def quantize_color(rgb: Sequence[float], bins: int) -> tuple[int, int, int]:
    """Return the histogram cell of a unit-interval RGB triple."""
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    red, green, blue = (min(int(np.floor(v * bins)), bins - 1) for v in rgb)
    return red, green, blue


def _cell_indices(pixels: FloatArray, bins: int) -> npt.NDArray[np.intp]:
    """Return flat cell indices for an (..., 3) array of colors."""
    idx = np.minimum(np.floor(pixels * bins).astype(np.intp), bins - 1)
    return idx[..., 0] + bins * (idx[..., 1] + bins * idx[..., 2])


def fit_histograms(samples: Sequence[SamplePair], bins: int = DEFAULT_BINS) -> ColorHistogramPair:
    """Count skin and non-skin pixel colors over a labelled dataset.

    Fitting records whatever counts the data holds; an empty class is only
    rejected when a posterior is requested.
    """
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    cells = bins**3
    skin = np.zeros(cells, dtype=np.uint64)
    nonskin = np.zeros(cells, dtype=np.uint64)
    for sample in samples:
        if sample.image.channels != 3:
            raise ChannelMismatchError(f"sample {sample.id} is not an RGB image")
        indices = _cell_indices(sample.image.data, bins)
        bits = sample.truth.bits
        skin += np.bincount(indices[bits], minlength=cells).astype(np.uint64)
        nonskin += np.bincount(indices[~bits], minlength=cells).astype(np.uint64)
    hist = ColorHistogramPair(
        bins=bins,
        skin_counts=skin,
        nonskin_counts=nonskin,
        n_skin=int(skin.sum()),
        n_nonskin=int(nonskin.sum()),
    )
    _LOGGER.info(
        "Fitted %d^3 histograms: %d skin and %d non-skin pixels",
        bins,
        hist.n_skin,
        hist.n_nonskin,
    )
    return hist


def _check_priors(priors: Priors) -> None:
    p_skin, p_nonskin = priors
    if p_skin <= 0 or p_nonskin <= 0 or abs(p_skin + p_nonskin - 1.0) > 1e-12:
        raise ContractError(f"priors must be positive and sum to 1, got {priors}")


def _posterior_cells(
    hist: ColorHistogramPair,
    cells: npt.NDArray[np.intp],
    priors: Priors,
    alpha: float,
) -> FloatArray:
    """Evaluate P(skin | v) for an array of flat cell indices.

    Both the scalar and the per-image entry points go through here so their
    results agree bit for bit.
    """
    hist.require_both_classes()
    _check_priors(priors)
    if alpha < 0:
        raise ContractError(f"smoothing alpha must be >= 0, got {alpha}")
    p_skin, p_nonskin = priors
    total_cells = hist.bins**3
    like_skin = (hist.skin_counts[cells].astype(np.float64) + alpha) / (
        hist.n_skin + alpha * total_cells
    )
    like_nonskin = (hist.nonskin_counts[cells].astype(np.float64) + alpha) / (
        hist.n_nonskin + alpha * total_cells
    )
    numerator = like_skin * p_skin
    denominator = numerator + like_nonskin * p_nonskin
    no_evidence = denominator == 0.0
    safe = np.where(no_evidence, 1.0, denominator)
    return np.where(no_evidence, p_skin, numerator / safe)


def posterior(
    hist: ColorHistogramPair,
    rgb: Sequence[float],
    priors: Priors = DEFAULT_PRIORS,
    *,
    alpha: float = 0.0,
) -> float:
    """Return P(skin | color) from the class-conditional histograms.

    A color never seen in either class falls back to the skin prior.

    Raises:
        EmptyClassError: One of the classes has no pixels.
        ContractError: Priors are not positive or do not sum to 1.
    """
    cell = _cell_indices(np.asarray(rgb, dtype=np.float64), hist.bins)
    return float(_posterior_cells(hist, np.atleast_1d(cell), priors, alpha)[0])


def bc_prob_map(
    hist: ColorHistogramPair,
    img: Image,
    priors: Priors = DEFAULT_PRIORS,
    *,
    alpha: float = 0.0,
) -> ProbMap:
    """Apply the posterior to every pixel of an RGB image."""
    if img.channels != 3:
        raise ChannelMismatchError(f"the color classifier needs RGB, got {img.channels} channels")
    cells = _cell_indices(img.data, hist.bins)
    values = _posterior_cells(hist, cells.ravel(), priors, alpha).reshape(cells.shape)
    return ProbMap(values)


def binarize(prob: ProbMap, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Mark pixels whose probability is at or above the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0, 1], got {threshold}")
    return BinaryMask(prob.values >= threshold)


# ---------------------------------------------------------------------------
# BCH1 files: magic, u32 bins, skin u64[bins^3], non-skin u64[bins^3],
# u64 n_skin, u64 n_nonskin; all little-endian.


def save_histograms(hist: ColorHistogramPair, path: Path | str) -> None:
    """Write histograms to a BCH1 file."""
    with Path(path).open("wb") as handle:
        handle.write(HIST_MAGIC)
        handle.write(struct.pack("<I", hist.bins))
        handle.write(hist.skin_counts.astype("<u8").tobytes())
        handle.write(hist.nonskin_counts.astype("<u8").tobytes())
        handle.write(struct.pack("<QQ", hist.n_skin, hist.n_nonskin))
    _LOGGER.debug("Saved histograms to %s", path)


def load_histograms(path: Path | str) -> ColorHistogramPair:
    """Read a BCH1 file.

    Raises:
        HistogramFileError: Wrong magic, truncated payload or inconsistent totals.
    """
    data = Path(path).read_bytes()
    if data[:4] != HIST_MAGIC:
        raise HistogramFileError(f"{path}: not a BCH1 histogram file")
    try:
        (bins,) = struct.unpack_from("<I", data, 4)
        cells = bins**3
        offset = 8
        width = cells * 8
        if len(data) < offset + 2 * width + 16:
            raise HistogramFileError(f"{path}: truncated histogram payload")
        skin = np.frombuffer(data, dtype="<u8", count=cells, offset=offset)
        nonskin = np.frombuffer(data, dtype="<u8", count=cells, offset=offset + width)
        n_skin, n_nonskin = struct.unpack_from("<QQ", data, offset + 2 * width)
        return ColorHistogramPair(
            bins=bins,
            skin_counts=skin.astype(np.uint64),
            nonskin_counts=nonskin.astype(np.uint64),
            n_skin=n_skin,
            n_nonskin=n_nonskin,
        )
    except struct.error as err:
        raise HistogramFileError(f"{path}: truncated header: {err}") from err
    except ContractError as err:
        raise HistogramFileError(f"{path}: inconsistent counts: {err}") from err
