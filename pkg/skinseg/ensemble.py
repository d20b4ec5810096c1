"""Ensembles of skin segmenters: stacking, majority voting and BC-gated selection."""

from __future__ import annotations

import logging
import threading
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from enum import StrEnum
from pathlib import Path

import numpy as np
from cachetools import LRUCache
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .bayes import ColorHistogramPair, bc_prob_map, binarize, load_histograms
from .const import DEFAULT_THRESHOLD, MODEL_CACHE_SIZE
from .errors import ChannelMismatchError, EnsembleSpecError, InvariantError
from .imgio import BinaryMask, FloatArray, Image, ProbMap, SamplePair, require_same_shape, to_grayscale
from .skinny import NetworkConfig, WeightStore, forward, load_weights
from .train import TrainConfig, TrainRecord, TrainSample, train_model

_LOGGER = logging.getLogger(__name__)


class SourceKind(StrEnum):
    """Origin of one stacked channel."""

    RAW_GRAYSCALE = "raw_grayscale"
    MODEL = "model"


class Scheme(StrEnum):
    """How first-level outputs are combined."""

    STACK = "stack"
    VOTE = "vote"
    BC_SELECT = "bc_select"


class ChannelSource(BaseModel):
    """One input channel of a stack or one voter."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: SourceKind
    model: str | None = None

    @model_validator(mode="after")
    def _check_reference(self) -> ChannelSource:
        if self.kind is SourceKind.MODEL and not self.model:
            raise ValueError("a model source needs a weight file reference")
        if self.kind is SourceKind.RAW_GRAYSCALE and self.model is not None:
            raise ValueError("a raw grayscale source takes no model reference")
        return self

    @classmethod
    def gray(cls) -> ChannelSource:
        """Return the raw grayscale source."""
        return cls(kind=SourceKind.RAW_GRAYSCALE)

    @classmethod
    def of(cls, model: str) -> ChannelSource:
        """Return a model source."""
        return cls(kind=SourceKind.MODEL, model=model)


class EnsembleSpec(BaseModel):
    """A complete, validated combination recipe.

    Model references are paths, relative to the registry's base directory,
    or names registered in memory.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = ""
    scheme: Scheme
    sources: tuple[ChannelSource, ...] = ()
    second_level: str | None = None
    skin_model: str | None = None
    nonskin_model: str | None = None
    bc_hist: str | None = None
    threshold: float = Field(default=DEFAULT_THRESHOLD, ge=0, le=1)

    @model_validator(mode="after")
    def _check_scheme(self) -> EnsembleSpec:
        if self.scheme is Scheme.STACK:
            if len(self.sources) < 2:
                raise ValueError("a stack needs at least two sources")
            if not self.second_level:
                raise ValueError("a stack needs a second-level model")
        elif self.scheme is Scheme.VOTE:
            if len(self.sources) < 3 or len(self.sources) % 2 == 0:
                raise ValueError(f"voting needs an odd number (>= 3) of sources, got {len(self.sources)}")
            if any(source.kind is not SourceKind.MODEL for source in self.sources):
                raise ValueError("every voter must be a model")
        elif not (self.skin_model and self.nonskin_model and self.bc_hist):
            raise ValueError("BC selection needs skin, non-skin and histogram references")
        return self

    @property
    def model_refs(self) -> list[str]:
        """Return every first-level model reference in order."""
        refs = [source.model for source in self.sources if source.model]
        refs += [ref for ref in (self.skin_model, self.nonskin_model) if ref]
        return refs


def parse_spec(data: Mapping[str, object] | str | bytes) -> EnsembleSpec:
    """Validate a spec from a mapping or JSON text.

    Raises:
        EnsembleSpecError: The spec violates a scheme invariant.
    """
    try:
        if isinstance(data, str | bytes):
            return EnsembleSpec.model_validate_json(data)
        return EnsembleSpec.model_validate(data)
    except ValidationError as err:
        raise EnsembleSpecError(f"invalid ensemble spec: {err}") from err


def load_spec(path: Path | str) -> EnsembleSpec:
    """Read a spec JSON file."""
    return parse_spec(Path(path).read_bytes())


def save_spec(path: Path | str, spec: EnsembleSpec) -> None:
    """Write a spec as JSON."""
    Path(path).write_text(spec.model_dump_json(indent=2, exclude_none=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Presets


STACK_PRESETS: dict[str, tuple[str, ...]] = {
    "stack_gs_skin_nonskin": ("gs", "skin", "nonskin"),
    "stack_rgb_skin_nonskin": ("rgb", "skin", "nonskin"),
    "stack_gs_nonskin": ("gs", "nonskin"),
    "stack_gray_skin_nonskin": ("gray", "skin", "nonskin"),
    "stack_gray_rgb_gs": ("gray", "rgb", "gs"),
    "stack_rgb_gs": ("rgb", "gs"),
}
PRESETS = (*STACK_PRESETS, "vote_gs_skin_nonskin", "bc_select")


def preset_spec(name: str, models: Mapping[str, str], second_level: str | None = None) -> EnsembleSpec:
    """Build a named combination from base-model roles.

    Args:
        name: One of :data:`PRESETS`.
        models: Role (``rgb``, ``gs``, ``skin``, ``nonskin``, ``bc``) to
            reference. The ``gray`` role is the raw grayscale channel.
        second_level: Second-level reference for stacking presets.
    """

    def ref(role: str) -> str:
        try:
            return models[role]
        except KeyError as err:
            raise EnsembleSpecError(f"preset {name!r} needs a {role!r} model") from err

    def source(role: str) -> dict[str, str]:
        if role == "gray":
            return {"kind": SourceKind.RAW_GRAYSCALE.value}
        return {"kind": SourceKind.MODEL.value, "model": ref(role)}

    if name in STACK_PRESETS:
        return parse_spec(
            {
                "name": name,
                "scheme": Scheme.STACK.value,
                "sources": [source(role) for role in STACK_PRESETS[name]],
                "second_level": second_level,
            }
        )
    if name == "vote_gs_skin_nonskin":
        return parse_spec(
            {
                "name": name,
                "scheme": Scheme.VOTE.value,
                "sources": [source(role) for role in ("gs", "skin", "nonskin")],
            }
        )
    if name == "bc_select":
        return parse_spec(
            {
                "name": name,
                "scheme": Scheme.BC_SELECT.value,
                "skin_model": ref("skin"),
                "nonskin_model": ref("nonskin"),
                "bc_hist": ref("bc"),
            }
        )
    raise EnsembleSpecError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


# ---------------------------------------------------------------------------
# Model registry


class ModelRegistry:
    """Resolves model references and keeps loaded artifacts in an LRU cache."""

    def __init__(self, base_dir: Path | str | None = None, maxsize: int = MODEL_CACHE_SIZE) -> None:
        """Initialize the registry.

        Args:
            base_dir: Directory relative references are resolved against.
            maxsize: Number of weight sets and histograms kept in memory.
        """
        self.base_dir = Path(base_dir) if base_dir is not None else Path()
        self._weights: LRUCache[str, WeightStore] = LRUCache(maxsize=maxsize)
        self._histograms: LRUCache[str, ColorHistogramPair] = LRUCache(maxsize=maxsize)
        self._pinned: dict[str, WeightStore | ColorHistogramPair] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def register(self, ref: str, artifact: WeightStore | ColorHistogramPair) -> None:
        """Make an in-memory model or histogram available under a name."""
        self._pinned[ref] = artifact

    def resolve(self, ref: str) -> Path:
        """Return the file a reference points at."""
        path = Path(ref)
        return path if path.is_absolute() else self.base_dir / path

    def weights(self, ref: str) -> WeightStore:
        """Return the network behind a reference."""
        pinned = self._pinned.get(ref)
        if isinstance(pinned, WeightStore):
            return pinned
        with self._lock:
            cached = self._weights.get(ref)
            if cached is not None:
                self.hits += 1
                _LOGGER.debug("Using cached weights for %s (cache hit)", ref)
                return cached
            self.misses += 1
            _LOGGER.debug("Loading weights for %s (cache miss)", ref)
            loaded = load_weights(self.resolve(ref))
            self._weights[ref] = loaded
            return loaded

    def histograms(self, ref: str) -> ColorHistogramPair:
        """Return the color histograms behind a reference."""
        pinned = self._pinned.get(ref)
        if isinstance(pinned, ColorHistogramPair):
            return pinned
        with self._lock:
            cached = self._histograms.get(ref)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
            loaded = load_histograms(self.resolve(ref))
            self._histograms[ref] = loaded
            return loaded

    @property
    def diagnostics_cache_stats(self) -> dict[str, object]:
        """Return cache statistics for diagnostics."""
        return {
            "weights_cache_size": len(self._weights),
            "weights_cache_maxsize": self._weights.maxsize,
            "histogram_cache_size": len(self._histograms),
            "registered_models": sorted(self._pinned),
            "hits": self.hits,
            "misses": self.misses,
        }


# ---------------------------------------------------------------------------
# Combination schemes


def model_input(weights: WeightStore, img: Image) -> Image:
    """Return the image in the modality a network was trained on."""
    wanted = weights.config.in_channels
    if wanted == img.channels:
        return img
    if wanted == 1 and img.channels == 3:
        return to_grayscale(img)
    raise ChannelMismatchError(f"model expects {wanted} channels, image has {img.channels}")


def _model_map(registry: ModelRegistry, ref: str, img: Image) -> ProbMap:
    weights = registry.weights(ref)
    return forward(weights, model_input(weights, img))


def _source_plane(source: ChannelSource, img: Image, registry: ModelRegistry) -> FloatArray:
    if source.kind is SourceKind.RAW_GRAYSCALE:
        return to_grayscale(img).plane(0)
    if source.model is None:
        raise InvariantError("model source without a reference passed validation")
    return _model_map(registry, source.model, img).values


def stack_channels(img: Image, sources: Sequence[ChannelSource], registry: ModelRegistry) -> Image:
    """Stack first-level outputs into one channel per source, in source order.

    First-level networks run concurrently; values are copied unscaled.
    """
    if img.channels != 3:
        raise ChannelMismatchError(f"stacking starts from an RGB image, got {img.channels} channels")
    with ThreadPoolExecutor(max_workers=max(1, min(len(sources), 4))) as pool:
        planes = list(pool.map(lambda source: _source_plane(source, img, registry), sources))
    return Image.from_planes(planes)


def _require_scheme(spec: EnsembleSpec, scheme: Scheme) -> None:
    if spec.scheme is not scheme:
        raise EnsembleSpecError(f"spec {spec.name!r} uses {spec.scheme}, not {scheme}")


def second_level_weights(spec: EnsembleSpec, registry: ModelRegistry) -> WeightStore:
    """Load a stack's second-level network and check its input width."""
    _require_scheme(spec, Scheme.STACK)
    if spec.second_level is None:
        raise InvariantError("stack spec without a second-level model passed validation")
    weights = registry.weights(spec.second_level)
    if weights.config.in_channels != len(spec.sources):
        raise EnsembleSpecError(
            f"second-level model takes {weights.config.in_channels} channels, "
            f"stack has {len(spec.sources)} sources"
        )
    return weights


def infer_stack(spec: EnsembleSpec, img: Image, registry: ModelRegistry) -> ProbMap:
    """Run the second-level network on the stacked first-level outputs."""
    weights = second_level_weights(spec, registry)
    return forward(weights, stack_channels(img, spec.sources, registry))


def train_second_level(
    sources: Sequence[ChannelSource],
    registry: ModelRegistry,
    samples: Sequence[SamplePair],
    tcfg: TrainConfig,
    config: NetworkConfig,
    val: Sequence[SamplePair] = (),
) -> tuple[WeightStore, TrainRecord]:
    """Train a fresh combiner on stacked outputs of frozen base models.

    The combiner's input width is forced to the number of sources; every
    pixel enters the loss.
    """
    config = config.model_copy(update={"in_channels": len(sources)})

    def stacked(items: Sequence[SamplePair]) -> list[TrainSample]:
        return [
            TrainSample(input=stack_channels(item.image, sources, registry), truth=item.truth, id=item.id)
            for item in items
        ]

    _LOGGER.info("Training a second-level network on %d stacked sources", len(sources))
    return train_model(config, tcfg, stacked(samples), stacked(val))


def vote_maps(maps: Sequence[ProbMap], threshold: float = DEFAULT_THRESHOLD) -> ProbMap:
    """Hard per-pixel majority vote; a map votes skin where it is ``>= threshold``."""
    if len(maps) < 3 or len(maps) % 2 == 0:
        raise EnsembleSpecError(f"voting needs an odd number (>= 3) of maps, got {len(maps)}")
    for other in maps[1:]:
        require_same_shape(maps[0].shape, other.shape, what="voter maps")
    votes = sum((prob.values >= threshold).astype(np.int64) for prob in maps)
    return ProbMap((2 * votes > len(maps)).astype(np.float64))


def infer_vote(spec: EnsembleSpec, img: Image, registry: ModelRegistry) -> ProbMap:
    """Majority vote over the spec's binarised model outputs."""
    _require_scheme(spec, Scheme.VOTE)
    refs = [source.model for source in spec.sources if source.model]
    with ThreadPoolExecutor(max_workers=min(len(refs), 4)) as pool:
        maps = list(pool.map(lambda ref: _model_map(registry, ref, img), refs))
    return vote_maps(maps, spec.threshold)


def select_maps(bc_mask: BinaryMask, skin_map: ProbMap, nonskin_map: ProbMap) -> ProbMap:
    """Take the skin model's value where the BC says skin, the other model's elsewhere."""
    require_same_shape(bc_mask.shape, skin_map.shape, what="BC mask and skin map")
    require_same_shape(bc_mask.shape, nonskin_map.shape, what="BC mask and non-skin map")
    return ProbMap(np.where(bc_mask.bits, skin_map.values, nonskin_map.values))


def infer_bc_select(spec: EnsembleSpec, img: Image, registry: ModelRegistry) -> ProbMap:
    """Gate two stratified models by the color classifier's decision."""
    _require_scheme(spec, Scheme.BC_SELECT)
    if spec.skin_model is None or spec.nonskin_model is None or spec.bc_hist is None:
        raise InvariantError("BC selection spec without references passed validation")
    bc_mask = binarize(bc_prob_map(registry.histograms(spec.bc_hist), img), spec.threshold)
    return select_maps(
        bc_mask,
        _model_map(registry, spec.skin_model, img),
        _model_map(registry, spec.nonskin_model, img),
    )


def infer(spec: EnsembleSpec, img: Image, registry: ModelRegistry) -> ProbMap:
    """Run any ensemble on one image."""
    if spec.scheme is Scheme.STACK:
        return infer_stack(spec, img, registry)
    if spec.scheme is Scheme.VOTE:
        return infer_vote(spec, img, registry)
    return infer_bc_select(spec, img, registry)
