"""Masked segmentation losses, BC-based stratification and the training loop."""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_LR,
    DEFAULT_SEED,
    DEFAULT_THRESHOLD,
    DICE_SMOOTH,
    PROB_CLAMP,
)
from .errors import (
    ChannelMismatchError,
    EmptyInputError,
    NonFiniteError,
    TrainingDivergedError,
)
from .evaluation import Confusion, confusion, prf
from .imgio import (
    BinaryMask,
    FloatArray,
    Image,
    ProbMap,
    SamplePair,
    require_same_shape,
    to_grayscale,
)
from .nncore import AdamState, Graph, ParamStore, adam_step
from .skinny import NetworkConfig, WeightStore, build, forward, pad_to_multiple, save_weights, trace

_LOGGER = logging.getLogger(__name__)

ArrayInput = ProbMap | BinaryMask | npt.ArrayLike


class Branch(StrEnum):
    """Which BC decision region a model's loss is restricted to."""

    SKIN = "skin"
    NONSKIN = "nonskin"
    NONE = "none"


@dataclass(frozen=True, slots=True)
class TrainSample:
    """Network input with its truth and the pixels that enter the loss."""

    input: Image
    truth: BinaryMask
    loss_mask: BinaryMask | None = None
    id: str = ""

    def __post_init__(self) -> None:
        """Default the loss mask to all pixels and check dimensions."""
        if self.loss_mask is None:
            object.__setattr__(self, "loss_mask", BinaryMask.full(*self.truth.shape))
        require_same_shape(self.input.shape, self.truth.shape, what="training input")
        require_same_shape(self.truth.shape, self.mask.shape, what="loss mask")

    @property
    def mask(self) -> BinaryMask:
        """Return the loss mask."""
        if self.loss_mask is None:
            raise EmptyInputError("loss mask was not initialised")
        return self.loss_mask


class TrainConfig(BaseModel):
    """Hyperparameters of one training run."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=DEFAULT_EPOCHS, ge=1)
    lr: float = Field(default=DEFAULT_LR, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    loss_weights: tuple[float, float] = DEFAULT_LOSS_WEIGHTS
    seed: int = DEFAULT_SEED
    checkpoint_every: int | None = Field(default=None, ge=1)
    checkpoint_dir: str | None = None
    validation_threshold: float = Field(default=DEFAULT_THRESHOLD, ge=0, le=1)

    @field_validator("loss_weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, float]) -> tuple[float, float]:
        if min(value) < 0 or max(value) == 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        return value


class TrainRecord(BaseModel):
    """Per-epoch history of a training run."""

    train_loss: list[float] = Field(default_factory=list)
    val_f_score: list[float | None] = Field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0
    diverged: bool = False

    @property
    def epochs_completed(self) -> int:
        """Return how many epochs finished."""
        return len(self.train_loss)


class LossTerm(NamedTuple):
    """A loss (or coefficient) value with its gradient per prediction."""

    value: float
    grad: FloatArray
    empty: bool


def _as_arrays(
    pred: ArrayInput, truth: ArrayInput, mask: ArrayInput | None
) -> tuple[FloatArray, FloatArray, npt.NDArray[np.bool_]]:
    p = np.asarray(pred.values if isinstance(pred, ProbMap) else pred, dtype=np.float64)
    g = np.asarray(truth.bits if isinstance(truth, BinaryMask) else truth, dtype=np.float64)
    if mask is None:
        m = np.ones(p.shape, dtype=np.bool_)
    else:
        m = np.asarray(mask.bits if isinstance(mask, BinaryMask) else mask, dtype=np.bool_)
    require_same_shape(p.shape, g.shape, what="prediction and truth")
    require_same_shape(p.shape, m.shape, what="prediction and loss mask")
    return p, g, m


def bce_loss(pred: ArrayInput, truth: ArrayInput, mask: ArrayInput | None = None) -> LossTerm:
    """Binary cross-entropy averaged over masked pixels.

    Predictions are clamped to [1e-7, 1 - 1e-7]; an empty mask yields a zero
    loss with ``empty`` set.
    """
    p, g, m = _as_arrays(pred, truth, mask)
    count = int(m.sum())
    if count == 0:
        return LossTerm(0.0, np.zeros_like(p), True)
    clamped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = -(g * np.log(clamped) + (1.0 - g) * np.log(1.0 - clamped))
    inside = m & (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = np.where(inside, (-g / clamped + (1.0 - g) / (1.0 - clamped)) / count, 0.0)
    return LossTerm(float(terms[m].sum() / count), grad, False)


def dice_coeff(pred: ArrayInput, truth: ArrayInput, mask: ArrayInput | None = None) -> LossTerm:
    """Soft Dice coefficient over masked pixels with smoothing 1.0."""
    p, g, m = _as_arrays(pred, truth, mask)
    weight = m.astype(np.float64)
    overlap = float((weight * p * g).sum())
    denominator = float((weight * p).sum() + (weight * g).sum()) + DICE_SMOOTH
    numerator = 2.0 * overlap + DICE_SMOOTH
    grad = weight * (2.0 * g * denominator - numerator) / denominator**2
    return LossTerm(numerator / denominator, grad, not m.any())


def coupled_loss(
    pred: ArrayInput,
    truth: ArrayInput,
    mask: ArrayInput | None = None,
    weights: tuple[float, float] = DEFAULT_LOSS_WEIGHTS,
) -> LossTerm:
    """Return ``w_bce * BCE + w_dice * (1 - Dice)``."""
    w_bce, w_dice = weights
    bce = bce_loss(pred, truth, mask)
    dice = dice_coeff(pred, truth, mask)
    return LossTerm(
        w_bce * bce.value + w_dice * (1.0 - dice.value),
        w_bce * bce.grad - w_dice * dice.grad,
        bce.empty,
    )


def stratify_sample(sample: SamplePair, bc_mask: BinaryMask, branch: Branch) -> TrainSample:
    """Restrict a sample's loss to one BC decision region.

    The network always sees the whole image. SKIN keeps the pixels the
    classifier calls skin (the model learns to reject its false positives);
    NONSKIN keeps the rest (it learns to recover false negatives).
    """
    require_same_shape(sample.truth.shape, bc_mask.shape, what=f"BC mask of {sample.id}")
    if branch is Branch.SKIN:
        loss_mask = bc_mask
    elif branch is Branch.NONSKIN:
        loss_mask = bc_mask.complement()
    else:
        loss_mask = BinaryMask.full(*sample.truth.shape)
    return TrainSample(input=sample.image, truth=sample.truth, loss_mask=loss_mask, id=sample.id)


def training_samples(
    samples: Sequence[SamplePair],
    *,
    grayscale: bool = False,
    bc_masks: Mapping[str, BinaryMask] | None = None,
    branch: Branch = Branch.NONE,
) -> list[TrainSample]:
    """Build training samples for an RGB or grayscale base model."""
    prepared = []
    for sample in samples:
        if branch is not Branch.NONE:
            if bc_masks is None:
                raise EmptyInputError("stratified training needs BC masks")
            item = stratify_sample(sample, bc_masks[sample.id], branch)
        else:
            item = TrainSample(input=sample.image, truth=sample.truth, id=sample.id)
        if grayscale:
            item = TrainSample(to_grayscale(item.input), item.truth, item.loss_mask, item.id)
        prepared.append(item)
    return prepared


@dataclass(frozen=True)
class _PooledShare:
    """A batch-pooled loss share, replayed as a fixed objective."""

    value: float
    grad: FloatArray

    def __call__(self, _pred: FloatArray) -> tuple[float, FloatArray]:
        return self.value, self.grad


def _padded(
    sample: TrainSample, multiple: int
) -> tuple[FloatArray, npt.NDArray[np.bool_], npt.NDArray[np.bool_]]:
    x = pad_to_multiple(sample.input.to_chw(), multiple)
    _, height, width = x.shape
    truth = np.zeros((height, width), dtype=np.bool_)
    mask = np.zeros((height, width), dtype=np.bool_)
    truth[: sample.truth.height, : sample.truth.width] = sample.truth.bits
    mask[: sample.truth.height, : sample.truth.width] = sample.mask.bits
    return x, truth, mask


def _batch_step(
    config: NetworkConfig,
    params: ParamStore,
    batch: Sequence[TrainSample],
    loss_weights: tuple[float, float],
) -> tuple[float, ParamStore]:
    """Forward a batch, pool the loss over its masked pixels, backpropagate."""
    graphs, outputs, truths, masks = [], [], [], []
    for sample in batch:
        x, truth, mask = _padded(sample, config.multiple)
        graph = Graph(params)
        graphs.append(graph)
        outputs.append(trace(config, graph, graph.input(x)))
        truths.append(truth)
        masks.append(mask)
    preds = [graph.value(out)[0, 0].astype(np.float64) for graph, out in zip(graphs, outputs, strict=True)]
    term = coupled_loss(
        np.concatenate([p.ravel() for p in preds]),
        np.concatenate([t.ravel() for t in truths]),
        np.concatenate([m.ravel() for m in masks]),
        loss_weights,
    )
    if term.empty:
        _LOGGER.debug("Batch has an empty loss mask; it contributes zero BCE")

    total = params.zeros_like()
    offset = 0
    for graph, out, pred in zip(graphs, outputs, preds, strict=True):
        grad = term.grad[offset : offset + pred.size].reshape(1, 1, *pred.shape)
        offset += pred.size
        graph.loss(out, _PooledShare(term.value / len(batch), grad))
        for name, value in graph.backward().items():
            total[name] = total[name] + value
    return term.value, total


def validation_f_score(
    weights: WeightStore, samples: Sequence[TrainSample], threshold: float = DEFAULT_THRESHOLD
) -> float:
    """Micro-averaged F-score of a network over whole images."""
    pooled = Confusion()
    for sample in samples:
        prob = forward(weights, sample.input)
        pooled = pooled + confusion(BinaryMask(prob.values >= threshold), sample.truth)
    return prf(pooled).f_score


def train_model(
    config: NetworkConfig,
    tcfg: TrainConfig,
    samples: Sequence[TrainSample],
    val: Sequence[TrainSample] = (),
) -> tuple[WeightStore, TrainRecord]:
    """Train a fresh network with Adam and return its best epoch.

    The best epoch is the one with the highest validation F-score, or the
    lowest training loss when no validation samples are given. Results are a
    pure function of the configs and samples.

    Raises:
        EmptyInputError: No training samples.
        ChannelMismatchError: A sample does not match ``config.in_channels``.
        TrainingDivergedError: The loss became NaN or infinite.
    """
    if not samples:
        raise EmptyInputError("training needs at least one sample")
    for sample in (*samples, *val):
        if sample.input.channels != config.in_channels:
            raise ChannelMismatchError(
                f"sample {sample.id!r} has {sample.input.channels} channels, "
                f"network expects {config.in_channels}"
            )

    weights = build(config)
    params = weights.params
    state = AdamState()
    rng = np.random.default_rng(tcfg.seed)
    record = TrainRecord()
    best_params = params.copy()
    best_score = -np.inf
    started = time.perf_counter()

    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(samples))
        losses = []
        for first in range(0, len(samples), tcfg.batch_size):
            batch = [samples[i] for i in order[first : first + tcfg.batch_size]]
            try:
                loss, grads = _batch_step(config, params, batch, tcfg.loss_weights)
            except NonFiniteError as err:
                loss, grads = float("nan"), None
                _LOGGER.debug("Non-finite values in epoch %d: %s", epoch, err)
            if grads is None or not np.isfinite(loss):
                record.train_loss.append(float("nan"))
                record.val_f_score.append(None)
                record.diverged = True
                record.wall_time = time.perf_counter() - started
                _LOGGER.error("Training diverged in epoch %d", epoch)
                raise TrainingDivergedError(f"loss became non-finite in epoch {epoch}", record)
            adam_step(params, grads, state, lr=tcfg.lr)
            losses.append(loss)

        epoch_loss = float(np.mean(losses))
        record.train_loss.append(epoch_loss)
        if val:
            f_score: float | None = validation_f_score(
                WeightStore(config, params), val, tcfg.validation_threshold
            )
            score = f_score
        else:
            f_score = None
            score = -epoch_loss
        record.val_f_score.append(f_score)
        if score is not None and score > best_score:
            best_score = score
            best_params = params.copy()
            record.best_epoch = epoch
        _LOGGER.info(
            "Epoch %d/%d: loss %.5f, validation F %s",
            epoch,
            tcfg.epochs,
            epoch_loss,
            "n/a" if f_score is None else f"{f_score:.4f}",
        )
        if tcfg.checkpoint_every and tcfg.checkpoint_dir and epoch % tcfg.checkpoint_every == 0:
            directory = Path(tcfg.checkpoint_dir)
            directory.mkdir(parents=True, exist_ok=True)
            save_weights(WeightStore(config, params.copy()), directory / f"epoch-{epoch:04d}.sknw")

    record.wall_time = time.perf_counter() - started
    _LOGGER.info("Training finished; best epoch %s of %d", record.best_epoch, tcfg.epochs)
    return WeightStore(config, best_params), record
