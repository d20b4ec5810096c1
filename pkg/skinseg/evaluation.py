"""Segmentation metrics, PR curves, significance tests and error overlays."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, Field
from scipy import stats

from .const import (
    DEFAULT_THRESHOLD,
    OVERLAY_DIM,
    PR_STEPS,
    WILCOXON_EXACT_MAX_N,
    WILCOXON_MIN_N,
)
from .errors import ChannelMismatchError, ContractError, EmptyInputError
from .imgio import BinaryMask, Image, ProbMap, require_same_shape, to_grayscale

_LOGGER = logging.getLogger(__name__)

FP_COLOR = (1.0, 0.0, 0.0)
FN_COLOR = (0.0, 0.0, 1.0)

TABLE_COLUMNS = ("Method", "F-score", "Precision", "Recall", "Mean F-score (per image)")

WilcoxonMethod = Literal["auto", "exact", "normal"]


@dataclass(frozen=True)
class Confusion:
    """Pixel tallies of a binary prediction against truth."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        """Reject negative counts."""
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError(f"confusion counts must be >= 0, got {self}")

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        """Return the number of evaluated pixels."""
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Scores:
    """Precision, recall and F-score; undefined metrics are reported as 0."""

    precision: float
    recall: float
    f_score: float
    undefined: frozenset[str] = frozenset()


class PRPoint(NamedTuple):
    """One point of a precision-recall curve."""

    threshold: float
    precision: float
    recall: float


class WilcoxonResult(NamedTuple):
    """Two-tailed Wilcoxon signed-rank outcome.

    ``statistic`` is ``min(w_plus, w_minus)``; ``n`` counts non-zero differences.
    """

    statistic: float
    p_value: float
    n: int
    w_plus: float
    w_minus: float
    method: str


def confusion(pred_mask: BinaryMask, truth: BinaryMask) -> Confusion:
    """Tally a predicted mask against the truth."""
    require_same_shape(pred_mask.shape, truth.shape, what="prediction and truth")
    pred, gold = pred_mask.bits, truth.bits
    return Confusion(
        tp=int(np.count_nonzero(pred & gold)),
        fp=int(np.count_nonzero(pred & ~gold)),
        fn=int(np.count_nonzero(~pred & gold)),
        tn=int(np.count_nonzero(~pred & ~gold)),
    )


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall (0 when both are 0)."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf(conf: Confusion) -> Scores:
    """Precision, recall and F-score of a confusion tally.

    Precision without predicted positives, or recall without true positives
    in the truth, is reported as 0 and listed in ``undefined``.
    """
    undefined = set()
    if conf.tp + conf.fp > 0:
        precision = conf.tp / (conf.tp + conf.fp)
    else:
        precision = 0.0
        undefined.add("precision")
    if conf.tp + conf.fn > 0:
        recall = conf.tp / (conf.tp + conf.fn)
    else:
        recall = 0.0
        undefined.add("recall")
    if undefined:
        _LOGGER.warning("Undefined %s reported as 0 for %s", " and ".join(sorted(undefined)), conf)
    return Scores(precision, recall, f_score(precision, recall), frozenset(undefined))


def _pooled(
    preds: Sequence[ProbMap], truths: Sequence[BinaryMask]
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.bool_]]:
    if not preds:
        raise EmptyInputError("no probability maps to evaluate")
    if len(preds) != len(truths):
        raise ContractError(f"{len(preds)} maps but {len(truths)} truth masks")
    for index, (pred, truth) in enumerate(zip(preds, truths, strict=True)):
        require_same_shape(pred.shape, truth.shape, what=f"pair {index}")
    values = np.concatenate([pred.values.ravel() for pred in preds])
    gold = np.concatenate([truth.bits.ravel() for truth in truths])
    return values, gold


def pr_curve(
    preds: Sequence[ProbMap], truths: Sequence[BinaryMask], steps: int = PR_STEPS
) -> list[PRPoint]:
    """Micro-averaged precision-recall curve on a uniform threshold grid.

    A pixel counts as skin at threshold ``t`` when its value is ``>= t``.
    """
    if steps < 2:
        raise ContractError(f"a PR curve needs at least 2 steps, got {steps}")
    values, gold = _pooled(preds, truths)
    positives = np.sort(values[gold])
    negatives = np.sort(values[~gold])
    thresholds = np.arange(steps) / (steps - 1)
    tp = positives.size - np.searchsorted(positives, thresholds, side="left")
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros(steps), where=predicted > 0)
    recall = tp / positives.size if positives.size else np.zeros(steps)
    return [
        PRPoint(float(t), float(p), float(r))
        for t, p, r in zip(thresholds, precision, recall, strict=True)
    ]


def _exact_p(doubled_ranks: npt.NDArray[np.int64], statistic: int) -> float:
    """Share of all sign patterns whose smaller rank sum is <= the observed one."""
    n = doubled_ranks.size
    patterns = (np.arange(2**n, dtype=np.int64)[:, np.newaxis] >> np.arange(n)) & 1
    plus = patterns @ doubled_ranks
    minus = int(doubled_ranks.sum()) - plus
    return float(np.count_nonzero(np.minimum(plus, minus) <= statistic) / 2**n)


def _normal_p(ranks: npt.NDArray[np.float64], statistic: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, ties = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties**3 - ties).sum()) / 48.0
    if variance <= 0:
        return 1.0
    z = max(abs(statistic - mean) - 0.5, 0.0) / np.sqrt(variance)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(
    a: Sequence[float], b: Sequence[float], method: WilcoxonMethod = "auto"
) -> WilcoxonResult:
    """Two-tailed Wilcoxon signed-rank test on paired scores.

    Zero differences are dropped. Tied magnitudes share their average rank.
    With at most 12 non-zero differences the p-value is exact (all sign
    patterns enumerated); above that a tie- and continuity-corrected normal
    approximation is used.

    Raises:
        ContractError: Unequal lengths or fewer than 5 pairs.
    """
    first = np.asarray(a, dtype=np.float64)
    second = np.asarray(b, dtype=np.float64)
    if first.shape != second.shape or first.ndim != 1:
        raise ContractError(f"paired samples differ in shape: {first.shape} vs {second.shape}")
    if first.size < WILCOXON_MIN_N:
        raise ContractError(f"Wilcoxon needs at least {WILCOXON_MIN_N} pairs, got {first.size}")
    diffs = first - second
    diffs = diffs[diffs != 0]
    n = int(diffs.size)
    if n == 0:
        _LOGGER.info("All paired differences are zero; no evidence against equality")
        return WilcoxonResult(0.0, 1.0, 0, 0.0, 0.0, "none")

    ranks = stats.rankdata(np.abs(diffs))
    # average ranks are multiples of one half, so doubled ranks are exact integers
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    plus2 = int(doubled[diffs > 0].sum())
    minus2 = int(doubled[diffs < 0].sum())
    statistic2 = min(plus2, minus2)

    if method == "auto":
        method = "exact" if n <= WILCOXON_EXACT_MAX_N else "normal"
    if method == "exact":
        p_value = _exact_p(doubled, statistic2)
    elif method == "normal":
        p_value = _normal_p(ranks, statistic2 / 2.0)
    else:
        raise ContractError(f"unknown Wilcoxon method {method!r}")
    _LOGGER.debug("Wilcoxon n=%d W=%.1f p=%.6g (%s)", n, statistic2 / 2.0, p_value, method)
    return WilcoxonResult(statistic2 / 2.0, p_value, n, plus2 / 2.0, minus2 / 2.0, method)


def render_overlay(img: Image, pred_mask: BinaryMask, truth: BinaryMask) -> Image:
    """Paint false positives red and false negatives blue on a dimmed gray copy."""
    require_same_shape(img.shape, pred_mask.shape, what="image and prediction")
    require_same_shape(pred_mask.shape, truth.shape, what="prediction and truth")
    if img.channels == 3:
        gray = to_grayscale(img).plane(0)
    elif img.channels == 1:
        gray = img.plane(0)
    else:
        raise ChannelMismatchError(f"overlays need a 1- or 3-channel image, got {img.channels}")
    out = np.repeat((gray * OVERLAY_DIM)[..., np.newaxis], 3, axis=-1)
    pred, gold = pred_mask.bits, truth.bits
    out[pred & ~gold] = FP_COLOR
    out[~pred & gold] = FN_COLOR
    return Image(out)


# ---------------------------------------------------------------------------
# Reports


class ImageScore(BaseModel):
    """Per-image scores used for significance testing."""

    id: str
    f: float = Field(ge=0, le=1)
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)


class EvalReport(BaseModel):
    """Aggregate and per-image scores of one method on one test set.

    ``precision``/``recall``/``f_score`` pool pixels over all images; the
    ``mean_*`` fields average per-image scores.
    """

    method: str = ""
    threshold: float = DEFAULT_THRESHOLD
    confusion: Confusion
    precision: float = Field(ge=0, le=1)
    recall: float = Field(ge=0, le=1)
    f_score: float = Field(ge=0, le=1)
    mean_precision: float = Field(ge=0, le=1)
    mean_recall: float = Field(ge=0, le=1)
    mean_f_score: float = Field(ge=0, le=1)
    per_image: list[ImageScore]
    pr_curve: list[tuple[float, float, float]] = Field(default_factory=list)

    def f_scores(self) -> list[float]:
        """Return per-image F-scores in image order."""
        return [item.f for item in self.per_image]


def evaluate_maps(
    method: str,
    ids: Sequence[str],
    preds: Sequence[ProbMap],
    truths: Sequence[BinaryMask],
    *,
    threshold: float = DEFAULT_THRESHOLD,
    steps: int | None = PR_STEPS,
) -> EvalReport:
    """Score probability maps against truth masks.

    Args:
        method: Name recorded in the report and the results table.
        ids: Image ids, parallel to ``preds`` and ``truths``.
        threshold: Binarisation threshold (``>=``) for the headline scores.
        steps: PR curve resolution; None skips the curve.
    """
    if len(ids) != len(preds):
        raise ContractError(f"{len(ids)} ids for {len(preds)} maps")
    _pooled(preds, truths)
    pooled = Confusion()
    per_image = []
    for image_id, pred, truth in zip(ids, preds, truths, strict=True):
        tally = confusion(BinaryMask(pred.values >= threshold), truth)
        pooled = pooled + tally
        scores = prf(tally)
        per_image.append(
            ImageScore(id=image_id, f=scores.f_score, precision=scores.precision, recall=scores.recall)
        )
    overall = prf(pooled)
    curve = [] if steps is None else [tuple(point) for point in pr_curve(preds, truths, steps)]
    report = EvalReport(
        method=method,
        threshold=threshold,
        confusion=pooled,
        precision=overall.precision,
        recall=overall.recall,
        f_score=overall.f_score,
        mean_precision=float(np.mean([item.precision for item in per_image])),
        mean_recall=float(np.mean([item.recall for item in per_image])),
        mean_f_score=float(np.mean([item.f for item in per_image])),
        per_image=per_image,
        pr_curve=curve,
    )
    _LOGGER.info(
        "%s: F %.4f, P %.4f, R %.4f over %d images",
        method or "evaluation",
        report.f_score,
        report.precision,
        report.recall,
        len(per_image),
    )
    return report


def write_report(path: Path | str, report: EvalReport) -> None:
    """Write a report as JSON."""
    Path(path).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_report(path: Path | str) -> EvalReport:
    """Read a report written by :func:`write_report`."""
    return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def write_table(path: Path | str, reports: Iterable[EvalReport]) -> None:
    """Write the results table as CSV, one row per method."""
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for report in reports:
            writer.writerow(
                [
                    report.method,
                    f"{report.f_score:.4f}",
                    f"{report.precision:.4f}",
                    f"{report.recall:.4f}",
                    f"{report.mean_f_score:.4f}",
                ]
            )
