"""Desk-scale experiment coordinator for the skin segmentation pipeline."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from .bayes import ColorHistogramPair, bc_prob_map, binarize, fit_histograms, save_histograms
from .config import PipelineConfig, derive_seed
from .const import SPLIT_FRACTIONS, WILCOXON_MIN_N
from .diagnostics import pipeline_diagnostics
from .ensemble import (
    STACK_PRESETS,
    EnsembleSpec,
    ModelRegistry,
    infer,
    model_input,
    preset_spec,
    save_spec,
    train_second_level,
)
from .errors import InvariantError
from .evaluation import (
    EvalReport,
    evaluate_maps,
    render_overlay,
    wilcoxon_signed_rank,
    write_report,
    write_table,
)
from .imgio import (
    BinaryMask,
    Image,
    ProbMap,
    SamplePair,
    generate_synthetic_dataset,
    load_dataset,
    read_split,
    select,
    split_dataset,
    write_dataset,
    write_image,
    write_split,
)
from .skinny import WeightStore, count_params, forward, save_weights
from .train import Branch, TrainRecord, train_model, training_samples

_LOGGER = logging.getLogger(__name__)

# name -> (grayscale input, loss branch)
BASE_MODELS: dict[str, tuple[bool, Branch]] = {
    "rgb": (False, Branch.NONE),
    "gs": (True, Branch.NONE),
    "skin": (False, Branch.SKIN),
    "nonskin": (False, Branch.NONSKIN),
}
MAIN_ENSEMBLE = "stack_gs_skin_nonskin"


@dataclass
class PipelineData:
    """Everything a finished run produced, kept for diagnostics."""

    samples: list[SamplePair] = field(default_factory=list)
    train: list[SamplePair] = field(default_factory=list)
    validation: list[SamplePair] = field(default_factory=list)
    test: list[SamplePair] = field(default_factory=list)
    histograms: ColorHistogramPair | None = None
    records: dict[str, TrainRecord] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)
    specs: dict[str, EnsembleSpec] = field(default_factory=dict)
    reports: list[EvalReport] = field(default_factory=list)
    significance: dict[str, dict[str, float | int | str]] = field(default_factory=dict)


class PipelineCoordinator:
    """Run the desk-scale experiment stage by stage.

    Stages: data, split, color classifier, base networks, ensembles,
    evaluation, significance, overlays. Each stage logs its start and end
    and its wall time goes to ``diagnostics.json`` only, so every other
    artifact is a pure function of the config.
    """

    def __init__(self, config: PipelineConfig) -> None:
        """Initialize the coordinator and its output layout."""
        self.config = config
        self.out_dir = Path(config.out_dir)
        self.models_dir = self.out_dir / "models"
        self.registry = ModelRegistry(self.models_dir)
        self.data = PipelineData()
        self.timings: dict[str, float] = {}

    @contextmanager
    def _stage(self, name: str) -> Iterator[None]:
        _LOGGER.info("Stage %s started", name)
        started = time.perf_counter()
        try:
            yield
        except Exception as err:
            _LOGGER.error("Stage %s failed: %s", name, err)
            raise
        self.timings[name] = time.perf_counter() - started
        _LOGGER.info("Stage %s finished in %.1f s", name, self.timings[name])

    def run(self) -> Path:
        """Execute every stage and return the results table path."""
        self.config.require_inputs()
        self.models_dir.mkdir(parents=True, exist_ok=True)
        with self._stage("data"):
            self._prepare_data()
        with self._stage("bc"):
            self._train_bc()
        with self._stage("base_models"):
            self._train_base_models()
        with self._stage("ensembles"):
            self._build_ensembles()
        with self._stage("evaluation"):
            maps = self._evaluate()
        with self._stage("significance"):
            self._significance()
        if self.config.overlays:
            with self._stage("overlays"):
                self._overlays(maps)
        diagnostics = pipeline_diagnostics(self)
        (self.out_dir / "diagnostics.json").write_text(
            json.dumps(diagnostics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return self.out_dir / "results.csv"

    # stages ----------------------------------------------------------------

    def _prepare_data(self) -> None:
        config = self.config
        if config.manifest is not None:
            samples = load_dataset(config.manifest, config.max_side)
        else:
            samples = generate_synthetic_dataset(
                config.samples, config.size, derive_seed(config.seed, "data")
            )
            write_dataset(samples, self.out_dir / "data")
        if config.split is not None:
            split = read_split(config.split)
        else:
            split = split_dataset(samples, SPLIT_FRACTIONS, derive_seed(config.seed, "split"))
            write_split(self.out_dir / "split.json", split)
        self.data.samples = samples
        self.data.train = select(samples, split.train)
        self.data.validation = select(samples, split.validation)
        self.data.test = select(samples, split.test)

    def _train_bc(self) -> None:
        hist = fit_histograms(self.data.train, self.config.bins)
        save_histograms(hist, self.models_dir / "bc.bch")
        self.registry.register("bc.bch", hist)
        self.data.histograms = hist

    def _bc_masks(self, samples: list[SamplePair]) -> dict[str, BinaryMask]:
        hist = self.data.histograms
        if hist is None:
            raise InvariantError("the color classifier stage has not run")
        return {
            sample.id: binarize(bc_prob_map(hist, sample.image), self.config.threshold)
            for sample in samples
        }

    def _checkpoint_dir(self, name: str) -> Path | None:
        if self.config.checkpoint_every is None:
            return None
        return self.out_dir / "checkpoints" / name

    def _save_model(self, name: str, weights: WeightStore, record: TrainRecord) -> str:
        ref = f"{name}.sknw"
        save_weights(weights, self.models_dir / ref)
        (self.models_dir / f"{name}.record.json").write_text(
            record.model_dump_json(indent=2, exclude={"wall_time"}) + "\n", encoding="utf-8"
        )
        self.registry.register(ref, weights)
        self.data.records[name] = record
        self.data.param_counts[name] = count_params(weights.config)
        return ref

    def _train_base_models(self) -> None:
        masks = self._bc_masks(self.data.train)
        for name, (grayscale, branch) in BASE_MODELS.items():
            train_set = training_samples(
                self.data.train, grayscale=grayscale, bc_masks=masks, branch=branch
            )
            val_set = training_samples(self.data.validation, grayscale=grayscale)
            network = self.config.network_config(f"skinny-{name}", 1 if grayscale else 3)
            tcfg = self.config.train_config(f"skinny-{name}", self._checkpoint_dir(f"skinny-{name}"))
            weights, record = train_model(network, tcfg, train_set, val_set)
            self._save_model(f"skinny-{name}", weights, record)

    def _roles(self) -> dict[str, str]:
        roles = {name: f"skinny-{name}.sknw" for name in BASE_MODELS}
        roles["bc"] = "bc.bch"
        return roles

    def _build_ensembles(self) -> None:
        roles = self._roles()
        stacks = list(STACK_PRESETS) if self.config.all_stacks else [MAIN_ENSEMBLE]
        for name in stacks:
            spec = preset_spec(name, roles, second_level=f"{name}.sknw")
            network = self.config.network_config(name, len(spec.sources))
            tcfg = self.config.train_config(name, self._checkpoint_dir(name))
            weights, record = train_second_level(
                spec.sources, self.registry, self.data.train, tcfg, network, self.data.validation
            )
            self._save_model(name, weights, record)
            self.data.specs[name] = spec
        for name in ("vote_gs_skin_nonskin", "bc_select"):
            self.data.specs[name] = preset_spec(name, roles)
        for name, spec in self.data.specs.items():
            save_spec(self.models_dir / f"{name}.json", spec)

    def _methods(self) -> dict[str, Callable[[Image], ProbMap]]:
        hist = self.data.histograms
        if hist is None:
            raise InvariantError("the color classifier stage has not run")
        methods: dict[str, Callable[[Image], ProbMap]] = {"bc": lambda img: bc_prob_map(hist, img)}
        for name in BASE_MODELS:
            weights = self.registry.weights(f"skinny-{name}.sknw")
            methods[f"skinny-{name}"] = lambda img, w=weights: forward(w, model_input(w, img))
        for name, spec in self.data.specs.items():
            methods[name] = lambda img, s=spec: infer(s, img, self.registry)
        return methods

    def _evaluate(self) -> dict[str, list[ProbMap]]:
        test = self.data.test
        ids = [sample.id for sample in test]
        truths = [sample.truth for sample in test]
        maps: dict[str, list[ProbMap]] = {}
        curves: dict[str, list[tuple[float, float, float]]] = {}
        reports_dir = self.out_dir / "reports"
        reports_dir.mkdir(parents=True, exist_ok=True)
        for method, run in self._methods().items():
            maps[method] = [run(sample.image) for sample in test]
            report = evaluate_maps(method, ids, maps[method], truths, threshold=self.config.threshold)
            write_report(reports_dir / f"{method}.json", report)
            curves[method] = report.pr_curve
            self.data.reports.append(report)
        write_table(self.out_dir / "results.csv", self.data.reports)
        (self.out_dir / "pr_curves.json").write_text(json.dumps(curves) + "\n", encoding="utf-8")
        return maps

    def _significance(self) -> None:
        reports = {report.method: report for report in self.data.reports}
        main = reports[MAIN_ENSEMBLE]
        if len(main.per_image) < WILCOXON_MIN_N:
            _LOGGER.warning(
                "Only %d test images; the significance test needs %d",
                len(main.per_image),
                WILCOXON_MIN_N,
            )
            return
        for method, report in reports.items():
            if method == MAIN_ENSEMBLE:
                continue
            result = wilcoxon_signed_rank(main.f_scores(), report.f_scores())
            self.data.significance[method] = result._asdict()
        (self.out_dir / "significance.json").write_text(
            json.dumps({"reference": MAIN_ENSEMBLE, "tests": self.data.significance}, indent=2)
            + "\n",
            encoding="utf-8",
        )

    def _overlays(self, maps: dict[str, list[ProbMap]]) -> None:
        overlay_dir = self.out_dir / "overlays"
        overlay_dir.mkdir(parents=True, exist_ok=True)
        count = min(self.config.overlays, len(self.data.test))
        for method, probs in maps.items():
            for sample, prob in zip(self.data.test[:count], probs[:count], strict=True):
                mask = binarize(prob, self.config.threshold)
                write_image(
                    overlay_dir / f"{sample.id}-{method}.ppm",
                    render_overlay(sample.image, mask, sample.truth),
                )
