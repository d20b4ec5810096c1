"""Diagnostics support for skin segmentation pipeline runs."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .coordinator import PipelineCoordinator


def pipeline_diagnostics(coordinator: PipelineCoordinator) -> dict[str, Any]:
    """Return diagnostics for a pipeline run."""
    data = coordinator.data

    dataset = {
        "samples": len(data.samples),
        "train": len(data.train),
        "validation": len(data.validation),
        "test": len(data.test),
    }

    histograms = None
    if data.histograms is not None:
        histograms = {
            "bins": data.histograms.bins,
            "n_skin": data.histograms.n_skin,
            "n_nonskin": data.histograms.n_nonskin,
        }

    # Training history summary
    models = {
        name: {
            "parameters": data.param_counts.get(name),
            "best_epoch": record.best_epoch,
            "epochs_completed": record.epochs_completed,
            "final_train_loss": record.train_loss[-1] if record.train_loss else None,
            "wall_time_seconds": round(record.wall_time, 3),
        }
        for name, record in data.records.items()
    }

    scores = {
        report.method: {"f_score": report.f_score, "mean_f_score": report.mean_f_score}
        for report in data.reports
    }

    return {
        "config": coordinator.config.model_dump(),
        "dataset": dataset,
        "histograms": histograms,
        "models": models,
        "ensembles": sorted(data.specs),
        "scores": scores,
        "stage_timings_seconds": {
            name: round(seconds, 3) for name, seconds in coordinator.timings.items()
        },
        "cache_stats": coordinator.registry.diagnostics_cache_stats,
    }
