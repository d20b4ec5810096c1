"""Pipeline configuration, architecture strings and derived seeds."""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import voluptuous as vol
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .const import (
    DEFAULT_BASE_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BINS,
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_LR,
    DEFAULT_SEED,
    DEFAULT_THRESHOLD,
    DESK_ARCH,
    DESK_EPOCHS,
    DESK_LEVELS,
    DESK_SAMPLES,
    DESK_SIZE,
)
from .errors import ContractError
from .skinny import NetworkConfig
from .train import TrainConfig

_LOGGER = logging.getLogger(__name__)

CONF_LEVELS = "levels"
CONF_BASE = "base"
CONF_INCEPTION = "inception"
CONF_DENSE = "dense"

ARCH_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_LEVELS, default=DESK_LEVELS): vol.All(vol.Coerce(int), vol.Range(min=1)),
        vol.Optional(CONF_BASE, default=DEFAULT_BASE_CHANNELS): vol.All(
            vol.Coerce(int), vol.Range(min=1)
        ),
        vol.Optional(CONF_INCEPTION, default=False): vol.Boolean(),
        vol.Optional(CONF_DENSE, default=False): vol.Boolean(),
    }
)


def parse_arch(text: str) -> dict[str, Any]:
    """Parse ``levels=3,base=16,inception=false,dense=false`` into config fields.

    Missing keys take their defaults.

    Raises:
        ContractError: Malformed items, unknown keys or invalid values.
    """
    raw: dict[str, str] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ContractError(f"invalid architecture item {item!r}; expected key=value")
        raw[key.strip()] = value.strip()
    try:
        arch = ARCH_SCHEMA(raw)
    except vol.Invalid as err:
        raise ContractError(f"invalid architecture {text!r}: {err}") from err
    return {
        "levels": arch[CONF_LEVELS],
        "base_channels": arch[CONF_BASE],
        "inception": arch[CONF_INCEPTION],
        "dense": arch[CONF_DENSE],
    }


def derive_seed(seed: int, name: str) -> int:
    """Return the seed of the named random stream under a global seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class PipelineConfig(BaseModel):
    """Settings shared by the training and experiment commands."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    manifest: str | None = None
    split: str | None = None
    out_dir: str = "desk-run"
    seed: int = DEFAULT_SEED
    arch: str = DESK_ARCH
    samples: int = Field(default=DESK_SAMPLES, ge=1)
    size: int = Field(default=DESK_SIZE, ge=32)
    max_side: int | None = Field(default=None, ge=1)
    bins: int = Field(default=DEFAULT_BINS, ge=2)
    epochs: int = Field(default=DESK_EPOCHS, ge=1)
    lr: float = Field(default=DEFAULT_LR, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    loss_weights: tuple[float, float] = DEFAULT_LOSS_WEIGHTS
    threshold: float = Field(default=DEFAULT_THRESHOLD, ge=0, le=1)
    checkpoint_every: int | None = Field(default=None, ge=1)
    all_stacks: bool = False
    overlays: int = Field(default=0, ge=0)

    @field_validator("arch")
    @classmethod
    def _check_arch(cls, value: str) -> str:
        parse_arch(value)
        return value

    def network_config(self, name: str, in_channels: int) -> NetworkConfig:
        """Return the architecture of a named model, seeded from its init stream."""
        return NetworkConfig(
            in_channels=in_channels,
            seed=derive_seed(self.seed, f"init:{name}"),
            **parse_arch(self.arch),
        )

    def train_config(self, name: str, checkpoint_dir: Path | None = None) -> TrainConfig:
        """Return the training settings of a named model, seeded from its shuffle stream."""
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            loss_weights=self.loss_weights,
            seed=derive_seed(self.seed, f"shuffle:{name}"),
            checkpoint_every=self.checkpoint_every,
            checkpoint_dir=None if checkpoint_dir is None else str(checkpoint_dir),
            validation_threshold=self.threshold,
        )

    def require_inputs(self) -> None:
        """Check that every referenced input file exists.

        Raises:
            FileNotFoundError: The manifest or split file is missing.
        """
        for ref in (self.manifest, self.split):
            if ref is not None and not Path(ref).is_file():
                raise FileNotFoundError(f"input file not found: {ref}")


def load_pipeline_config(
    path: Path | str | None = None, overrides: Mapping[str, Any] | None = None
) -> PipelineConfig:
    """Read a JSON config file, apply non-None overrides and validate."""
    data: dict[str, Any] = {}
    if path is not None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ContractError(f"{path}: a pipeline config must be a JSON object")
        _LOGGER.debug("Loaded pipeline config from %s", path)
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    return PipelineConfig.model_validate(data)
