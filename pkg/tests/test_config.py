"""Tests for pipeline configuration and derived seeds."""

from __future__ import annotations

import json

import pytest
from pydantic import ValidationError

from skinseg.config import PipelineConfig, derive_seed, load_pipeline_config, parse_arch
from skinseg.errors import ContractError


class TestParseArch:
    """Test architecture strings."""

    def test_full_string(self):
        """Test every key is parsed and coerced."""
        arch = parse_arch("levels=6,base=16,inception=true,dense=false")

        assert arch == {"levels": 6, "base_channels": 16, "inception": True, "dense": False}

    def test_defaults_fill_missing_keys(self):
        """Test omitted keys take desk defaults."""
        arch = parse_arch("base=4")

        assert arch["base_channels"] == 4
        assert arch["levels"] == 3
        assert arch["inception"] is False

    @pytest.mark.parametrize(
        "text", ["levels=0", "depth=3", "levels", "base=wide", "inception=maybe"]
    )
    def test_invalid(self, text):
        """Test malformed items, unknown keys and bad values."""
        with pytest.raises(ContractError):
            parse_arch(text)


class TestDeriveSeed:
    """Test named random streams."""

    def test_deterministic(self):
        """Test the same name under the same seed gives the same stream."""
        assert derive_seed(17, "init:skinny-rgb") == derive_seed(17, "init:skinny-rgb")

    def test_streams_are_independent(self):
        """Test different names and global seeds give different streams."""
        seeds = {derive_seed(17, "data"), derive_seed(17, "split"), derive_seed(18, "data")}

        assert len(seeds) == 3

    def test_fits_numpy_seed_range(self):
        """Test derived seeds are non-negative 63-bit integers."""
        assert 0 <= derive_seed(0, "x") < 2**63


class TestPipelineConfig:
    """Test the pipeline settings model."""

    def test_network_and_train_configs(self):
        """Test per-model configs use the arch string and derived seeds."""
        # Arrange
        config = PipelineConfig(arch="levels=2,base=4", epochs=5, seed=3)

        # Act
        network = config.network_config("skinny-gs", 1)
        tcfg = config.train_config("skinny-gs")

        # Assert
        assert (network.levels, network.base_channels, network.in_channels) == (2, 4, 1)
        assert network.seed == derive_seed(3, "init:skinny-gs")
        assert tcfg.seed == derive_seed(3, "shuffle:skinny-gs")
        assert tcfg.epochs == 5

    def test_invalid_arch_rejected(self):
        """Test the arch string is validated up front."""
        with pytest.raises(ValidationError):
            PipelineConfig(arch="levels=-1")

    def test_unknown_field_rejected(self):
        """Test typos in config files are caught."""
        with pytest.raises(ValidationError):
            PipelineConfig.model_validate({"epoch": 3})

    def test_missing_inputs(self, tmp_path):
        """Test a referenced manifest must exist."""
        config = PipelineConfig(manifest=str(tmp_path / "absent.json"))

        with pytest.raises(FileNotFoundError):
            config.require_inputs()


class TestLoadPipelineConfig:
    """Test reading config files with overrides."""

    def test_file_with_overrides(self, tmp_path):
        """Test flags override file values and None leaves them alone."""
        # Arrange
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"epochs": 7, "samples": 12, "seed": 1}), encoding="utf-8")

        # Act
        config = load_pipeline_config(path, {"epochs": 2, "seed": None})

        # Assert
        assert config.epochs == 2
        assert config.samples == 12
        assert config.seed == 1

    def test_defaults_without_file(self):
        """Test the desk defaults apply when nothing is given."""
        config = load_pipeline_config()

        assert config == PipelineConfig()

    def test_non_object_rejected(self, tmp_path):
        """Test a config file must hold a JSON object."""
        path = tmp_path / "config.json"
        path.write_text("[1, 2]", encoding="utf-8")

        with pytest.raises(ContractError):
            load_pipeline_config(path)
