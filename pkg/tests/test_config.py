"""Configuration parsing, family presets, override precedence."""

import pytest

from pathqa.config import PipelineConfig
from pathqa.errors import ValidationError


class TestFromSources:
    def test_defaults(self):
        config = PipelineConfig.from_sources(None, [])
        assert config.max_hop == 2
        assert config.top_t == 1
        assert config.beam_size == 5
        assert config.negative_budget == 1000
        assert (config.rho_truncated, config.rho_extended,
                config.rho_deviated, config.rho_other) == (0.1, 0.4, 0.3, 0.2)

    def test_config_file_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("# comment\nmax_hop = 3\nseed = 9\n")
        config = PipelineConfig.from_sources(cfg_file, ["seed=11"])
        assert config.max_hop == 3
        assert config.seed == 11  # flag override beats file

    def test_family_presets(self):
        assert PipelineConfig.from_sources(None, ["family=cwq"]).max_hop == 3
        assert PipelineConfig.from_sources(None, ["family=cwq"]).estimator_epochs == 200
        assert PipelineConfig.from_sources(None, ["family=webqsp"]).estimator_epochs == 600
        assert PipelineConfig.from_sources(None, ["family=metaqa-1hop"]).max_hop == 1

    def test_explicit_value_beats_family(self):
        config = PipelineConfig.from_sources(None, ["family=cwq", "max_hop=4"])
        assert config.max_hop == 4

    def test_unknown_family_rejected(self):
        with pytest.raises(ValidationError, match="unknown dataset family"):
            PipelineConfig.from_sources(None, ["family=trivia"])

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError, match="unknown configuration key"):
            PipelineConfig.from_sources(None, ["max_hops=2"])

    def test_type_coercion_errors(self):
        with pytest.raises(ValidationError, match="integer"):
            PipelineConfig.from_sources(None, ["max_hop=two"])

    def test_rho_sum_validated(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            PipelineConfig.from_sources(None, ["rho_other=0.9"])

    def test_http_reasoner_needs_endpoint(self):
        with pytest.raises(ValidationError, match="endpoint"):
            PipelineConfig.from_sources(None, ["reasoner=http"])

    def test_malformed_override_rejected(self):
        with pytest.raises(ValidationError, match="key=value"):
            PipelineConfig.from_sources(None, ["justakey"])


class TestDerivedValues:
    def test_hash_ignores_force(self):
        a = PipelineConfig.from_sources(None, [])
        b = PipelineConfig.from_sources(None, [])
        b.force = True
        assert a.hash == b.hash

    def test_hash_sensitive_to_values(self):
        a = PipelineConfig.from_sources(None, [])
        b = PipelineConfig.from_sources(None, ["seed=5"])
        assert a.hash != b.hash

    def test_stage_seeds_differ(self):
        config = PipelineConfig.from_sources(None, [])
        assert config.stage_seed("train-estimator") != config.stage_seed("train-generator")

    def test_test_questions_fallback(self):
        config = PipelineConfig.from_sources(None, ["questions=/data/q.jsonl"])
        assert config.test_questions_path == "/data/q.jsonl"
        config2 = PipelineConfig.from_sources(
            None, ["questions=/data/q.jsonl", "test_questions=/data/t.jsonl"]
        )
        assert config2.test_questions_path == "/data/t.jsonl"
