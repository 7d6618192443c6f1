import pytest

from util.config import (
    DEFAULT_CONFIG_PATH,
    apply_override,
    build_run_config,
    dump_run_config,
    load_run_config,
    parse_document,
    thread_cap,
)
from util.errors import ConfigError


class TestLoad:
    def test_shipped_config_is_valid(self):
        config = load_run_config(DEFAULT_CONFIG_PATH)
        assert config.profile == "toy"
        assert config.detector.num_classes == len(config.scene.classes)
        config.ensure_executable()

    def test_dump_round_trip(self, tiny_config):
        assert build_run_config(parse_document(dump_run_config(tiny_config))) == tiny_config

    def test_json_is_accepted(self):
        assert parse_document('{"seed": 3, "rollout": {"iterations": 4}}') == {"seed": 3, "rollout": {"iterations": 4}}

    def test_overrides_seed_and_profile(self, tmp_path):
        path = tmp_path / "config.yml"
        path.write_text("seed: 1\nrollout:\n  iterations: 10\n")
        config = load_run_config(path, ["rollout.iterations=4", "rollout.emission=hardmax"], seed=9)
        assert (config.seed, config.rollout.iterations, config.rollout.emission) == (9, 4, "hardmax")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "absent.yml")

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="unknown profile"):
            load_run_config(DEFAULT_CONFIG_PATH, profile="huge")


class TestErrors:
    def test_yaml_syntax_error_names_the_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_document("seed: 1\n  bad: indent\n", "broken.yml")

    def test_top_level_must_be_a_mapping(self):
        with pytest.raises(ConfigError, match="mapping"):
            parse_document("- 1\n- 2\n")

    def test_validation_names_the_field(self, tiny_document):
        tiny_document["scene"]["min_instances"] = -1
        with pytest.raises(ConfigError, match="scene.min_instances"):
            build_run_config(tiny_document)

    def test_stride_must_divide_the_image(self, tiny_document):
        tiny_document["scene"]["image_h"] = 30
        with pytest.raises(ConfigError, match="divisible"):
            build_run_config(tiny_document)

    def test_hybrid_split_bounded_by_iterations(self, tiny_document):
        tiny_document["rollout"]["n1"] = 5
        with pytest.raises(ConfigError, match="n1"):
            build_run_config(tiny_document)

    def test_curriculum_must_not_shrink(self, tiny_document):
        tiny_document["train"]["curriculum"] = [[4, 1], [2, 1]]
        with pytest.raises(ConfigError, match="non-decreasing"):
            build_run_config(tiny_document)

    def test_paper_reference_refuses_to_run(self, tiny_document):
        tiny_document["profile"] = "paper-reference"
        config = build_run_config(tiny_document)
        assert config.detector.proposals_k == 300
        with pytest.raises(ConfigError, match="paper-reference"):
            config.ensure_executable()


class TestOverride:
    def test_nested_value_is_parsed_as_yaml(self):
        document = {}
        apply_override(document, "detector.anchor_scales=[4.0, 8.0]")
        assert document == {"detector": {"anchor_scales": [4.0, 8.0]}}

    @pytest.mark.parametrize("assignment", ["no-equals-sign", "=3", "seed.inner=1"])
    def test_malformed(self, assignment):
        with pytest.raises(ConfigError):
            apply_override({"seed": 1}, assignment)


class TestThreadCap:
    def test_reads_the_environment(self, monkeypatch):
        monkeypatch.setenv("SMN_THREADS", "3")
        assert thread_cap() == 3

    @pytest.mark.parametrize("raw", ["zero", "0", "-2"])
    def test_rejects_non_positive(self, monkeypatch, raw):
        monkeypatch.setenv("SMN_THREADS", raw)
        with pytest.raises(ConfigError, match="SMN_THREADS"):
            thread_cap()


def test_digest_tracks_only_the_named_sections(tiny_document):
    first = build_run_config(tiny_document)
    tiny_document["rollout"]["iterations"] = 2
    second = build_run_config(tiny_document)
    assert first.digest("detector") == second.digest("detector")
    assert first.digest("rollout") != second.digest("rollout")
