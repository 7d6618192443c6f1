import numpy as np
import pytest

from impl import SceneGenerator
from impl.scene_generator import accepted_frequencies, compensated_weights
from interface import SceneConfig
from interface.base_scene_generator import ContextRule
from util.config import DEFAULT_CONFIG_PATH, load_run_config
from util.errors import SceneGenerationError


def make_generator(**overrides):
    settings = {"image_h": 48, "image_w": 48, "classes": ["circle", "square", "triangle", "ring"], "size_range": (6, 12)}
    settings.update(overrides)
    return SceneGenerator(SceneConfig(**settings))


class TestGenerate:
    def test_same_seed_same_scene(self, generator):
        assert generator.generate(11) == generator.generate(11)

    def test_different_seeds_differ(self, generator):
        assert generator.generate(11) != generator.generate(12)

    def test_image_format(self, generator, tiny_config):
        record = generator.generate(3)
        assert record.image.shape == (tiny_config.scene.image_h, tiny_config.scene.image_w, 3)
        assert record.image.dtype == np.float32
        assert record.image.min() >= 0.0 and record.image.max() <= 1.0

    def test_instance_count_in_range(self, generator, tiny_config):
        for seed in range(30):
            record = generator.generate(seed)
            assert tiny_config.scene.min_instances <= record.num_instances <= tiny_config.scene.max_instances
            assert record.boxes.shape == (record.num_instances, 4)

    def test_zero_instances_gives_an_empty_record(self):
        record = make_generator(min_instances=0, max_instances=0).generate(0)
        assert record.num_instances == 0
        assert record.boxes.shape == (0, 4)

    def test_constraints_hold(self, generator):
        for seed in range(50):
            assert generator.check_rules(generator.generate(seed)) == []

    def test_unsatisfiable_constraints_raise(self):
        crowded = make_generator(
            image_h=32, image_w=32, min_instances=6, max_instances=6, size_range=(28, 32), max_overlap_iou=0.0, max_retries=5
        )
        with pytest.raises(SceneGenerationError):
            crowded.generate(0)


class TestContextRules:
    @pytest.mark.parametrize("relation, low, high", [("near", 6.0, 16.0), ("above", 1.0, 6.0)])
    def test_dependents_respect_their_trigger(self, relation, low, high):
        rule = ContextRule(trigger="circle", dependent="ring", relation=relation, min_distance=low, max_distance=high)
        generator = make_generator(rules=[rule], max_instances=4)
        seen_dependent = False
        for seed in range(60):
            record = generator.generate(seed)
            assert generator.check_rules(record) == []
            seen_dependent |= bool(np.any(record.class_ids == 3))
        assert seen_dependent

    def test_check_rules_flags_a_stray_dependent(self):
        rule = ContextRule(trigger="circle", dependent="ring", min_distance=6.0, max_distance=10.0)
        generator = make_generator(rules=[rule])
        record = generator.generate(0)
        record.class_ids = np.array([3])
        record.boxes = np.array([[2.0, 2.0, 10.0, 10.0]])
        assert any("ring" in message for message in generator.check_rules(record))

    def test_rule_classes_must_exist(self):
        with pytest.raises(ValueError):
            SceneConfig(classes=["circle", "square"], rules=[ContextRule(trigger="circle", dependent="ring")])

    def test_faint_dependents_render_closer_to_background(self):
        rule = ContextRule(trigger="circle", dependent="ring", contrast=0.3)
        faint = make_generator(rules=[rule])
        plain = make_generator()
        background = 255.0 * faint.config.background
        assert abs(faint._color(3)[0] - background) < abs(plain._color(3)[0] - background)


def test_class_balance():
    generator = make_generator(max_instances=3)
    counts = np.zeros(4)
    for seed in range(1000):
        counts += np.bincount(generator.generate(seed).class_ids, minlength=4)
    frequencies = counts / counts.sum()
    np.testing.assert_allclose(frequencies, generator.frequencies, rtol=0.2)


def test_class_balance_with_the_shipped_rules():
    generator = SceneGenerator(load_run_config(DEFAULT_CONFIG_PATH).scene)
    assert generator.config.rules
    counts = np.zeros(len(generator.config.classes))
    for seed in range(1000):
        record = generator.generate(seed)
        assert generator.check_rules(record) == []
        counts += np.bincount(record.class_ids, minlength=len(counts))
    frequencies = counts / counts.sum()
    np.testing.assert_allclose(frequencies, generator.frequencies, rtol=0.2)


class TestDrawWeights:
    def test_redrawn_scenes_shift_the_shares(self):
        # one or two draws of (trigger, dependent) at 1:1; a lone dependent is redrawn
        shares = accepted_frequencies(np.array([0.5, 0.5]), [(0, 1)], 1, 2)
        np.testing.assert_allclose(shares, [0.75, 0.25])

    def test_no_rules_keep_the_weights(self):
        weights = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(accepted_frequencies(weights, [], 1, 6), weights)
        assert compensated_weights(weights, [], 1, 6) is weights

    def test_compensated_weights_hit_the_target(self):
        target = np.full(4, 0.25)
        weights = compensated_weights(target, [(0, 3)], 1, 6)
        np.testing.assert_allclose(accepted_frequencies(weights, [(0, 3)], 1, 6), target, atol=1e-6)
        assert weights[3] > target[3] and weights[0] < target[0]
        assert weights.sum() == pytest.approx(1.0)

    def test_chained_rules(self):
        target = np.array([0.4, 0.3, 0.2, 0.1])
        rules = [(0, 1), (1, 2)]
        weights = compensated_weights(target, rules, 2, 5)
        np.testing.assert_allclose(accepted_frequencies(weights, rules, 2, 5), target, atol=1e-6)

    def test_generator_draws_with_the_compensated_weights(self):
        rule = ContextRule(trigger="circle", dependent="ring", min_distance=6.0, max_distance=16.0)
        generator = make_generator(rules=[rule], max_instances=4)
        np.testing.assert_allclose(generator.frequencies, 0.25)
        assert generator.draw_weights[3] > 0.25
