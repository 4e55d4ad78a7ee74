"""
Tests for src.attack: FGSM steps, I-FGSM defensibility and attack logs.

Exact step counts come from closed-form linear models (tests.conftest.LinearTwoClass).
"""

import numpy as np
import pytest

from src.attack.attack_log import load_attack_log, log_header, save_attack_log
from src.attack.ifgsm import (
    AttackConfig,
    AttackLog,
    AttackRecord,
    attack_dataset,
    attack_images,
    attack_trajectory,
    fgsm_step,
    fragility_examples,
    measure_defensibility,
    replay_record,
)
from src.classifier.training import predict
from src.errors import ConfigError, EmptySplit, NotCorrectlyClassified
from src.glyphs.dataset import LabeledDataset
from tests.conftest import LinearTwoClass, letter_template

ZERO = np.zeros((64, 64), dtype=np.float64)


def _make_log(ks, censored=()) -> AttackLog:
    records = []
    for i, k in enumerate(ks):
        cens = i in censored
        records.append(AttackRecord(f"font{i:02d}", i % 26, k,
                                    None if cens else (i + 1) % 26, cens))
    return AttackLog(records, AttackConfig(k_max=100), "c" * 64, discarded_count=1,
                     presented_count=len(ks) + 1, dataset_checksum="d" * 64, split="test")


# ---------------------------------------------------------------------------
# Tests — AttackConfig / AttackRecord
# ---------------------------------------------------------------------------

class TestAttackConfig:
    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"k_max": 0},
                                        {"clamp_min": 1.0, "clamp_max": -1.0},
                                        {"batch_size": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            AttackConfig(**kwargs)


class TestAttackRecord:
    def test_censored_has_no_class(self):
        with pytest.raises(ValueError):
            AttackRecord("f", 0, 5, 3, censored=True)

    def test_misrecognized_must_differ(self):
        with pytest.raises(ValueError):
            AttackRecord("f", 4, 5, 4, censored=False)

    def test_k_at_least_one(self):
        with pytest.raises(ValueError):
            AttackRecord("f", 0, 0, 1, censored=False)


# ---------------------------------------------------------------------------
# Tests — fgsm_step
# ---------------------------------------------------------------------------

class TestFgsmStep:
    def test_moves_each_pixel_by_epsilon_or_not_at_all(self, tiny_classifier):
        image = np.random.default_rng(0).uniform(-0.5, 0.5, (64, 64)).astype(np.float32)
        out = fgsm_step(tiny_classifier, image, "G", 0.02)
        delta = np.abs(out - image)
        on_grid = np.isclose(delta, 0.0, atol=1e-6) | np.isclose(delta, 0.02, atol=1e-6)
        assert on_grid.all()

    def test_stays_in_range(self, tiny_classifier):
        out = fgsm_step(tiny_classifier, letter_template(6), 6, 0.3)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_follows_the_loss_gradient_sign(self):
        model = LinearTwoClass(np.linspace(-1, 1, 64 * 64), margin=1.0)
        out = fgsm_step(model, ZERO, 0, 0.1)
        np.testing.assert_allclose(out.reshape(-1), -0.1 * np.sign(np.linspace(-1, 1, 64 * 64)))

    def test_negative_epsilon(self, tiny_classifier):
        with pytest.raises(ValueError):
            fgsm_step(tiny_classifier, letter_template(0), 0, -0.1)

    def test_does_not_touch_parameters(self, tiny_classifier):
        before = tiny_classifier.parameter_checksum()
        fgsm_step(tiny_classifier, letter_template(2), 2, 0.02)
        assert tiny_classifier.parameter_checksum() == before


class TestIteratedSteps:
    EPSILON = 0.05

    @pytest.mark.parametrize("image", [
        np.random.default_rng(3).uniform(-1, 1, (64, 64)).astype(np.float32),
        letter_template(7),
    ], ids=["uniform", "template"])
    def test_each_step_moves_by_epsilon_or_hits_the_bound(self, tiny_classifier, image):
        cfg = AttackConfig(epsilon=self.EPSILON, k_max=12)
        frames = [x for x, _ in attack_trajectory(tiny_classifier, image, "H", cfg, steps=12)]
        assert len(frames) == 13
        for before, after in zip(frames, frames[1:]):
            delta = np.abs(after - before)
            full_step = np.isclose(delta, self.EPSILON, atol=1e-6)
            still = np.isclose(delta, 0.0, atol=1e-6)
            clamped = np.isclose(np.abs(after), 1.0, atol=1e-6) & (delta <= self.EPSILON + 1e-6)
            assert (full_step | still | clamped).all()
            partial = (delta > 1e-6) & (delta < self.EPSILON - 1e-6)
            assert clamped[partial].all()

    def test_stays_in_the_box_and_the_budget(self, tiny_classifier):
        image = np.random.default_rng(5).uniform(-1, 1, (64, 64)).astype(np.float32)
        cfg = AttackConfig(epsilon=self.EPSILON, k_max=20)
        trajectory = attack_trajectory(tiny_classifier, image, "B", cfg, steps=20)
        for t, (x, _) in enumerate(trajectory):
            assert x.min() >= -1.0 and x.max() <= 1.0
            assert np.abs(x - image).max() <= t * self.EPSILON + 1e-5

    def test_trajectory_steps_match_single_steps(self, tiny_classifier):
        image = letter_template(4)
        cfg = AttackConfig(epsilon=self.EPSILON, k_max=5)
        trajectory = attack_trajectory(tiny_classifier, image, "E", cfg, steps=5)
        x = image
        for frame, _ in trajectory[1:]:
            x = fgsm_step(tiny_classifier, x, "E", self.EPSILON)
            np.testing.assert_allclose(frame, x, atol=1e-6)


# ---------------------------------------------------------------------------
# Tests — measure_defensibility against closed-form models
# ---------------------------------------------------------------------------

LINEAR_CASES = [
    (k, n, a)
    for k in (1, 2, 3, 5, 8, 13, 21, 25)
    for n, a in ((16, 0.5), (64, 0.1), (200, 0.04))
]


class TestLinearOracle:
    @pytest.mark.parametrize("k,n_pixels,amplitude", LINEAR_CASES)
    def test_exact_step_count(self, linear_model_factory, k, n_pixels, amplitude):
        model = linear_model_factory(n_pixels, amplitude, k, seed=k)
        record = measure_defensibility(model, ZERO, 0, AttackConfig(epsilon=0.02, k_max=100))
        assert record.k == k
        assert not record.censored
        assert record.misrecognized_as == 1

    def test_censored_beyond_k_max(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 10)
        record = measure_defensibility(model, ZERO, 0, AttackConfig(k_max=5))
        assert record.censored
        assert record.k == 5
        assert record.misrecognized_as is None

    def test_k_max_itself_is_not_censored(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 5)
        record = measure_defensibility(model, ZERO, 0, AttackConfig(k_max=5))
        assert (record.k, record.censored) == (5, False)

    def test_misclassified_input_rejected(self):
        model = LinearTwoClass(np.ones(64 * 64), margin=-1.0)
        with pytest.raises(NotCorrectlyClassified):
            measure_defensibility(model, ZERO, 0)

    def test_keeps_final_image(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 3)
        record = measure_defensibility(model, ZERO, 0, keep_image=True)
        assert np.abs(record.final_image).max() == pytest.approx(0.06)

    def test_batch_matches_single(self, linear_model_factory):
        model = linear_model_factory(64, 0.1, 7)
        images = np.stack([ZERO] * 5)
        records, discarded = attack_images(model, images, np.zeros(5), list("abcde"),
                                           AttackConfig(batch_size=2))
        assert discarded == 0
        assert [r.k for r in records] == [7] * 5
        assert [r.font_id for r in records] == list("abcde")


# ---------------------------------------------------------------------------
# Tests — attacking a trained classifier
# ---------------------------------------------------------------------------

class TestAttackImages:
    def test_discards_misclassified_inputs(self, tiny_classifier):
        images = np.stack([letter_template(c) for c in range(26)])
        labels = np.array([c if c % 2 == 0 else (c + 1) % 26 for c in range(26)])
        expected_discard = int((predict(tiny_classifier, images) != labels).sum())
        records, discarded = attack_images(tiny_classifier, images, labels,
                                           [f"f{c}" for c in range(26)], AttackConfig(k_max=30))
        assert discarded == expected_discard >= 13
        assert len(records) + discarded == 26


class TestAttackDataset:
    def test_log_accounts_for_every_image(self, tiny_classifier, synthetic_dataset):
        log = attack_dataset(tiny_classifier, synthetic_dataset, "test", AttackConfig(k_max=30))
        assert log.presented_count == 52
        assert len(log.records) + log.discarded_count == 52
        assert log.classifier_checksum == tiny_classifier.parameter_checksum()
        assert log.dataset_checksum == synthetic_dataset.checksum()
        for record in log.records:
            assert 1 <= record.k <= 30
            assert record.censored or record.misrecognized_as != record.true_label

    def test_classifier_untouched(self, tiny_classifier, synthetic_dataset):
        before = tiny_classifier.parameter_checksum()
        attack_dataset(tiny_classifier, synthetic_dataset, "val", AttackConfig(k_max=5))
        assert tiny_classifier.parameter_checksum() == before

    def test_empty_split(self, tiny_classifier):
        image = letter_template(0)
        ds = LabeledDataset(image[None], np.array([0]), ("f",),
                            {"train": frozenset({"f"}), "test": frozenset()})
        with pytest.raises(EmptySplit):
            attack_dataset(tiny_classifier, ds, "test")

    def test_single_image_records_replay(self, tiny_classifier, synthetic_dataset):
        cfg = AttackConfig(k_max=30)
        images, labels, _ = synthetic_dataset.subset("test")
        correct = np.nonzero(predict(tiny_classifier, images) == labels)[0][:5]
        for i in correct:
            record = measure_defensibility(tiny_classifier, images[i], labels[i], cfg)
            assert replay_record(tiny_classifier, images[i], record, cfg)

    def test_batched_log_replays_image_by_image(self, tiny_classifier, synthetic_dataset):
        cfg = AttackConfig(k_max=30)
        records = []
        for split in ("test", "val", "train"):
            records += attack_dataset(tiny_classifier, synthetic_dataset, split, cfg).records
        records = records[:100]
        assert len(records) >= 60
        for record in records:
            image = synthetic_dataset.images[synthetic_dataset.find(record.font_id,
                                                                    record.true_label)]
            assert replay_record(tiny_classifier, image, record, cfg), record
            single = measure_defensibility(tiny_classifier, image, record.true_label, cfg)
            assert (single.k, single.misrecognized_as, single.censored) == (
                record.k, record.misrecognized_as, record.censored)


# ---------------------------------------------------------------------------
# Tests — inspection helpers
# ---------------------------------------------------------------------------

class TestTrajectory:
    def test_stops_at_first_misrecognition(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 4)
        trajectory = attack_trajectory(model, ZERO, 0)
        assert len(trajectory) == 5
        assert [p for _, p in trajectory] == [0, 0, 0, 0, 1]

    def test_fixed_length(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 2)
        assert len(attack_trajectory(model, ZERO, 0, steps=6)) == 7


class TestReplayRecord:
    def test_matching_record(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 6)
        assert replay_record(model, ZERO, AttackRecord("f", 0, 6, 1, False))

    def test_wrong_k(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 6)
        assert not replay_record(model, ZERO, AttackRecord("f", 0, 5, 1, False))

    def test_censored_record(self, linear_model_factory):
        model = linear_model_factory(16, 0.5, 6)
        assert replay_record(model, ZERO, AttackRecord("f", 0, 4, None, True),
                             AttackConfig(k_max=4))


class TestFragilityExamples:
    def test_bands(self):
        log = _make_log([5, 1, 9, 3, 7, 2, 8, 4, 6])
        bands = fragility_examples(log, per_band=3)
        assert [r.k for r in bands["fragile"]] == [1, 2, 3]
        assert [r.k for r in bands["moderate"]] == [4, 5, 6]
        assert [r.k for r in bands["robust"]] == [9, 8, 7]

    def test_censored_ignored(self):
        bands = fragility_examples(_make_log([100, 3], censored={0}))
        assert [r.k for r in bands["robust"]] == [3]

    def test_empty(self):
        assert fragility_examples(_make_log([])) == {"fragile": [], "moderate": [], "robust": []}


# ---------------------------------------------------------------------------
# Tests — attack log files
# ---------------------------------------------------------------------------

class TestAttackLogFile:
    def test_save_and_load(self, tmp_path):
        log = _make_log([4, 2, 100], censored={2})
        save_attack_log(log, tmp_path / "log.jsonl", {"stage": "attack"})
        loaded = load_attack_log(tmp_path / "log.jsonl")
        assert sorted(loaded.records, key=lambda r: r.font_id) == log.records
        assert loaded.config == log.config
        assert (loaded.discarded_count, loaded.presented_count) == (1, 4)
        assert loaded.censored_count == 1

    def test_order_independent_bytes(self, tmp_path):
        log = _make_log([4, 2, 7, 1])
        shuffled = AttackLog(list(reversed(log.records)), log.config, log.classifier_checksum,
                             log.discarded_count, log.presented_count, log.dataset_checksum,
                             log.split)
        save_attack_log(log, tmp_path / "a.jsonl")
        save_attack_log(shuffled, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_header_names_the_gradient_variable(self, tmp_path):
        save_attack_log(_make_log([1]), tmp_path / "log.jsonl")
        header = log_header(tmp_path / "log.jsonl")
        assert "input image" in header["gradient_variable"]
        assert header["epsilon"] == 0.02

    def test_letters_written_as_names(self, tmp_path):
        save_attack_log(_make_log([3]), tmp_path / "log.jsonl")
        line = (tmp_path / "log.jsonl").read_text().splitlines()[1]
        assert '"true_label":"A"' in line
        assert '"misrecognized_as":"B"' in line
