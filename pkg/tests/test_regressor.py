"""
Tests for src.regression.regressor.
"""

import math

import numpy as np
import pandas as pd
import pytest
import torch

from src.attack.ifgsm import AttackConfig, AttackLog, AttackRecord
from src.errors import ConfigError, EmptyClass, JoinFailure
from src.regression.regressor import (
    RegressionConfig,
    build_regression_dataset,
    estimate,
    estimates,
    evaluate_regressor,
    load_regressor,
    pearson,
    residuals_by_k,
    save_regressor,
    train_all_regressors,
    train_regressor,
    write_yy_csv,
)

TINY_REGRESSION = RegressionConfig(conv_channels=(2, 4), fc_hidden=8, max_epochs=5, patience=5,
                                   batch_size=4, seed=0, ratios=(0.6, 0.2, 0.2))


def _log_for(ds, k_of=lambda font, label: 1 + label % 5 + int(font[-2:]) % 3,
             censored=lambda font, label: False, labels=None) -> AttackLog:
    """One record per image of ds, with k chosen by k_of."""
    records = []
    for font, label in zip(ds.font_ids, ds.labels.tolist()):
        if labels is not None and label not in labels:
            continue
        if censored(font, label):
            records.append(AttackRecord(font, label, 100, None, True))
        else:
            records.append(AttackRecord(font, label, k_of(font, label), (label + 1) % 26, False))
    return AttackLog(records, AttackConfig(), "c" * 64, presented_count=len(records),
                     dataset_checksum=ds.checksum(), split="test")


def _pearson_textbook(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return cov / (sx * sy)


# ---------------------------------------------------------------------------
# Tests — building the regression dataset
# ---------------------------------------------------------------------------

class TestBuildRegressionDataset:
    def test_every_class_with_records(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset), synthetic_dataset,
                                       (0.6, 0.2, 0.2), seed=0)
        assert sorted(rds.classes) == list(range(26))
        assert rds.dataset_checksum == synthetic_dataset.checksum()

    def test_splits_are_font_disjoint(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset), synthetic_dataset,
                                       (0.6, 0.2, 0.2), seed=0)
        for splits in rds.classes.values():
            fonts = {name: set(s.font_ids) for name, s in splits.items()}
            assert not fonts["train"] & fonts["val"]
            assert not fonts["train"] & fonts["test"]
            assert not fonts["val"] & fonts["test"]
            assert sum(len(f) for f in fonts.values()) == 10

    def test_censored_records_excluded(self, synthetic_dataset):
        log = _log_for(synthetic_dataset, censored=lambda font, label: font == "font03")
        rds = build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2), seed=0)
        for splits in rds.classes.values():
            for samples in splits.values():
                assert "font03" not in samples.font_ids
                assert (samples.ks < 100).all()

    def test_images_are_the_originals(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset), synthetic_dataset,
                                       (0.6, 0.2, 0.2), seed=0)
        samples = rds.samples("D", "train")
        index = synthetic_dataset.find(samples.font_ids[0], "D")
        assert np.array_equal(samples.images[0], synthetic_dataset.images[index])

    def test_deterministic(self, synthetic_dataset):
        log = _log_for(synthetic_dataset)
        a = build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2), seed=4)
        b = build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2), seed=4)
        for label in a.classes:
            for split in ("train", "val", "test"):
                assert a.classes[label][split].font_ids == b.classes[label][split].font_ids

    def test_unknown_font_fails_the_join(self, synthetic_dataset):
        log = _log_for(synthetic_dataset)
        log.records.append(AttackRecord("no-such-font", 0, 3, 1, False))
        with pytest.raises(JoinFailure):
            build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2))

    def test_log_from_other_dataset(self, synthetic_dataset):
        log = _log_for(synthetic_dataset)
        log.dataset_checksum = "0" * 64
        with pytest.raises(JoinFailure):
            build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2))

    def test_sparse_classes_skipped(self, synthetic_dataset):
        log = _log_for(synthetic_dataset,
                       censored=lambda font, label: label == 5 and font != "font00")
        rds = build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2))
        assert 5 not in rds.classes
        with pytest.raises(EmptyClass):
            rds.samples("F", "train")

    def test_nothing_usable(self, synthetic_dataset):
        log = _log_for(synthetic_dataset, censored=lambda font, label: True)
        with pytest.raises(EmptyClass):
            build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2))


class TestRegressionConfig:
    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            RegressionConfig(ratios=(0.5, 0.5, 0.5))

    def test_inherits_classifier_checks(self):
        with pytest.raises(ConfigError):
            RegressionConfig(patience=0)


# ---------------------------------------------------------------------------
# Tests — training and estimation
# ---------------------------------------------------------------------------

class TestTrainRegressor:
    @pytest.fixture(scope="class")
    def constant_k(self, synthetic_dataset):
        log = _log_for(synthetic_dataset, k_of=lambda font, label: 7, labels={0})
        return build_regression_dataset(log, synthetic_dataset, (0.6, 0.2, 0.2), seed=0)

    def test_moves_towards_constant_target(self, constant_k):
        cfg = RegressionConfig(conv_channels=(2, 4), fc_hidden=8, max_epochs=40, patience=40,
                               batch_size=2, ratios=(0.6, 0.2, 0.2))
        torch.manual_seed(cfg.seed)
        untrained = cfg.build_network(out_features=1)
        images = constant_k.samples("A", "test").images
        with torch.no_grad():
            before = untrained(torch.as_tensor(images)[:, None])[:, 0].numpy()
        model = train_regressor("A", constant_k, cfg, progress=False)
        after = estimates(model, images)
        assert np.mean((after - 7) ** 2) < np.mean((before - 7) ** 2)

    @pytest.mark.slow
    def test_learns_constant_target(self, constant_k):
        cfg = RegressionConfig(conv_channels=(2, 4), fc_hidden=8, max_epochs=400, patience=50,
                               batch_size=2, ratios=(0.6, 0.2, 0.2))
        model = train_regressor("A", constant_k, cfg, progress=False)
        after = estimates(model, constant_k.samples("A", "test").images)
        assert np.abs(after - 7).mean() < 1.0

    def test_metrics_recorded(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset, labels={2}),
                                       synthetic_dataset, (0.6, 0.2, 0.2))
        model = train_regressor("C", rds, TINY_REGRESSION, progress=False)
        assert model.label == 2
        assert model.metrics["test_n"] == len(rds.samples("C", "test").ks)
        assert model.metrics["test_mse"] >= 0

    def test_estimate_is_read_only(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset, labels={2}),
                                       synthetic_dataset, (0.6, 0.2, 0.2))
        model = train_regressor("C", rds, TINY_REGRESSION, progress=False)
        before = [p.detach().clone() for p in model.network.parameters()]
        value = estimate(model, rds.samples("C", "test").images[0])
        assert isinstance(value, float)
        assert all(torch.equal(a, b) for a, b in zip(before, model.network.parameters()))

    def test_train_all_skips_untrainable(self, synthetic_dataset):
        rds = build_regression_dataset(_log_for(synthetic_dataset, labels={0, 1}),
                                       synthetic_dataset, (0.6, 0.2, 0.2))
        models = train_all_regressors(rds, TINY_REGRESSION, classes=["A", "B", "Z"],
                                      progress=False)
        assert sorted(models) == [0, 1]

    def test_save_and_load(self, synthetic_dataset, tmp_path):
        rds = build_regression_dataset(_log_for(synthetic_dataset, labels={3}),
                                       synthetic_dataset, (0.6, 0.2, 0.2))
        model = train_regressor("D", rds, TINY_REGRESSION, progress=False)
        save_regressor(model, tmp_path / "D.pt")
        loaded = load_regressor(tmp_path / "D.pt")
        assert loaded.label == 3
        assert loaded.config == model.config
        images = rds.samples("D", "test").images
        np.testing.assert_array_equal(estimates(loaded, images), estimates(model, images))


# ---------------------------------------------------------------------------
# Tests — evaluation helpers
# ---------------------------------------------------------------------------

class TestPearson:
    def test_perfect_correlation(self):
        r, p = pearson(np.array([1.0, 2, 3, 4, 5]), np.array([2.0, 4, 6, 8, 10]))
        assert r == pytest.approx(1.0)
        assert p < 0.01

    def test_matches_textbook_formula(self):
        rng = np.random.default_rng(0)
        x = rng.integers(1, 40, 50).astype(float)
        y = x + rng.normal(0, 5, 50)
        r, _ = pearson(x, y)
        assert abs(r - _pearson_textbook(x.tolist(), y.tolist())) < 1e-12

    def test_undefined_for_constant_input(self):
        r, p = pearson(np.full(5, 3.0), np.arange(5.0))
        assert math.isnan(r) and math.isnan(p)

    def test_undefined_for_tiny_sample(self):
        assert math.isnan(pearson(np.array([1.0, 2.0]), np.array([1.0, 3.0]))[0])


class TestResidualsByK:
    def test_mean_signed_error(self):
        pairs = [(3, 4.0), (3, 2.0), (3, 6.0), (10, 7.0)]
        assert residuals_by_k(pairs) == {3: pytest.approx(1.0), 10: pytest.approx(-3.0)}

    def test_sorted_keys(self):
        assert list(residuals_by_k([(9, 9.0), (1, 1.0), (4, 4.0)])) == [1, 4, 9]


class TestEvaluateRegressor:
    def test_result_fields(self, synthetic_dataset, tmp_path):
        rds = build_regression_dataset(_log_for(synthetic_dataset, labels={4}),
                                       synthetic_dataset, (0.6, 0.2, 0.2))
        model = train_regressor("E", rds, TINY_REGRESSION, progress=False)
        result = evaluate_regressor(model, rds)
        assert result["n"] == len(result["yy_pairs"])
        assert set(result["residuals_by_k"]) == {int(k) for k, _ in result["yy_pairs"]}

        write_yy_csv(result["yy_pairs"], tmp_path / "yy_E.csv")
        frame = pd.read_csv(tmp_path / "yy_E.csv")
        assert list(frame.columns) == ["k", "k_hat"]
        assert len(frame) == result["n"]
