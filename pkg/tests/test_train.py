import base64
import dataclasses
import json

import numpy as np
from numpy.testing import assert_array_equal
import pytest

from conftest import TINY_TRAIN
from phenoquant import errors
from phenoquant.misc.const import N_DAY_BUCKETS, SCHEMA_VERSION, ModelKind
from phenoquant.model import train
from phenoquant.model.baselines import fit_global
from phenoquant.model.curve import transform_raw_array
from phenoquant.model.features import ObservationTable
from phenoquant.model.train import (
    AdamState,
    Checkpoint,
    DayWeights,
    LossConfig,
    ObservationBatch,
    TrainConfig,
    Trainer,
    TrainingSet,
    adamw_step,
    chunked_loader,
    fit,
    learning_rate,
    pinball_term,
    total_loss,
)
from phenoquant.model.net import NetworkWeights


def constant_curves(lower, median, upper):
    def flat(level):
        return [level, level, 0.3, -2.0, 0.7, -2.0]
    return np.array([[flat(lower), flat(median), flat(upper)]])


class TestLoss:
    def test_pinball_term(self):
        assert pinball_term(1.0, 0.0, 0.25) == pytest.approx(0.25)
        assert pinball_term(0.0, 1.0, 0.25) == pytest.approx(0.75)
        assert pinball_term(0.5, 0.5, 0.9) == 0.0
        with pytest.raises(errors.DomainError):
            pinball_term(0.0, 0.0, 1.0)

    def test_crossed_constant_curves(self):
        batch = ObservationBatch(np.zeros(4, dtype=np.int64), np.linspace(0.1, 0.9, 4), np.full(4, 0.5),
                                 np.arange(4), 1)
        breakdown = total_loss(constant_curves(0.7, 0.5, 0.3), batch, DayWeights.uniform())
        assert_array_equal(np.round(breakdown.pinball, 12), [0.15, 0.0, 0.15])
        assert breakdown.periodicity == pytest.approx(0.0, abs=1e-20)
        assert breakdown.crossing == pytest.approx(0.8)
        assert breakdown.total == pytest.approx(0.3 + 10 * 0.8)

    def test_ordered_curves_do_not_cross(self):
        batch = ObservationBatch(np.zeros(1, dtype=np.int64), np.array([0.5]), np.array([0.5]), np.array([183]), 1)
        breakdown = total_loss(constant_curves(0.3, 0.5, 0.7), batch, DayWeights.uniform())
        assert breakdown.crossing == 0.0

    def test_empty_batch(self):
        batch = ObservationBatch(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64), 1)
        with pytest.raises(errors.EmptyInputError):
            total_loss(constant_curves(0.3, 0.5, 0.7), batch, DayWeights.uniform())

    def test_day_weights(self):
        weights = DayWeights.from_buckets([0, 0, 0, 5])
        assert weights.weights.shape == (N_DAY_BUCKETS,)
        assert weights[[0, 5]] == pytest.approx([0.5, 1.5])
        assert weights[np.array([0, 5])].mean() == pytest.approx(1.0)
        assert weights[1] == 0.0

    def test_equal_bucket_counts_weigh_exactly_one(self):
        weights = DayWeights.from_buckets(np.repeat(np.arange(N_DAY_BUCKETS), 3))
        assert np.all(weights.weights == 1.0)
        sparse = DayWeights.from_buckets([4, 4, 9, 9])
        assert np.all(sparse[[4, 9]] == 1.0)
        assert sparse.weights.sum() == 2.0

        rng = np.random.default_rng(2)
        batch = ObservationBatch(np.repeat(np.arange(2), 5), rng.uniform(0.0, 1.0, 10), rng.uniform(0.2, 0.8, 10),
                                 rng.integers(0, N_DAY_BUCKETS, 10), 2)
        curves = np.concatenate([constant_curves(0.3, 0.5, 0.7), constant_curves(0.2, 0.4, 0.6)])
        weighted = total_loss(curves, batch, weights)
        unweighted = total_loss(curves, batch, DayWeights.uniform())
        assert_array_equal(weighted.pinball, unweighted.pinball)
        assert weighted.total == unweighted.total

    def test_loss_terms_add_up(self):
        rng = np.random.default_rng(5)
        params = transform_raw_array(rng.normal(0.0, 2.0, (3, 3, 6)))
        # Lower quartile above the upper one
        params[:, 0] = params[:, 2]
        params[:, 0, :2] += 0.05
        batch = ObservationBatch(np.repeat(np.arange(3), 4), rng.uniform(0.0, 1.0, 12), rng.uniform(0.2, 0.8, 12),
                                 rng.integers(0, N_DAY_BUCKETS, 12), 3)
        parts = total_loss(params, batch, DayWeights.uniform(), LossConfig(lambda_per=0.0, lambda_nc=0.0))
        assert parts.total == pytest.approx(parts.pinball.sum())
        assert parts.periodicity > 0.0
        assert parts.crossing > 0.0

        for lambda_per, lambda_nc in ((1.0, 0.0), (0.0, 10.0), (2.5, 3.0)):
            config = LossConfig(lambda_per=lambda_per, lambda_nc=lambda_nc)
            breakdown = total_loss(params, batch, DayWeights.uniform(), config)
            assert_array_equal(breakdown.pinball, parts.pinball)
            assert breakdown.periodicity == parts.periodicity
            assert breakdown.crossing == parts.crossing
            assert breakdown.total == pytest.approx(
                parts.total + lambda_per * parts.periodicity + lambda_nc * parts.crossing
            )

    def test_loss_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_nc=-1.0)
        with pytest.raises(ValueError):
            LossConfig(quantiles=(0.5, 0.25, 0.75))


class TestSchedule:
    def test_loader_visits_every_pixel_once(self):
        config = TrainConfig(batch_size=4, chunk_size=10, seed=1)
        batches = list(chunked_loader(23, config, epoch_seed=1))
        assert sorted(np.concatenate(batches).tolist()) == list(range(23))
        assert max(len(b) for b in batches) == 4
        # 3 chunks of 10, 10 and 3 pixels
        assert len(batches) == 3 + 3 + 1

    def test_one_full_chunk(self):
        batches = list(chunked_loader(8192, TrainConfig(), epoch_seed=1))
        assert [len(b) for b in batches] == [1024] * 8

    def test_loader_is_seeded_per_epoch(self):
        config = TrainConfig(batch_size=4, chunk_size=10)
        first = np.concatenate(list(chunked_loader(23, config, 1)))
        again = np.concatenate(list(chunked_loader(23, config, 1)))
        second = np.concatenate(list(chunked_loader(23, config, 2)))
        assert_array_equal(first, again)
        assert not np.array_equal(first, second)

    def test_learning_rate_decays_to_final_factor(self):
        config = TrainConfig(learning_rate=0.01, lr_final_factor=0.1)
        assert learning_rate(config, 0, 11) == pytest.approx(0.01)
        assert learning_rate(config, 5, 11) == pytest.approx(0.01 * 0.1**0.5)
        assert learning_rate(config, 10, 11) == pytest.approx(0.001)

    def test_adamw_rejects_non_finite_gradient(self, small_dataset, tiny_train_config):
        state, _ = small_dataset
        weights = NetworkWeights.initialize(tiny_train_config.net_config(state), 0)
        gradient = weights.zeros_like()
        gradient.arrays["head.bias"][3] = np.nan
        with pytest.raises(errors.NonFiniteError) as info:
            adamw_step(weights, gradient, AdamState.zeros(weights), 0, 10, tiny_train_config)
        assert info.value.diagnostics == {"head.bias": 1}

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=64, chunk_size=32)
        with pytest.raises(ValueError):
            TrainConfig(schedule_epochs=-1)


class TestTrainer:
    def test_thread_count_does_not_change_results(self, small_dataset, tiny_train_config, monkeypatch):
        monkeypatch.setattr(train, "SHARD_SIZE", 3)
        state, dataset = small_dataset
        results = []
        for threads in (1, 4):
            weights = NetworkWeights.initialize(tiny_train_config.net_config(state), 0)
            trainer = Trainer(dataset, weights, tiny_train_config, threads=threads)
            trainer.run(1)
            results.append(trainer.weights)
        for name in results[0]:
            assert_array_equal(results[0][name], results[1][name])

    def test_epoch_watchers(self, small_dataset, tiny_train_config):
        state, dataset = small_dataset
        trainer = Trainer(dataset, NetworkWeights.initialize(tiny_train_config.net_config(state), 0),
                          tiny_train_config)
        seen = []

        @trainer.epoch_end
        def record(entry):
            seen.append(entry.epoch)

        trainer.run(2)
        trainer.remove_epoch_watcher(record)
        trainer.run(1)
        assert seen == [1, 2]
        assert [entry.epoch for entry in trainer.log] == [1, 2, 3]
        assert all(np.isfinite(entry.total) for entry in trainer.log)

    def test_non_finite_loss_names_the_batch(self, small_dataset, tiny_train_config):
        state, dataset = small_dataset
        obs = dataset.observations
        broken = TrainingSet(
            dataset.features,
            ObservationTable(obs.pixel_id, obs.date, obs.t, np.full(len(obs), np.nan)),
            dataset.offsets,
        )
        trainer = Trainer(broken, NetworkWeights.initialize(tiny_train_config.net_config(state), 0),
                          tiny_train_config)
        with pytest.raises(errors.NonFiniteError) as info:
            trainer.run(1)
        assert info.value.batch_id == 0

    def test_loss_decreases(self, small_dataset):
        state, dataset = small_dataset
        checkpoint = fit(dataset, TrainConfig(**{**TINY_TRAIN, "epochs": 5}), preprocessor=state)
        log = checkpoint.training_log
        assert log[-1].total < log[0].total

    def test_strong_periodicity_weight_closes_the_year(self, small_dataset, tiny_train_config):
        state, dataset = small_dataset
        checkpoint = fit(dataset, tiny_train_config, LossConfig(lambda_per=1e6), preprocessor=state)
        ends = checkpoint.model().predict_grid(dataset.features, [0.0, 1.0])
        assert np.abs(ends[:, 0] - ends[:, 1]).max() < 0.01

    def test_weights_stay_at_stored_precision(self, small_dataset, tiny_train_config):
        state, dataset = small_dataset
        trainer = Trainer(dataset, NetworkWeights.initialize(tiny_train_config.net_config(state), 0),
                          tiny_train_config)
        trainer.run(1)
        for name, w in trainer.weights.items():
            assert_array_equal(w, w.astype(np.float32))
        assert trainer.state.steps == trainer.steps_per_epoch()

    def test_empty_training_set(self, small_dataset):
        _, dataset = small_dataset
        with pytest.raises(errors.EmptyInputError):
            TrainingSet.build(dataset.features, ObservationTable.empty())


class TestCheckpoint:
    @pytest.fixture(scope="class")
    def trained(self, small_dataset):
        state, dataset = small_dataset
        config = TrainConfig(epochs=2, batch_size=8, chunk_size=16, width=8, depth=2, skip_into=2)
        return fit(dataset, config, LossConfig(), preprocessor=state)

    def test_round_trip_is_exact(self, trained, small_dataset, tmp_path):
        _, dataset = small_dataset
        path = tmp_path / "checkpoint.json"
        trained.save(path)
        loaded = Checkpoint.load(path)
        for name in trained.weights:
            assert_array_equal(loaded.weights[name], trained.weights[name])
        assert loaded.preprocessor == trained.preprocessor
        assert loaded.training_log == trained.training_log
        assert loaded.to_json() == trained.to_json()
        assert_array_equal(
            loaded.model().predict(dataset.observations, dataset.features),
            trained.model().predict(dataset.observations, dataset.features),
        )

    def test_document_layout(self, trained):
        document = json.loads(trained.to_json())
        assert document["schema_version"] == SCHEMA_VERSION
        assert document["kind"] == "conditional"
        assert document["quantiles"] == [0.25, 0.5, 0.75]
        assert document["weights"]["head.bias"]["dtype"] == "<f4"
        assert len(document["training_log"]) == 2
        optimizer = document["optimizer"]
        assert optimizer["first"]["head.bias"]["dtype"] == "<f8"
        assert set(optimizer["second"]) == set(document["weights"])
        assert optimizer["steps"] == trained.optimizer.steps > 0

    def test_resume_continues_the_log(self, trained, small_dataset):
        state, dataset = small_dataset
        config = dataclasses.replace(trained.train_config, epochs=1)
        resumed = fit(dataset, config, trained.loss_config, preprocessor=state, initial=trained)
        assert [entry.epoch for entry in resumed.training_log] == [1, 2, 3]
        assert resumed.training_log[:2] == trained.training_log
        assert resumed.optimizer.steps == trained.optimizer.steps * 3 // 2
        # The decay now spans three epochs and ends on the final rate
        assert resumed.training_log[-1].learning_rate == pytest.approx(config.learning_rate * config.lr_final_factor)

    def test_resume_without_epochs_keeps_weights(self, trained, small_dataset):
        state, dataset = small_dataset
        config = dataclasses.replace(trained.train_config, epochs=0)
        resumed = fit(dataset, config, trained.loss_config, preprocessor=state, initial=trained)
        for name in trained.weights:
            assert_array_equal(resumed.weights[name], trained.weights[name])
        assert resumed.training_log == trained.training_log
        assert resumed.optimizer.steps == trained.optimizer.steps

    def test_split_run_matches_uninterrupted_run(self, small_dataset, tmp_path):
        state, dataset = small_dataset
        whole = TrainConfig(**{**TINY_TRAIN, "epochs": 4, "schedule_epochs": 4})
        half = dataclasses.replace(whole, epochs=2)
        straight = fit(dataset, whole, preprocessor=state)

        fit(dataset, half, preprocessor=state).save(tmp_path / "first.json")
        second = fit(dataset, half, preprocessor=state, initial=Checkpoint.load(tmp_path / "first.json"))
        for name in straight.weights:
            assert_array_equal(second.weights[name], straight.weights[name])
            assert_array_equal(second.optimizer.second[name], straight.optimizer.second[name])
        assert second.training_log == straight.training_log

    def test_schema_version_is_checked(self, trained):
        document = trained.to_document()
        document["schema_version"] = SCHEMA_VERSION + 1
        with pytest.raises(errors.SchemaVersionError):
            Checkpoint.from_document(document)

    def test_incomplete_document(self, trained):
        document = trained.to_document()
        del document["train_config"]
        with pytest.raises(errors.CheckpointError):
            Checkpoint.from_document(document)

    def test_truncated_weight_payload(self, trained):
        document = trained.to_document()
        entry = document["weights"]["head.bias"]
        entry["data"] = base64.b64encode(base64.b64decode(entry["data"])[:-4]).decode("ascii")
        with pytest.raises(errors.CheckpointError, match="payload size"):
            Checkpoint.from_document(document)

    def test_wrong_weight_shape(self, trained):
        document = trained.to_document()
        document["net_config"]["width"] += 1
        with pytest.raises(errors.DimensionMismatchError):
            Checkpoint.from_document(document)

    def test_baseline_checkpoint(self, small_dataset):
        _, dataset = small_dataset
        checkpoint = Checkpoint(ModelKind.GLOBAL, baseline=fit_global(dataset.observations))
        loaded = Checkpoint.from_document(json.loads(checkpoint.to_json()))
        assert loaded.kind is ModelKind.GLOBAL
        assert_array_equal(loaded.baseline.values, checkpoint.baseline.values)
        with pytest.raises(errors.CheckpointError):
            fit(dataset, preprocessor=None, initial=loaded)
