"""
Tests for the optimiser, clipping, the training loop and random search
"""
import math
import unittest
from unittest.mock import patch

import numpy as np
import pytest

from models import ModelKindEnum, SplitEnum, TaskEnum
from schemas import CohortConfig, ModelDims, PatientRecord, TrainConfig, Visit
from services.cohort import generate_cohort, split
from services.errors import ArgumentError, NumericalError, TrainingDivergedError
from services.registry import build_model
from services.search_space import SearchSpace
from services.training import (
    AdamOptimizer,
    clip_by_global_norm,
    global_norm,
    infer_dims,
    random_search,
    split_records,
    train,
)

pytestmark = pytest.mark.unit

TINY = ModelDims(r=6, m=4, p=4, q=4, s=1, hidden=4)


def toy_records():
    """Positives end with code 5, negatives never see it"""
    records = []
    for n in range(8):
        last = [2, 5] if n % 2 else [2, 3]
        records.append(PatientRecord(
            patient_id=f"T{n:02d}",
            visits=[Visit(day=0, codes=[n % 4]), Visit(day=10, codes=[1, 4]), Visit(day=20, codes=last)],
            labels=[[0]] if n % 2 else [[]],
        ))
    return records


def small_cohort(seed=0):
    config = CohortConfig(n_cases=4, controls_per_case=2, diagnosis_codes=10, medication_codes=5,
                          procedure_codes=5, risk_codes=[1, 2], max_visits=6, max_span_days=200, seed=seed)
    return split(generate_cohort(config), seed)


class TestAdam(unittest.TestCase):

    def test_first_step_moves_by_learning_rate(self):
        print("🧪 Testing the first bias-corrected Adam step...")
        optimizer = AdamOptimizer(learning_rate=0.01)
        tensors = {"w": np.array([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.3, -4.0, 2.0])}
        updated = optimizer.step(tensors, grads)
        np.testing.assert_allclose(updated["w"], tensors["w"] - 0.01 * np.sign(grads["w"]), rtol=0, atol=1e-9)
        np.testing.assert_array_equal(tensors["w"], [1.0, -2.0, 0.5])
        self.assertEqual(optimizer.t, 1)

    def test_zero_gradient_leaves_tensor(self):
        optimizer = AdamOptimizer()
        updated = optimizer.step({"b": np.array([0.25])}, {"b": np.array([0.0])})
        np.testing.assert_array_equal(updated["b"], [0.25])


class TestClipping(unittest.TestCase):

    def test_global_norm(self):
        self.assertEqual(global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}), 5.0)

    def test_rescales_above_threshold(self):
        clipped, norm = clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
        self.assertEqual(norm, 5.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.8], rtol=1e-12)

    def test_leaves_small_gradients(self):
        grads = {"a": np.array([0.3, 0.4])}
        clipped, norm = clip_by_global_norm(grads, 5.0)
        self.assertIs(clipped, grads)
        clipped, _ = clip_by_global_norm(grads, None)
        self.assertIs(clipped, grads)


class TestTrain:

    def config(self, **overrides):
        values = {"batch_size": 8, "epochs": 50, "l2_coefficient": 0.0, "dropout_v": 0.0, "dropout_c": 0.0,
                  "patience": None, "seed": 1}
        values.update(overrides)
        return TrainConfig(**values)

    def test_full_batch_loss_decreases(self):
        print("🧪 Testing that full-batch training lowers the loss every epoch...")
        result = train(toy_records(), self.config(), TINY)
        losses = [h.train_nll for h in result.history]
        assert len(losses) == 50
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert all(h.valid_nll is None for h in result.history)
        assert result.best_epoch == 50
        assert result.max_grad_norm > 0

    def test_deterministic(self):
        a = train(toy_records(), self.config(epochs=3, batch_size=3, dropout_v=0.5, dropout_c=0.5), TINY)
        b = train(toy_records(), self.config(epochs=3, batch_size=3, dropout_v=0.5, dropout_c=0.5), TINY)
        assert [h.train_nll for h in a.history] == [h.train_nll for h in b.history]
        for name, tensor in a.params:
            np.testing.assert_array_equal(tensor, b.params[name])

    def test_best_epoch_has_lowest_validation_loss(self):
        cohort = small_cohort()
        config = self.config(epochs=6, batch_size=4, model_kind=ModelKindEnum.rnn_attn_rnn)
        result = train(cohort, config, infer_dims(cohort.records, r=20, size=4))
        valid = [h.valid_nll for h in result.history]
        assert all(v is not None for v in valid)
        assert result.best_epoch == int(np.argmin(valid)) + 1

    def test_early_stopping_counts_patience(self):
        cohort = small_cohort(seed=2)
        config = self.config(epochs=40, batch_size=4, learning_rate=0.05, patience=2)
        result = train(cohort, config, infer_dims(cohort.records, r=20, size=4))
        if result.stopped_early:
            assert len(result.history) - result.best_epoch == 2
        else:
            assert len(result.history) == 40

    def test_non_finite_loss_reports_position(self):
        model = build_model(ModelKindEnum.retain, TINY)
        zeros = {name: np.zeros_like(t) for name, t in model.init_params(0)}
        with patch.object(model, "loss_and_gradients", return_value=(float("nan"), zeros)):
            with pytest.raises(TrainingDivergedError) as info:
                train(toy_records(), self.config(batch_size=4), model=model)
        assert (info.value.epoch, info.value.batch) == (1, 1)

    def test_numerical_failure_becomes_divergence(self):
        model = build_model(ModelKindEnum.lr, TINY)
        with patch.object(model, "loss_and_gradients", side_effect=NumericalError("overflow")):
            with pytest.raises(TrainingDivergedError):
                train(toy_records(), self.config(), model=model)

    def test_empty_training_split(self):
        records = [r.copy(update={"split": SplitEnum.valid}) for r in toy_records()]
        with pytest.raises(ArgumentError):
            train(records, self.config(), TINY)


class TestLossTerms:

    def test_l2_penalty_value(self):
        model = build_model(ModelKindEnum.lr, TINY)
        params = model.init_params(3)
        records = toy_records()
        plain = model.loss_value(params.tensors, records, l2=0.0)
        penalised = model.loss_value(params.tensors, records, l2=0.5)
        assert math.isclose(penalised - plain, 0.5 * float(np.sum(params["W_out"] ** 2)), rel_tol=1e-9)

    def test_default_penalty_per_model(self):
        records = toy_records()
        for kind, expected in ((ModelKindEnum.lr, 0.01), (ModelKindEnum.retain, 1e-4)):
            model = build_model(kind, TINY)
            params = model.init_params(0)
            assert model.loss_value(params.tensors, records) == model.loss_value(params.tensors, records, l2=expected)


def test_split_records_without_assignment():
    train_records, valid_records = split_records(toy_records())
    assert len(train_records) == 8 and valid_records == []


def test_infer_dims(l2d_record, esm_record):
    assert infer_dims([l2d_record]) == ModelDims(r=10, m=32, p=32, q=32, s=1, hidden=32)
    assert infer_dims([esm_record], size=4) == ModelDims(r=9, m=4, p=4, q=4, s=3, hidden=4)
    assert infer_dims([l2d_record], r=20, full_dims=True) == ModelDims(r=20, m=128, p=128, q=128, s=1, hidden=256)
    with pytest.raises(ArgumentError):
        infer_dims([])


class TestRandomSearch:

    def space(self):
        return SearchSpace({"sizes": [3, 4], "l2_coefficients": [0.01, 0.001], "dropout_v": [0.0],
                            "dropout_c": [0.0, 0.4], "epochs": 2})

    def test_trials_ranked_by_validation_loss(self):
        print("🧪 Testing random search over a tiny grid...")
        base = TrainConfig(batch_size=4, patience=None, task=TaskEnum.l2d)
        trials = random_search(small_cohort(), base, self.space(), n_trials=3, seed=4, r=20)
        assert len(trials) == 3
        assert sorted(t["trial"] for t in trials) == [0, 1, 2]
        losses = [t["valid_nll"] for t in trials]
        assert losses == sorted(losses)
        for trial in trials:
            assert trial["size"] in (3, 4)
            assert trial["dropout_c"] in (0.0, 0.4)
            assert 1 <= trial["best_epoch"] <= 2

    def test_needs_validation_split(self):
        with pytest.raises(ArgumentError):
            random_search(generate_cohort(CohortConfig(n_cases=2, controls_per_case=1)), TrainConfig(),
                          self.space(), n_trials=1)
        with pytest.raises(ArgumentError):
            random_search(small_cohort(), TrainConfig(), self.space(), n_trials=0)
