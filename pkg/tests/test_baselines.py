"""
Tests for the comparison models
"""
import numpy as np
import pytest

from models import ModelKindEnum, TaskEnum
from schemas import ModelDims, PatientRecord, Visit
from services.baselines import (
    BASELINES,
    LogisticRegressionModel,
    MlpModel,
    RnnAttentionMlpModel,
    RnnAttentionRnnModel,
    RnnModel,
    lr_forward,
    mlp_forward,
    pseudo_context,
    rnn_attention_mlp_forward,
    rnn_attention_rnn_forward,
    rnn_forward,
)
from services.errors import ArgumentError, DimensionError
from services.interpret import reverse_visits
from services.nn_core import GradientTape, run_rnn_forward
from services.registry import build_model
from services.retain import embed_visit, visit_attention

pytestmark = pytest.mark.unit

DIMS = ModelDims(r=10, m=4, p=4, q=4, s=1, hidden=4)


def jittered(model, seed=0, scale=0.5):
    params = model.init_params(seed)
    rng = np.random.default_rng(seed + 50)
    return params.replace({name: t + rng.normal(0.0, scale, t.shape) for name, t in params})


def zeroed(model):
    params = model.init_params(0)
    return params.replace({name: np.zeros_like(t) for name, t in params})


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestPseudoContext:

    def test_window_sums(self, l2d_record):
        print("🧪 Testing the windowed visit sum...")
        np.testing.assert_array_equal(pseudo_context(l2d_record, 1, 10), [1, 0, 0, 1, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(pseudo_context(l2d_record, 5, 10, window=2), [0, 0, 0, 0, 1, 1, 0, 0, 0, 1])
        np.testing.assert_array_equal(pseudo_context(l2d_record, 5, 10), [1, 1, 1, 1, 1, 2, 0, 1, 0, 1])

    def test_window_one_is_the_visit(self, l2d_record):
        np.testing.assert_array_equal(pseudo_context(l2d_record, 3, 12, window=1),
                                      l2d_record.input_matrix(12)[:, 2])

    def test_length_follows_the_vocabulary_not_the_record(self):
        record = PatientRecord(patient_id="LOW", visits=[Visit(day=0, codes=[0, 2]), Visit(day=4, codes=[1])])
        context = pseudo_context(record, 2, DIMS.r)
        assert context.shape == (DIMS.r,)
        np.testing.assert_array_equal(context[:3], [1, 1, 1])
        assert not context[3:].any()
        params = jittered(LogisticRegressionModel(DIMS))
        expected = sigmoid(params["W_out"] @ context + params["b_out"])
        np.testing.assert_allclose(lr_forward(record, 2, params), expected, rtol=0, atol=1e-14)

    def test_bad_arguments(self, l2d_record):
        with pytest.raises(ArgumentError):
            pseudo_context(l2d_record, 6, 10)
        with pytest.raises(ArgumentError):
            pseudo_context(l2d_record, 0, 10)
        with pytest.raises(ArgumentError):
            pseudo_context(l2d_record, 2, 10, window=0)
        with pytest.raises(DimensionError):
            pseudo_context(l2d_record, 2, 5)


class TestLogisticRegression:

    def test_zero_model(self, l2d_record):
        assert lr_forward(l2d_record, 5, zeroed(LogisticRegressionModel(DIMS)))[0] == 0.5

    def test_matches_formula(self, l2d_record):
        params = jittered(LogisticRegressionModel(DIMS))
        expected = sigmoid(params["W_out"] @ pseudo_context(l2d_record, 4, r=10) + params["b_out"])
        np.testing.assert_allclose(lr_forward(l2d_record, 4, params), expected, rtol=0, atol=1e-14)

    def test_blind_to_order_inside_the_window(self, l2d_record):
        print("🧪 Testing that LR ignores visit order inside its window...")
        params = jittered(LogisticRegressionModel(DIMS), seed=3)
        flipped = reverse_visits(l2d_record)
        np.testing.assert_array_equal(lr_forward(l2d_record, 5, params), lr_forward(flipped, 5, params))

    def test_only_output_layer_is_penalised(self):
        model = LogisticRegressionModel(DIMS)
        assert model.penalized_names() == ["W_out"]
        assert model.default_l2 == 0.01


class TestMlp:

    def test_zero_model(self, l2d_record):
        assert mlp_forward(l2d_record, 5, zeroed(MlpModel(DIMS)))[0] == 0.5

    def test_matches_formula(self, l2d_record):
        params = jittered(MlpModel(DIMS), seed=1)
        s = pseudo_context(l2d_record, 5, r=10)
        hidden = np.tanh(params["W_hidden"] @ s + params["b_hidden"])
        expected = sigmoid(params["W_out"] @ hidden + params["b_out"])
        np.testing.assert_allclose(mlp_forward(l2d_record, 5, params), expected, rtol=0, atol=1e-12)

    def test_zero_rate_training_equals_inference(self, l2d_record):
        params = jittered(MlpModel(DIMS), seed=2)
        trained = mlp_forward(l2d_record, 5, params, training=True, rng=np.random.default_rng(0), dropout_hidden=0.0)
        np.testing.assert_array_equal(trained, mlp_forward(l2d_record, 5, params))

    def test_training_without_generator_rejected(self, l2d_record):
        with pytest.raises(ArgumentError):
            mlp_forward(l2d_record, 5, jittered(MlpModel(DIMS)), training=True)


class TestRnn:

    def test_zero_model_single_visit(self):
        record = PatientRecord(patient_id="S", visits=[Visit(day=0, codes=[3])])
        assert rnn_forward(record, 1, zeroed(RnnModel(DIMS)))[0] == 0.5

    def test_layers_stack(self, l2d_record):
        print("🧪 Testing the two stacked forward GRUs...")
        model = RnnModel(DIMS)
        params = jittered(model, seed=4)
        X = l2d_record.input_matrix(10)
        tape = GradientTape(record=False)
        batch = model.make_batch([l2d_record])
        states = model.layer_states(tape, tape.watch(params.tensors), batch, False, None)
        first = run_rnn_forward([X[:, j] for j in range(5)], params.cell("rnn1"))
        second = run_rnn_forward(first, params.cell("rnn2"))
        for got, want in zip(states, second):
            np.testing.assert_allclose(got.value[:, 0], want, rtol=0, atol=1e-14)
        expected = sigmoid(params["W_out"] @ second[-1] + params["b_out"])
        np.testing.assert_allclose(rnn_forward(l2d_record, 5, params), expected, rtol=0, atol=1e-14)


class TestVisitAttentionBaselines:

    def test_single_visit_gets_all_weight(self):
        model = RnnAttentionMlpModel(DIMS)
        params = jittered(model, seed=5)
        tape = GradientTape(record=False)
        pv = tape.watch(params.tensors)
        alphas = model.attention(tape, pv, [tape.constant(np.array([[0.3], [-0.2], [0.1], [0.9]]))])
        np.testing.assert_array_equal(alphas.value, [[1.0]])

    def test_flat_scorer_gives_uniform_weights(self):
        model = RnnAttentionMlpModel(DIMS)
        params = jittered(model, seed=6)
        params.tensors["w_score"] = np.zeros(4)
        tape = GradientTape(record=False)
        pv = tape.watch(params.tensors)
        states = [tape.constant(np.random.default_rng(k).normal(size=(4, 2))) for k in range(4)]
        np.testing.assert_allclose(model.attention(tape, pv, states).value, np.full((4, 2), 0.25), rtol=0, atol=1e-15)
        ends = np.array([3, 1])
        alphas = model.attention(tape, pv, states, ends).value
        np.testing.assert_allclose(alphas[:, 1], [0.5, 0.5, 0.0, 0.0], rtol=0, atol=1e-15)

    def test_mlp_attention_context_is_over_embeddings(self, l2d_record):
        params = jittered(RnnAttentionMlpModel(DIMS), seed=7)
        assert params["W_out"].shape == (1, DIMS.m)
        y = rnn_attention_mlp_forward(l2d_record, 3, params)
        assert y.shape == (1,) and 0.0 < y[0] < 1.0

    def test_reverse_attention_reads_the_visit_rnn(self, l2d_record):
        print("🧪 Testing RNN+alpha_R: reverse-time alphas over forward visit-GRU states...")
        dims = ModelDims(r=10, m=4, p=4, q=4, s=1, hidden=3)
        params = jittered(RnnAttentionRnnModel(dims), seed=8)
        assert params["visit.W_update"].shape == (3, 4)
        assert params["alpha.W_update"].shape == (3, 4)
        assert params["W_out"].shape == (1, 3)
        X = l2d_record.input_matrix(10)
        for i in range(1, 6):
            v = [embed_visit(X[:, j], params) for j in range(i)]
            alphas = visit_attention(v, params)
            h = run_rnn_forward(v, params.cell("visit"))
            c = sum(a * hj for a, hj in zip(alphas, h))
            expected = sigmoid(params["W_out"] @ c + params["b_out"])
            np.testing.assert_allclose(rnn_attention_rnn_forward(l2d_record, i, params), expected,
                                       rtol=0, atol=1e-12)

    def test_visit_rnn_changes_the_prediction(self, l2d_record):
        model = RnnAttentionRnnModel(DIMS)
        params = jittered(model, seed=12)
        silenced = params.replace({name: np.zeros_like(t) if name.startswith("visit.") else t for name, t in params})
        assert not np.allclose(model.predict(params, l2d_record)[0], model.predict(silenced, l2d_record)[0])

    def test_penalty_targets(self):
        assert RnnAttentionMlpModel(DIMS).penalized_names() == ["W_att", "W_out"]
        names = RnnAttentionRnnModel(DIMS).penalized_names()
        assert "W_out" in names and all(n.startswith("alpha.W_") or n.startswith("alpha.U_") for n in names[:-1])


class TestAllBaselines:

    @pytest.mark.parametrize("kind", list(BASELINES))
    def test_esm_outputs_are_distributions(self, kind, esm_record):
        dims = ModelDims(r=10, m=4, p=4, q=4, s=3, hidden=4)
        model = build_model(kind, dims, TaskEnum.esm)
        params = jittered(model, seed=9)
        outputs = model.predict(params, esm_record)
        assert len(outputs) == esm_record.n_visits
        for y in outputs:
            assert y.shape == (3,)
            assert abs(y.sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("kind", list(BASELINES))
    def test_causal(self, kind, l2d_record):
        model = build_model(kind, DIMS)
        params = jittered(model, seed=10)
        changed = l2d_record.copy(update={"visits": l2d_record.visits[:3] + [Visit(day=31, codes=[8]), l2d_record.visits[4]]})
        for i in (1, 2, 3):
            np.testing.assert_allclose(model.predict(params, l2d_record, [i])[0],
                                       model.predict(params, changed, [i])[0], rtol=0, atol=1e-13)

    @pytest.mark.parametrize("kind", [ModelKindEnum.rnn, ModelKindEnum.rnn_attn_mlp, ModelKindEnum.rnn_attn_rnn])
    def test_recurrent_models_see_order(self, kind, l2d_record):
        model = build_model(kind, DIMS)
        params = jittered(model, seed=11)
        a = model.predict(params, l2d_record)[0]
        b = model.predict(params, reverse_visits(l2d_record))[0]
        assert not np.allclose(a, b, rtol=0, atol=1e-9)

    def test_wrong_parameters_rejected(self, l2d_record):
        mlp_params = MlpModel(DIMS).init_params(0)
        with pytest.raises(ArgumentError):
            lr_forward(l2d_record, 1, mlp_params)
        with pytest.raises(ArgumentError):
            rnn_forward(l2d_record, 1, mlp_params)
