"""
Validation rules of the record, vocabulary and configuration schemas
"""
import numpy as np
import pytest
from pydantic import ValidationError

from models import GruCellParams, ModelKindEnum, ModelParams, TaskEnum, ActivationEnum
from schemas import (
    CohortConfig,
    EvalReport,
    ModelDims,
    PatientRecord,
    TrainConfig,
    Visit,
    Vocabulary,
    sanitize_code_name,
)
from services.errors import DimensionError

pytestmark = pytest.mark.unit


class TestVisit:

    @pytest.mark.parametrize("codes", [[], [3, 1], [2, 2], [-1, 4]])
    def test_codes_must_be_canonical(self, codes):
        with pytest.raises(ValidationError):
            Visit(day=0, codes=codes)

    def test_negative_day(self):
        with pytest.raises(ValidationError):
            Visit(day=-1, codes=[0])

    def test_values_align_with_codes(self):
        assert Visit(day=0, codes=[1, 2], values=[0.5, 2.0]).values == [0.5, 2.0]
        with pytest.raises(ValidationError):
            Visit(day=0, codes=[1, 2], values=[0.5])
        with pytest.raises(ValidationError):
            Visit(day=0, codes=[1], values=[float("nan")])


class TestPatientRecord:

    def test_visits_strictly_increasing(self):
        print("🧪 Testing record validation...")
        with pytest.raises(ValidationError):
            PatientRecord(patient_id="X", visits=[Visit(day=5, codes=[0]), Visit(day=5, codes=[1])])
        with pytest.raises(ValidationError):
            PatientRecord(patient_id="X", visits=[])

    def test_label_layout_follows_task(self):
        visits = [Visit(day=0, codes=[0]), Visit(day=3, codes=[1])]
        with pytest.raises(ValidationError):
            PatientRecord(patient_id="X", visits=visits, labels=[[0], [0]])
        with pytest.raises(ValidationError):
            PatientRecord(patient_id="X", task=TaskEnum.esm, n_labels=3, visits=visits, labels=[[0]])
        with pytest.raises(ValidationError):
            PatientRecord(patient_id="X", task=TaskEnum.esm, n_labels=3, visits=visits, labels=[[0], [3]])

    def test_matrices(self, esm_record):
        X = esm_record.input_matrix(10)
        assert X.shape == (10, 4)
        np.testing.assert_array_equal(X[:, 2], [0, 1, 0, 0, 0, 0, 1, 0, 0, 0])
        Y = esm_record.label_matrix()
        np.testing.assert_array_equal(Y, [[0, 0, 1, 0], [0, 1, 0, 0], [1, 0, 1, 0]])

    def test_code_outside_vocabulary(self, l2d_record):
        with pytest.raises(DimensionError):
            l2d_record.input_matrix(5)


class TestVocabulary:

    def test_sanitize(self):
        assert sanitize_code_name("Heart failure, unspecified") == "Heart failure_ unspecified"
        assert sanitize_code_name('"') == "_"

    def test_unsafe_names_rejected(self):
        with pytest.raises(ValidationError):
            Vocabulary(groups={"codes": ["a;b"]})

    def test_group_lookup(self):
        vocab = Vocabulary.default(2, 2, 2)
        assert vocab.size == 6
        assert vocab.group_range("procedure") == (4, 6)
        with pytest.raises(KeyError):
            vocab.group_range("labs")


class TestConfigs:

    def test_dims_positive_and_frozen(self):
        with pytest.raises(ValidationError):
            ModelDims(r=0)
        dims = ModelDims(r=4)
        with pytest.raises(TypeError):
            dims.m = 3

    def test_train_defaults(self):
        config = TrainConfig()
        assert (config.batch_size, config.dropout_v, config.dropout_c) == (100, 0.6, 0.6)
        assert config.l2_coefficient is None
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)

    def test_cohort_visit_range(self):
        with pytest.raises(ValidationError):
            CohortConfig(min_visits=8, max_visits=4)
        with pytest.raises(ValidationError):
            CohortConfig(motif_kind="burst")
        assert CohortConfig().vocab_size == 617

    def test_report_values(self):
        with pytest.raises(ValidationError):
            EvalReport(model_kind="retain", task="l2d", n_patients=3, neg_log_likelihood=float("inf"))
        with pytest.raises(ValidationError):
            EvalReport(model_kind="retain", task="esm", n_patients=3, neg_log_likelihood=1.0, recall_at_k={5: 1.5})


class TestParams:

    def test_cell_shapes_checked(self):
        good = {name: np.zeros((2, 3) if name.startswith("W_") else (2, 2) if name.startswith("U_") else 2)
                for name in ("W_update", "W_reset", "W_cand", "U_update", "U_reset", "U_cand",
                             "b_update", "b_reset", "b_cand")}
        cell = GruCellParams(**good)
        assert (cell.input_size, cell.hidden_size) == (3, 2)
        with pytest.raises(DimensionError):
            GruCellParams(**{**good, "U_reset": np.zeros((2, 3))})

    def test_copy_is_deep(self):
        params = ModelParams(ModelKindEnum.lr, ModelDims(r=2), TaskEnum.l2d, ActivationEnum.sigmoid,
                             {"W_out": np.ones((1, 2)), "b_out": np.zeros(1)})
        clone = params.copy()
        clone.tensors["W_out"][0, 0] = 5.0
        assert params["W_out"][0, 0] == 1.0
        assert params.n_parameters() == 3
        assert not params.timestamped
