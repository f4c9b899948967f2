#!/usr/bin/env python3
"""
Desk-scale comparisons on synthetic cohorts.

1. Test AUC of LR, RNN and RETAIN on the recency cohort, one row per seed.
2. RETAIN against RETAIN-ts on the gap cohort, where only visit timing
   separates cases from decoy controls.
3. Order reversal: the RETAIN and LR risk scores of one motif-bearing test
   patient before and after reversing its visits.

Results go to stdout as JSON; logs go to stderr.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from dotenv import load_dotenv

from models import ModelKindEnum, ModelParams, SplitEnum
from schemas import Cohort, CohortConfig, PatientRecord, TrainConfig
from services.baselines import PSEUDO_CONTEXT_WINDOW
from services.cohort import generate_cohort, motif_label, split
from services.errors import RetainError
from services.interpret import reverse_visits
from services.metrics import evaluate, score_records
from services.structured_logger import structured_logger
from services.training import infer_dims, train

ORDERING_KINDS = (ModelKindEnum.lr, ModelKindEnum.rnn, ModelKindEnum.retain)
TIMESTAMP_KINDS = (ModelKindEnum.retain, ModelKindEnum.retain_ts)


class DeskBenchmark:
    """Trains and scores models on freshly generated cohorts"""

    def __init__(self, n_cases: int = 1000, controls_per_case: int = 10, epochs: int = 10,
                 size: int = 32, batch_size: int = 100):
        self.n_cases = n_cases
        self.controls_per_case = controls_per_case
        self.epochs = epochs
        self.size = size
        self.batch_size = batch_size

    def cohort(self, motif: str, seed: int) -> Cohort:
        config = CohortConfig(n_cases=self.n_cases, controls_per_case=self.controls_per_case,
                              motif_kind=motif, seed=seed)
        return split(generate_cohort(config), seed)

    def fit(self, cohort: Cohort, kind: ModelKindEnum, seed: int) -> ModelParams:
        config = TrainConfig(model_kind=kind, epochs=self.epochs, batch_size=self.batch_size, seed=seed)
        dims = infer_dims(cohort.records, r=cohort.vocab.size, size=self.size)
        with structured_logger.timed_operation("benchmark_train", model_kind=kind.value, seed=seed):
            return train(cohort, config, dims).params

    def test_auc(self, cohort: Cohort, params: ModelParams) -> float:
        return evaluate(cohort.subset(SplitEnum.test), params, split=SplitEnum.test).auc

    def compare(self, motif: str, kinds: Sequence[ModelKindEnum], seeds: Sequence[int]) -> List[Dict[str, Any]]:
        rows = []
        for seed in seeds:
            cohort = self.cohort(motif, seed)
            row: Dict[str, Any] = {"seed": seed, "motif": motif}
            for kind in kinds:
                row[kind.value] = self.test_auc(cohort, self.fit(cohort, kind, seed))
                structured_logger.log_performance_metric(f"auc_{kind.value}", row[kind.value], seed=seed, motif=motif)
            rows.append(row)
        return rows

    def order_reversal(self, seed: int) -> Dict[str, Any]:
        cohort = self.cohort("recency", seed)
        config = CohortConfig(n_cases=self.n_cases, controls_per_case=self.controls_per_case, seed=seed)
        patient = motif_bearing_patient(cohort.subset(SplitEnum.test), config)
        if patient is None:
            raise RetainError("no motif-bearing test patient for the reversal check")
        reversed_patient = reverse_visits(patient)
        result: Dict[str, Any] = {"seed": seed, "patient_id": patient.patient_id, "n_visits": patient.n_visits}
        for kind in (ModelKindEnum.retain, ModelKindEnum.lr):
            params = self.fit(cohort, kind, seed)
            original, flipped = score_records(params, [patient, reversed_patient])
            result[kind.value] = {
                "original": float(original),
                "reversed": float(flipped),
                "change": float(abs(original - flipped)),
            }
        return result


def motif_bearing_patient(records: Sequence[PatientRecord], config: CohortConfig) -> Optional[PatientRecord]:
    """First case with the motif whose visits all fit in the pseudo-context window, else the first case with it"""
    bearing = [r for r in records if motif_label(r, config)]
    short = [r for r in bearing if r.n_visits <= PSEUDO_CONTEXT_WINDOW]
    return (short or bearing or [None])[0]


def main():
    """Main entry point for the benchmark script"""
    load_dotenv()
    parser = argparse.ArgumentParser(description="RETAIN desk-scale benchmark")
    parser.add_argument("--experiment", choices=["all", "ordering", "timestamps", "reversal"], default="all")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--n-cases", type=int, default=1000)
    parser.add_argument("--controls-per-case", type=int, default=10)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--log-level", help="overrides LOG_LEVEL")
    args = parser.parse_args()
    structured_logger.configure(args.log_level)

    bench = DeskBenchmark(args.n_cases, args.controls_per_case, args.epochs, args.size)
    results: Dict[str, Any] = {}
    try:
        if args.experiment in ("all", "ordering"):
            results["ordering"] = bench.compare("recency", ORDERING_KINDS, args.seeds)
        if args.experiment in ("all", "timestamps"):
            results["timestamps"] = bench.compare("gap", TIMESTAMP_KINDS, args.seeds)
        if args.experiment in ("all", "reversal"):
            results["reversal"] = bench.order_reversal(args.seeds[0])
    except RetainError as e:
        structured_logger.error(f"❌ Benchmark failed: {e}", action="benchmark", status="failed")
        sys.exit(1)

    print(json.dumps(results, indent=2, sort_keys=True))
    sys.exit(0)


if __name__ == "__main__":
    main()
