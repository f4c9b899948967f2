"""
Synthetic EHR cohort: seeded case generation, demographic case/control
matching, train/valid/test split and the motif oracle.

Cases carry a risk motif near their index date; matched controls share the
case's index date and, with probability decoy_rate, carry the same risk codes
just outside the motif region, so only models that see visit order (recency
motif) or visit timing (gap motif) can separate them.
"""
import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from models import RoleEnum, SplitEnum, TaskEnum
from schemas import Cohort, CohortConfig, PatientRecord, Visit, Vocabulary
from services.errors import ArgumentError, CohortConfigError

logger = logging.getLogger(__name__)

SEXES = ("F", "M")
AGE_BANDS = ("40-49", "50-59", "60-69", "70-85")
MATCHING_KEYS = ("sex", "age_band")
SPLIT_FRACTIONS = (0.75, 0.10)
MOTIF_GAP_JITTER = 30


def default_vocabulary(config: CohortConfig) -> Vocabulary:
    return Vocabulary.default(config.diagnosis_codes, config.medication_codes, config.procedure_codes)


def validate_config(config: CohortConfig) -> None:
    if config.n_cases < 1:
        raise CohortConfigError("n_cases must be at least 1")
    if config.controls_per_case < 1:
        raise CohortConfigError("controls_per_case must be at least 1")
    if not config.risk_codes:
        raise CohortConfigError("at least one risk code is required")
    outside = [c for c in config.risk_codes if not 0 <= c < config.vocab_size]
    if outside:
        raise CohortConfigError(f"risk codes {outside} outside vocabulary of size {config.vocab_size}")
    lo, hi = config.codes_per_visit
    if lo < 1 or hi < lo or hi > config.vocab_size - len(set(config.risk_codes)):
        raise CohortConfigError(f"invalid codes_per_visit range {config.codes_per_visit}")
    if config.motif_window < 1 or config.decoy_window < config.motif_window:
        raise CohortConfigError("need 1 <= motif_window <= decoy_window")
    if config.max_span_days <= config.max_visits + 1:
        raise CohortConfigError("max_span_days must leave room for one visit per day")
    for name in ("decoy_rate", "carryover_rate"):
        if not 0.0 <= getattr(config, name) <= 1.0:
            raise CohortConfigError(f"{name} must lie in [0, 1]")
    if config.power_law_exponent <= 0:
        raise CohortConfigError("power_law_exponent must be positive")


class _VisitSampler:
    """Draws background codes from a seeded power law that never emits risk codes"""

    def __init__(self, config: CohortConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        risk = set(config.risk_codes)
        self.codes = np.array([k for k in range(config.vocab_size) if k not in risk])
        ranks = np.empty(len(self.codes))
        ranks[rng.permutation(len(self.codes))] = np.arange(1, len(self.codes) + 1)
        weights = ranks ** -config.power_law_exponent
        self.weights = weights / weights.sum()

    def visits(self, n: int) -> List[Set[int]]:
        lo, hi = self.config.codes_per_visit
        visits, previous = [], set()
        for _ in range(n):
            carried = {k for k in sorted(previous) if self.rng.random() < self.config.carryover_rate}
            count = int(self.rng.integers(lo, hi + 1))
            drawn = self.rng.choice(self.codes, size=count, replace=False, p=self.weights)
            codes = carried | {int(k) for k in drawn}
            visits.append(codes)
            previous = codes
        return visits


def _gaps(rng: np.random.Generator, config: CohortConfig, n_gaps: int, motif_gaps: int,
          within: Optional[bool]) -> np.ndarray:
    """Inter-visit gaps whose last motif_gaps observed gaps sum to within (or beyond) gap_days"""
    if motif_gaps and within is not None:
        if within:
            per_gap = max(1, config.gap_days // motif_gaps)
            motif = rng.integers(1, per_gap + 1, size=motif_gaps)
        else:
            floor = math.ceil((config.gap_days + 1) / motif_gaps)
            motif = rng.integers(floor, floor + MOTIF_GAP_JITTER + 1, size=motif_gaps)
    else:
        motif = np.zeros(0, dtype=np.int64)
    n_filler = n_gaps - len(motif)
    budget = config.max_span_days - 1 - int(motif.sum())
    if n_filler > budget:
        raise CohortConfigError("max_span_days too short for the requested visits and gap motif")
    filler = rng.integers(1, max(1, budget // max(n_filler, 1)) + 1, size=n_filler)
    return np.concatenate([filler, motif]) if len(motif) else filler


def _place_motif(rng: np.random.Generator, config: CohortConfig, role: RoleEnum,
                 n_observed: int) -> Tuple[Optional[int], Optional[bool]]:
    """Visit position (0-based) that receives a risk code and, for the gap motif, whether it is within gap_days"""
    w = min(config.motif_window, n_observed)
    if role == RoleEnum.case:
        return n_observed - 1 - int(rng.integers(0, w)), True
    if rng.random() >= config.decoy_rate:
        return None, None
    if config.motif_kind == "gap":
        if w < 2:
            return None, None
        return n_observed - 1 - int(rng.integers(1, w)), False
    candidates = list(range(max(0, n_observed - config.decoy_window), n_observed - w))
    if not candidates:
        return None, None
    return int(rng.choice(candidates)), None


def _history(rng: np.random.Generator, sampler: _VisitSampler, config: CohortConfig,
             role: RoleEnum, index_day: int) -> Tuple[List[Visit], List[List[int]]]:
    n_observed = int(rng.integers(config.min_visits, config.max_visits + 1))
    total = n_observed + (1 if config.task == TaskEnum.esm else 0)
    codes = sampler.visits(total)

    position, within = _place_motif(rng, config, role, n_observed)
    if position is not None:
        codes[position].add(int(rng.choice(config.risk_codes)))
    motif_gaps = (n_observed - 1 - position) if (position is not None and config.motif_kind == "gap") else 0
    gaps = _gaps(rng, config, total - 1, motif_gaps, within if config.motif_kind == "gap" else None)
    if config.task == TaskEnum.esm:
        # the held-out visit follows the last observed one
        gaps = np.concatenate([gaps[1:n_observed], gaps[:1]]) if total > 1 else gaps

    span = int(gaps.sum())
    last_lookback = int(rng.integers(1, config.max_span_days - span + 1))
    last_day = index_day - last_lookback
    days = last_day - np.concatenate([np.cumsum(gaps[::-1])[::-1], [0]])
    visits = [Visit(day=int(day), codes=sorted(c)) for day, c in zip(days, codes)]

    if config.task == TaskEnum.esm:
        labels = [[k for k in sorted(visits[j + 1].codes) if k < config.diagnosis_codes] for j in range(n_observed)]
        return visits[:n_observed], labels
    return visits, [[0] if role == RoleEnum.case else []]


def _patient(rng, sampler, config, patient_id, role, sex, age_band, index_day) -> PatientRecord:
    visits, labels = _history(rng, sampler, config, role, index_day)
    return PatientRecord(
        patient_id=patient_id,
        task=config.task,
        n_labels=config.diagnosis_codes if config.task == TaskEnum.esm else 1,
        visits=visits,
        labels=labels,
        role=role,
        sex=sex,
        age_band=age_band,
        index_day=index_day,
    )


def generate_cohort(config: CohortConfig) -> Cohort:
    """Cases, a demographically matched candidate pool and greedy matching; a pure function of config"""
    validate_config(config)
    rng = np.random.default_rng(config.seed)
    sampler = _VisitSampler(config, rng)
    span = config.max_span_days

    cases, candidates = [], []
    for c in range(config.n_cases):
        sex = str(rng.choice(SEXES))
        age_band = str(rng.choice(AGE_BANDS))
        index_day = int(rng.integers(span, span + 2 * 365))
        cases.append(_patient(rng, sampler, config, f"P{c:06d}", RoleEnum.case, sex, age_band, index_day))
        for _ in range(config.controls_per_case):
            pid = f"P{config.n_cases + len(candidates):06d}"
            candidates.append(_patient(rng, sampler, config, pid, RoleEnum.control, sex, age_band, span))

    cohort = assign_case_control(cases + candidates, config.controls_per_case)
    cohort.vocab = default_vocabulary(config)
    logger.info("generated %d cases and %d controls (%s motif, %s task)",
                len(cases), len(cohort) - len(cases), config.motif_kind, config.task.value)
    return cohort


def assign_case_control(patients: Sequence[PatientRecord], ratio: int,
                        keys: Iterable[str] = MATCHING_KEYS) -> Cohort:
    """Greedy matching without replacement: each case, in patient_id order, takes up to ratio
    unused eligible controls with identical matching attributes, lowest patient_id first.
    Matched controls inherit the case's index date; their visits shift with it."""
    if ratio < 1:
        raise ArgumentError("matching ratio must be at least 1")
    keys = tuple(keys)
    for patient in patients:
        if any(getattr(patient, key) is None for key in keys):
            raise ArgumentError(f"patient {patient.patient_id} lacks matching attributes {keys}")

    cases = sorted((p for p in patients if p.role == RoleEnum.case), key=lambda p: p.patient_id)
    pool = sorted((p for p in patients if p.role != RoleEnum.case), key=lambda p: p.patient_id)
    buckets: Dict[tuple, List[PatientRecord]] = {}
    for candidate in pool:
        buckets.setdefault(tuple(getattr(candidate, k) for k in keys), []).append(candidate)

    matched = []
    for case in cases:
        key = tuple(getattr(case, k) for k in keys)
        bucket = buckets.get(key, [])
        chosen, buckets[key] = bucket[:ratio], bucket[ratio:]
        for control in chosen:
            matched.append(_rematch(control, case))
        if len(chosen) < ratio:
            logger.debug("case %s matched %d of %d controls", case.patient_id, len(chosen), ratio)

    records = sorted(cases + matched, key=lambda p: p.patient_id)
    return Cohort(records=records)


def _rematch(control: PatientRecord, case: PatientRecord) -> PatientRecord:
    shift = 0
    if case.index_day is not None and control.index_day is not None:
        shift = case.index_day - control.index_day
    visits = [v.copy(update={"day": v.day + shift}) for v in control.visits]
    return control.copy(update={
        "role": RoleEnum.control,
        "case_id": case.patient_id,
        "index_day": case.index_day,
        "visits": visits,
    })


def split_sizes(n: int) -> Tuple[int, int, int]:
    train = math.floor(SPLIT_FRACTIONS[0] * n)
    valid = math.floor(SPLIT_FRACTIONS[1] * n)
    return train, valid, n - train - valid


def split(cohort: Cohort, seed: int = 0) -> Cohort:
    """Seeded 0.75/0.10/remainder split of patients; matched groups are split independently"""
    n = len(cohort)
    if n < 3:
        raise ArgumentError(f"need at least 3 patients to split, got {n}")
    ids = sorted(cohort.patient_ids)
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_valid, _ = split_sizes(n)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            assignment[ids[idx]] = SplitEnum.train
        elif rank < n_train + n_valid:
            assignment[ids[idx]] = SplitEnum.valid
        else:
            assignment[ids[idx]] = SplitEnum.test
    records = [r.copy(update={"split": assignment[r.patient_id]}) for r in cohort.records]
    return Cohort(records=records, vocab=cohort.vocab)


def motif_label(record: PatientRecord, config: CohortConfig) -> int:
    """The generating rule itself: 1 iff the risk motif is present"""
    risk = set(config.risk_codes)
    if config.motif_kind == "gap":
        last_day = record.visits[-1].day
        return int(any(risk & set(v.codes) for v in record.visits if last_day - v.day <= config.gap_days))
    recent = record.visits[-config.motif_window:]
    return int(any(risk & set(v.codes) for v in recent))


def oracle_scores(records: Sequence[PatientRecord], config: CohortConfig) -> np.ndarray:
    return np.array([float(motif_label(r, config)) for r in records])
