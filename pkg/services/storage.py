import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from pydantic import ValidationError

from models import ModelParams
from schemas import CheckpointDocument, Cohort, EpochRecord, EvalReport, PatientRecord, RunManifest, Vocabulary
from services.errors import RecordParseError, StorageError

logger = logging.getLogger(__name__)

STDOUT = "-"
CHECKPOINT_FORMAT_VERSION = 1
RECORD_FIELDS = ("patient_id", "role", "index_day", "split", "visits", "labels",
                 "sex", "age_band", "case_id", "task", "n_labels")

PathLike = Union[str, Path]


class StorageService:
    """Local filesystem storage for cohorts, checkpoints and reports.

    Relative paths resolve under RETAIN_DATA_DIR (default: the working
    directory). The path "-" means stdout for writes.
    """

    def __init__(self, base_dir: Optional[PathLike] = None):
        self.base_path = Path(base_dir or os.getenv("RETAIN_DATA_DIR") or ".")

    def resolve(self, path: PathLike) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_path / path

    def save_bytes(self, path: PathLike, data: bytes) -> str:
        """Save bytes and return the resolved path"""
        if str(path) == STDOUT:
            sys.stdout.write(data.decode("utf-8"))
            sys.stdout.flush()
            return STDOUT
        full_path = self.resolve(path)
        try:
            full_path.parent.mkdir(parents=True, exist_ok=True)
            with open(full_path, "wb") as f:
                f.write(data)
        except OSError as e:
            logger.error(f"❌ Storage save failed for {full_path}: {e}")
            raise StorageError(f"Failed to save {full_path}: {e}") from e
        logger.debug(f"💾 Saved {len(data)} bytes to {full_path}")
        return str(full_path)

    def save_text(self, path: PathLike, text: str) -> str:
        return self.save_bytes(path, text.encode("utf-8"))

    def open(self, path: PathLike) -> bytes:
        """Read bytes from storage"""
        full_path = self.resolve(path)
        try:
            with open(full_path, "rb") as f:
                data = f.read()
        except OSError as e:
            logger.error(f"❌ Storage read failed for {full_path}: {e}")
            raise StorageError(f"Failed to read {full_path}: {e}") from e
        logger.debug(f"📖 Read {len(data)} bytes from {full_path}")
        return data

    def read_text(self, path: PathLike) -> str:
        return self.open(path).decode("utf-8")

    def exists(self, path: PathLike) -> bool:
        return self.resolve(path).exists()


def _service(storage: Optional[StorageService]) -> StorageService:
    return storage or StorageService()


# Records

def record_to_line(record: PatientRecord) -> str:
    visits = []
    for visit in record.visits:
        entry: Dict[str, Any] = {"day": visit.day, "codes": list(visit.codes)}
        if visit.values is not None:
            entry["values"] = list(visit.values)
        visits.append(entry)
    raw = {
        "patient_id": record.patient_id,
        "role": record.role.value if record.role else None,
        "index_day": record.index_day,
        "split": record.split.value if record.split else None,
        "visits": visits,
        "labels": [list(step) for step in record.labels],
        "sex": record.sex,
        "age_band": record.age_band,
        "case_id": record.case_id,
        "task": record.task.value,
        "n_labels": record.n_labels,
    }
    return json.dumps({key: raw[key] for key in RECORD_FIELDS}, ensure_ascii=False, separators=(",", ":"))


def write_records(cohort: Union[Cohort, Sequence[PatientRecord]], path: PathLike,
                  storage: Optional[StorageService] = None) -> str:
    """One JSON object per line; an empty cohort gives an empty file"""
    records = cohort.records if isinstance(cohort, Cohort) else list(cohort)
    text = "".join(record_to_line(r) + "\n" for r in records)
    return _service(storage).save_text(path, text)


def parse_records(text: str) -> List[PatientRecord]:
    records = []
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as e:
            raise RecordParseError(f"invalid JSON ({e.msg})", line_number) from e
        if not isinstance(raw, dict):
            raise RecordParseError("expected a JSON object", line_number)
        try:
            records.append(PatientRecord.parse_obj(raw))
        except ValidationError as e:
            raise RecordParseError(str(e).replace("\n", " "), line_number) from e
    return records


def read_records(path: PathLike, storage: Optional[StorageService] = None,
                 vocab: Optional[Vocabulary] = None) -> Cohort:
    return Cohort(records=parse_records(_service(storage).read_text(path)), vocab=vocab)


def write_vocabulary(vocab: Vocabulary, path: PathLike, storage: Optional[StorageService] = None) -> str:
    return _service(storage).save_text(path, json.dumps(vocab.groups, ensure_ascii=False, indent=2) + "\n")


def read_vocabulary(path: PathLike, storage: Optional[StorageService] = None) -> Vocabulary:
    try:
        return Vocabulary(groups=json.loads(_service(storage).read_text(path)))
    except (json.JSONDecodeError, ValidationError) as e:
        raise StorageError(f"invalid vocabulary file {path}: {e}") from e


# Checkpoints

def checkpoint_document(params: ModelParams) -> CheckpointDocument:
    return CheckpointDocument(
        format_version=CHECKPOINT_FORMAT_VERSION,
        model_kind=params.kind,
        dims=params.dims,
        task=params.task,
        activation=params.activation,
        timestamped=params.timestamped,
        params={name: tensor.tolist() for name, tensor in params},
    )


def save_checkpoint(params: ModelParams, path: PathLike, storage: Optional[StorageService] = None) -> str:
    """Full-precision JSON; float repr makes the round trip bit-exact"""
    return _service(storage).save_text(path, checkpoint_document(params).json() + "\n")


def params_from_document(document: CheckpointDocument) -> ModelParams:
    if document.format_version != CHECKPOINT_FORMAT_VERSION:
        raise StorageError(f"unsupported checkpoint format version {document.format_version}")
    tensors = {name: np.array(value, dtype=np.float64) for name, value in document.params.items()}
    return ModelParams(document.model_kind, document.dims, document.task, document.activation, tensors)


def load_checkpoint(path: PathLike, storage: Optional[StorageService] = None) -> ModelParams:
    text = _service(storage).read_text(path)
    try:
        document = CheckpointDocument.parse_raw(text)
    except ValidationError as e:
        raise StorageError(f"invalid checkpoint {path}: {e}") from e
    return params_from_document(document)


# Reports and tables

def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return output.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]],
              storage: Optional[StorageService] = None) -> str:
    return _service(storage).save_text(path, csv_text(header, rows))


def read_csv(path: PathLike, storage: Optional[StorageService] = None) -> List[Dict[str, str]]:
    return list(csv.DictReader(io.StringIO(_service(storage).read_text(path))))


def write_loss_csv(history: Sequence[EpochRecord], path: PathLike, storage: Optional[StorageService] = None) -> str:
    rows = [[h.epoch, h.train_nll, "" if h.valid_nll is None else h.valid_nll] for h in history]
    return write_csv(path, ["epoch", "train_nll", "valid_nll"], rows, storage)


def write_json(path: PathLike, payload: Any, storage: Optional[StorageService] = None) -> str:
    return _service(storage).save_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def write_report(report: EvalReport, path: PathLike, storage: Optional[StorageService] = None,
                 include_timings: bool = False) -> str:
    """Report JSON; wall-clock timings are left out unless asked for so reruns stay byte-identical"""
    exclude = None if include_timings else {"train_seconds", "test_seconds"}
    return _service(storage).save_text(path, report.json(indent=2, exclude=exclude) + "\n")


def read_report(path: PathLike, storage: Optional[StorageService] = None) -> EvalReport:
    return EvalReport.parse_raw(_service(storage).read_text(path))


def manifest_path(output_path: PathLike) -> str:
    return f"{output_path}.manifest.json"


def write_manifest(manifest: RunManifest, output_path: PathLike, storage: Optional[StorageService] = None) -> Optional[str]:
    """Write <output>.manifest.json next to the main output; skipped for stdout"""
    if str(output_path) == STDOUT:
        return None
    return _service(storage).save_text(manifest_path(output_path), manifest.json(indent=2, sort_keys=True) + "\n")
