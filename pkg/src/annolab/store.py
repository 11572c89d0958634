"""File-backed persistence: versioned records, content-addressed blobs, job logs.

One directory per entity kind under records/, blobs under a two-level
content-addressed tree, one append-only log file per job. All writes are
atomic at the file level (temp file + rename), so a reopened store always
sees every operation that returned. Optimistic versioning: every record
carries a monotonically increasing version and writes may state the
version they expect; a mismatch rejects the whole transaction with no
partial effects.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

from annolab.model import TERMINAL_JOB_STATUSES, JobStatus

ENTITY_KINDS = ("model", "job", "dataset", "user")


class StoreError(Exception):
    pass


class NotFound(StoreError):
    def __init__(self, kind: str, entity_id: str):
        super().__init__(f"{kind} {entity_id!r} not found")
        self.kind = kind
        self.entity_id = entity_id


class VersionConflict(StoreError):
    def __init__(self, kind: str, entity_id: str, expected: int, actual: int):
        super().__init__(
            f"{kind} {entity_id!r}: expected version {expected}, found {actual}"
        )
        self.kind = kind
        self.entity_id = entity_id
        self.expected = expected
        self.actual = actual


class ContiguityError(StoreError):
    def __init__(self, job_id: str, expected: int, got: int):
        super().__init__(
            f"log for job {job_id!r}: append at offset {got}, current length {expected}"
        )
        self.job_id = job_id
        self.expected = expected
        self.got = got


class BlobCorrupt(StoreError):
    def __init__(self, blob_id: str, message: str):
        super().__init__(f"blob {blob_id}: {message}")
        self.blob_id = blob_id


@dataclass(frozen=True)
class BlobRef:
    blob_id: str
    size: int


@dataclass(frozen=True)
class VersionedRecord:
    kind: str
    entity_id: str
    version: int
    payload: dict[str, Any]


# --- transaction ops ---------------------------------------------------------


@dataclass(frozen=True)
class PutOp:
    kind: str
    entity_id: str
    payload: dict[str, Any]
    expected_version: Optional[int] = None  # None: unconditional; 0: must not exist


@dataclass(frozen=True)
class GetOp:
    kind: str
    entity_id: str


@dataclass(frozen=True)
class DeleteOp:
    kind: str
    entity_id: str
    expected_version: Optional[int] = None


@dataclass(frozen=True)
class ListOp:
    kind: str
    owner: Optional[str] = None
    visibility: Optional[str] = None


Op = Union[PutOp, GetOp, DeleteOp, ListOp]

_TOMBSTONE = object()


def _referenced_blobs(kind: str, payload: dict[str, Any]) -> set[str]:
    """Blob ids a record payload points at (the store owns these shapes)."""
    refs: set[str] = set()
    if kind == "model" and payload.get("artifact"):
        refs.add(payload["artifact"])
    elif kind == "dataset" and payload.get("blob"):
        refs.add(payload["blob"])
    elif kind == "job":
        for key in ("result", "input_ref"):
            if payload.get(key):
                refs.add(payload[key])
    return refs


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


class Store:
    """Single-node durable store; all operations are thread-safe."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self._records_dir = self.root / "records"
        self._blobs_dir = self.root / "blobs"
        self._logs_dir = self.root / "logs"
        for kind in ENTITY_KINDS:
            (self._records_dir / kind).mkdir(parents=True, exist_ok=True)
        self._blobs_dir.mkdir(parents=True, exist_ok=True)
        self._logs_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._records: dict[tuple[str, str], VersionedRecord] = {}
        self._load()

    def _load(self) -> None:
        for kind in ENTITY_KINDS:
            for path in (self._records_dir / kind).glob("*.json"):
                doc = json.loads(path.read_text("utf-8"))
                record = VersionedRecord(
                    kind=kind,
                    entity_id=path.stem,
                    version=doc["version"],
                    payload=doc["payload"],
                )
                self._records[(kind, path.stem)] = record

    # --- versioned records ---------------------------------------------------

    def _record_path(self, kind: str, entity_id: str) -> Path:
        return self._records_dir / kind / f"{entity_id}.json"

    def transact(self, ops: list[Op]) -> list[Any]:
        """Apply ops in order, all-or-nothing.

        Preconditions for every op are checked against the evolving state
        before anything is written, so a failure leaves no partial effects.
        """
        with self._lock:
            overlay: dict[tuple[str, str], Any] = {}
            results: list[Any] = []
            writes: list[tuple[tuple[str, str], Optional[VersionedRecord]]] = []

            def effective(key: tuple[str, str]) -> Optional[VersionedRecord]:
                if key in overlay:
                    value = overlay[key]
                    return None if value is _TOMBSTONE else value
                return self._records.get(key)

            for op in ops:
                if isinstance(op, GetOp):
                    record = effective((op.kind, op.entity_id))
                    if record is None:
                        raise NotFound(op.kind, op.entity_id)
                    results.append(record)
                elif isinstance(op, ListOp):
                    keys = {k for k in self._records if k[0] == op.kind}
                    keys |= {k for k in overlay if k[0] == op.kind}
                    rows = []
                    for key in sorted(keys):
                        record = effective(key)
                        if record is None:
                            continue
                        if op.owner is not None and record.payload.get("owner") != op.owner:
                            continue
                        if (
                            op.visibility is not None
                            and record.payload.get("visibility") != op.visibility
                        ):
                            continue
                        rows.append(record)
                    results.append(rows)
                elif isinstance(op, PutOp):
                    if op.kind not in ENTITY_KINDS:
                        raise StoreError(f"unknown entity kind {op.kind!r}")
                    key = (op.kind, op.entity_id)
                    current = effective(key)
                    current_version = current.version if current else 0
                    if op.expected_version is not None and op.expected_version != current_version:
                        raise VersionConflict(
                            op.kind, op.entity_id, op.expected_version, current_version
                        )
                    record = VersionedRecord(
                        kind=op.kind,
                        entity_id=op.entity_id,
                        version=current_version + 1,
                        payload=op.payload,
                    )
                    overlay[key] = record
                    writes.append((key, record))
                    results.append(record)
                elif isinstance(op, DeleteOp):
                    key = (op.kind, op.entity_id)
                    current = effective(key)
                    if current is None:
                        raise NotFound(op.kind, op.entity_id)
                    if op.expected_version is not None and op.expected_version != current.version:
                        raise VersionConflict(
                            op.kind, op.entity_id, op.expected_version, current.version
                        )
                    overlay[key] = _TOMBSTONE
                    writes.append((key, None))
                    results.append(None)
                else:
                    raise StoreError(f"unknown op {op!r}")

            for (kind, entity_id), record in writes:
                path = self._record_path(kind, entity_id)
                if record is None:
                    path.unlink(missing_ok=True)
                    self._records.pop((kind, entity_id), None)
                else:
                    _atomic_write(
                        path,
                        json.dumps(
                            {"version": record.version, "payload": record.payload}
                        ).encode("utf-8"),
                    )
                    self._records[(kind, entity_id)] = record
            return results

    # Convenience single-op wrappers.

    def get(self, kind: str, entity_id: str) -> VersionedRecord:
        return self.transact([GetOp(kind, entity_id)])[0]

    def put(
        self,
        kind: str,
        entity_id: str,
        payload: dict[str, Any],
        expected_version: Optional[int] = None,
    ) -> VersionedRecord:
        return self.transact([PutOp(kind, entity_id, payload, expected_version)])[0]

    def delete(self, kind: str, entity_id: str, expected_version: Optional[int] = None) -> None:
        self.transact([DeleteOp(kind, entity_id, expected_version)])

    def list_records(
        self, kind: str, owner: Optional[str] = None, visibility: Optional[str] = None
    ) -> list[VersionedRecord]:
        return self.transact([ListOp(kind, owner, visibility)])[0]

    def exists(self, kind: str, entity_id: str) -> bool:
        with self._lock:
            return (kind, entity_id) in self._records

    # --- blobs -----------------------------------------------------------------

    def _blob_path(self, blob_id: str) -> Path:
        return self._blobs_dir / blob_id[:2] / blob_id

    def blob_put(self, data: bytes) -> BlobRef:
        blob_id = hashlib.sha256(data).hexdigest()
        path = self._blob_path(blob_id)
        with self._lock:
            if path.exists():
                existing = path.read_bytes()
                if existing != data:
                    raise BlobCorrupt(blob_id, "digest collision with different bytes")
            else:
                path.parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(path, data)
        return BlobRef(blob_id=blob_id, size=len(data))

    def blob_get(self, ref: Union[BlobRef, str]) -> bytes:
        blob_id = ref.blob_id if isinstance(ref, BlobRef) else ref
        path = self._blob_path(blob_id)
        with self._lock:
            if not path.exists():
                raise NotFound("blob", blob_id)
            data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != blob_id:
            raise BlobCorrupt(blob_id, "stored bytes do not match digest")
        return data

    def blob_delete(self, ref: Union[BlobRef, str]) -> None:
        blob_id = ref.blob_id if isinstance(ref, BlobRef) else ref
        with self._lock:
            self._blob_path(blob_id).unlink(missing_ok=True)

    def blob_exists(self, ref: Union[BlobRef, str]) -> bool:
        blob_id = ref.blob_id if isinstance(ref, BlobRef) else ref
        return self._blob_path(blob_id).exists()

    # --- job logs ----------------------------------------------------------------

    def _log_path(self, job_id: str) -> Path:
        return self._logs_dir / f"{job_id}.log"

    def append_log(self, job_id: str, offset: int, data: bytes) -> int:
        """Append a chunk whose offset must equal the current log length.

        Returns the new length.
        """
        with self._lock:
            path = self._log_path(job_id)
            length = path.stat().st_size if path.exists() else 0
            if offset != length:
                raise ContiguityError(job_id, expected=length, got=offset)
            with open(path, "ab") as handle:
                handle.write(data)
                handle.flush()
                os.fsync(handle.fileno())
            return length + len(data)

    def read_log(self, job_id: str, offset: int) -> tuple[bytes, int, bool]:
        """Log bytes from offset to end, the next offset, and whether the
        job is terminal. Reading past the end yields an empty payload at
        the same offset."""
        with self._lock:
            job = self._records.get(("job", job_id))
            if job is None:
                raise NotFound("job", job_id)
            finished = JobStatus(job.payload["status"]) in TERMINAL_JOB_STATUSES
            path = self._log_path(job_id)
            data = path.read_bytes() if path.exists() else b""
        if offset >= len(data):
            return b"", offset, finished
        return data[offset:], len(data), finished

    def delete_log(self, job_id: str) -> None:
        with self._lock:
            self._log_path(job_id).unlink(missing_ok=True)

    def log_length(self, job_id: str) -> int:
        with self._lock:
            path = self._log_path(job_id)
            return path.stat().st_size if path.exists() else 0

    # --- deletion cascade ----------------------------------------------------------

    def purge_model_cascade(self, model_id: str) -> list[str]:
        """Delete a model with everything that is only its own.

        Removes the model record and artifact blob, the training jobs that
        produced it along with their logs, and any datasets (records and
        blobs) no other surviving model references. Fine-tuned descendants
        survive with a dangling parent pointer. Returns all deleted entity
        and blob ids.
        """
        with self._lock:
            key = ("model", model_id)
            model = self._records.get(key)
            if model is None:
                raise NotFound("model", model_id)

            train_jobs = [
                record
                for (kind, _), record in self._records.items()
                if kind == "job"
                and record.payload.get("model_id") == model_id
                and record.payload.get("kind") == "train"
            ]
            dataset_ids = list(model.payload.get("dataset_ids") or [])
            surviving_models = [
                record
                for (kind, other_id), record in self._records.items()
                if kind == "model" and other_id != model_id
            ]
            doomed_datasets = [
                dataset_id
                for dataset_id in dataset_ids
                if ("dataset", dataset_id) in self._records
                and not any(
                    dataset_id in (m.payload.get("dataset_ids") or [])
                    for m in surviving_models
                )
            ]

            doomed_records: list[VersionedRecord] = [model]
            doomed_records.extend(train_jobs)
            doomed_records.extend(self._records[("dataset", d)] for d in doomed_datasets)

            candidate_blobs: set[str] = set()
            for record in doomed_records:
                candidate_blobs |= _referenced_blobs(record.kind, record.payload)

            deleted: list[str] = []
            for record in doomed_records:
                self.transact([DeleteOp(record.kind, record.entity_id)])
                deleted.append(record.entity_id)
            for job in train_jobs:
                self.delete_log(job.entity_id)

            still_referenced: set[str] = set()
            for record in self._records.values():
                still_referenced |= _referenced_blobs(record.kind, record.payload)
            for blob_id in sorted(candidate_blobs - still_referenced):
                if self.blob_exists(blob_id):
                    self.blob_delete(blob_id)
                    deleted.append(blob_id)
            return deleted

    def orphan_blobs(self) -> set[str]:
        """Blob ids on disk that no record references (diagnostic sweep)."""
        with self._lock:
            referenced: set[str] = set()
            for record in self._records.values():
                referenced |= _referenced_blobs(record.kind, record.payload)
            on_disk = {path.name for path in self._blobs_dir.glob("*/*") if path.is_file()}
            return on_disk - referenced
