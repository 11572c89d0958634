"""Core entity types, identifier discipline, and job state-machine validation.

Everything here is a pure value or a pure function; no persistence, no
authorization, no clock access. Timestamps are integer milliseconds since
the Unix epoch and are assigned by the server layer only.
"""

from __future__ import annotations

import re
import secrets
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Union
from urllib.parse import urlsplit

PLUGIN_ID_RE = re.compile(r"^[a-z0-9_-]+$")
SEMVER_RE = re.compile(r"^\d+\.\d+\.\d+(?:[-+][0-9A-Za-z.\-+]+)?$")
LANGUAGE_RE = re.compile(r"^[a-z]{2,3}(?:[_-][A-Za-z0-9]{2,8})?$")
TOKEN_RE = re.compile(r"^[0-9a-f]{64}$")

MANIFEST_FILENAME = "plugin.manifest.json"

DEFAULT_MAX_ATTEMPTS = 3


def new_id(prefix: str) -> str:
    """Opaque unique id with a short kind prefix for log readability."""
    return f"{prefix}_{secrets.token_hex(8)}"


def new_token() -> str:
    """64 hex chars, unguessable."""
    return secrets.token_hex(32)


class TaskKind(str, Enum):
    PREDICT = "predict"
    TRAIN = "train"


class InputKind(str, Enum):
    TEXT_LINES = "text_lines"
    TEXT_PAIRS = "text_pairs"
    WAV_AUDIO = "wav_audio"
    EMBEDDING_WINDOWS = "embedding_windows"
    ENROLLMENT_ANNOTATIONS = "enrollment_annotations"


class OutputKind(str, Enum):
    TEXT_LINES = "text_lines"
    SEGMENTS = "segments"
    MODEL_ARTIFACT = "model_artifact"


class ExecutionMode(str, Enum):
    IN_PROCESS = "in_process"
    EXTERNAL = "external"


class Visibility(str, Enum):
    PRIVATE = "private"
    PUBLIC = "public"


class ModelStatus(str, Enum):
    READY = "ready"
    TRAINING = "training"
    FAILED = "failed"


class JobStatus(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    CANCELLED = "cancelled"


TERMINAL_JOB_STATUSES = frozenset(
    {JobStatus.SUCCEEDED, JobStatus.FAILED, JobStatus.CANCELLED}
)


class DatasetFormat(str, Enum):
    TEXT_PAIRS_JSONL = "text_pairs_jsonl"
    ENROLLMENT_JSON = "enrollment_json"
    EMBEDDING_WINDOWS_JSON = "embedding_windows_json"


class Role(str, Enum):
    USER = "user"
    ADMIN = "admin"
    WORKER = "worker"


# Dataset formats a task input kind will accept for training uploads.
FORMAT_FOR_INPUT_KIND = {
    InputKind.TEXT_PAIRS: DatasetFormat.TEXT_PAIRS_JSONL,
    InputKind.ENROLLMENT_ANNOTATIONS: DatasetFormat.ENROLLMENT_JSON,
    InputKind.EMBEDDING_WINDOWS: DatasetFormat.EMBEDDING_WINDOWS_JSON,
}


class ManifestError(ValueError):
    """Raised on the first violated manifest rule; `rule` is machine-readable."""

    def __init__(self, rule: str, message: str) -> None:
        super().__init__(message)
        self.rule = rule


class InvalidTransition(ValueError):
    """Rejected job state transition, naming current status and event."""

    def __init__(self, status: JobStatus, event: str) -> None:
        super().__init__(f"event {event!r} is not valid in status {status.value!r}")
        self.status = status
        self.event = event


class LineageError(ValueError):
    def __init__(self, kind: str, model_id: str) -> None:
        super().__init__(f"{kind} at model {model_id!r}")
        self.kind = kind
        self.model_id = model_id


@dataclass(frozen=True)
class TaskSpec:
    task_name: str
    kind: TaskKind
    input_kind: InputKind
    output_kind: OutputKind
    queue_class: str
    supports_finetune: bool
    languages: tuple[str, ...]

    def to_doc(self) -> dict[str, Any]:
        return {
            "task_name": self.task_name,
            "kind": self.kind.value,
            "input_kind": self.input_kind.value,
            "output_kind": self.output_kind.value,
            "queue_class": self.queue_class,
            "supports_finetune": self.supports_finetune,
            "languages": list(self.languages),
        }


@dataclass(frozen=True)
class PluginManifest:
    plugin_id: str
    version: str
    execution: ExecutionMode
    tasks: tuple[TaskSpec, ...]
    external_url: Optional[str] = None

    def task(self, task_name: str) -> Optional[TaskSpec]:
        for t in self.tasks:
            if t.task_name == task_name:
                return t
        return None

    def train_task(self) -> Optional[TaskSpec]:
        for t in self.tasks:
            if t.kind is TaskKind.TRAIN:
                return t
        return None

    def to_doc(self) -> dict[str, Any]:
        execution: Any = self.execution.value
        if self.execution is ExecutionMode.EXTERNAL:
            execution = {"mode": "external", "url": self.external_url}
        return {
            "plugin_id": self.plugin_id,
            "version": self.version,
            "execution": execution,
            "tasks": [t.to_doc() for t in self.tasks],
        }


def _is_absolute_http_url(url: str) -> bool:
    try:
        parts = urlsplit(url)
    except ValueError:
        return False
    return parts.scheme in ("http", "https") and bool(parts.netloc)


def _parse_task(raw: Any, index: int) -> TaskSpec:
    if not isinstance(raw, dict):
        raise ManifestError("malformed_task", f"task #{index} is not an object")

    def want(key: str) -> Any:
        if key not in raw:
            raise ManifestError("missing_field", f"task #{index} is missing {key!r}")
        return raw[key]

    name = want("task_name")
    if not isinstance(name, str) or not name:
        raise ManifestError("malformed_task_name", f"task #{index} has an empty name")
    try:
        kind = TaskKind(want("kind"))
        input_kind = InputKind(want("input_kind"))
        output_kind = OutputKind(want("output_kind"))
    except ValueError as exc:
        raise ManifestError("unknown_enum", f"task {name!r}: {exc}") from exc
    queue_class = want("queue_class")
    if not isinstance(queue_class, str) or not queue_class:
        raise ManifestError("empty_queue_class", f"task {name!r} has an empty queue_class")
    supports_finetune = want("supports_finetune")
    if not isinstance(supports_finetune, bool):
        raise ManifestError(
            "malformed_supports_finetune", f"task {name!r}: supports_finetune must be a boolean"
        )
    languages = want("languages")
    if not isinstance(languages, list) or not languages:
        raise ManifestError("empty_languages", f"task {name!r} declares no languages")
    for lang in languages:
        if not isinstance(lang, str) or (lang != "*" and not LANGUAGE_RE.match(lang)):
            raise ManifestError(
                "malformed_language", f"task {name!r}: {lang!r} is not an ISO-639 code or '*'"
            )

    if kind is TaskKind.TRAIN and output_kind is not OutputKind.MODEL_ARTIFACT:
        raise ManifestError(
            "train_output_kind", f"train task {name!r} must output model_artifact"
        )
    if kind is TaskKind.PREDICT and output_kind is OutputKind.MODEL_ARTIFACT:
        raise ManifestError(
            "predict_output_kind", f"predict task {name!r} must not output model_artifact"
        )

    return TaskSpec(
        task_name=name,
        kind=kind,
        input_kind=input_kind,
        output_kind=output_kind,
        queue_class=queue_class,
        supports_finetune=supports_finetune,
        languages=tuple(languages),
    )


def validate_manifest(raw: Any) -> PluginManifest:
    """Validate a parsed plugin.manifest.json document.

    Raises ManifestError naming the first violated rule.
    """
    if not isinstance(raw, dict):
        raise ManifestError("malformed_manifest", "manifest must be a JSON object")

    plugin_id = raw.get("plugin_id")
    if not isinstance(plugin_id, str) or not PLUGIN_ID_RE.match(plugin_id):
        raise ManifestError(
            "malformed_plugin_id",
            f"plugin_id {plugin_id!r} must be a nonempty lowercase [a-z0-9_-]+ string",
        )

    version = raw.get("version")
    if not isinstance(version, str) or not SEMVER_RE.match(version):
        raise ManifestError("malformed_version", f"version {version!r} is not semver")

    execution_raw = raw.get("execution")
    external_url: Optional[str] = None
    if execution_raw == ExecutionMode.IN_PROCESS.value:
        execution = ExecutionMode.IN_PROCESS
    elif isinstance(execution_raw, dict) and execution_raw.get("mode") == "external":
        execution = ExecutionMode.EXTERNAL
        external_url = execution_raw.get("url")
        if not isinstance(external_url, str) or not _is_absolute_http_url(external_url):
            raise ManifestError(
                "invalid_external_url",
                f"external execution requires an absolute http(s) URL, got {external_url!r}",
            )
    elif isinstance(execution_raw, dict) and execution_raw.get("mode") == "in_process":
        execution = ExecutionMode.IN_PROCESS
    else:
        raise ManifestError(
            "malformed_execution",
            'execution must be "in_process" or {"mode": "external", "url": ...}',
        )

    tasks_raw = raw.get("tasks")
    if not isinstance(tasks_raw, list) or not tasks_raw:
        raise ManifestError("empty_tasks", "manifest declares no tasks")
    tasks = [_parse_task(t, i) for i, t in enumerate(tasks_raw)]
    seen: set[str] = set()
    for t in tasks:
        if t.task_name in seen:
            raise ManifestError("duplicate_task_name", f"duplicate task name {t.task_name!r}")
        seen.add(t.task_name)

    return PluginManifest(
        plugin_id=plugin_id,
        version=version,
        execution=execution,
        tasks=tuple(tasks),
        external_url=external_url,
    )


@dataclass(frozen=True)
class Lease:
    worker_id: str
    deadline: int

    def to_doc(self) -> dict[str, Any]:
        return {"worker_id": self.worker_id, "deadline": self.deadline}


@dataclass(frozen=True)
class ModelRecord:
    model_id: str
    owner: str
    plugin_id: str
    task_name: str
    created_at: int
    parent_model_id: Optional[str] = None
    dataset_ids: tuple[str, ...] = ()
    visibility: Visibility = Visibility.PRIVATE
    status: ModelStatus = ModelStatus.READY
    artifact: Optional[str] = None
    failure_reason: Optional[str] = None

    def to_doc(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "owner": self.owner,
            "plugin_id": self.plugin_id,
            "task_name": self.task_name,
            "parent_model_id": self.parent_model_id,
            "dataset_ids": list(self.dataset_ids),
            "visibility": self.visibility.value,
            "status": self.status.value,
            "artifact": self.artifact,
            "failure_reason": self.failure_reason,
            "created_at": self.created_at,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "ModelRecord":
        return cls(
            model_id=doc["model_id"],
            owner=doc["owner"],
            plugin_id=doc["plugin_id"],
            task_name=doc["task_name"],
            parent_model_id=doc.get("parent_model_id"),
            dataset_ids=tuple(doc.get("dataset_ids", ())),
            visibility=Visibility(doc.get("visibility", "private")),
            status=ModelStatus(doc["status"]),
            artifact=doc.get("artifact"),
            failure_reason=doc.get("failure_reason"),
            created_at=doc["created_at"],
        )


@dataclass(frozen=True)
class Job:
    job_id: str
    owner: str
    kind: TaskKind
    plugin_id: str
    task_name: str
    queue_class: str
    submitted_at: int
    model_id: Optional[str] = None
    dataset_id: Optional[str] = None
    status: JobStatus = JobStatus.QUEUED
    attempt: int = 1
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    cancel_requested: bool = False
    lease: Optional[Lease] = None
    result: Optional[str] = None
    failure_reason: Optional[str] = None
    input_ref: Optional[str] = None
    params: dict[str, Any] = field(default_factory=dict)
    # FIFO ordering key: submitted_at on first enqueue, reset by restart.
    queued_at: int = -1

    def __post_init__(self) -> None:
        if self.queued_at < 0:
            object.__setattr__(self, "queued_at", self.submitted_at)

    def check_invariants(self) -> None:
        assert (self.lease is not None) == (self.status is JobStatus.RUNNING), (
            f"lease present iff running violated: {self.status} lease={self.lease}"
        )
        assert 1 <= self.attempt <= self.max_attempts, (
            f"attempt {self.attempt} outside [1, {self.max_attempts}]"
        )

    def to_doc(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "owner": self.owner,
            "kind": self.kind.value,
            "plugin_id": self.plugin_id,
            "task_name": self.task_name,
            "model_id": self.model_id,
            "dataset_id": self.dataset_id,
            "queue_class": self.queue_class,
            "status": self.status.value,
            "attempt": self.attempt,
            "max_attempts": self.max_attempts,
            "cancel_requested": self.cancel_requested,
            "submitted_at": self.submitted_at,
            "queued_at": self.queued_at,
            "lease": self.lease.to_doc() if self.lease else None,
            "result": self.result,
            "failure_reason": self.failure_reason,
            "input_ref": self.input_ref,
            "params": self.params,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Job":
        lease_doc = doc.get("lease")
        return cls(
            job_id=doc["job_id"],
            owner=doc["owner"],
            kind=TaskKind(doc["kind"]),
            plugin_id=doc["plugin_id"],
            task_name=doc["task_name"],
            model_id=doc.get("model_id"),
            dataset_id=doc.get("dataset_id"),
            queue_class=doc["queue_class"],
            status=JobStatus(doc["status"]),
            attempt=doc["attempt"],
            max_attempts=doc["max_attempts"],
            cancel_requested=doc.get("cancel_requested", False),
            submitted_at=doc["submitted_at"],
            queued_at=doc.get("queued_at", doc["submitted_at"]),
            lease=Lease(lease_doc["worker_id"], lease_doc["deadline"]) if lease_doc else None,
            result=doc.get("result"),
            failure_reason=doc.get("failure_reason"),
            input_ref=doc.get("input_ref"),
            params=doc.get("params", {}),
        )


@dataclass(frozen=True)
class Dataset:
    dataset_id: str
    owner: str
    task_name: str
    format: DatasetFormat
    item_count: int
    blob: str
    created_at: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "dataset_id": self.dataset_id,
            "owner": self.owner,
            "task_name": self.task_name,
            "format": self.format.value,
            "item_count": self.item_count,
            "blob": self.blob,
            "created_at": self.created_at,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "Dataset":
        return cls(
            dataset_id=doc["dataset_id"],
            owner=doc["owner"],
            task_name=doc["task_name"],
            format=DatasetFormat(doc["format"]),
            item_count=doc["item_count"],
            blob=doc["blob"],
            created_at=doc["created_at"],
        )


@dataclass(frozen=True)
class UserAccount:
    user_id: str
    username: str
    display_name: str
    role: Role
    password_salt: str
    password_hash: str
    created_at: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "username": self.username,
            "display_name": self.display_name,
            "role": self.role.value,
            "password_salt": self.password_salt,
            "password_hash": self.password_hash,
            "created_at": self.created_at,
        }

    @classmethod
    def from_doc(cls, doc: dict[str, Any]) -> "UserAccount":
        return cls(
            user_id=doc["user_id"],
            username=doc["username"],
            display_name=doc["display_name"],
            role=Role(doc["role"]),
            password_salt=doc["password_salt"],
            password_hash=doc["password_hash"],
            created_at=doc["created_at"],
        )


@dataclass(frozen=True)
class LogChunk:
    job_id: str
    offset: int
    payload: bytes


# --- Job state machine -------------------------------------------------------
#
# Events carry the data needed to produce the next Job value, so the
# transition function stays pure and the lease-iff-running invariant is
# enforceable here rather than at every call site.


@dataclass(frozen=True)
class LeaseGranted:
    worker_id: str
    deadline: int


@dataclass(frozen=True)
class CompletedOk:
    result: Optional[str] = None


@dataclass(frozen=True)
class CompletedErr:
    reason: str = "plugin error"


@dataclass(frozen=True)
class CompletedCancelled:
    """Worker acknowledged a cancel request (or aborted on its own)."""


@dataclass(frozen=True)
class LeaseExpired:
    pass


@dataclass(frozen=True)
class Cancel:
    pass


@dataclass(frozen=True)
class Restart:
    pass


Event = Union[
    LeaseGranted, CompletedOk, CompletedErr, CompletedCancelled, LeaseExpired, Cancel, Restart
]

EVENT_NAMES = {
    LeaseGranted: "lease_granted",
    CompletedOk: "completed_ok",
    CompletedErr: "completed_err",
    CompletedCancelled: "completed_cancelled",
    LeaseExpired: "lease_expired",
    Cancel: "cancel",
    Restart: "restart",
}

LEASE_EXPIRED_REASON = "lease expired"


def validate_transition(job: Job, event: Event) -> Job:
    """Apply `event` to `job`, returning the next Job value.

    Raises InvalidTransition for any (status, event) pair outside the table:

        queued  + lease_granted       -> running
        running + completed_ok        -> succeeded
        running + completed_err       -> queued (attempt+1) or failed
        running + lease_expired       -> queued (attempt+1) or failed
        running + completed_cancelled -> cancelled
        queued  + cancel              -> cancelled
        running + cancel              -> running, cancel_requested set
        failed/cancelled + restart    -> queued, attempt reset to 1
    """
    status = job.status
    name = EVENT_NAMES[type(event)]

    if isinstance(event, LeaseGranted):
        if status is not JobStatus.QUEUED:
            raise InvalidTransition(status, name)
        return replace(
            job,
            status=JobStatus.RUNNING,
            lease=Lease(worker_id=event.worker_id, deadline=event.deadline),
        )

    if isinstance(event, CompletedOk):
        if status is not JobStatus.RUNNING:
            raise InvalidTransition(status, name)
        return replace(job, status=JobStatus.SUCCEEDED, lease=None, result=event.result)

    if isinstance(event, (CompletedErr, LeaseExpired)):
        if status is not JobStatus.RUNNING:
            raise InvalidTransition(status, name)
        reason = event.reason if isinstance(event, CompletedErr) else LEASE_EXPIRED_REASON
        if job.attempt < job.max_attempts:
            return replace(
                job, status=JobStatus.QUEUED, lease=None, attempt=job.attempt + 1
            )
        return replace(job, status=JobStatus.FAILED, lease=None, failure_reason=reason)

    if isinstance(event, CompletedCancelled):
        if status is not JobStatus.RUNNING:
            raise InvalidTransition(status, name)
        return replace(job, status=JobStatus.CANCELLED, lease=None)

    if isinstance(event, Cancel):
        if status is JobStatus.QUEUED:
            return replace(job, status=JobStatus.CANCELLED, cancel_requested=True)
        if status is JobStatus.RUNNING:
            return replace(job, cancel_requested=True)
        raise InvalidTransition(status, name)

    if isinstance(event, Restart):
        if status not in (JobStatus.FAILED, JobStatus.CANCELLED):
            raise InvalidTransition(status, name)
        return replace(
            job,
            status=JobStatus.QUEUED,
            attempt=1,
            cancel_requested=False,
            lease=None,
            failure_reason=None,
            result=None,
        )

    raise InvalidTransition(status, name)  # pragma: no cover


def lineage_chain(model_id: str, registry: dict[str, ModelRecord]) -> list[str]:
    """Ordered model ids from `model_id` down to its base model.

    Raises LineageError on a dangling parent reference or a cycle.
    """
    if model_id not in registry:
        raise LineageError("unknown model", model_id)
    chain: list[str] = []
    seen: set[str] = set()
    current: Optional[str] = model_id
    while current is not None:
        if current in seen:
            raise LineageError("cycle detected", current)
        record = registry.get(current)
        if record is None:
            raise LineageError("dangling parent", current)
        seen.add(current)
        chain.append(current)
        current = record.parent_model_id
    return chain
