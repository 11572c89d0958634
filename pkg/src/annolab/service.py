"""Service core: every API behavior behind the HTTP layer.

All authorization, visibility, lifecycle, and worker-protocol logic lives
here against plain Python types, so the HTTP layer stays a thin adapter
and tests can drive the full behavior in-process. Errors are ApiError
values carrying the HTTP status and a machine-readable code.

Visibility rule: resources that exist but belong to someone else answer
404 (indistinguishable from absent, so ids cannot be enumerated); 403 is
reserved for things the caller can see but may not do.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import secrets
from dataclasses import replace
from typing import Any, Optional, Union

from annolab import __version__
from annolab.clock import Clock, SystemClock
from annolab.model import (
    Cancel,
    CompletedCancelled,
    CompletedErr,
    CompletedOk,
    Dataset,
    DatasetFormat,
    FORMAT_FOR_INPUT_KIND,
    InvalidTransition,
    Job,
    JobStatus,
    ModelRecord,
    ModelStatus,
    Role,
    TaskKind,
    Visibility,
    new_id,
    new_token,
)
from annolab.plugins import PluginInputError
from annolab.plugins.diarize import annotations_from_doc, windows_from_doc
from annolab.plugins.postcorrect import parse_text_pairs
from annolab.queue import StaleLease, TaskQueue
from annolab.store import NotFound, Store, VersionConflict
from annolab.worker import ExecutionOutcome, RegisteredPlugin, discover_plugins

logger = logging.getLogger("annolab.service")

MAX_BODY_BYTES = 64 * 1024 * 1024  # 64 MiB upload cap

WORKER_USERNAME = "__worker__"
DEFAULT_ADMIN_USERNAME = "admin"


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _not_found(kind: str) -> ApiError:
    return ApiError(404, "not_found", f"{kind} not found")


def _hash_password(password: str, salt: str) -> str:
    return hashlib.scrypt(
        password.encode("utf-8"), salt=bytes.fromhex(salt), n=2**14, r=8, p=1
    ).hex()


def _hash_token(token: str) -> str:
    return hashlib.sha256(token.encode("ascii")).hexdigest()


class ServiceCore:
    """All API behavior over a store, a queue, and the plugin registry."""

    def __init__(
        self,
        store: Store,
        clock: Optional[Clock] = None,
        lease_duration_ms: int = 60_000,
        plugins_dir: Optional[str] = None,
    ):
        self.store = store
        self.clock = clock if clock is not None else SystemClock()
        self.registry: dict[str, RegisteredPlugin] = discover_plugins(
            plugins_dir, log=logger.warning
        )
        self.queue = TaskQueue(
            store,
            self.clock,
            lease_duration_ms=lease_duration_ms,
            on_transition=self._on_job_transition,
        )

    # --- bootstrap -------------------------------------------------------------

    def bootstrap(
        self,
        admin_username: str = DEFAULT_ADMIN_USERNAME,
        admin_password: Optional[str] = None,
    ) -> dict[str, Any]:
        """Create the admin account, worker service account, and public base
        models if missing. Idempotent; secrets are returned only when newly
        generated (they are stored hashed)."""
        out: dict[str, Any] = {
            "admin_created": False,
            "admin_username": None,
            "admin_password": None,
            "worker_token": None,
            "base_models": [],
        }
        users = {r.payload["username"]: r for r in self.store.list_records("user")}

        admin_record = next(
            (r for r in users.values() if r.payload["role"] == Role.ADMIN.value), None
        )
        if admin_record is None:
            password = admin_password if admin_password is not None else secrets.token_urlsafe(12)
            admin_record = self._create_user_record(
                username=admin_username,
                password=password,
                display_name="Administrator",
                role=Role.ADMIN,
            )
            out["admin_created"] = True
            out["admin_username"] = admin_username
            out["admin_password"] = password
        admin_id = admin_record.payload["user_id"]

        if WORKER_USERNAME not in users:
            token = new_token()
            record = self._create_user_record(
                username=WORKER_USERNAME,
                password=secrets.token_urlsafe(24),
                display_name="Worker service account",
                role=Role.WORKER,
            )
            payload = dict(record.payload)
            payload["token_hashes"] = [_hash_token(token)]
            self.store.put("user", payload["user_id"], payload)
            out["worker_token"] = token

        for plugin in self.registry.values():
            for task in plugin.manifest.tasks:
                if task.kind is not TaskKind.PREDICT:
                    continue
                model_id = f"m_base_{plugin.manifest.plugin_id}_{task.task_name}"
                if self.store.exists("model", model_id):
                    continue
                model = ModelRecord(
                    model_id=model_id,
                    owner=admin_id,
                    plugin_id=plugin.manifest.plugin_id,
                    task_name=task.task_name,
                    created_at=self.clock.now_ms(),
                    visibility=Visibility.PUBLIC,
                    status=ModelStatus.READY,
                )
                self.store.put("model", model_id, model.to_doc(), expected_version=0)
                out["base_models"].append(model_id)
        return out

    # --- users and auth -----------------------------------------------------------

    def _create_user_record(
        self, username: str, password: str, display_name: str, role: Role
    ):
        if not username or not password:
            raise ApiError(400, "invalid_request", "username and password are required")
        for record in self.store.list_records("user"):
            if record.payload["username"] == username:
                raise ApiError(409, "already_exists", f"username {username!r} is taken")
        user_id = new_id("u")
        salt = secrets.token_hex(16)
        payload = {
            "user_id": user_id,
            "username": username,
            "display_name": display_name or username,
            "role": role.value,
            "password_salt": salt,
            "password_hash": _hash_password(password, salt),
            "created_at": self.clock.now_ms(),
            "token_hashes": [],
        }
        return self.store.put("user", user_id, payload, expected_version=0)

    def create_user(
        self,
        caller: dict[str, Any],
        username: str,
        password: str,
        display_name: str = "",
        role: str = "user",
    ) -> dict[str, Any]:
        if caller["role"] != Role.ADMIN.value:
            raise ApiError(403, "forbidden", "only admins can create users")
        try:
            parsed_role = Role(role)
        except ValueError:
            raise ApiError(400, "invalid_request", f"unknown role {role!r}") from None
        record = self._create_user_record(username, password, display_name, parsed_role)
        return self._public_user_doc(record.payload)

    @staticmethod
    def _public_user_doc(payload: dict[str, Any]) -> dict[str, Any]:
        return {
            "user_id": payload["user_id"],
            "username": payload["username"],
            "display_name": payload["display_name"],
            "role": payload["role"],
            "created_at": payload["created_at"],
        }

    def issue_token(self, username: str, password: str) -> dict[str, Any]:
        if not username or not password:
            raise ApiError(400, "invalid_request", "username and password are required")
        for record in self.store.list_records("user"):
            payload = record.payload
            if payload["username"] != username:
                continue
            if _hash_password(password, payload["password_salt"]) != payload["password_hash"]:
                break
            token = new_token()
            for _ in range(3):
                try:
                    fresh = self.store.get("user", payload["user_id"])
                    updated = dict(fresh.payload)
                    updated["token_hashes"] = list(updated.get("token_hashes", [])) + [
                        _hash_token(token)
                    ]
                    self.store.put(
                        "user", payload["user_id"], updated, expected_version=fresh.version
                    )
                    return {"token": token, "user_id": payload["user_id"]}
                except VersionConflict:
                    continue
            raise ApiError(500, "conflict", "could not persist token")
        raise ApiError(401, "unauthorized", "bad credentials")

    def authenticate(self, token: Optional[str]) -> dict[str, Any]:
        if not token:
            raise ApiError(401, "unauthorized", "missing bearer token")
        token_hash = _hash_token(token)
        for record in self.store.list_records("user"):
            if token_hash in record.payload.get("token_hashes", []):
                return record.payload
        raise ApiError(401, "unauthorized", "invalid token")

    # --- models ------------------------------------------------------------------

    def _load_model(self, model_id: str) -> tuple[ModelRecord, int]:
        try:
            record = self.store.get("model", model_id)
        except NotFound:
            raise _not_found("model") from None
        return ModelRecord.from_doc(record.payload), record.version

    def _visible_model(self, caller: dict[str, Any], model_id: str) -> ModelRecord:
        model, _ = self._load_model(model_id)
        if model.owner != caller["user_id"] and model.visibility is not Visibility.PUBLIC:
            raise _not_found("model")
        return model

    def _model_doc(self, model: ModelRecord) -> dict[str, Any]:
        doc = model.to_doc()
        doc["lineage"] = self._lineage_of(model)
        return doc

    def _lineage_of(self, model: ModelRecord) -> list[str]:
        chain = [model.model_id]
        seen = {model.model_id}
        current = model
        while current.parent_model_id:
            parent_id = current.parent_model_id
            if parent_id in seen:
                break  # defensive: cycles cannot normally be created
            try:
                record = self.store.get("model", parent_id)
            except NotFound:
                chain.append(f"missing:{parent_id}")
                break
            chain.append(parent_id)
            seen.add(parent_id)
            current = ModelRecord.from_doc(record.payload)
        return chain

    def list_models(self, caller: dict[str, Any]) -> list[dict[str, Any]]:
        docs = []
        for record in self.store.list_records("model"):
            model = ModelRecord.from_doc(record.payload)
            if model.owner == caller["user_id"] or model.visibility is Visibility.PUBLIC:
                docs.append(self._model_doc(model))
        docs.sort(key=lambda d: (d["created_at"], d["model_id"]))
        return docs

    def get_model(self, caller: dict[str, Any], model_id: str) -> dict[str, Any]:
        return self._model_doc(self._visible_model(caller, model_id))

    def set_model_visibility(
        self, caller: dict[str, Any], model_id: str, visibility: str
    ) -> dict[str, Any]:
        model = self._visible_model(caller, model_id)
        if model.owner != caller["user_id"]:
            raise ApiError(403, "forbidden", "only the owner can change visibility")
        try:
            parsed = Visibility(visibility)
        except ValueError:
            raise ApiError(400, "invalid_request", f"unknown visibility {visibility!r}") from None
        for _ in range(3):
            current, version = self._load_model(model_id)
            updated = replace(current, visibility=parsed)
            try:
                self.store.put("model", model_id, updated.to_doc(), expected_version=version)
                return self._model_doc(updated)
            except VersionConflict:
                continue
        raise ApiError(500, "conflict", "could not update model")

    def delete_model(self, caller: dict[str, Any], model_id: str) -> dict[str, Any]:
        model = self._visible_model(caller, model_id)
        if model.owner != caller["user_id"]:
            raise ApiError(403, "forbidden", "only the owner can delete a model")
        deleted = self.store.purge_model_cascade(model_id)
        return {"deleted": deleted}

    # --- predict and fine-tune ------------------------------------------------------

    def _plugin_task(self, plugin_id: str, task_name: str):
        plugin = self.registry.get(plugin_id)
        if plugin is None:
            raise ApiError(409, "invalid_state", f"plugin {plugin_id!r} is not registered")
        task = plugin.manifest.task(task_name)
        if task is None:
            raise ApiError(409, "invalid_state", f"task {task_name!r} is not registered")
        return plugin, task

    def predict(
        self,
        caller: dict[str, Any],
        model_id: str,
        inline_input: Optional[str] = None,
        inline_input_b64: Optional[str] = None,
        input_ref: Optional[str] = None,
        params: Optional[dict[str, Any]] = None,
    ) -> dict[str, Any]:
        model = self._visible_model(caller, model_id)
        if model.status is not ModelStatus.READY:
            raise ApiError(409, "invalid_state", f"model is {model.status.value}, not ready")
        _, task = self._plugin_task(model.plugin_id, model.task_name)

        given = [x for x in (inline_input, inline_input_b64, input_ref) if x]
        if len(given) != 1:
            raise ApiError(
                400,
                "invalid_request",
                "exactly one of inline_input, inline_input_b64, input_ref is required",
            )
        if input_ref is not None:
            if not self.store.blob_exists(input_ref):
                raise _not_found("input blob")
            blob_id = input_ref
        else:
            if inline_input_b64 is not None:
                try:
                    data = base64.b64decode(inline_input_b64, validate=True)
                except Exception:
                    raise ApiError(400, "invalid_request", "inline_input_b64 is not base64") from None
            else:
                data = inline_input.encode("utf-8")
            blob_id = self.store.blob_put(data).blob_id

        now = self.clock.now_ms()
        job = Job(
            job_id=new_id("j"),
            owner=caller["user_id"],
            kind=TaskKind.PREDICT,
            plugin_id=model.plugin_id,
            task_name=model.task_name,
            queue_class=task.queue_class,
            submitted_at=now,
            model_id=model.model_id,
            input_ref=blob_id,
            params=params or {},
        )
        self.queue.enqueue(job)
        return {"job_id": job.job_id}

    def finetune(
        self,
        caller: dict[str, Any],
        model_id: str,
        dataset_id: str,
        params: Optional[dict[str, Any]] = None,
    ) -> dict[str, Any]:
        parent = self._visible_model(caller, model_id)
        plugin, predict_task = self._plugin_task(parent.plugin_id, parent.task_name)
        if not predict_task.supports_finetune:
            raise ApiError(400, "invalid_request", "task does not support fine-tuning")
        train_task = plugin.manifest.train_task()
        if train_task is None:
            raise ApiError(400, "invalid_request", "plugin has no training task")

        try:
            record = self.store.get("dataset", dataset_id)
        except NotFound:
            raise _not_found("dataset") from None
        dataset = Dataset.from_doc(record.payload)
        if dataset.owner != caller["user_id"]:
            raise _not_found("dataset")
        expected_format = FORMAT_FOR_INPUT_KIND.get(train_task.input_kind)
        if expected_format is None or dataset.format is not expected_format:
            raise ApiError(
                400,
                "invalid_request",
                f"dataset format {dataset.format.value} does not match "
                f"training input {train_task.input_kind.value}",
            )

        now = self.clock.now_ms()
        child_id = new_id("m")
        dataset_ids = list(parent.dataset_ids) + [dataset_id]
        child = ModelRecord(
            model_id=child_id,
            owner=caller["user_id"],
            plugin_id=parent.plugin_id,
            task_name=parent.task_name,
            created_at=now,
            parent_model_id=parent.model_id,
            dataset_ids=tuple(dataset_ids),
            visibility=Visibility.PRIVATE,
            status=ModelStatus.TRAINING,
        )
        input_blob = self._compose_train_input(dataset_ids, expected_format)
        self.store.put("model", child_id, child.to_doc(), expected_version=0)
        job = Job(
            job_id=new_id("j"),
            owner=caller["user_id"],
            kind=TaskKind.TRAIN,
            plugin_id=parent.plugin_id,
            task_name=train_task.task_name,
            queue_class=train_task.queue_class,
            submitted_at=now,
            model_id=child_id,
            dataset_id=dataset_id,
            input_ref=input_blob,
            params=params or {},
        )
        self.queue.enqueue(job)
        return {"job_id": job.job_id, "new_model_id": child_id}

    def _compose_train_input(self, dataset_ids: list[str], fmt: DatasetFormat) -> str:
        """Bundle lineage datasets into one training input blob.

        Line-record datasets concatenate oldest-first, so later uploads
        override earlier ones wherever training is order-sensitive.
        Single-document formats train from the newest dataset alone.
        """
        blobs = []
        for dataset_id in dataset_ids:
            try:
                record = self.store.get("dataset", dataset_id)
            except NotFound:
                raise ApiError(
                    409, "invalid_state", f"lineage dataset {dataset_id} no longer exists"
                ) from None
            blobs.append(self.store.blob_get(Dataset.from_doc(record.payload).blob))
        if fmt is DatasetFormat.TEXT_PAIRS_JSONL:
            data = b"\n".join(blob.strip(b"\n") for blob in blobs)
        else:
            data = blobs[-1]
        return self.store.blob_put(data).blob_id

    # --- datasets ---------------------------------------------------------------------

    def create_dataset(
        self, caller: dict[str, Any], format_name: str, data: bytes, task_name: str = ""
    ) -> dict[str, Any]:
        try:
            fmt = DatasetFormat(format_name)
        except ValueError:
            raise ApiError(400, "invalid_request", f"unknown dataset format {format_name!r}") from None
        item_count = self._validate_dataset(fmt, data)
        blob = self.store.blob_put(data)
        dataset = Dataset(
            dataset_id=new_id("d"),
            owner=caller["user_id"],
            task_name=task_name,
            format=fmt,
            item_count=item_count,
            blob=blob.blob_id,
            created_at=self.clock.now_ms(),
        )
        self.store.put("dataset", dataset.dataset_id, dataset.to_doc(), expected_version=0)
        return dataset.to_doc()

    @staticmethod
    def _validate_dataset(fmt: DatasetFormat, data: bytes) -> int:
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ApiError(400, "invalid_request", f"dataset is not valid UTF-8: {exc}") from None
        try:
            if fmt is DatasetFormat.TEXT_PAIRS_JSONL:
                return len(parse_text_pairs(text))
            doc = json.loads(text)
            if fmt is DatasetFormat.ENROLLMENT_JSON:
                if not isinstance(doc, dict) or "windows" not in doc or "annotations" not in doc:
                    raise PluginInputError("enrollment document needs windows and annotations")
                windows_from_doc(doc["windows"])
                return len(annotations_from_doc(doc["annotations"]))
            windows = windows_from_doc(doc)
            return len(windows)
        except json.JSONDecodeError as exc:
            raise ApiError(400, "invalid_request", f"dataset is not valid JSON: {exc}") from None
        except PluginInputError as exc:
            raise ApiError(400, "invalid_request", str(exc)) from None

    def _own_dataset(self, caller: dict[str, Any], dataset_id: str) -> tuple[Dataset, int]:
        try:
            record = self.store.get("dataset", dataset_id)
        except NotFound:
            raise _not_found("dataset") from None
        dataset = Dataset.from_doc(record.payload)
        if dataset.owner != caller["user_id"]:
            raise _not_found("dataset")
        return dataset, record.version

    def get_dataset(self, caller: dict[str, Any], dataset_id: str) -> dict[str, Any]:
        dataset, _ = self._own_dataset(caller, dataset_id)
        return dataset.to_doc()

    def list_datasets(self, caller: dict[str, Any]) -> list[dict[str, Any]]:
        rows = [
            Dataset.from_doc(r.payload).to_doc()
            for r in self.store.list_records("dataset", owner=caller["user_id"])
        ]
        rows.sort(key=lambda d: (d["created_at"], d["dataset_id"]))
        return rows

    def delete_dataset(self, caller: dict[str, Any], dataset_id: str) -> dict[str, Any]:
        dataset, _ = self._own_dataset(caller, dataset_id)
        for record in self.store.list_records("model"):
            if dataset_id in (record.payload.get("dataset_ids") or []):
                raise ApiError(
                    409,
                    "invalid_state",
                    f"dataset is referenced by model {record.entity_id}; delete the model first",
                )
        self.store.delete("dataset", dataset_id)
        referenced = any(
            dataset.blob == Dataset.from_doc(r.payload).blob
            for r in self.store.list_records("dataset")
        )
        if not referenced:
            self.store.blob_delete(dataset.blob)
        return {"deleted": dataset_id}

    # --- jobs --------------------------------------------------------------------------

    def _own_job(self, caller: dict[str, Any], job_id: str) -> Job:
        try:
            record = self.store.get("job", job_id)
        except NotFound:
            raise _not_found("job") from None
        job = Job.from_doc(record.payload)
        if job.owner != caller["user_id"]:
            raise _not_found("job")
        return job

    @staticmethod
    def _job_doc(job: Job) -> dict[str, Any]:
        doc = job.to_doc()
        doc.pop("lease", None)
        return doc

    def get_job(self, caller: dict[str, Any], job_id: str) -> dict[str, Any]:
        self.queue.expire_leases()
        return self._job_doc(self._own_job(caller, job_id))

    def list_jobs(self, caller: dict[str, Any]) -> list[dict[str, Any]]:
        self.queue.expire_leases()
        rows = [
            self._job_doc(Job.from_doc(r.payload))
            for r in self.store.list_records("job", owner=caller["user_id"])
        ]
        rows.sort(key=lambda d: (-d["submitted_at"], d["job_id"]))
        return rows

    def job_logs(self, caller: dict[str, Any], job_id: str, offset: int) -> dict[str, Any]:
        self._own_job(caller, job_id)
        if offset < 0:
            raise ApiError(400, "invalid_request", "offset must be >= 0")
        payload, next_offset, finished = self.store.read_log(job_id, offset)
        return {
            "payload_b64": base64.b64encode(payload).decode("ascii"),
            "next_offset": next_offset,
            "finished": finished,
        }

    def cancel_job(self, caller: dict[str, Any], job_id: str) -> dict[str, Any]:
        self._own_job(caller, job_id)
        try:
            return self._job_doc(self.queue.cancel(job_id))
        except InvalidTransition as exc:
            raise ApiError(409, "invalid_state", str(exc)) from None

    def restart_job(self, caller: dict[str, Any], job_id: str) -> dict[str, Any]:
        self._own_job(caller, job_id)
        try:
            return self._job_doc(self.queue.restart(job_id))
        except InvalidTransition as exc:
            raise ApiError(409, "invalid_state", str(exc)) from None

    def job_result(self, caller: dict[str, Any], job_id: str) -> bytes:
        job = self._own_job(caller, job_id)
        if job.status is not JobStatus.SUCCEEDED:
            raise ApiError(409, "invalid_state", f"job is {job.status.value}, not succeeded")
        if not job.result:
            return b""
        return self.store.blob_get(job.result)

    # --- plugins and meta -----------------------------------------------------------------

    def list_plugins(self) -> list[dict[str, Any]]:
        docs = [p.manifest.to_doc() for p in self.registry.values()]
        docs.sort(key=lambda d: d["plugin_id"])
        return docs

    def queue_stats(self) -> dict[str, Any]:
        self.queue.expire_leases()
        return self.queue.stats().to_doc()

    def meta(self) -> dict[str, Any]:
        return {"version": __version__, "routes": ROUTE_TABLE}

    # --- worker protocol ---------------------------------------------------------------------

    def worker_lease(
        self, queue_classes: list[str], worker_id: str
    ) -> Optional[dict[str, Any]]:
        if not queue_classes or not worker_id:
            raise ApiError(400, "invalid_request", "queue_classes and worker_id are required")
        self.queue.expire_leases()
        for queue_class in queue_classes:
            job = self.queue.lease(queue_class, worker_id)
            if job is not None:
                return self._task_doc(job)
        return None

    def _task_doc(self, job: Job) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "job_id": job.job_id,
            "kind": job.kind.value,
            "plugin_id": job.plugin_id,
            "task_name": job.task_name,
            "params": job.params or {},
            "input_ref": job.input_ref,
            "log_offset": self.store.log_length(job.job_id),
            "lease_duration_ms": self.queue.lease_duration_ms,
        }
        if job.kind is TaskKind.PREDICT and job.model_id:
            try:
                record = self.store.get("model", job.model_id)
            except NotFound:
                pass
            else:
                artifact = record.payload.get("artifact")
                if artifact:
                    doc["model_artifact_ref"] = artifact
        return doc

    def worker_heartbeat(self, job_id: str, worker_id: str) -> dict[str, Any]:
        try:
            reply = self.queue.heartbeat(job_id, worker_id)
        except NotFound:
            raise _not_found("job") from None
        except StaleLease as exc:
            raise ApiError(409, "stale_lease", str(exc)) from None
        return {"cancel_requested": reply.cancel_requested, "deadline": reply.deadline}

    def worker_append_log(self, job_id: str, offset: int, payload_b64: str) -> dict[str, Any]:
        try:
            data = base64.b64decode(payload_b64, validate=True)
        except Exception:
            raise ApiError(400, "invalid_request", "payload_b64 is not base64") from None
        if not self.store.exists("job", job_id):
            raise _not_found("job")
        try:
            new_length = self.store.append_log(job_id, offset, data)
        except Exception as exc:
            raise ApiError(409, "contiguity", str(exc)) from None
        return {"next_offset": new_length}

    def worker_complete(
        self,
        job_id: str,
        worker_id: str,
        outcome: str,
        result_b64: Optional[str] = None,
        reason: Optional[str] = None,
    ) -> dict[str, Any]:
        if outcome == "ok":
            try:
                data = base64.b64decode(result_b64 or "", validate=True)
            except Exception:
                raise ApiError(400, "invalid_request", "result_b64 is not base64") from None
            event: Union[CompletedOk, CompletedErr, CompletedCancelled] = CompletedOk(
                result=self.store.blob_put(data).blob_id
            )
        elif outcome == "err":
            event = CompletedErr(reason=reason or "unknown error")
        elif outcome == "cancelled":
            event = CompletedCancelled()
        else:
            raise ApiError(400, "invalid_request", f"unknown outcome {outcome!r}")
        try:
            job = self.queue.complete(job_id, worker_id, event)
        except NotFound:
            raise _not_found("job") from None
        except StaleLease as exc:
            raise ApiError(409, "stale_lease", str(exc)) from None
        return self._job_doc(job)

    def worker_fetch_blob(self, blob_id: str) -> bytes:
        try:
            return self.store.blob_get(blob_id)
        except NotFound:
            raise _not_found("blob") from None

    # --- job-to-model lifecycle sync -----------------------------------------------------------

    def _on_job_transition(self, old: Job, new: Job) -> None:
        if new.kind is not TaskKind.TRAIN or not new.model_id:
            return
        for _ in range(3):
            try:
                record = self.store.get("model", new.model_id)
            except NotFound:
                return  # model purged; nothing to sync
            model = ModelRecord.from_doc(record.payload)
            if new.status is JobStatus.SUCCEEDED:
                updated = replace(
                    model, status=ModelStatus.READY, artifact=new.result, failure_reason=None
                )
            elif new.status is JobStatus.FAILED:
                updated = replace(
                    model, status=ModelStatus.FAILED, failure_reason=new.failure_reason
                )
            elif new.status is JobStatus.CANCELLED:
                updated = replace(
                    model, status=ModelStatus.FAILED, failure_reason="training cancelled"
                )
            elif new.status in (JobStatus.QUEUED, JobStatus.RUNNING):
                updated = replace(model, status=ModelStatus.TRAINING, failure_reason=None)
            else:  # pragma: no cover
                return
            try:
                self.store.put("model", new.model_id, updated.to_doc(), expected_version=record.version)
                return
            except VersionConflict:
                continue
        logger.warning("could not sync model %s after job %s", new.model_id, new.job_id)


class LocalWorkerClient:
    """In-process ServerClient: lets `serve --inline-worker` skip HTTP."""

    def __init__(self, core: ServiceCore, worker_id: Optional[str] = None):
        self.core = core
        self.worker_id = worker_id

    def lease(self, queue_classes: list[str], worker_id: str) -> Optional[dict[str, Any]]:
        return self.core.worker_lease(queue_classes, worker_id)

    def heartbeat(self, job_id: str, worker_id: str) -> bool:
        from annolab.worker import LeaseLost

        try:
            return bool(self.core.worker_heartbeat(job_id, worker_id)["cancel_requested"])
        except ApiError as exc:
            if exc.status in (404, 409):
                raise LeaseLost(job_id) from None
            raise

    def append_log(self, job_id: str, offset: int, data: bytes) -> None:
        from annolab.worker import LeaseLost

        try:
            self.core.worker_append_log(
                job_id, offset, base64.b64encode(data).decode("ascii")
            )
        except ApiError as exc:
            if exc.status == 404:
                raise LeaseLost(job_id) from None
            raise

    def complete(self, job_id: str, worker_id: str, outcome: ExecutionOutcome) -> None:
        from annolab.worker import LeaseLost

        result_b64 = None
        if outcome.status == "ok":
            result_b64 = base64.b64encode(outcome.result or b"").decode("ascii")
        try:
            self.core.worker_complete(
                job_id, worker_id, outcome.status, result_b64=result_b64, reason=outcome.reason
            )
        except ApiError as exc:
            if exc.status in (404, 409):
                raise LeaseLost(job_id) from None
            raise

    def fetch_blob(self, blob_id: str) -> bytes:
        return self.core.worker_fetch_blob(blob_id)


ROUTE_TABLE = [
    {"method": "POST", "path": "/api/auth/token", "auth": "none", "description": "exchange username/password for a bearer token"},
    {"method": "POST", "path": "/api/users", "auth": "admin", "description": "create a user account"},
    {"method": "GET", "path": "/api/models", "auth": "user", "description": "list own and public models"},
    {"method": "GET", "path": "/api/models/{model_id}", "auth": "user", "description": "model details with lineage"},
    {"method": "PATCH", "path": "/api/models/{model_id}", "auth": "owner", "description": "change visibility"},
    {"method": "DELETE", "path": "/api/models/{model_id}", "auth": "owner", "description": "delete model and all associated data"},
    {"method": "POST", "path": "/api/models/{model_id}/predict", "auth": "user", "description": "enqueue a prediction job"},
    {"method": "POST", "path": "/api/models/{model_id}/finetune", "auth": "user", "description": "create a fine-tuned child model and its training job"},
    {"method": "POST", "path": "/api/datasets", "auth": "user", "description": "upload a dataset (raw body; format and task_name as query params)"},
    {"method": "GET", "path": "/api/datasets", "auth": "user", "description": "list own datasets"},
    {"method": "GET", "path": "/api/datasets/{dataset_id}", "auth": "owner", "description": "dataset metadata"},
    {"method": "DELETE", "path": "/api/datasets/{dataset_id}", "auth": "owner", "description": "delete a dataset not referenced by models"},
    {"method": "GET", "path": "/api/jobs", "auth": "user", "description": "list own jobs"},
    {"method": "GET", "path": "/api/jobs/{job_id}", "auth": "owner", "description": "job status"},
    {"method": "GET", "path": "/api/jobs/{job_id}/logs", "auth": "owner", "description": "tail job logs from ?offset=N"},
    {"method": "GET", "path": "/api/jobs/{job_id}/result", "auth": "owner", "description": "result bytes of a succeeded job"},
    {"method": "POST", "path": "/api/jobs/{job_id}/cancel", "auth": "owner", "description": "cancel a queued or running job"},
    {"method": "POST", "path": "/api/jobs/{job_id}/restart", "auth": "owner", "description": "restart a failed or cancelled job"},
    {"method": "GET", "path": "/api/plugins", "auth": "user", "description": "registered plugin manifests"},
    {"method": "GET", "path": "/api/queue/stats", "auth": "user", "description": "queue depth and status counts"},
    {"method": "GET", "path": "/api/meta", "auth": "none", "description": "this route table"},
    {"method": "POST", "path": "/api/worker/lease", "auth": "worker", "description": "lease the oldest queued job in the given classes"},
    {"method": "POST", "path": "/api/worker/heartbeat", "auth": "worker", "description": "extend a lease; learn of cancellation"},
    {"method": "POST", "path": "/api/worker/logs", "auth": "worker", "description": "append a contiguous log chunk"},
    {"method": "POST", "path": "/api/worker/complete", "auth": "worker", "description": "report a task outcome"},
    {"method": "GET", "path": "/api/worker/blobs/{blob_id}", "auth": "worker", "description": "fetch task input or artifact bytes"},
]
