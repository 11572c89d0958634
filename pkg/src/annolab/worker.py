"""Background worker: plugin discovery, task execution, and the polling loop.

A worker polls the server for work on its subscribed queue classes, runs
up to `parallelism` tasks at once, heartbeats each lease at a third of
its duration, streams plugin logs as contiguous chunks, and reports one
outcome per task. Plugins run in-process through a narrow executor
callable, or are forwarded to an external HTTP server when their
manifest says so.
"""

from __future__ import annotations

import base64
import json
import socket
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Union

import httpx

from annolab.model import (
    MANIFEST_FILENAME,
    ExecutionMode,
    ManifestError,
    PluginManifest,
    TaskKind,
    new_id,
    validate_manifest,
)
from annolab.plugins import LogFn, PluginInputError, TaskCancelled
from annolab.plugins import diarize as _diarize
from annolab.plugins import postcorrect as _postcorrect
from annolab.plugins import stub_translate as _stub_translate

DEFAULT_EXTERNAL_TIMEOUT_S = 120.0

# run(task_name, artifact_doc, input_bytes, params, log, should_cancel) -> result bytes
Executor = Callable[[str, Optional[dict], bytes, dict, LogFn, Callable[[], bool]], bytes]


class WorkerAuthError(Exception):
    """The server rejected the worker's token; the process should exit."""


class LeaseLost(Exception):
    """The server no longer recognizes this worker's lease on the job."""

    def __init__(self, job_id: str):
        super().__init__(f"lease on job {job_id!r} is gone")
        self.job_id = job_id


@dataclass(frozen=True)
class WorkerConfig:
    server_url: str
    token: str
    queue_classes: list[str]
    worker_id: Optional[str] = None
    parallelism: int = 2
    plugins_dir: Optional[Path] = None
    poll_interval_ms: int = 500
    backoff_initial_ms: int = 500
    backoff_cap_ms: int = 30_000

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not self.queue_classes:
            raise ValueError("queue_classes must be nonempty")
        if self.worker_id is None:
            object.__setattr__(
                self, "worker_id", f"{socket.gethostname()}-{new_id('w').split('_')[1]}"
            )
        if not self.worker_id:
            raise ValueError("worker_id must be nonempty")


@dataclass(frozen=True)
class RegisteredPlugin:
    manifest: PluginManifest
    run: Optional[Executor] = None
    external_url: Optional[str] = None


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # "ok" | "err" | "cancelled"
    result: Optional[bytes] = None
    reason: Optional[str] = None

    @classmethod
    def ok(cls, result: bytes) -> "ExecutionOutcome":
        return cls(status="ok", result=result)

    @classmethod
    def err(cls, reason: str) -> "ExecutionOutcome":
        return cls(status="err", reason=reason)

    @classmethod
    def cancelled(cls) -> "ExecutionOutcome":
        return cls(status="cancelled")


_BUILTIN_MODULES = (_diarize, _postcorrect, _stub_translate)
BUILTIN_PLUGIN_IDS = tuple(sorted(module.PLUGIN_ID for module in _BUILTIN_MODULES))


def discover_plugins(
    plugins_dir: Optional[Union[str, Path]], log: Optional[LogFn] = None
) -> dict[str, RegisteredPlugin]:
    """Built-in plugins plus any valid external manifests found on disk.

    Each immediate subdirectory of `plugins_dir` may hold a manifest file;
    invalid ones are skipped with a warning. On id collision the earlier
    registration wins, so a drop-in can never shadow a built-in.
    """

    def warn(message: str) -> None:
        if log is not None:
            log(message)

    registry: dict[str, RegisteredPlugin] = {}
    for module in _BUILTIN_MODULES:
        registry[module.PLUGIN_ID] = RegisteredPlugin(manifest=module.MANIFEST, run=module.execute)

    if plugins_dir is None:
        return registry
    root = Path(plugins_dir)
    if not root.is_dir():
        return registry

    for subdir in sorted(p for p in root.iterdir() if p.is_dir()):
        manifest_path = subdir / MANIFEST_FILENAME
        if not manifest_path.is_file():
            continue
        try:
            raw = json.loads(manifest_path.read_text("utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            warn(f"skipping plugin dir {subdir.name!r}: unreadable manifest ({exc})")
            continue
        try:
            manifest = validate_manifest(raw)
        except ManifestError as exc:
            warn(f"skipping plugin dir {subdir.name!r}: invalid manifest ({exc})")
            continue
        if manifest.plugin_id in registry:
            warn(
                f"skipping plugin dir {subdir.name!r}: id {manifest.plugin_id!r} already registered"
            )
            continue
        if manifest.execution is not ExecutionMode.EXTERNAL:
            warn(
                f"skipping plugin dir {subdir.name!r}: in-process plugins must ship "
                "with the application, external mode is required for drop-ins"
            )
            continue
        registry[manifest.plugin_id] = RegisteredPlugin(
            manifest=manifest, external_url=manifest.external_url
        )
    return registry


@dataclass(frozen=True)
class TaskAssignment:
    """One leased task with its inputs already resolved to bytes."""

    job_id: str
    kind: TaskKind
    plugin_id: str
    task_name: str
    params: dict[str, Any]
    input_bytes: bytes
    artifact_doc: Optional[dict]
    log_offset: int = 0
    lease_duration_ms: int = 60_000

    @classmethod
    def from_task_doc(
        cls, doc: dict[str, Any], fetch_blob: Callable[[str], bytes]
    ) -> "TaskAssignment":
        if doc.get("input_ref"):
            input_bytes = fetch_blob(doc["input_ref"])
        elif doc.get("input_b64"):
            input_bytes = base64.b64decode(doc["input_b64"])
        else:
            input_bytes = b""
        artifact_doc = None
        if doc.get("model_artifact_ref"):
            artifact_doc = json.loads(fetch_blob(doc["model_artifact_ref"]).decode("utf-8"))
        return cls(
            job_id=doc["job_id"],
            kind=TaskKind(doc["kind"]),
            plugin_id=doc["plugin_id"],
            task_name=doc["task_name"],
            params=doc.get("params") or {},
            input_bytes=input_bytes,
            artifact_doc=artifact_doc,
            log_offset=doc.get("log_offset", 0),
            lease_duration_ms=doc.get("lease_duration_ms", 60_000),
        )

    def to_external_doc(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "job_id": self.job_id,
            "kind": self.kind.value,
            "plugin_id": self.plugin_id,
            "task_name": self.task_name,
            "params": self.params,
            "input_b64": base64.b64encode(self.input_bytes).decode("ascii"),
        }
        if self.artifact_doc is not None:
            doc["artifact"] = self.artifact_doc
        return doc


def forward_external(
    url: str,
    task_doc: dict[str, Any],
    timeout_s: float = DEFAULT_EXTERNAL_TIMEOUT_S,
) -> ExecutionOutcome:
    """POST the task document to an external plugin server.

    The raw response body is the result; non-2xx statuses, timeouts, and
    connection failures become err outcomes, never exceptions.
    """
    try:
        response = httpx.post(url, json=task_doc, timeout=timeout_s)
    except httpx.TimeoutException as exc:
        return ExecutionOutcome.err(f"external server timed out after {timeout_s}s: {exc}")
    except httpx.HTTPError as exc:
        return ExecutionOutcome.err(f"external server connection failed: {exc}")
    if not 200 <= response.status_code < 300:
        return ExecutionOutcome.err(f"external server status {response.status_code}")
    return ExecutionOutcome.ok(response.content)


def execute_task(
    assignment: TaskAssignment,
    registry: dict[str, RegisteredPlugin],
    should_cancel: Callable[[], bool],
    log_sink: LogFn,
) -> ExecutionOutcome:
    """Run one task to an outcome; plugin failures are err, never raises."""
    plugin = registry.get(assignment.plugin_id)
    if plugin is None:
        return ExecutionOutcome.err(f"unknown plugin {assignment.plugin_id!r}")
    task = plugin.manifest.task(assignment.task_name)
    if task is None:
        return ExecutionOutcome.err(
            f"unknown task {assignment.task_name!r} for plugin {assignment.plugin_id!r}"
        )
    if plugin.external_url is not None:
        return forward_external(plugin.external_url, assignment.to_external_doc())
    try:
        result = plugin.run(
            assignment.task_name,
            assignment.artifact_doc,
            assignment.input_bytes,
            assignment.params,
            log_sink,
            should_cancel,
        )
        return ExecutionOutcome.ok(result)
    except TaskCancelled:
        return ExecutionOutcome.cancelled()
    except PluginInputError as exc:
        return ExecutionOutcome.err(str(exc))
    except Exception as exc:  # a plugin bug must not take the worker down
        return ExecutionOutcome.err(f"{type(exc).__name__}: {exc}")


class ServerClient(Protocol):
    """Worker-side view of the server's /api/worker endpoints."""

    def lease(self, queue_classes: list[str], worker_id: str) -> Optional[dict[str, Any]]: ...

    def heartbeat(self, job_id: str, worker_id: str) -> bool: ...

    def append_log(self, job_id: str, offset: int, data: bytes) -> None: ...

    def complete(self, job_id: str, worker_id: str, outcome: ExecutionOutcome) -> None: ...

    def fetch_blob(self, blob_id: str) -> bytes: ...


class HttpServerClient:
    """HTTP implementation of the worker wire protocol."""

    def __init__(self, base_url: str, token: str, timeout_s: float = 30.0):
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers={"Authorization": f"Bearer {token}"},
            timeout=timeout_s,
        )

    def close(self) -> None:
        self._client.close()

    def _check(self, response: httpx.Response, job_id: str = "") -> httpx.Response:
        if response.status_code in (401, 403):
            raise WorkerAuthError(f"server rejected worker credentials ({response.status_code})")
        if response.status_code in (404, 409, 410):
            raise LeaseLost(job_id)
        response.raise_for_status()
        return response

    def lease(self, queue_classes: list[str], worker_id: str) -> Optional[dict[str, Any]]:
        response = self._client.post(
            "/api/worker/lease", json={"queue_classes": queue_classes, "worker_id": worker_id}
        )
        if response.status_code in (401, 403):
            raise WorkerAuthError(f"server rejected worker credentials ({response.status_code})")
        response.raise_for_status()
        if response.status_code == 204 or not response.content:
            return None
        return response.json()

    def heartbeat(self, job_id: str, worker_id: str) -> bool:
        response = self._check(
            self._client.post(
                "/api/worker/heartbeat", json={"job_id": job_id, "worker_id": worker_id}
            ),
            job_id,
        )
        return bool(response.json().get("cancel_requested"))

    def append_log(self, job_id: str, offset: int, data: bytes) -> None:
        self._check(
            self._client.post(
                "/api/worker/logs",
                json={
                    "job_id": job_id,
                    "offset": offset,
                    "payload_b64": base64.b64encode(data).decode("ascii"),
                },
            ),
            job_id,
        )

    def complete(self, job_id: str, worker_id: str, outcome: ExecutionOutcome) -> None:
        body: dict[str, Any] = {
            "job_id": job_id,
            "worker_id": worker_id,
            "outcome": outcome.status,
        }
        if outcome.status == "ok":
            body["result_b64"] = base64.b64encode(outcome.result or b"").decode("ascii")
        elif outcome.status == "err":
            body["reason"] = outcome.reason or "unknown error"
        self._check(self._client.post("/api/worker/complete", json=body), job_id)

    def fetch_blob(self, blob_id: str) -> bytes:
        response = self._client.get(f"/api/worker/blobs/{blob_id}")
        if response.status_code in (401, 403):
            raise WorkerAuthError("server rejected worker credentials")
        response.raise_for_status()
        return response.content


class _LogStream:
    """Streams one task's log text to the server as contiguous chunks."""

    def __init__(self, client: ServerClient, job_id: str, offset: int):
        self._client = client
        self._job_id = job_id
        self._offset = offset
        self._pending = b""
        self._lock = threading.Lock()
        self.lease_lost = False

    def write(self, text: str) -> None:
        with self._lock:
            self._pending += text.encode("utf-8")
            self._flush_locked()

    def flush(self) -> None:
        with self._lock:
            self._flush_locked()

    def _flush_locked(self) -> None:
        if not self._pending or self.lease_lost:
            return
        try:
            self._client.append_log(self._job_id, self._offset, self._pending)
            self._offset += len(self._pending)
            self._pending = b""
        except LeaseLost:
            self.lease_lost = True
        except Exception:
            pass  # keep buffering; retried on the next write


@dataclass
class _TaskState:
    assignment: TaskAssignment
    cancel_requested: threading.Event = field(default_factory=threading.Event)
    lease_lost: threading.Event = field(default_factory=threading.Event)
    done: threading.Event = field(default_factory=threading.Event)


def _heartbeat_loop(client: ServerClient, worker_id: str, state: _TaskState) -> None:
    interval_s = max(state.assignment.lease_duration_ms / 3.0, 1.0) / 1000.0
    while not state.done.wait(interval_s):
        try:
            if client.heartbeat(state.assignment.job_id, worker_id):
                state.cancel_requested.set()
        except LeaseLost:
            state.lease_lost.set()
            return
        except WorkerAuthError:
            state.lease_lost.set()
            return
        except Exception:
            continue  # transient server trouble; the lease may still be live


def _run_one_task(
    client: ServerClient,
    worker_id: str,
    registry: dict[str, RegisteredPlugin],
    state: _TaskState,
) -> None:
    assignment = state.assignment
    stream = _LogStream(client, assignment.job_id, assignment.log_offset)
    heartbeat = threading.Thread(
        target=_heartbeat_loop, args=(client, worker_id, state), daemon=True
    )
    heartbeat.start()
    try:
        outcome = execute_task(
            assignment,
            registry,
            lambda: state.cancel_requested.is_set() or state.lease_lost.is_set(),
            stream.write,
        )
    finally:
        state.done.set()
        heartbeat.join(timeout=5)
    stream.flush()
    if state.lease_lost.is_set() or stream.lease_lost:
        return  # abandoned: someone else owns the job now
    try:
        client.complete(assignment.job_id, worker_id, outcome)
    except (LeaseLost, WorkerAuthError):
        pass
    except Exception:
        pass  # completion lost; lease expiry will requeue the job


def worker_loop(
    config: WorkerConfig,
    client: ServerClient,
    registry: dict[str, RegisteredPlugin],
    stop_event: Optional[threading.Event] = None,
) -> None:
    """Poll-lease-execute until stopped; raises WorkerAuthError on bad token."""
    stop = stop_event if stop_event is not None else threading.Event()
    threads: list[threading.Thread] = []
    backoff_ms = config.backoff_initial_ms

    while not stop.is_set():
        threads = [t for t in threads if t.is_alive()]
        leased_any = False
        while len(threads) < config.parallelism and not stop.is_set():
            try:
                doc = client.lease(config.queue_classes, config.worker_id)
                backoff_ms = config.backoff_initial_ms
            except WorkerAuthError:
                raise
            except Exception:
                stop.wait(backoff_ms / 1000.0)
                backoff_ms = min(backoff_ms * 2, config.backoff_cap_ms)
                break
            if doc is None:
                break
            try:
                assignment = TaskAssignment.from_task_doc(doc, client.fetch_blob)
            except Exception as exc:
                try:
                    client.complete(
                        doc.get("job_id", ""),
                        config.worker_id,
                        ExecutionOutcome.err(f"could not fetch task inputs: {exc}"),
                    )
                except Exception:
                    pass
                continue
            state = _TaskState(assignment=assignment)
            thread = threading.Thread(
                target=_run_one_task,
                args=(client, config.worker_id, registry, state),
                daemon=True,
            )
            thread.start()
            threads.append(thread)
            leased_any = True
        if not leased_any:
            stop.wait(config.poll_interval_ms / 1000.0)
    for thread in threads:
        thread.join(timeout=10)
