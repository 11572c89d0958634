"""Resource-classed FIFO job queues with leases, retries, and crash recovery.

Jobs are persisted through the store (the queue owns the job records); an
in-memory heap per queue class serves FIFO ordering by (queued_at, job_id)
with lazy invalidation, so a rebuilt queue recovers its state from the
store alone. One lock makes every operation atomic and linearizable; time
is always injected so expiry behavior is deterministic under test.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, replace
from typing import Any, Callable, Optional

from annolab.clock import Clock, SystemClock
from annolab.model import (
    Cancel,
    CompletedCancelled,
    CompletedErr,
    CompletedOk,
    Job,
    JobStatus,
    Lease,
    LeaseExpired,
    LeaseGranted,
    Restart,
    validate_transition,
)
from annolab.store import NotFound, Store, VersionConflict

DEFAULT_LEASE_DURATION_MS = 60_000


class QueueError(Exception):
    pass


class DuplicateJob(QueueError):
    def __init__(self, job_id: str):
        super().__init__(f"job {job_id!r} already exists")
        self.job_id = job_id


class StaleLease(QueueError):
    """The caller does not hold a live lease on the job."""

    def __init__(self, job_id: str, worker_id: str, message: str):
        super().__init__(f"job {job_id!r}, worker {worker_id!r}: {message}")
        self.job_id = job_id
        self.worker_id = worker_id


@dataclass(frozen=True)
class HeartbeatReply:
    cancel_requested: bool
    deadline: int


@dataclass(frozen=True)
class QueueStats:
    queued_by_class: dict[str, int]
    running_by_class: dict[str, int]
    by_status: dict[str, int]
    total: int

    def to_doc(self) -> dict[str, Any]:
        return {
            "queued_by_class": dict(self.queued_by_class),
            "running_by_class": dict(self.running_by_class),
            "by_status": dict(self.by_status),
            "total": self.total,
        }


TransitionHook = Callable[[Job, Job], None]


class TaskQueue:
    """Store-backed queue; safe for concurrent callers.

    `on_transition(old, new)` fires under the queue lock after each
    persisted status change, letting the service layer keep dependent
    records (e.g. a model being trained) in step with job outcomes.
    """

    def __init__(
        self,
        store: Store,
        clock: Optional[Clock] = None,
        lease_duration_ms: int = DEFAULT_LEASE_DURATION_MS,
        on_transition: Optional[TransitionHook] = None,
    ):
        if lease_duration_ms <= 0:
            raise ValueError("lease_duration_ms must be positive")
        self.store = store
        self.clock = clock if clock is not None else SystemClock()
        self.lease_duration_ms = lease_duration_ms
        self.on_transition = on_transition
        self._lock = threading.RLock()
        self._heaps: dict[str, list[tuple[int, str]]] = {}
        self._running: set[str] = set()
        self._recover()

    def _recover(self) -> None:
        for record in self.store.list_records("job"):
            job = Job.from_doc(record.payload)
            if job.status is JobStatus.QUEUED:
                self._push(job)
            elif job.status is JobStatus.RUNNING:
                self._running.add(job.job_id)

    # --- internals -----------------------------------------------------------

    def _push(self, job: Job) -> None:
        heapq.heappush(self._heaps.setdefault(job.queue_class, []), (job.queued_at, job.job_id))

    def _load(self, job_id: str) -> Job:
        record = self.store.get("job", job_id)
        return Job.from_doc(record.payload)

    def _persist(self, old: Job, new: Job) -> Job:
        new.check_invariants()
        self.store.put("job", new.job_id, new.to_doc())
        if new.status is JobStatus.RUNNING:
            self._running.add(new.job_id)
        else:
            self._running.discard(new.job_id)
        if new.status is JobStatus.QUEUED and old.status is not JobStatus.QUEUED:
            self._push(new)
        if self.on_transition is not None and new.status is not old.status:
            self.on_transition(old, new)
        return new

    def _expire_if_overdue(self, job: Job, now: int) -> Job:
        """Apply the lease-expiry transition when the deadline has passed."""
        if job.status is JobStatus.RUNNING and job.lease is not None and job.lease.deadline < now:
            return self._persist(job, validate_transition(job, LeaseExpired()))
        return job

    # --- operations ------------------------------------------------------------

    def enqueue(self, job: Job) -> Job:
        if job.status is not JobStatus.QUEUED:
            raise QueueError(f"job {job.job_id!r} must be queued to enqueue, is {job.status.value}")
        if not job.queue_class:
            raise QueueError("queue_class must be nonempty")
        job.check_invariants()
        with self._lock:
            try:
                self.store.put("job", job.job_id, job.to_doc(), expected_version=0)
            except VersionConflict as exc:
                raise DuplicateJob(job.job_id) from exc
            self._push(job)
        return job

    def lease(self, queue_class: str, worker_id: str, now: Optional[int] = None) -> Optional[Job]:
        if not worker_id:
            raise QueueError("worker_id must be nonempty")
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            heap = self._heaps.get(queue_class)
            while heap:
                queued_at, job_id = heapq.heappop(heap)
                try:
                    job = self._load(job_id)
                except NotFound:
                    continue  # purged while queued
                if job.status is not JobStatus.QUEUED or job.queued_at != queued_at:
                    continue  # stale heap entry (cancelled, re-queued, restarted)
                if job.queue_class != queue_class:
                    continue
                granted = validate_transition(
                    job, LeaseGranted(worker_id=worker_id, deadline=now + self.lease_duration_ms)
                )
                return self._persist(job, granted)
            return None

    def heartbeat(self, job_id: str, worker_id: str, now: Optional[int] = None) -> HeartbeatReply:
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            job = self._load(job_id)
            self._check_lease(job, worker_id, now)
            extended = replace(
                job, lease=Lease(worker_id=worker_id, deadline=now + self.lease_duration_ms)
            )
            self.store.put("job", job_id, extended.to_doc())
            return HeartbeatReply(
                cancel_requested=extended.cancel_requested, deadline=extended.lease.deadline
            )

    def complete(
        self,
        job_id: str,
        worker_id: str,
        outcome: CompletedOk | CompletedErr | CompletedCancelled,
        now: Optional[int] = None,
    ) -> Job:
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            job = self._load(job_id)
            self._check_lease(job, worker_id, now)
            return self._persist(job, validate_transition(job, outcome))

    def _check_lease(self, job: Job, worker_id: str, now: int) -> None:
        if job.status is not JobStatus.RUNNING or job.lease is None:
            raise StaleLease(job.job_id, worker_id, f"job is {job.status.value}, not running")
        if job.lease.worker_id != worker_id:
            raise StaleLease(
                job.job_id, worker_id, f"lease is held by {job.lease.worker_id!r}"
            )
        if job.lease.deadline < now:
            self._expire_if_overdue(job, now)
            raise StaleLease(job.job_id, worker_id, "lease expired; job was requeued or failed")

    def cancel(self, job_id: str) -> Job:
        with self._lock:
            job = self._load(job_id)
            return self._persist(job, validate_transition(job, Cancel()))

    def restart(self, job_id: str, now: Optional[int] = None) -> Job:
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            job = self._load(job_id)
            restarted = replace(validate_transition(job, Restart()), queued_at=now)
            return self._persist(job, restarted)

    def expire_leases(self, now: Optional[int] = None) -> list[str]:
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            affected = []
            for job_id in sorted(self._running):
                try:
                    job = self._load(job_id)
                except NotFound:
                    self._running.discard(job_id)
                    continue
                after = self._expire_if_overdue(job, now)
                if after is not job:
                    affected.append(job_id)
            return affected

    def stats(self) -> QueueStats:
        with self._lock:
            queued: dict[str, int] = {}
            running: dict[str, int] = {}
            by_status: dict[str, int] = {}
            total = 0
            for record in self.store.list_records("job"):
                job = Job.from_doc(record.payload)
                total += 1
                by_status[job.status.value] = by_status.get(job.status.value, 0) + 1
                if job.status is JobStatus.QUEUED:
                    queued[job.queue_class] = queued.get(job.queue_class, 0) + 1
                elif job.status is JobStatus.RUNNING:
                    running[job.queue_class] = running.get(job.queue_class, 0) + 1
            return QueueStats(
                queued_by_class=queued,
                running_by_class=running,
                by_status=by_status,
                total=total,
            )
