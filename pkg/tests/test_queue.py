"""Resource-classed FIFO queue: leases, retries, cancellation, expiry."""

import threading

import pytest

from annolab.clock import FakeClock
from annolab.model import (
    CompletedCancelled,
    CompletedErr,
    CompletedOk,
    InvalidTransition,
    Job,
    JobStatus,
    LEASE_EXPIRED_REASON,
    TERMINAL_JOB_STATUSES,
    TaskKind,
)
from annolab.queue import DuplicateJob, QueueError, StaleLease, TaskQueue
from annolab.store import NotFound, Store

LEASE_MS = 60_000


def make_job(job_id="j_1", submitted_at=1_000, queue_class="cpu-light", **overrides) -> Job:
    base = dict(
        job_id=job_id,
        owner="u_1",
        kind=TaskKind.PREDICT,
        plugin_id="stub-translate",
        task_name="translate",
        queue_class=queue_class,
        submitted_at=submitted_at,
    )
    base.update(overrides)
    return Job(**base)


@pytest.fixture()
def clock():
    return FakeClock(1_000_000)


@pytest.fixture()
def store(tmp_path):
    return Store(tmp_path / "data")


@pytest.fixture()
def queue(store, clock):
    return TaskQueue(store, clock, lease_duration_ms=LEASE_MS)


class TestEnqueueAndLease:
    def test_fifo_order(self, queue):
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.enqueue(make_job("j_2", submitted_at=20))
        assert queue.lease("cpu-light", "w1").job_id == "j_1"
        assert queue.lease("cpu-light", "w1").job_id == "j_2"

    def test_fifo_breaks_ties_by_job_id(self, queue):
        queue.enqueue(make_job("j_b", submitted_at=10))
        queue.enqueue(make_job("j_a", submitted_at=10))
        assert queue.lease("cpu-light", "w1").job_id == "j_a"

    def test_class_isolation(self, queue):
        queue.enqueue(make_job("j_gpu", queue_class="gpu"))
        assert queue.lease("cpu-light", "w1") is None
        assert queue.lease("gpu", "w1").job_id == "j_gpu"

    def test_duplicate_enqueue_rejected(self, queue):
        queue.enqueue(make_job("j_1"))
        with pytest.raises(DuplicateJob):
            queue.enqueue(make_job("j_1"))

    def test_lease_empty_class_returns_none(self, queue):
        assert queue.lease("cpu-light", "w1") is None

    def test_lease_marks_running_with_deadline(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        job = queue.lease("cpu-light", "w1")
        assert job.status is JobStatus.RUNNING
        assert job.lease.worker_id == "w1"
        assert job.lease.deadline == clock.now_ms() + LEASE_MS

    def test_non_queued_job_rejected(self, queue):
        running = make_job("j_x")
        object.__setattr__(running, "status", JobStatus.RUNNING)
        with pytest.raises(QueueError):
            queue.enqueue(running)

    def test_empty_worker_id_rejected(self, queue):
        with pytest.raises(QueueError):
            queue.lease("cpu-light", "")

    def test_concurrent_lease_no_duplicates(self, store, clock):
        queue = TaskQueue(store, clock)
        for i in range(8):
            queue.enqueue(make_job(f"j_{i}", submitted_at=i))
        grabbed = []
        barrier = threading.Barrier(8)

        def work(worker_id):
            barrier.wait()
            job = queue.lease("cpu-light", worker_id)
            if job is not None:
                grabbed.append(job.job_id)

        threads = [threading.Thread(target=work, args=(f"w{i}",)) for i in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(grabbed) == [f"j_{i}" for i in range(8)]


class TestHeartbeat:
    def test_extends_deadline(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        clock.advance(30_000)
        reply = queue.heartbeat("j_1", "w1")
        assert reply.cancel_requested is False
        assert reply.deadline == clock.now_ms() + LEASE_MS

    def test_reports_cancel_request(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        queue.cancel("j_1")
        assert queue.heartbeat("j_1", "w1").cancel_requested is True

    def test_wrong_worker_rejected(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        with pytest.raises(StaleLease):
            queue.heartbeat("j_1", "w2")

    def test_expired_lease_rejected_and_requeued(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS + 1)
        with pytest.raises(StaleLease):
            queue.heartbeat("j_1", "w1")
        job = Job.from_doc(queue.store.get("job", "j_1").payload)
        assert job.status is JobStatus.QUEUED
        assert job.attempt == 2

    def test_unknown_job(self, queue):
        with pytest.raises(NotFound):
            queue.heartbeat("ghost", "w1")


class TestComplete:
    def test_ok_stores_result(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        job = queue.complete("j_1", "w1", CompletedOk(result="blob123"))
        assert job.status is JobStatus.SUCCEEDED
        assert job.result == "blob123"
        assert job.lease is None

    def test_err_requeues_at_original_position(self, queue):
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.enqueue(make_job("j_2", submitted_at=20))
        queue.lease("cpu-light", "w1")
        requeued = queue.complete("j_1", "w1", CompletedErr(reason="boom"))
        assert requeued.status is JobStatus.QUEUED
        assert requeued.attempt == 2
        # The retry keeps its original place ahead of j_2.
        assert queue.lease("cpu-light", "w1").job_id == "j_1"

    def test_err_exhausts_retry_budget(self, queue):
        queue.enqueue(make_job("j_1", max_attempts=2))
        for attempt in range(2):
            queue.lease("cpu-light", "w1")
            job = queue.complete("j_1", "w1", CompletedErr(reason="boom"))
        assert job.status is JobStatus.FAILED
        assert job.failure_reason == "boom"

    def test_complete_after_expiry_stale(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS + 1)
        with pytest.raises(StaleLease):
            queue.complete("j_1", "w1", CompletedOk(result=None))
        job = Job.from_doc(queue.store.get("job", "j_1").payload)
        assert job.status is JobStatus.QUEUED  # requeued by expiry, not succeeded
        assert job.attempt == 2

    def test_complete_by_non_holder_rejected(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        with pytest.raises(StaleLease):
            queue.complete("j_1", "w2", CompletedOk(result=None))

    def test_cooperative_cancel_completion(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        queue.cancel("j_1")
        assert queue.heartbeat("j_1", "w1").cancel_requested is True
        job = queue.complete("j_1", "w1", CompletedCancelled())
        assert job.status is JobStatus.CANCELLED


class TestCancelAndRestart:
    def test_cancel_queued_never_leased(self, queue):
        queue.enqueue(make_job("j_1"))
        job = queue.cancel("j_1")
        assert job.status is JobStatus.CANCELLED
        assert queue.lease("cpu-light", "w1") is None

    def test_cancel_terminal_invalid(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        queue.complete("j_1", "w1", CompletedOk(result=None))
        with pytest.raises(InvalidTransition):
            queue.cancel("j_1")

    def test_cancel_unknown_job(self, queue):
        with pytest.raises(NotFound):
            queue.cancel("ghost")

    def test_restart_failed_job_leases_again(self, queue):
        queue.enqueue(make_job("j_1", max_attempts=1))
        queue.lease("cpu-light", "w1")
        queue.complete("j_1", "w1", CompletedErr(reason="boom"))
        restarted = queue.restart("j_1")
        assert restarted.status is JobStatus.QUEUED
        assert restarted.attempt == 1
        assert restarted.failure_reason is None
        assert queue.lease("cpu-light", "w1").job_id == "j_1"

    def test_restart_takes_new_fifo_position(self, queue, clock):
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.enqueue(make_job("j_2", submitted_at=20))
        queue.cancel("j_1")
        queue.restart("j_1")
        assert queue.lease("cpu-light", "w1").job_id == "j_2"
        assert queue.lease("cpu-light", "w1").job_id == "j_1"

    def test_restart_running_invalid(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        with pytest.raises(InvalidTransition):
            queue.restart("j_1")

    def test_restart_cancel_cycle(self, queue):
        queue.enqueue(make_job("j_1"))
        queue.cancel("j_1")
        queue.restart("j_1")
        job = queue.cancel("j_1")
        assert job.status is JobStatus.CANCELLED

    def test_stale_heap_entry_skipped_after_restart(self, queue):
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.cancel("j_1")
        queue.restart("j_1")
        # Old heap entry (10, j_1) must not grant a second lease.
        assert queue.lease("cpu-light", "w1").job_id == "j_1"
        assert queue.lease("cpu-light", "w1") is None


class TestExpireLeases:
    def test_overdue_requeued(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS + 1)
        assert queue.expire_leases() == ["j_1"]
        job = Job.from_doc(queue.store.get("job", "j_1").payload)
        assert job.status is JobStatus.QUEUED
        assert job.attempt == 2

    def test_no_overdue_empty(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS - 1)
        assert queue.expire_leases() == []

    def test_final_attempt_fails_with_reason(self, queue, clock):
        queue.enqueue(make_job("j_1", max_attempts=1))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS + 1)
        assert queue.expire_leases() == ["j_1"]
        job = Job.from_doc(queue.store.get("job", "j_1").payload)
        assert job.status is JobStatus.FAILED
        assert job.failure_reason == LEASE_EXPIRED_REASON

    def test_idempotent_for_fixed_now(self, queue, clock):
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        deadline_passed = clock.now_ms() + LEASE_MS + 1
        assert queue.expire_leases(now=deadline_passed) == ["j_1"]
        assert queue.expire_leases(now=deadline_passed) == []

    def test_expired_job_releases_back_in_order(self, queue, clock):
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.enqueue(make_job("j_2", submitted_at=20))
        queue.lease("cpu-light", "w1")
        clock.advance(LEASE_MS + 1)
        queue.expire_leases()
        assert queue.lease("cpu-light", "w2").job_id == "j_1"


class TestStats:
    def test_empty(self, queue):
        stats = queue.stats()
        assert stats.total == 0
        assert stats.queued_by_class == {}
        assert stats.by_status == {}

    def test_counts(self, queue):
        queue.enqueue(make_job("j_1", queue_class="cpu-heavy", submitted_at=1))
        queue.enqueue(make_job("j_2", queue_class="cpu-heavy", submitted_at=2))
        queue.enqueue(make_job("j_3", queue_class="cpu-heavy", submitted_at=3))
        queue.lease("cpu-heavy", "w1")
        stats = queue.stats()
        assert stats.queued_by_class == {"cpu-heavy": 2}
        assert stats.running_by_class == {"cpu-heavy": 1}
        assert stats.by_status == {"queued": 2, "running": 1}
        assert stats.total == 3

    def test_sums_equal_total(self, queue):
        for i in range(6):
            queue.enqueue(make_job(f"j_{i}", submitted_at=i))
        queue.lease("cpu-light", "w1")
        queue.cancel("j_5")
        stats = queue.stats()
        assert sum(stats.by_status.values()) == stats.total == 6


class TestRecovery:
    def test_rebuilt_queue_serves_queued_jobs(self, store, clock):
        queue = TaskQueue(store, clock)
        queue.enqueue(make_job("j_1", submitted_at=10))
        queue.enqueue(make_job("j_2", submitted_at=20))
        queue.lease("cpu-light", "w1")

        rebuilt = TaskQueue(store, clock)
        assert rebuilt.lease("cpu-light", "w2").job_id == "j_2"

    def test_rebuilt_queue_expires_running_leases(self, store, clock):
        queue = TaskQueue(store, clock)
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")

        clock.advance(LEASE_MS + 1)
        rebuilt = TaskQueue(store, clock)
        assert rebuilt.expire_leases() == ["j_1"]
        assert rebuilt.lease("cpu-light", "w2").job_id == "j_1"


class TestTransitionHook:
    def test_hook_sees_status_changes(self, store, clock):
        seen = []
        queue = TaskQueue(store, clock, on_transition=lambda old, new: seen.append((old.status, new.status)))
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        queue.complete("j_1", "w1", CompletedOk(result=None))
        assert seen == [
            (JobStatus.QUEUED, JobStatus.RUNNING),
            (JobStatus.RUNNING, JobStatus.SUCCEEDED),
        ]

    def test_hook_not_fired_on_heartbeat(self, store, clock):
        seen = []
        queue = TaskQueue(store, clock, on_transition=lambda old, new: seen.append(new.status))
        queue.enqueue(make_job("j_1"))
        queue.lease("cpu-light", "w1")
        queue.heartbeat("j_1", "w1")
        assert seen == [JobStatus.RUNNING]


class TestStressSmoke:
    def test_workers_with_crashes_all_jobs_terminal(self, store):
        clock = FakeClock(0)
        queue = TaskQueue(store, clock, lease_duration_ms=1_000)
        n_jobs = 30
        for i in range(n_jobs):
            queue.enqueue(make_job(f"j_{i:03d}", submitted_at=i, max_attempts=3))
        crashers = {f"j_{i:03d}" for i in range(0, n_jobs, 7)}  # deterministic 'crashes'
        completions: dict[str, int] = {}
        crashed_once: set[str] = set()
        lock = threading.Lock()
        stop = threading.Event()

        def worker(worker_id):
            while not stop.is_set():
                job = queue.lease("cpu-light", worker_id)
                if job is None:
                    stop.wait(0.001)
                    continue
                with lock:
                    crash = job.job_id in crashers and job.job_id not in crashed_once
                    if crash:
                        crashed_once.add(job.job_id)
                if crash:
                    continue  # vanish without completing; expiry must requeue
                try:
                    queue.complete(job.job_id, worker_id, CompletedOk(result=None))
                    with lock:
                        completions[job.job_id] = completions.get(job.job_id, 0) + 1
                except StaleLease:
                    pass

        threads = [threading.Thread(target=worker, args=(f"w{i}",)) for i in range(4)]
        for t in threads:
            t.start()
        for _ in range(400):
            clock.advance(2_000)
            queue.expire_leases()
            stats = queue.stats()
            if sum(stats.by_status.get(s.value, 0) for s in TERMINAL_JOB_STATUSES) == n_jobs:
                break
            threading.Event().wait(0.005)
        stop.set()
        for t in threads:
            t.join()

        stats = queue.stats()
        assert stats.by_status.get("succeeded", 0) == n_jobs
        assert all(count == 1 for count in completions.values())
        assert set(completions) == {f"j_{i:03d}" for i in range(n_jobs)}
