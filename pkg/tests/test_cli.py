"""CLI behavior against a live in-process server.

The client commands run through click's CliRunner but speak real HTTP
to a uvicorn server on an ephemeral port, so URL handling, error
mapping, and exit codes are all exercised for real.
"""

from __future__ import annotations

import json
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from typing import Optional

import httpx
import pytest
import uvicorn
from click.testing import CliRunner

from annolab.api import create_app
from annolab.cli import main
from annolab.service import LocalWorkerClient, ServiceCore
from annolab.store import Store
from annolab.worker import WorkerConfig, worker_loop

ADMIN_PASSWORD = "cli-admin-pw"
BASE_TRANSLATE = "m_base_stub-translate_translate"

PAIRS = (
    json.dumps({"source": "hola", "target": "hello"})
    + "\n"
    + json.dumps({"source": "mundo", "target": "world"})
)


@dataclass
class LiveServer:
    url: str
    core: ServiceCore
    token: str
    worker_token: str
    _uv: uvicorn.Server
    _threads: list[threading.Thread]
    _stop: threading.Event

    def close(self) -> None:
        self._stop.set()
        self._uv.should_exit = True
        for thread in self._threads:
            thread.join(timeout=10.0)


def _launch(tmp_path, with_worker: bool) -> LiveServer:
    core = ServiceCore(Store(str(tmp_path / "data")))
    boot = core.bootstrap(admin_username="admin", admin_password=ADMIN_PASSWORD)
    config = uvicorn.Config(create_app(core), host="127.0.0.1", port=0, log_level="error")
    server = uvicorn.Server(config)
    threads = [threading.Thread(target=server.run, name="uvicorn", daemon=True)]
    threads[0].start()
    deadline = time.monotonic() + 10.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("server did not start")
        time.sleep(0.02)
    port = server.servers[0].sockets[0].getsockname()[1]
    url = f"http://127.0.0.1:{port}"

    stop = threading.Event()
    if with_worker:
        worker_config = WorkerConfig(
            server_url="inline",
            token="inline",
            queue_classes=["cpu-light", "gpu"],
            worker_id="w_cli",
            poll_interval_ms=20,
        )
        worker_thread = threading.Thread(
            target=worker_loop,
            args=(worker_config, LocalWorkerClient(core), core.registry),
            kwargs={"stop_event": stop},
            name="cli-test-worker",
            daemon=True,
        )
        worker_thread.start()
        threads.append(worker_thread)

    token = core.issue_token("admin", ADMIN_PASSWORD)["token"]
    return LiveServer(
        url=url,
        core=core,
        token=token,
        worker_token=boot["worker_token"],
        _uv=server,
        _threads=threads,
        _stop=stop,
    )


@pytest.fixture()
def live(tmp_path):
    server = _launch(tmp_path, with_worker=True)
    yield server
    server.close()


@pytest.fixture()
def live_idle(tmp_path):
    server = _launch(tmp_path, with_worker=False)
    yield server
    server.close()


def run_cli(args: list[str], env: Optional[dict[str, str]] = None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


def auth_args(live: LiveServer) -> list[str]:
    return ["--server", live.url, "--token", live.token]


class TestLogin:
    def test_login_prints_export_line(self, live):
        res = run_cli(
            ["client", "login", "admin", "--password", ADMIN_PASSWORD, "--server", live.url]
        )
        assert res.exit_code == 0, res.output
        assert "export ANNOLAB_TOKEN=" in res.output

    def test_login_json_golden(self, live):
        res = run_cli(
            [
                "client",
                "login",
                "admin",
                "--password",
                ADMIN_PASSWORD,
                "--server",
                live.url,
                "--json",
            ]
        )
        assert res.exit_code == 0
        doc = json.loads(res.output)
        assert sorted(doc.keys()) == ["token", "user_id"]
        assert len(doc["token"]) == 64

    def test_bad_password_exits_1(self, live):
        res = run_cli(
            ["client", "login", "admin", "--password", "wrong", "--server", live.url]
        )
        assert res.exit_code == 1
        assert "401" in res.output

    def test_unreachable_server_exits_1(self):
        res = run_cli(
            [
                "client",
                "login",
                "admin",
                "--password",
                "x",
                "--server",
                "http://127.0.0.1:9",
            ]
        )
        assert res.exit_code == 1
        assert "cannot reach" in res.output


class TestModels:
    def test_models_table_lists_base_models(self, live):
        res = run_cli(["client", "models", *auth_args(live)])
        assert res.exit_code == 0, res.output
        assert BASE_TRANSLATE in res.output
        assert "MODEL" in res.output and "STATUS" in res.output

    def test_models_json_golden(self, live):
        res = run_cli(["client", "models", *auth_args(live), "--json"])
        doc = json.loads(res.output)
        ids = {m["model_id"] for m in doc["models"]}
        assert {
            "m_base_diarize_diarize",
            "m_base_diarize_diarize-windows",
            "m_base_postcorrect_correct",
            BASE_TRANSLATE,
        } <= ids

    def test_token_via_environment(self, live):
        res = run_cli(
            ["client", "models"],
            env={"ANNOLAB_SERVER": live.url, "ANNOLAB_TOKEN": live.token},
        )
        assert res.exit_code == 0, res.output
        assert BASE_TRANSLATE in res.output

    def test_missing_token_exits_1(self, live):
        res = run_cli(["client", "models", "--server", live.url])
        assert res.exit_code == 1
        assert "401" in res.output


class TestPredict:
    def test_predict_enqueues(self, live):
        res = run_cli(
            ["client", "predict", BASE_TRANSLATE, "--input", "hola", *auth_args(live)]
        )
        assert res.exit_code == 0, res.output
        assert "queued" in res.output

    def test_predict_wait_prints_result(self, live):
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input",
                "hola mundo",
                "--wait",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        assert "hola mundo" in res.output  # base model is the identity mapping

    def test_predict_wait_out_writes_file(self, live, tmp_path):
        out = tmp_path / "result.txt"
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input",
                "hola",
                "--wait",
                "--out",
                str(out),
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        assert out.read_bytes() == b"hola"

    def test_input_file(self, live, tmp_path):
        src = tmp_path / "input.txt"
        src.write_text("adios")
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input-file",
                str(src),
                "--wait",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        assert "adios" in res.output

    def test_both_inputs_is_usage_error(self, live):
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input",
                "a",
                "--input-file",
                "x",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 2

    def test_bad_params_json_is_usage_error(self, live):
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input",
                "a",
                "--params",
                "{nope",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 2

    def test_unknown_model_exits_1(self, live):
        res = run_cli(
            ["client", "predict", "m_nope", "--input", "a", *auth_args(live)]
        )
        assert res.exit_code == 1
        assert "404" in res.output


class TestTrainingFlow:
    def test_upload_finetune_predict_cycle(self, live, tmp_path):
        pairs_file = tmp_path / "pairs.jsonl"
        pairs_file.write_text(PAIRS)

        res = run_cli(
            [
                "client",
                "dataset-upload",
                str(pairs_file),
                "--format",
                "text_pairs_jsonl",
                "--json",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        dataset_id = json.loads(res.output)["dataset_id"]

        res = run_cli(
            [
                "client",
                "finetune",
                BASE_TRANSLATE,
                "--dataset",
                dataset_id,
                "--wait",
                "--json",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        doc = json.loads(res.output)
        assert doc["model"]["status"] == "ready"
        child = doc["model"]["model_id"]

        res = run_cli(
            [
                "client",
                "predict",
                child,
                "--input",
                "hola mundo",
                "--wait",
                *auth_args(live),
            ]
        )
        assert res.exit_code == 0, res.output
        assert "hello world" in res.output

    def test_share_and_delete(self, live, tmp_path):
        pairs_file = tmp_path / "pairs.jsonl"
        pairs_file.write_text(PAIRS)
        res = run_cli(
            [
                "client",
                "dataset-upload",
                str(pairs_file),
                "--format",
                "text_pairs_jsonl",
                "--json",
                *auth_args(live),
            ]
        )
        dataset_id = json.loads(res.output)["dataset_id"]
        res = run_cli(
            [
                "client",
                "finetune",
                BASE_TRANSLATE,
                "--dataset",
                dataset_id,
                "--wait",
                "--json",
                *auth_args(live),
            ]
        )
        child = json.loads(res.output)["model"]["model_id"]

        res = run_cli(["client", "share", child, *auth_args(live)])
        assert res.exit_code == 0, res.output
        assert "public" in res.output

        res = run_cli(["client", "share", child, "--private", *auth_args(live)])
        assert "private" in res.output

        res = run_cli(["client", "delete", child, "--yes", *auth_args(live)])
        assert res.exit_code == 0, res.output
        assert child in res.output

        res = run_cli(["client", "delete", child, "--yes", *auth_args(live)])
        assert res.exit_code == 1  # already gone

    def test_delete_without_yes_prompts_and_aborts(self, live):
        res = CliRunner().invoke(
            main,
            ["client", "delete", "m_whatever", *auth_args(live)],
            input="n\n",
            catch_exceptions=False,
        )
        assert res.exit_code == 1
        assert "Delete model" in res.output


class TestJobsTail:
    def test_tail_succeeded_job(self, live):
        res = run_cli(
            [
                "client",
                "predict",
                BASE_TRANSLATE,
                "--input",
                "hola",
                "--json",
                *auth_args(live),
            ]
        )
        job_id = json.loads(res.output)["job_id"]
        res = run_cli(["client", "jobs-tail", job_id, *auth_args(live)])
        assert res.exit_code == 0, res.output
        assert "line(s)" in res.output
        assert "succeeded" in res.output

    def test_tail_cancelled_job_exits_3(self, live_idle):
        with httpx.Client(
            base_url=live_idle.url,
            headers={"authorization": f"Bearer {live_idle.token}"},
        ) as http:
            job_id = http.post(
                f"/api/models/{BASE_TRANSLATE}/predict", json={"inline_input": "x"}
            ).json()["job_id"]
            assert http.post(f"/api/jobs/{job_id}/cancel").status_code == 200
        res = run_cli(["client", "jobs-tail", job_id, *auth_args(live_idle)])
        assert res.exit_code == 3
        assert "cancelled" in res.output


class TestWorkerCommand:
    def test_invalid_token_exits_3(self, live):
        res = run_cli(
            [
                "worker",
                "--server",
                live.url,
                "--token",
                "bogus",
                "--queues",
                "cpu-light",
            ]
        )
        assert res.exit_code == 3
        assert "rejected" in res.output

    def test_empty_queues_is_usage_error(self, live):
        res = run_cli(
            ["worker", "--server", live.url, "--token", live.worker_token, "--queues", ","]
        )
        assert res.exit_code == 2


class TestServeCommand:
    def test_port_in_use_exits_1(self, tmp_path):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as blocker:
            blocker.bind(("127.0.0.1", 0))
            blocker.listen(1)
            port = blocker.getsockname()[1]
            proc = subprocess.run(
                [
                    sys.executable,
                    "-m",
                    "annolab",
                    "serve",
                    "--data-dir",
                    str(tmp_path / "data"),
                    "--addr",
                    f"127.0.0.1:{port}",
                ],
                capture_output=True,
                text=True,
                timeout=60,
            )
        assert proc.returncode == 1
        assert "cannot listen" in proc.stderr

    def test_unwritable_data_dir_exits_1(self, tmp_path):
        blocker = tmp_path / "not-a-dir"
        blocker.write_text("file, not dir")
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "annolab",
                "serve",
                "--data-dir",
                str(blocker / "data"),
                "--addr",
                "127.0.0.1:0",
            ],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert proc.returncode == 1
        assert "not writable" in proc.stderr

    def test_bad_addr_is_usage_error(self, tmp_path):
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "annolab",
                "serve",
                "--data-dir",
                str(tmp_path / "data"),
                "--addr",
                "nonsense",
            ],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert proc.returncode == 2

    def test_serve_boots_and_answers_meta(self, tmp_path):
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "annolab",
                "serve",
                "--data-dir",
                str(tmp_path / "data"),
                "--addr",
                f"127.0.0.1:{port}",
                "--bootstrap-admin",
                "admin:boot-pw",
                "--inline-worker",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        try:
            deadline = time.monotonic() + 30.0
            meta = None
            while time.monotonic() < deadline:
                try:
                    meta = httpx.get(f"http://127.0.0.1:{port}/api/meta", timeout=2.0).json()
                    break
                except httpx.HTTPError:
                    time.sleep(0.1)
            assert meta is not None, "server never came up"
            assert any(r["path"] == "/api/worker/lease" for r in meta["routes"])
            token_file = tmp_path / "data" / "worker_token.txt"
            assert token_file.exists()
            assert len(token_file.read_text().strip()) == 64
        finally:
            proc.terminate()
            try:
                proc.wait(timeout=15)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=15)
