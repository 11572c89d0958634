"""Command-line entry points: server, worker, and user-facing client.

Exit codes: 0 success, 1 transport or server-side failure, 2 usage
error (click's default), 3 the awaited job or worker authentication
failed.
"""

from __future__ import annotations

import base64
import json
import signal
import socket
import sys
import threading
import time
from pathlib import Path
from typing import Any, NoReturn, Optional

import click
import httpx

from annolab import __version__

EXIT_TRANSPORT = 1
EXIT_JOB_FAILED = 3
EXIT_AUTH = 3

DEFAULT_SERVER = "http://127.0.0.1:8570"
WORKER_TOKEN_FILE = "worker_token.txt"


@click.group()
@click.version_option(version=__version__, prog_name="annolab")
def main() -> None:
    """Self-hostable annotation backend: API server, task workers, client."""


# --------------------------------------------------------------------------- serve


def _parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {addr!r}", param_hint="--addr")
    return host or "127.0.0.1", int(port)


def _parse_user_pass(value: str) -> tuple[str, str]:
    user, sep, password = value.partition(":")
    if not sep or not user or not password:
        raise click.BadParameter(
            f"expected USER:PASS, got {value!r}", param_hint="--bootstrap-admin"
        )
    return user, password


@main.command()
@click.option("--data-dir", default="./annolab-data", show_default=True, help="State directory.")
@click.option("--addr", default="127.0.0.1:8570", show_default=True, help="Listen address.")
@click.option(
    "--bootstrap-admin",
    default=None,
    metavar="USER:PASS",
    help="Credentials for the admin account created on first start.",
)
@click.option(
    "--inline-worker",
    is_flag=True,
    help="Also run a task worker inside the server process.",
)
@click.option("--lease-ms", default=60_000, show_default=True, help="Job lease duration.")
@click.option("--plugins-dir", default=None, help="Directory of external plugin manifests.")
@click.option("--webui-dir", default=None, help="Static web UI directory to serve at /.")
def serve(
    data_dir: str,
    addr: str,
    bootstrap_admin: Optional[str],
    inline_worker: bool,
    lease_ms: int,
    plugins_dir: Optional[str],
    webui_dir: Optional[str],
) -> None:
    """Run the API server (and optionally an in-process worker)."""
    import uvicorn

    from annolab.api import create_app
    from annolab.service import LocalWorkerClient, ServiceCore
    from annolab.store import Store
    from annolab.worker import WorkerConfig, worker_loop

    host, port = _parse_addr(addr)

    root = Path(data_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        click.echo(f"error: data dir {data_dir!r} is not writable: {exc}", err=True)
        raise SystemExit(1)

    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as probe_sock:
        probe_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            probe_sock.bind((host, port))
        except OSError as exc:
            click.echo(f"error: cannot listen on {addr}: {exc}", err=True)
            raise SystemExit(1)

    core = ServiceCore(Store(root), lease_duration_ms=lease_ms, plugins_dir=plugins_dir)
    if bootstrap_admin is not None:
        admin_user, admin_pass = _parse_user_pass(bootstrap_admin)
        boot = core.bootstrap(admin_username=admin_user, admin_password=admin_pass)
    else:
        boot = core.bootstrap()
    if boot["admin_created"]:
        click.echo(f"created admin account {boot['admin_username']!r}")
        if bootstrap_admin is None:
            click.echo(f"generated admin password: {boot['admin_password']}")
    if boot["worker_token"]:
        token_path = root / WORKER_TOKEN_FILE
        token_path.write_text(boot["worker_token"] + "\n", encoding="ascii")
        token_path.chmod(0o600)
        click.echo(f"worker token written to {token_path}")

    if webui_dir is None:
        packaged = Path(__file__).parent / "webui"
        webui_dir = str(packaged) if packaged.is_dir() else None
    app = create_app(core, webui_dir=webui_dir)

    click.echo(f"annolab {__version__} listening on http://{host}:{port}")
    if webui_dir:
        click.echo(f"web ui: http://{host}:{port}/ (from {webui_dir})")
    for route in core.meta()["routes"]:
        click.echo(f"  {route['method']:<6} {route['path']:<38} [{route['auth']}]")

    stop_event = threading.Event()
    worker_thread = None
    if inline_worker:
        queues = sorted(
            {
                task.queue_class
                for plugin in core.registry.values()
                for task in plugin.manifest.tasks
            }
        )
        config = WorkerConfig(
            server_url="inline", token="inline", queue_classes=queues, worker_id="w_inline"
        )
        worker_thread = threading.Thread(
            target=worker_loop,
            args=(config, LocalWorkerClient(core), core.registry),
            kwargs={"stop_event": stop_event},
            name="inline-worker",
            daemon=True,
        )
        worker_thread.start()
        click.echo(f"inline worker serving queues: {', '.join(queues)}")

    try:
        uvicorn.run(app, host=host, port=port, log_level="warning")
    finally:
        stop_event.set()
        if worker_thread is not None:
            worker_thread.join(timeout=5.0)


# --------------------------------------------------------------------------- worker


@main.command()
@click.option("--server", required=True, help="Server base URL.")
@click.option(
    "--token",
    envvar="ANNOLAB_WORKER_TOKEN",
    required=True,
    help="Worker bearer token (env: ANNOLAB_WORKER_TOKEN).",
)
@click.option(
    "--queues",
    default="cpu-light",
    show_default=True,
    help="Comma-separated queue classes to serve.",
)
@click.option("--parallelism", default=2, show_default=True, help="Concurrent tasks.")
@click.option("--plugins-dir", default=None, help="Directory of external plugin manifests.")
@click.option("--worker-id", default=None, help="Stable worker identity (generated if omitted).")
def worker(
    server: str,
    token: str,
    queues: str,
    parallelism: int,
    plugins_dir: Optional[str],
    worker_id: Optional[str],
) -> None:
    """Run a task worker against a server."""
    from annolab.worker import (
        HttpServerClient,
        WorkerAuthError,
        WorkerConfig,
        discover_plugins,
        worker_loop,
    )

    queue_classes = [q.strip() for q in queues.split(",") if q.strip()]
    try:
        config = WorkerConfig(
            server_url=server,
            token=token,
            queue_classes=queue_classes,
            parallelism=parallelism,
            plugins_dir=plugins_dir,
            worker_id=worker_id,
        )
    except ValueError as exc:
        raise click.BadParameter(str(exc))

    registry = discover_plugins(plugins_dir, log=lambda msg: click.echo(msg, err=True))
    click.echo(
        f"worker {config.worker_id} serving {', '.join(queue_classes)} "
        f"({len(registry)} plugin(s)) against {server}"
    )
    stop_event = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop_event.set())
    try:
        worker_loop(config, HttpServerClient(server, token), registry, stop_event=stop_event)
    except WorkerAuthError as exc:
        click.echo(f"error: server rejected worker token: {exc}", err=True)
        raise SystemExit(EXIT_AUTH)
    except KeyboardInterrupt:
        pass


# --------------------------------------------------------------------------- client


class ClientContext:
    def __init__(self, server: str, token: Optional[str], as_json: bool):
        self.server = server.rstrip("/")
        self.token = token
        self.as_json = as_json

    def headers(self) -> dict[str, str]:
        return {"authorization": f"Bearer {self.token}"} if self.token else {}

    def request(
        self,
        method: str,
        path: str,
        json_body: Optional[dict[str, Any]] = None,
        content: Optional[bytes] = None,
        params: Optional[dict[str, str]] = None,
    ) -> httpx.Response:
        url = f"{self.server}{path}"
        try:
            resp = httpx.request(
                method,
                url,
                json=json_body,
                content=content,
                params=params,
                headers=self.headers(),
                timeout=30.0,
            )
        except httpx.HTTPError as exc:
            click.echo(f"error: cannot reach {url}: {exc}", err=True)
            raise SystemExit(EXIT_TRANSPORT)
        if resp.status_code >= 400:
            try:
                envelope = resp.json()["error"]
                message = f"{envelope['code']}: {envelope['message']}"
            except Exception:
                message = resp.text[:300]
            click.echo(f"error: {resp.status_code} {message}", err=True)
            raise SystemExit(EXIT_TRANSPORT)
        return resp

    def emit(self, doc: Any, human: str) -> None:
        if self.as_json:
            click.echo(json.dumps(doc, indent=2, sort_keys=True))
        else:
            click.echo(human)


def _wait_for_job(ctx: ClientContext, job_id: str, poll_s: float, timeout_s: float) -> dict:
    deadline = time.monotonic() + timeout_s
    while True:
        doc = ctx.request("GET", f"/api/jobs/{job_id}").json()
        if doc["status"] in ("succeeded", "failed", "cancelled"):
            return doc
        if time.monotonic() >= deadline:
            click.echo(f"error: timed out waiting for job {job_id}", err=True)
            raise SystemExit(EXIT_TRANSPORT)
        time.sleep(poll_s)


def _finish_job(ctx: ClientContext, doc: dict, out: Optional[str]) -> NoReturn:
    status = doc["status"]
    if status != "succeeded":
        click.echo(f"job {doc['job_id']} {status}: {doc.get('failure_reason')}", err=True)
        raise SystemExit(EXIT_JOB_FAILED)
    result = ctx.request("GET", f"/api/jobs/{doc['job_id']}/result").content
    if out:
        Path(out).write_bytes(result)
        if not ctx.as_json:
            click.echo(f"result written to {out} ({len(result)} bytes)")
        else:
            click.echo(json.dumps({"job": doc, "result_path": out}, indent=2, sort_keys=True))
    else:
        if ctx.as_json:
            click.echo(
                json.dumps(
                    {"job": doc, "result_b64": base64.b64encode(result).decode("ascii")},
                    indent=2,
                    sort_keys=True,
                )
            )
        else:
            sys.stdout.write(result.decode("utf-8", errors="replace"))
            if result and not result.endswith(b"\n"):
                sys.stdout.write("\n")
    raise SystemExit(0)


def client_options(fn):
    fn = click.option(
        "--server",
        envvar="ANNOLAB_SERVER",
        default=DEFAULT_SERVER,
        show_default=True,
        help="Server base URL (env: ANNOLAB_SERVER).",
    )(fn)
    fn = click.option(
        "--token",
        envvar="ANNOLAB_TOKEN",
        default=None,
        help="Bearer token (env: ANNOLAB_TOKEN).",
    )(fn)
    fn = click.option("--json", "as_json", is_flag=True, help="Print the raw JSON response.")(fn)
    return fn


@main.group()
def client() -> None:
    """Talk to a running server as a user."""


@client.command()
@client_options
@click.argument("username")
@click.option("--password", prompt=True, hide_input=True)
def login(server: str, token: Optional[str], as_json: bool, username: str, password: str) -> None:
    """Obtain a bearer token for USERNAME."""
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request(
        "POST", "/api/auth/token", json_body={"username": username, "password": password}
    ).json()
    ctx.emit(doc, f"export ANNOLAB_TOKEN={doc['token']}")


@client.command()
@client_options
def models(server: str, token: Optional[str], as_json: bool) -> None:
    """List models you own or that are public."""
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request("GET", "/api/models").json()
    lines = [f"{'MODEL':<42} {'STATUS':<9} {'VISIBILITY':<10} {'TASK':<18} PARENT"]
    for model in doc["models"]:
        lines.append(
            f"{model['model_id']:<42} {model['status']:<9} {model['visibility']:<10} "
            f"{model['plugin_id']}/{model['task_name']:<10} {model['parent_model_id'] or '-'}"
        )
    ctx.emit(doc, "\n".join(lines))


@client.command()
@client_options
@click.argument("model_id")
@click.option("--input", "input_text", default=None, help="Inline input text.")
@click.option(
    "--input-file",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="File whose bytes are the input.",
)
@click.option("--params", "params_json", default="{}", help="Task parameters as JSON.")
@click.option("--wait", is_flag=True, help="Poll until the job finishes and print the result.")
@click.option("--out", default=None, help="With --wait: write result bytes to this file.")
@click.option("--poll-s", default=0.5, show_default=True)
@click.option("--timeout-s", default=600.0, show_default=True)
def predict(
    server: str,
    token: Optional[str],
    as_json: bool,
    model_id: str,
    input_text: Optional[str],
    input_file: Optional[str],
    params_json: str,
    wait: bool,
    out: Optional[str],
    poll_s: float,
    timeout_s: float,
) -> None:
    """Submit a prediction job to MODEL_ID."""
    if (input_text is None) == (input_file is None):
        raise click.UsageError("exactly one of --input or --input-file is required")
    try:
        params = json.loads(params_json)
    except json.JSONDecodeError as exc:
        raise click.BadParameter(f"--params is not valid JSON: {exc}")
    body: dict[str, Any] = {"params": params}
    if input_text is not None:
        body["inline_input"] = input_text
    else:
        data = Path(input_file).read_bytes()
        body["inline_input_b64"] = base64.b64encode(data).decode("ascii")
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request("POST", f"/api/models/{model_id}/predict", json_body=body).json()
    if not wait:
        ctx.emit(doc, f"job {doc['job_id']} queued")
        return
    _finish_job(ctx, _wait_for_job(ctx, doc["job_id"], poll_s, timeout_s), out)


@client.command()
@client_options
@click.argument("model_id")
@click.option("--dataset", "dataset_id", required=True, help="Training dataset id.")
@click.option("--params", "params_json", default="{}", help="Training parameters as JSON.")
@click.option("--wait", is_flag=True, help="Poll until training finishes.")
@click.option("--poll-s", default=0.5, show_default=True)
@click.option("--timeout-s", default=600.0, show_default=True)
def finetune(
    server: str,
    token: Optional[str],
    as_json: bool,
    model_id: str,
    dataset_id: str,
    params_json: str,
    wait: bool,
    poll_s: float,
    timeout_s: float,
) -> None:
    """Fine-tune MODEL_ID on a dataset, creating a child model."""
    try:
        params = json.loads(params_json)
    except json.JSONDecodeError as exc:
        raise click.BadParameter(f"--params is not valid JSON: {exc}")
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request(
        "POST",
        f"/api/models/{model_id}/finetune",
        json_body={"dataset_id": dataset_id, "params": params},
    ).json()
    if not wait:
        ctx.emit(doc, f"job {doc['job_id']} queued; new model {doc['new_model_id']}")
        return
    final = _wait_for_job(ctx, doc["job_id"], poll_s, timeout_s)
    if final["status"] != "succeeded":
        click.echo(
            f"training job {final['job_id']} {final['status']}: {final.get('failure_reason')}",
            err=True,
        )
        raise SystemExit(EXIT_JOB_FAILED)
    model = ctx.request("GET", f"/api/models/{doc['new_model_id']}").json()
    ctx.emit(
        {"job": final, "model": model},
        f"model {model['model_id']} is {model['status']}",
    )


@client.command("dataset-upload")
@client_options
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "format_name", required=True, help="Dataset format name.")
@click.option("--task-name", default="", help="Training task the dataset targets.")
def dataset_upload(
    server: str,
    token: Optional[str],
    as_json: bool,
    file: str,
    format_name: str,
    task_name: str,
) -> None:
    """Upload FILE as a dataset."""
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request(
        "POST",
        "/api/datasets",
        content=Path(file).read_bytes(),
        params={"format": format_name, "task_name": task_name},
    ).json()
    ctx.emit(doc, f"dataset {doc['dataset_id']} ({doc['item_count']} item(s))")


@client.command("jobs-tail")
@client_options
@click.argument("job_id")
@click.option("--poll-s", default=1.0, show_default=True)
@click.option("--timeout-s", default=600.0, show_default=True)
def jobs_tail(
    server: str,
    token: Optional[str],
    as_json: bool,
    job_id: str,
    poll_s: float,
    timeout_s: float,
) -> None:
    """Stream a job's logs until it finishes; exit 3 if it does not succeed."""
    ctx = ClientContext(server, token, as_json)
    offset = 0
    deadline = time.monotonic() + timeout_s
    while True:
        doc = ctx.request("GET", f"/api/jobs/{job_id}/logs", params={"offset": str(offset)}).json()
        chunk = base64.b64decode(doc["payload_b64"])
        if chunk:
            sys.stdout.write(chunk.decode("utf-8", errors="replace"))
            sys.stdout.flush()
        offset = doc["next_offset"]
        if doc["finished"] and not chunk:
            break
        if time.monotonic() >= deadline:
            click.echo(f"error: timed out tailing job {job_id}", err=True)
            raise SystemExit(EXIT_TRANSPORT)
        if not chunk:
            time.sleep(poll_s)
    final = ctx.request("GET", f"/api/jobs/{job_id}").json()
    if as_json:
        click.echo(json.dumps(final, indent=2, sort_keys=True))
    else:
        click.echo(f"job {job_id} {final['status']}")
    if final["status"] != "succeeded":
        raise SystemExit(EXIT_JOB_FAILED)


@client.command()
@client_options
@click.argument("model_id")
@click.option("--private", is_flag=True, help="Make the model private instead of public.")
def share(
    server: str, token: Optional[str], as_json: bool, model_id: str, private: bool
) -> None:
    """Make MODEL_ID public (or private again with --private)."""
    ctx = ClientContext(server, token, as_json)
    visibility = "private" if private else "public"
    doc = ctx.request(
        "PATCH", f"/api/models/{model_id}", json_body={"visibility": visibility}
    ).json()
    ctx.emit(doc, f"model {model_id} is now {doc['visibility']}")


@client.command()
@client_options
@click.argument("model_id")
@click.option("--yes", is_flag=True, help="Skip the confirmation prompt.")
def delete(server: str, token: Optional[str], as_json: bool, model_id: str, yes: bool) -> None:
    """Delete MODEL_ID and everything derived from it alone."""
    if not yes:
        click.confirm(
            f"Delete model {model_id} with its training jobs, logs, and private datasets?",
            abort=True,
        )
    ctx = ClientContext(server, token, as_json)
    doc = ctx.request("DELETE", f"/api/models/{model_id}").json()
    ctx.emit(doc, "deleted: " + ", ".join(doc["deleted"]))


if __name__ == "__main__":
    main()
