"""HTTP layer: a thin FastAPI adapter over ServiceCore.

Every route delegates to the service core; this module only translates
HTTP (auth headers, JSON bodies, status codes) to and from core calls.
All errors use one envelope: {"error": {"code": ..., "message": ...}}.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Union

from fastapi import Depends, FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from annolab.model import Role
from annolab.service import MAX_BODY_BYTES, ApiError, ServiceCore


class TokenRequest(BaseModel):
    username: str
    password: str


class CreateUserRequest(BaseModel):
    username: str
    password: str
    display_name: str = ""
    role: str = "user"


class VisibilityPatch(BaseModel):
    visibility: str


class PredictRequest(BaseModel):
    inline_input: Optional[str] = None
    inline_input_b64: Optional[str] = None
    input_ref: Optional[str] = None
    params: dict[str, Any] = Field(default_factory=dict)


class FinetuneRequest(BaseModel):
    dataset_id: str
    params: dict[str, Any] = Field(default_factory=dict)


class LeaseRequest(BaseModel):
    queue_classes: list[str]
    worker_id: str


class HeartbeatRequest(BaseModel):
    job_id: str
    worker_id: str


class AppendLogRequest(BaseModel):
    job_id: str
    offset: int
    payload_b64: str


class CompleteRequest(BaseModel):
    job_id: str
    worker_id: str
    outcome: str
    result_b64: Optional[str] = None
    reason: Optional[str] = None


def _error_response(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def _bearer_token(request: Request) -> Optional[str]:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header[7:].strip()
    return None


def create_app(core: ServiceCore, webui_dir: Optional[Union[str, Path]] = None) -> FastAPI:
    app = FastAPI(title="annolab", docs_url=None, redoc_url=None, openapi_url=None)

    def current_user(request: Request) -> dict[str, Any]:
        return core.authenticate(_bearer_token(request))

    def worker_user(request: Request) -> dict[str, Any]:
        user = current_user(request)
        if user["role"] != Role.WORKER.value:
            raise ApiError(401, "unauthorized", "worker token required")
        return user

    @app.exception_handler(ApiError)
    async def on_api_error(request: Request, exc: ApiError) -> JSONResponse:
        return _error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError) -> JSONResponse:
        first = exc.errors()[0] if exc.errors() else {}
        where = ".".join(str(p) for p in first.get("loc", ()) if p != "body")
        message = f"{where}: {first.get('msg', 'invalid request')}" if where else "invalid request"
        return _error_response(400, "invalid_request", message)

    @app.middleware("http")
    async def body_size_limit(request: Request, call_next):
        length = request.headers.get("content-length")
        if length is not None and length.isdigit() and int(length) > MAX_BODY_BYTES:
            return _error_response(413, "too_large", f"body exceeds {MAX_BODY_BYTES} bytes")
        return await call_next(request)

    # --- auth and users ---

    @app.post("/api/auth/token")
    def issue_token(body: TokenRequest) -> dict[str, Any]:
        return core.issue_token(body.username, body.password)

    @app.post("/api/users", status_code=201)
    def create_user(
        body: CreateUserRequest, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.create_user(
            user, body.username, body.password, display_name=body.display_name, role=body.role
        )

    # --- models ---

    @app.get("/api/models")
    def list_models(user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return {"models": core.list_models(user)}

    @app.get("/api/models/{model_id}")
    def get_model(model_id: str, user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return core.get_model(user, model_id)

    @app.patch("/api/models/{model_id}")
    def patch_model(
        model_id: str, body: VisibilityPatch, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.set_model_visibility(user, model_id, body.visibility)

    @app.delete("/api/models/{model_id}")
    def delete_model(
        model_id: str, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.delete_model(user, model_id)

    @app.post("/api/models/{model_id}/predict", status_code=202)
    def predict(
        model_id: str, body: PredictRequest, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.predict(
            user,
            model_id,
            inline_input=body.inline_input,
            inline_input_b64=body.inline_input_b64,
            input_ref=body.input_ref,
            params=body.params,
        )

    @app.post("/api/models/{model_id}/finetune", status_code=202)
    def finetune(
        model_id: str, body: FinetuneRequest, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.finetune(user, model_id, body.dataset_id, params=body.params)

    # --- datasets ---

    @app.post("/api/datasets", status_code=201)
    async def create_dataset(
        request: Request,
        format: str = Query(...),
        task_name: str = Query(""),
        user: dict[str, Any] = Depends(current_user),
    ) -> dict[str, Any]:
        data = await request.body()
        return core.create_dataset(user, format, data, task_name=task_name)

    @app.get("/api/datasets")
    def list_datasets(user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return {"datasets": core.list_datasets(user)}

    @app.get("/api/datasets/{dataset_id}")
    def get_dataset(
        dataset_id: str, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.get_dataset(user, dataset_id)

    @app.delete("/api/datasets/{dataset_id}")
    def delete_dataset(
        dataset_id: str, user: dict[str, Any] = Depends(current_user)
    ) -> dict[str, Any]:
        return core.delete_dataset(user, dataset_id)

    # --- jobs ---

    @app.get("/api/jobs")
    def list_jobs(user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return {"jobs": core.list_jobs(user)}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str, user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return core.get_job(user, job_id)

    @app.get("/api/jobs/{job_id}/logs")
    def job_logs(
        job_id: str,
        offset: int = Query(0, ge=0),
        user: dict[str, Any] = Depends(current_user),
    ) -> dict[str, Any]:
        return core.job_logs(user, job_id, offset)

    @app.get("/api/jobs/{job_id}/result")
    def job_result(job_id: str, user: dict[str, Any] = Depends(current_user)) -> Response:
        return Response(
            content=core.job_result(user, job_id), media_type="application/octet-stream"
        )

    @app.post("/api/jobs/{job_id}/cancel")
    def cancel_job(job_id: str, user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return core.cancel_job(user, job_id)

    @app.post("/api/jobs/{job_id}/restart")
    def restart_job(job_id: str, user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return core.restart_job(user, job_id)

    # --- plugins and meta ---

    @app.get("/api/plugins")
    def list_plugins(user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return {"plugins": core.list_plugins()}

    @app.get("/api/queue/stats")
    def queue_stats(user: dict[str, Any] = Depends(current_user)) -> dict[str, Any]:
        return core.queue_stats()

    @app.get("/api/meta")
    def meta() -> dict[str, Any]:
        return core.meta()

    # --- worker protocol ---

    @app.post("/api/worker/lease")
    def worker_lease(
        body: LeaseRequest, user: dict[str, Any] = Depends(worker_user)
    ) -> Response:
        doc = core.worker_lease(body.queue_classes, body.worker_id)
        if doc is None:
            return Response(status_code=204)
        return JSONResponse(content=doc)

    @app.post("/api/worker/heartbeat")
    def worker_heartbeat(
        body: HeartbeatRequest, user: dict[str, Any] = Depends(worker_user)
    ) -> dict[str, Any]:
        return core.worker_heartbeat(body.job_id, body.worker_id)

    @app.post("/api/worker/logs")
    def worker_logs(
        body: AppendLogRequest, user: dict[str, Any] = Depends(worker_user)
    ) -> dict[str, Any]:
        return core.worker_append_log(body.job_id, body.offset, body.payload_b64)

    @app.post("/api/worker/complete")
    def worker_complete(
        body: CompleteRequest, user: dict[str, Any] = Depends(worker_user)
    ) -> dict[str, Any]:
        return core.worker_complete(
            body.job_id,
            body.worker_id,
            body.outcome,
            result_b64=body.result_b64,
            reason=body.reason,
        )

    @app.get("/api/worker/blobs/{blob_id}")
    def worker_blob(blob_id: str, user: dict[str, Any] = Depends(worker_user)) -> Response:
        return Response(
            content=core.worker_fetch_blob(blob_id), media_type="application/octet-stream"
        )

    if webui_dir is not None and Path(webui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(webui_dir), html=True), name="webui")

    return app
