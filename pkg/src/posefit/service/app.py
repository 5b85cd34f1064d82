"""HTTP front end. Paths in requests refer to the server's filesystem."""
from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__
from .. import config as cfgmod
from ..errors import ConfigError, PosefitError
from . import handlers
from . import schemas as S

_STATUS = {2: 400, 3: 422}


def create_app() -> FastAPI:
    app = FastAPI(title="posefit", version=__version__)
    sessions = handlers.SessionStore()

    @app.exception_handler(PosefitError)
    async def _posefit_error(request: Request, exc: PosefitError):
        body = S.ErrorBody(error=exc.kind, message=str(exc), exit_code=exc.exit_code)
        return JSONResponse(status_code=_STATUS.get(exc.exit_code, 500), content=body.model_dump())

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        body = S.ErrorBody(error=ConfigError.kind, message=str(exc.errors()), exit_code=ConfigError.exit_code)
        return JSONResponse(status_code=400, content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/defaults")
    def defaults() -> dict:
        return cfgmod.DEFAULTS

    # handlers are blocking numpy work; plain ``def`` routes run in the threadpool
    @app.post("/generate", response_model=S.GenerateResponse)
    def generate(req: S.GenerateRequest):
        return handlers.generate(req)

    @app.post("/track", response_model=S.TrackResponse)
    def track(req: S.TrackRequest):
        return handlers.track(req)

    @app.post("/eval", response_model=S.EvalResponse)
    def evaluate(req: S.EvalRequest):
        return handlers.evaluate_files(req)

    @app.post("/bench", response_model=S.BenchResponse)
    def bench(req: S.BenchRequest):
        return handlers.bench(req)

    @app.post("/sessions", response_model=S.SessionResponse, status_code=201)
    def open_session(req: S.SessionRequest):
        return sessions.open(req)

    @app.post("/sessions/{session_id}/frames", response_model=S.FrameResponse)
    def push_frame(session_id: str, req: S.FrameRequest):
        return sessions.step(session_id, req)

    @app.delete("/sessions/{session_id}", status_code=204)
    def close_session(session_id: str):
        sessions.close(session_id)

    return app


app = create_app()
