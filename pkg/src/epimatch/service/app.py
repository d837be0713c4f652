"""FastAPI application exposing the pipeline jobs.

Input/validation problems map to HTTP 400 with {"category": "input"},
algorithmic failures to HTTP 500 with {"category": "runtime"}; the CLI
client translates these back to its exit codes.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..errors import InputError, PipelineError
from . import jobs, schemas


def create_app() -> FastAPI:
    app = FastAPI(title="epimatch", version=_version())

    @app.exception_handler(InputError)
    async def _input_error(request: Request, exc: InputError):
        return JSONResponse(status_code=400, content={
            "category": "input", "message": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={
            "category": "input", "message": str(exc)})

    @app.exception_handler(PipelineError)
    async def _pipeline_error(request: Request, exc: PipelineError):
        return JSONResponse(status_code=500, content={
            "category": "runtime", "message": str(exc)})

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=_version())

    @app.post("/v1/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        return jobs.run_synth(req)

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return jobs.run_train(req)

    @app.post("/v1/match", response_model=schemas.MatchResponse)
    def match(req: schemas.MatchRequest):
        return jobs.run_match(req)

    @app.post("/v1/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest):
        return jobs.run_eval(req)

    @app.post("/v1/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest):
        return jobs.run_ablate(req)

    @app.post("/v1/robustness", response_model=schemas.RobustnessResponse)
    def robustness(req: schemas.RobustnessRequest):
        return jobs.run_robustness(req)

    return app


def _version() -> str:
    from .. import __version__
    return __version__
