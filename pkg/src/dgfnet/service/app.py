"""HTTP facade over the separation toolkit.

Every operation runs as a background job: POST /jobs/<op> returns a job
id immediately, GET /jobs/<id> polls its state. Errors surface in the
job record with the same category names the CLI maps to exit codes.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from dgfnet import __version__
from dgfnet.service import ops, schemas
from dgfnet.service.jobs import JobManager


def create_app(manager: JobManager | None = None) -> FastAPI:
    app = FastAPI(title="dgfnet separation service", version=__version__)
    jobs = manager if manager is not None else JobManager()
    app.state.jobs = jobs

    def _created(rec: dict) -> schemas.JobCreated:
        return schemas.JobCreated(job_id=rec["job_id"], op=rec["op"],
                                  state=rec["state"])

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/jobs/gen-data", response_model=schemas.JobCreated)
    def gen_data(req: schemas.GenDataRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "gen-data", lambda progress: ops.run_gen_data(req, progress)))

    @app.post("/jobs/train", response_model=schemas.JobCreated)
    def train_job(req: schemas.TrainRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "train", lambda progress: ops.run_train(req, progress)))

    @app.post("/jobs/eval", response_model=schemas.JobCreated)
    def eval_job(req: schemas.EvalRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "eval", lambda progress: ops.run_eval(req, progress)))

    @app.post("/jobs/ablate", response_model=schemas.JobCreated)
    def ablate_job(req: schemas.AblateRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "ablate", lambda progress: ops.run_ablate(req, progress)))

    @app.post("/jobs/analyze-gates", response_model=schemas.JobCreated)
    def analyze_gates_job(req: schemas.AnalyzeGatesRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "analyze-gates", lambda progress: ops.run_analyze_gates(req, progress)))

    @app.post("/jobs/separate", response_model=schemas.JobCreated)
    def separate_job(req: schemas.SeparateRequest) -> schemas.JobCreated:
        return _created(jobs.submit(
            "separate", lambda progress: ops.run_separate(req, progress)))

    @app.get("/jobs/{job_id}", response_model=schemas.JobStatus)
    def job_status(job_id: str) -> schemas.JobStatus:
        rec = jobs.get(job_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id!r}")
        return schemas.JobStatus(**rec)

    @app.get("/jobs", response_model=list[schemas.JobStatus])
    def job_list() -> list[schemas.JobStatus]:
        return [schemas.JobStatus(**r) for r in jobs.list()]

    return app
