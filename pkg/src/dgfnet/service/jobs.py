"""Background job registry: one worker thread, jobs run in submit order.

Training and evaluation saturate the CPU, so the pool is deliberately
single-worker; queued jobs report state "queued" until they start.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor

from dgfnet.errors import category_of


class JobManager:
    def __init__(self, max_workers: int = 1):
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()

    def submit(self, op: str, fn) -> dict:
        """``fn`` receives a progress callback and returns a JSON-able
        dict. Returns a snapshot of the new job record."""
        job_id = uuid.uuid4().hex[:12]
        rec = {"job_id": job_id, "op": op, "state": "queued",
               "progress": None, "result": None,
               "error": None, "error_category": None}
        with self._lock:
            self._jobs[job_id] = rec
        self._pool.submit(self._run, job_id, fn)
        return dict(rec)

    def _run(self, job_id: str, fn) -> None:
        def progress(update: dict) -> None:
            with self._lock:
                self._jobs[job_id]["progress"] = dict(update)

        with self._lock:
            self._jobs[job_id]["state"] = "running"
        try:
            result = fn(progress)
        except BaseException as e:
            with self._lock:
                rec = self._jobs[job_id]
                rec["state"] = "failed"
                rec["error"] = f"{type(e).__name__}: {e}"
                rec["error_category"] = category_of(e)
            return
        with self._lock:
            rec = self._jobs[job_id]
            rec["state"] = "done"
            rec["result"] = result

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            rec = self._jobs.get(job_id)
            return dict(rec) if rec is not None else None

    def list(self) -> list[dict]:
        with self._lock:
            return [dict(r) for r in self._jobs.values()]

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)
