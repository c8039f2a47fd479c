"""HTTP service for datasets, training jobs, and expert-elicitation sessions.

Everything lives under one data directory: datasets stored by content hash,
checkpoints by job id, one shared sample set per (checkpoint, count, seed),
and an append-only JSON-lines event log per session. A session holds a
weighted-sample belief over graphs; answering the pending query commits a
reweighting and selects the next question, while what-if requests compute
the same update on a throwaway copy. Restarting the process loses nothing:
a session is rebuilt by replaying its event log, which reproduces the
weights bit-for-bit because every update is deterministic given the log.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import uuid
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import elicitation as el
from . import policy as pol
from . import training as tr
from .errors import DegenerateEvidenceError, TrainingDivergedError
from .graphs import AncestralGraph, node_pairs
from .scm import Dataset
from .scoring import GraphScorer, RewardSpec, log_reward

API_PREFIX = "/v1"
DEFAULT_SAMPLE_COUNT = 2000


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ServiceConfig:
    data_dir: str = "agflow-data"
    host: str = "127.0.0.1"
    port: int = 8000
    job_concurrency: int = 1

    def __post_init__(self):
        if self.job_concurrency < 1:
            raise ValueError("job_concurrency must be >= 1")


def load_config(path: str | None = None, env=None) -> ServiceConfig:
    """File (TOML or JSON) settings with environment overrides on top."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith(".json"):
            values = json.loads(text)
        else:
            try:
                import tomllib  # py311+
            except ModuleNotFoundError:  # pragma: no cover - py310 fallback
                import tomli as tomllib
            values = tomllib.loads(text)
    known = {"data_dir", "host", "port", "job_concurrency"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = ServiceConfig(**values)
    if "AGFLOW_DATA_DIR" in env:
        cfg = replace(cfg, data_dir=env["AGFLOW_DATA_DIR"])
    if "AGFLOW_HOST" in env:
        cfg = replace(cfg, host=env["AGFLOW_HOST"])
    if "AGFLOW_PORT" in env:
        cfg = replace(cfg, port=int(env["AGFLOW_PORT"]))
    if "AGFLOW_JOB_CONCURRENCY" in env:
        cfg = replace(cfg, job_concurrency=int(env["AGFLOW_JOB_CONCURRENCY"]))
    return cfg


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _selection_rng(seed: int, step: int) -> np.random.Generator:
    # replay-stable: the rng for each query selection depends only on
    # (session seed, step index), never on wall-clock or call order
    return np.random.default_rng([seed, step])


# ---------------------------------------------------------------------------
# sessions


@dataclass
class SessionRecord:
    id: str
    checkpoint_id: str
    dataset_id: str
    pi: float
    strategy: str
    seed: int
    sample_count: int
    sample_seed: int
    truth: AncestralGraph | None
    belief: el.BeliefState
    pending: tuple[int, int] | None
    trace: list
    created_at: str
    updated_at: str
    lock: threading.Lock

    @property
    def status(self) -> str:
        if self.pending is not None:
            return "awaiting_answer"
        open_pairs = len(node_pairs(self.belief.n)) - len(self.belief.queried)
        return "exhausted" if open_pairs == 0 else "idle"


class AppState:
    """All mutable service state plus the file layout underneath it."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        root = Path(config.data_dir)
        self.datasets_dir = root / "datasets"
        self.checkpoints_dir = root / "checkpoints"
        self.samples_dir = root / "samples"
        self.sessions_dir = root / "sessions"
        for d in (self.datasets_dir, self.checkpoints_dir, self.samples_dir,
                  self.sessions_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.jobs: dict[str, dict] = {}
        self.jobs_lock = threading.Lock()
        self.job_slots = threading.Semaphore(config.job_concurrency)
        self.sessions: dict[str, SessionRecord] = {}
        self.sessions_lock = threading.Lock()
        self._scorers: dict[str, GraphScorer] = {}

    # -- datasets

    def ingest_dataset(self, text: str) -> tuple[str, Dataset]:
        try:
            data = Dataset.from_csv(text)
        except ValueError as exc:
            raise ApiError(400, "bad_csv", "dataset rejected", str(exc)) from exc
        dataset_id = hashlib.sha256(text.encode()).hexdigest()[:16]
        path = self.datasets_dir / f"{dataset_id}.csv"
        if not path.exists():
            path.write_text(text)
        return dataset_id, data

    def load_dataset(self, dataset_id: str) -> Dataset:
        path = self.datasets_dir / f"{dataset_id}.csv"
        if not path.exists():
            raise ApiError(404, "dataset_not_found",
                           f"no dataset {dataset_id!r}")
        return Dataset.from_csv(path.read_text())

    def scorer_for(self, dataset_id: str) -> GraphScorer:
        scorer = self._scorers.get(dataset_id)
        if scorer is None:
            scorer = GraphScorer(self.load_dataset(dataset_id))
            self._scorers[dataset_id] = scorer
        return scorer

    # -- training jobs

    def start_job(self, dataset_id: str, config_values: dict) -> str:
        data = self.load_dataset(dataset_id)
        try:
            config = tr.TrainConfig(**config_values)
        except (TypeError, ValueError) as exc:
            raise ApiError(400, "bad_config", "invalid training config",
                           str(exc)) from exc
        job_id = uuid.uuid4().hex[:12]
        with self.jobs_lock:
            self.jobs[job_id] = {"status": "queued"}
        worker = threading.Thread(
            target=self._run_job, args=(job_id, dataset_id, data, config),
            daemon=True)
        worker.start()
        return job_id

    def _run_job(self, job_id: str, dataset_id: str, data: Dataset,
                 config: tr.TrainConfig) -> None:
        with self.job_slots:
            def on_epoch(rec: dict) -> None:
                with self.jobs_lock:
                    self.jobs[job_id] = {"status": "running",
                                         "epoch": rec["epoch"],
                                         "mean_loss": rec["mean_loss"]}

            with self.jobs_lock:
                self.jobs[job_id] = {"status": "running", "epoch": -1,
                                     "mean_loss": None}
            try:
                result = tr.train(data, config,
                                  scorer=self.scorer_for(dataset_id),
                                  progress=on_epoch)
            except TrainingDivergedError as exc:
                with self.jobs_lock:
                    self.jobs[job_id] = {"status": "failed", "reason": str(exc)}
                return
            except Exception as exc:  # noqa: BLE001 - surfaced via job status
                with self.jobs_lock:
                    self.jobs[job_id] = {"status": "failed", "reason": str(exc)}
                return
            meta = {
                "dataset_id": dataset_id,
                "reward_spec": result.reward_spec.to_json_obj(),
                "train_config": asdict(result.config),
                "epochs_run": len(result.log),
                "stopped_early": result.stopped_early,
            }
            pol.save_checkpoint(self.checkpoints_dir / f"{job_id}.npz",
                                result.params, meta=meta)
            (self.checkpoints_dir / f"{job_id}.json").write_text(
                json.dumps({"checkpoint_id": job_id, **meta}))
            with self.jobs_lock:
                self.jobs[job_id] = {"status": "done", "checkpoint_id": job_id}

    def job_status(self, job_id: str) -> dict:
        with self.jobs_lock:
            status = self.jobs.get(job_id)
            if status is None:
                raise ApiError(404, "job_not_found", f"no job {job_id!r}")
            return dict(status)

    # -- checkpoints and shared sample sets

    def load_checkpoint(self, checkpoint_id: str) -> tuple[pol.PolicyParams, dict]:
        path = self.checkpoints_dir / f"{checkpoint_id}.npz"
        if not path.exists():
            raise ApiError(404, "checkpoint_not_found",
                           f"no checkpoint {checkpoint_id!r}")
        return pol.load_checkpoint(path)

    def list_checkpoints(self) -> list[dict]:
        out = []
        for path in sorted(self.checkpoints_dir.glob("*.json")):
            out.append(json.loads(path.read_text()))
        return out

    def sample_set(self, checkpoint_id: str, count: int, seed: int) -> dict:
        """Load or create the shared sample pool for a checkpoint."""
        path = self.samples_dir / f"{checkpoint_id}-{count}-{seed}.json"
        if path.exists():
            return json.loads(path.read_text())
        params, meta = self.load_checkpoint(checkpoint_id)
        spec = RewardSpec.from_json_obj(meta["reward_spec"])
        scorer = self.scorer_for(meta["dataset_id"])
        fn = lambda g: log_reward(scorer.score(g), spec)
        drawn = tr.sample(params, fn, count, seed)
        payload = {
            "checkpoint_id": checkpoint_id,
            "dataset_id": meta["dataset_id"],
            "count": count,
            "seed": seed,
            "graphs": [g.to_json_obj() for g, _ in drawn],
            "log_rewards": [lr for _, lr in drawn],
            "scores": [scorer.score(g) for g, _ in drawn],
        }
        path.write_text(json.dumps(payload))
        return payload

    # -- sessions

    def _events_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.jsonl"

    def _append_event(self, session_id: str, event: dict) -> None:
        with self._events_path(session_id).open("a") as fh:
            fh.write(json.dumps(event) + "\n")

    def open_session(self, checkpoint_id: str, sample_count: int,
                     sample_seed: int, pi: float, strategy: str, seed: int,
                     truth_edges=None) -> SessionRecord:
        if not 0.0 <= pi <= 1.0:
            raise ApiError(400, "bad_reliability",
                           f"reliability {pi} outside [0, 1]")
        if strategy not in el.STRATEGIES:
            raise ApiError(400, "bad_strategy",
                           f"strategy must be one of {list(el.STRATEGIES)}")
        pool = self.sample_set(checkpoint_id, sample_count, sample_seed)
        session_id = uuid.uuid4().hex[:12]
        created = _now()
        try:
            rec = self._build_session(
                session_id, checkpoint_id, pool, pi, strategy, seed,
                truth_edges, [], created)
        except ValueError as exc:
            raise ApiError(400, "bad_truth", "invalid truth graph",
                           str(exc)) from exc
        # the event lands only after the session is known to build cleanly
        self._append_event(session_id, {
            "type": "open", "session_id": session_id,
            "checkpoint_id": checkpoint_id, "dataset_id": pool["dataset_id"],
            "sample_count": sample_count, "sample_seed": sample_seed,
            "pi": pi, "strategy": strategy, "seed": seed,
            "truth": truth_edges, "created_at": created,
        })
        with self.sessions_lock:
            self.sessions[session_id] = rec
        return rec

    def _build_session(self, session_id, checkpoint_id, pool, pi, strategy,
                       seed, truth_edges, answers, created_at) -> SessionRecord:
        graphs = [AncestralGraph.from_json_obj(o) for o in pool["graphs"]]
        belief = el.BeliefState.from_samples(
            graphs, pool["log_rewards"], pool["scores"])
        truth = None
        if truth_edges is not None:
            truth = AncestralGraph.from_edges(
                belief.n, [tuple(e) for e in truth_edges])
        trace = [{"step": 0, "query": None, "answer": None,
                  **el._metrics(belief, truth)}]
        for step, (relation, feature) in enumerate(answers, start=1):
            belief = el.update_belief(belief, relation, feature, pi)
            trace.append({"step": step, "query": list(relation),
                          "answer": int(feature),
                          **el._metrics(belief, truth)})
        pending = el.select_query(
            belief, pi, strategy=strategy,
            rng=_selection_rng(seed, len(answers)))
        return SessionRecord(
            id=session_id, checkpoint_id=checkpoint_id,
            dataset_id=pool["dataset_id"], pi=pi, strategy=strategy,
            seed=seed, sample_count=pool["count"],
            sample_seed=pool["seed"], truth=truth, belief=belief,
            pending=pending, trace=trace, created_at=created_at,
            updated_at=_now(), lock=threading.Lock())

    def get_session(self, session_id: str) -> SessionRecord:
        with self.sessions_lock:
            rec = self.sessions.get(session_id)
        if rec is not None:
            return rec
        rec = self.replay_session(session_id)
        with self.sessions_lock:
            return self.sessions.setdefault(session_id, rec)

    def replay_session(self, session_id: str) -> SessionRecord:
        path = self._events_path(session_id)
        if not path.exists():
            raise ApiError(404, "session_not_found",
                           f"no session {session_id!r}")
        events = [json.loads(line) for line in path.read_text().splitlines()]
        head = events[0]
        answers = [(tuple(e["relation"]), e["feature"])
                   for e in events[1:] if e["type"] == "answer"]
        pool = self.sample_set(head["checkpoint_id"], head["sample_count"],
                               head["sample_seed"])
        return self._build_session(
            session_id, head["checkpoint_id"], pool, head["pi"],
            head["strategy"], head["seed"], head.get("truth"), answers,
            head["created_at"])

    def answer(self, session_id: str, feature: int) -> SessionRecord:
        rec = self.get_session(session_id)
        if feature not in el.ANSWER_CLASSES:
            raise ApiError(400, "invalid_feature",
                           f"feature must be in 1..4, got {feature}")
        with rec.lock:
            if rec.pending is None:
                raise ApiError(409, "session_exhausted",
                               "no pending query to answer")
            relation = rec.pending
            try:
                belief = el.update_belief(rec.belief, relation, feature, rec.pi)
            except DegenerateEvidenceError as exc:
                raise ApiError(409, "degenerate_evidence", str(exc)) from exc
            step = len(belief.feedbacks)
            self._append_event(session_id, {
                "type": "answer", "relation": list(relation),
                "feature": int(feature), "ts": _now(),
            })
            rec.belief = belief
            rec.trace.append({"step": step, "query": list(relation),
                              "answer": int(feature),
                              **el._metrics(belief, rec.truth)})
            rec.pending = el.select_query(
                belief, rec.pi, strategy=rec.strategy,
                rng=_selection_rng(rec.seed, step))
            rec.updated_at = _now()
        return rec

    def whatif(self, session_id: str, relation, feature: int) -> dict:
        rec = self.get_session(session_id)
        if feature not in el.ANSWER_CLASSES:
            raise ApiError(400, "invalid_feature",
                           f"feature must be in 1..4, got {feature}")
        try:
            hypo = el.update_belief(rec.belief, relation, feature, rec.pi,
                                    allow_repeat=True)
        except ValueError as exc:
            raise ApiError(400, "bad_whatif", "what-if update failed",
                           str(exc)) from exc
        out = {
            "session_id": session_id,
            "relation": [int(relation[0]), int(relation[1])],
            "feature": int(feature),
            "marginals": _marginals_obj(hypo),
            **el._metrics(hypo, rec.truth),
        }
        return out


# ---------------------------------------------------------------------------
# serialization


def _marginals_obj(belief: el.BeliefState) -> list[dict]:
    m = el.marginal_features(belief)
    return [
        {"u": u, "v": v, "p": [float(x) for x in m[k]]}
        for k, (u, v) in enumerate(node_pairs(belief.n))
    ]


def session_snapshot(rec: SessionRecord) -> dict:
    belief = rec.belief
    metrics = el._metrics(belief, rec.truth)
    return {
        "session_id": rec.id,
        "checkpoint_id": rec.checkpoint_id,
        "dataset_id": rec.dataset_id,
        "status": rec.status,
        "n": belief.n,
        "pi": rec.pi,
        "strategy": rec.strategy,
        "sample_count": belief.sample_count,
        "pending": list(rec.pending) if rec.pending is not None else None,
        "marginals": _marginals_obj(belief),
        "history": [
            {"step": i + 1, "u": fb.relation[0], "v": fb.relation[1],
             "feature": fb.answer}
            for i, fb in enumerate(belief.feedbacks)
        ],
        "expected_bic": metrics["expected_bic"],
        "expected_shd": metrics["expected_shd"],
        "ess": metrics["ess"],
        "ess_warning": metrics["ess"] < el.ESS_WARN_THRESHOLD,
        "created_at": rec.created_at,
        "updated_at": rec.updated_at,
    }


# ---------------------------------------------------------------------------
# HTTP layer


class TrainRequest(BaseModel):
    dataset_id: str
    config: dict = {}


class SessionRequest(BaseModel):
    checkpoint_id: str
    sample_count: int = DEFAULT_SAMPLE_COUNT
    sample_seed: int = 0
    pi: float = 0.9
    strategy: str = "cross_entropy"
    seed: int = 0
    truth: list | None = None


class AnswerRequest(BaseModel):
    feature: int


class WhatifRequest(BaseModel):
    relation: list[int]
    feature: int


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    state = AppState(config or ServiceConfig())
    app = FastAPI(title="agflow service")
    app.state.core = state

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message,
                     "detail": exc.detail})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        detail = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}"
                  for e in exc.errors()]
        return JSONResponse(
            status_code=400,
            content={"code": "validation_error",
                     "message": "invalid request", "detail": detail})

    @app.get(f"{API_PREFIX}/health")
    async def health():
        return {"status": "ok"}

    @app.post(f"{API_PREFIX}/datasets")
    async def upload_dataset(request: Request):
        body = await request.body()
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("application/json"):
            try:
                text = json.loads(body.decode())["csv"]
            except (ValueError, KeyError) as exc:
                raise ApiError(400, "bad_request",
                               'expected {"csv": "..."} body', str(exc))
        else:
            text = body.decode()
        dataset_id, data = state.ingest_dataset(text)
        return {"dataset_id": dataset_id, "columns": list(data.columns),
                "rows": data.m}

    @app.post(f"{API_PREFIX}/train")
    async def start_training(req: TrainRequest):
        job_id = state.start_job(req.dataset_id, req.config)
        return {"job_id": job_id}

    @app.get(f"{API_PREFIX}/jobs/{{job_id}}")
    async def job_status(job_id: str):
        return state.job_status(job_id)

    @app.get(f"{API_PREFIX}/checkpoints")
    async def checkpoints():
        return {"checkpoints": state.list_checkpoints()}

    @app.post(f"{API_PREFIX}/sessions")
    async def open_session(req: SessionRequest):
        rec = state.open_session(
            req.checkpoint_id, req.sample_count, req.sample_seed, req.pi,
            req.strategy, req.seed, truth_edges=req.truth)
        return session_snapshot(rec)

    @app.get(f"{API_PREFIX}/sessions/{{session_id}}")
    async def get_session(session_id: str):
        return session_snapshot(state.get_session(session_id))

    @app.post(f"{API_PREFIX}/sessions/{{session_id}}/answer")
    async def answer(session_id: str, req: AnswerRequest):
        return session_snapshot(state.answer(session_id, req.feature))

    @app.post(f"{API_PREFIX}/sessions/{{session_id}}/whatif")
    async def whatif(session_id: str, req: WhatifRequest):
        return state.whatif(session_id, req.relation, req.feature)

    @app.get(f"{API_PREFIX}/sessions/{{session_id}}/trace")
    async def trace(session_id: str):
        rec = state.get_session(session_id)
        return {"session_id": session_id, "status": rec.status,
                "steps": list(rec.trace)}

    return app


def serve(config: ServiceConfig) -> None:  # pragma: no cover - thin wrapper
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
