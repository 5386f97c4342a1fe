"""The federation outer loop: broadcast, local rounds, aggregation,
persistence, and stop conditions.

Each round r broadcasts library v(r-1) (v0 is empty, so round 1 is the
isolated-agents baseline), runs every agent against it, aggregates the
participants' traces into library v(r), and persists the round's artifacts
before the next broadcast. Aggregation never starts until every
participating agent's round has completed or failed.
"""

from __future__ import annotations

import json
import logging
import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import metrics
from .agent import AgentConfig, AgentRoundResult, evaluate_round, run_local_round
from .aggregator import IndexedTraceSet, aggregate_round
from .domain import DomainKind, InsightLibrary, Problem, TraceProfile, render_library
from .errors import MissingGold, TransportError, UnknownAgent, UnknownTask
from .transport import BackendSpec, ChatBackend, create_backend

logger = logging.getLogger(__name__)

#: How non-participation is interpreted: agents outside the participating
#: set still receive the broadcast library and are re-evaluated every round.
EVALUATION_NOTE = (
    "non-participating agents receive each broadcast library and are evaluated "
    "with it every round; per-round and final-round figures are both reported"
)


class ParticipationKind(str, Enum):
    ALL = "all"
    FRACTION = "fraction"
    INCLUDE_ONE = "include_one"
    EXCLUDE_ONE = "exclude_one"


@dataclass(frozen=True)
class ParticipationPolicy:
    """Which agents contribute traces each round.

    Everyone receives the broadcast library regardless; the policy only
    controls whose traces reach the server.
    """

    kind: ParticipationKind
    fraction: float | None = None
    agent_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind is ParticipationKind.FRACTION:
            if self.fraction is None or not (0 < self.fraction <= 1):
                raise ValueError("fraction must be in (0, 1]")
        if self.kind in (ParticipationKind.INCLUDE_ONE, ParticipationKind.EXCLUDE_ONE):
            if not self.agent_id:
                raise ValueError(f"{self.kind.value} policy needs an agent_id")

    @classmethod
    def all(cls) -> "ParticipationPolicy":
        return cls(ParticipationKind.ALL)

    @classmethod
    def of_fraction(cls, p: float) -> "ParticipationPolicy":
        return cls(ParticipationKind.FRACTION, fraction=p)

    @classmethod
    def include_one(cls, agent_id: str) -> "ParticipationPolicy":
        return cls(ParticipationKind.INCLUDE_ONE, agent_id=agent_id)

    @classmethod
    def exclude_one(cls, agent_id: str) -> "ParticipationPolicy":
        return cls(ParticipationKind.EXCLUDE_ONE, agent_id=agent_id)

    @classmethod
    def parse(cls, text: str) -> "ParticipationPolicy":
        """Parse CLI shorthand: ``all``, ``fraction:P``, ``include:ID``,
        ``exclude:ID``."""
        if text == "all":
            return cls.all()
        kind, _, arg = text.partition(":")
        if kind == "fraction" and arg:
            return cls.of_fraction(float(arg))
        if kind == "include" and arg:
            return cls.include_one(arg)
        if kind == "exclude" and arg:
            return cls.exclude_one(arg)
        raise ValueError(f"cannot parse participation policy {text!r}")

    def describe(self) -> str:
        if self.kind is ParticipationKind.ALL:
            return "all"
        if self.kind is ParticipationKind.FRACTION:
            return f"fraction:{self.fraction}"
        return f"{'include' if self.kind is ParticipationKind.INCLUDE_ONE else 'exclude'}:{self.agent_id}"


def select_participants(
    policy: ParticipationPolicy,
    agents: Sequence[AgentConfig],
    round_no: int,
    seed: int,
) -> list[str]:
    """Resolve the participating agent ids for one round.

    The fraction policy samples ceil(p*n) agents from a stream derived from
    (seed, round), so partial participation is reproducible without
    correlating across rounds.
    """

    ids = [a.agent_id for a in agents]
    if policy.kind is ParticipationKind.ALL:
        return list(ids)
    if policy.kind is ParticipationKind.FRACTION:
        k = max(1, math.ceil(policy.fraction * len(ids)))
        rng = random.Random(f"fot-participation:{seed}:{round_no}")
        chosen = set(rng.sample(sorted(ids), k))
        return [i for i in ids if i in chosen]
    if policy.agent_id not in ids:
        raise UnknownAgent(f"agent {policy.agent_id!r} is not configured")
    if policy.kind is ParticipationKind.INCLUDE_ONE:
        return [policy.agent_id]
    return [i for i in ids if i != policy.agent_id]


@dataclass(frozen=True)
class AgentRoundStats:
    """Per-agent accounting for one round."""

    accuracy: float
    task_count: int
    correct_count: int
    completion_tokens: int
    mean_completion_tokens: float
    prompt_tokens: int
    loop_count: int
    mean_loops: float
    trace_count: int
    externally_graded: int
    failures: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "task_count": self.task_count,
            "correct_count": self.correct_count,
            "completion_tokens": self.completion_tokens,
            "mean_completion_tokens": self.mean_completion_tokens,
            "prompt_tokens": self.prompt_tokens,
            "loop_count": self.loop_count,
            "mean_loops": self.mean_loops,
            "trace_count": self.trace_count,
            "externally_graded": self.externally_graded,
            "failures": list(self.failures),
        }


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: tuple[str, ...]
    per_agent: dict[str, AgentRoundStats]
    library_version: int
    wall_time: float

    @property
    def mean_accuracy(self) -> float:
        if not self.per_agent:
            return 0.0
        return sum(s.accuracy for s in self.per_agent.values()) / len(self.per_agent)

    def to_dict(self) -> dict[str, Any]:
        return {
            "round": self.round,
            "participants": list(self.participants),
            "per_agent": {k: v.to_dict() for k, v in self.per_agent.items()},
            "library_version": self.library_version,
            "mean_accuracy": self.mean_accuracy,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoundRecord":
        return cls(
            round=int(data["round"]),
            participants=tuple(data["participants"]),
            per_agent={
                k: AgentRoundStats(
                    accuracy=v["accuracy"],
                    task_count=v["task_count"],
                    correct_count=v["correct_count"],
                    completion_tokens=v["completion_tokens"],
                    mean_completion_tokens=v["mean_completion_tokens"],
                    prompt_tokens=v.get("prompt_tokens", 0),
                    loop_count=v["loop_count"],
                    mean_loops=v["mean_loops"],
                    trace_count=v["trace_count"],
                    externally_graded=v.get("externally_graded", 0),
                    failures=tuple(v.get("failures", ())),
                )
                for k, v in data["per_agent"].items()
            },
            library_version=int(data["library_version"]),
            wall_time=float(data["wall_time"]),
        )


@dataclass(frozen=True)
class FederationConfig:
    agents: tuple[AgentConfig, ...]
    server_backend: BackendSpec
    rounds: int
    participation: ParticipationPolicy
    seed: int
    run_dir: str
    tasks: dict[str, Problem]
    convergence_delta: float | None = None
    max_insights: int | None = None
    parallelism: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.agents:
            raise ValueError("at least one agent must be configured")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        for agent in self.agents:
            for task_id in agent.task_ids:
                if task_id not in self.tasks:
                    raise UnknownTask(f"agent {agent.agent_id!r}: unknown task {task_id!r}")

    def agent_tasks(self, agent: AgentConfig) -> list[Problem]:
        return [self.tasks[t] for t in agent.task_ids]

    def to_dict(self) -> dict[str, Any]:
        # Echoed into the run directory. run_dir itself is omitted: the
        # directory is self-identifying and leaving the path out keeps two
        # runs of the same config byte-comparable.
        return {
            "rounds": self.rounds,
            "participation": self.participation.describe(),
            "seed": self.seed,
            "convergence_delta": self.convergence_delta,
            "max_insights": self.max_insights,
            "parallelism": self.parallelism,
            "agents": [
                {
                    "agent_id": a.agent_id,
                    "task_ids": list(a.task_ids),
                    "reasoning_strategy": a.reasoning_strategy.value,
                    "backend_model": a.backend.model_name,
                }
                for a in self.agents
            ],
            "server_backend_model": self.server_backend.model_name,
        }


@dataclass(frozen=True)
class FederationResult:
    records: tuple[RoundRecord, ...]
    library: InsightLibrary
    run_dir: str
    evaluation_note: str = EVALUATION_NOTE

    @property
    def rounds_completed(self) -> int:
        return len(self.records)


def check_stop(history: Sequence[RoundRecord], config: FederationConfig) -> bool:
    """True once the round budget is spent, or once the mean-accuracy gain
    between the last two rounds falls below the optional convergence delta."""

    if not history:
        raise ValueError("check_stop needs at least one round record")
    if len(history) >= config.rounds:
        return True
    if config.convergence_delta is not None and len(history) >= 2:
        improvement = history[-1].mean_accuracy - history[-2].mean_accuracy
        if improvement < config.convergence_delta:
            logger.info(
                "stopping: accuracy improvement %.4f below delta %.4f",
                improvement, config.convergence_delta,
            )
            return True
    return False


def _grade_outcomes(result: AgentRoundResult, tasks: Mapping[str, Problem]) -> dict[str, dict[str, Any]]:
    """Per-task grading details: correctness, loop counts, extraction."""
    rows: dict[str, dict[str, Any]] = {}
    for outcome in result.outcomes:
        problem = tasks[outcome.problem_id]
        correct = False
        failure = outcome.failure
        if outcome.solution is not None:
            try:
                correct = metrics.grade(problem, outcome.solution)
            except MissingGold as err:
                failure = f"MissingGold: {err}"
                logger.warning("%s", failure)
        row: dict[str, Any] = {
            "correct": correct,
            "externally_graded": metrics.is_externally_graded(problem),
            "loops": metrics.detect_loops(outcome.solution.text) if outcome.solution else 0,
            "failure": failure,
        }
        if problem.domain_kind is DomainKind.CODING and outcome.solution is not None:
            row["extracted_code"] = metrics.extract_code_block(outcome.solution.text)
        rows[outcome.problem_id] = row
    return rows


def _build_stats(
    result: AgentRoundResult, graded: Mapping[str, Mapping[str, Any]]
) -> AgentRoundStats:
    task_count = len(result.outcomes)
    correct = sum(1 for row in graded.values() if row["correct"])
    loops = sum(row["loops"] for row in graded.values())
    completion = result.completion_tokens
    failures = tuple(
        f"{pid}: {row['failure']}" for pid, row in graded.items() if row["failure"]
    )
    return AgentRoundStats(
        accuracy=correct / task_count if task_count else 0.0,
        task_count=task_count,
        correct_count=correct,
        completion_tokens=completion,
        mean_completion_tokens=completion / task_count if task_count else 0.0,
        prompt_tokens=result.prompt_tokens,
        loop_count=loops,
        mean_loops=loops / task_count if task_count else 0.0,
        trace_count=len(result.traces),
        externally_graded=sum(1 for row in graded.values() if row["externally_graded"]),
        failures=failures,
    )


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _write_jsonl(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def _persist_agent_round(
    round_dir: Path,
    result: AgentRoundResult,
    graded: Mapping[str, Mapping[str, Any]],
) -> None:
    agent_dir = round_dir / f"agent_{result.agent_id}"
    solution_rows = []
    reflection_rows = []
    for outcome in result.outcomes:
        row: dict[str, Any] = {"problem_id": outcome.problem_id}
        if outcome.solution is not None:
            row.update(
                text=outcome.solution.text,
                prompt_tokens=outcome.solution.usage.prompt_tokens,
                completion_tokens=outcome.solution.usage.completion_tokens,
                usage_source=outcome.solution.usage.source.value,
            )
        row.update(graded[outcome.problem_id])
        solution_rows.append(row)
        if outcome.reflection is not None:
            reflection_rows.append(
                {"problem_id": outcome.problem_id, "text": outcome.reflection.text}
            )
    _write_jsonl(agent_dir / "solutions.jsonl", solution_rows)
    if result.participated:
        _write_jsonl(agent_dir / "reflections.jsonl", reflection_rows)
        _write_json(
            agent_dir / "traces.json",
            {
                "agent_id": result.agent_id,
                "round": result.round_no,
                "traces": result.traces.to_dicts(),
            },
        )


def _persist_round(
    round_dir: Path,
    record: RoundRecord,
    library: InsightLibrary,
    profile: TraceProfile,
    indexed: IndexedTraceSet,
) -> None:
    _write_json(round_dir / "indexed_traces.json", indexed.to_dict())
    _write_json(round_dir / "profile.json", profile.to_dict())
    _write_json(round_dir / f"library_v{library.version}.json", library.to_dict())
    rendered = render_library(library)
    (round_dir / "insight.md").write_text(
        rendered + "\n" if rendered else "", encoding="utf-8"
    )
    _write_json(round_dir / "record.json", record.to_dict())


def run_federation(
    config: FederationConfig,
    backends: Mapping[str, ChatBackend] | None = None,
) -> FederationResult:
    """Run the full federation loop and persist every round's artifacts.

    ``backends`` optionally maps agent ids (plus the key ``"server"``) to
    live backend instances; anything missing is instantiated from its spec.
    Instances persist across rounds so stateful mocks consume their scripts
    in order.

    An unrecoverable transport failure on the server path ends the run
    gracefully: artifacts from complete rounds stay on disk and the result
    covers the rounds that finished.
    """

    run_dir = Path(config.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", config.to_dict())
    _write_json(
        run_dir / "problems.json",
        {pid: p.to_dict() for pid, p in sorted(config.tasks.items())},
    )

    backends = dict(backends or {})
    agent_backends: dict[str, ChatBackend] = {}
    for agent in config.agents:
        agent_backends[agent.agent_id] = backends.get(agent.agent_id) or create_backend(agent.backend)
    server_backend = backends.get("server") or create_backend(config.server_backend)

    library = InsightLibrary.empty()
    records: list[RoundRecord] = []

    for round_no in range(1, config.rounds + 1):
        round_start = time.monotonic()
        participants = select_participants(
            config.participation, config.agents, round_no, config.seed
        )
        participant_set = set(participants)
        broadcast = library

        def one_agent(agent: AgentConfig) -> AgentRoundResult:
            tasks = config.agent_tasks(agent)
            backend = agent_backends[agent.agent_id]
            if agent.agent_id in participant_set:
                return run_local_round(
                    agent, tasks, broadcast, round_no=round_no, backend=backend
                )
            return evaluate_round(
                agent, tasks, broadcast, round_no=round_no, backend=backend
            )

        if config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                results = list(pool.map(one_agent, config.agents))
        else:
            results = [one_agent(agent) for agent in config.agents]
        # Hard barrier: all agent work for the round is done before any
        # aggregation below.

        graded = {
            res.agent_id: _grade_outcomes(res, config.tasks) for res in results
        }
        uploads = [res.traces for res in results if res.participated]
        round_dir = run_dir / f"round_{round_no}"
        for res in results:
            _persist_agent_round(round_dir, res, graded[res.agent_id])

        try:
            library, profile, indexed = aggregate_round(
                broadcast, uploads, server_backend, config.max_insights
            )
        except TransportError as err:
            logger.error(
                "server aggregation failed in round %d; ending run: %s", round_no, err
            )
            break

        per_agent = {
            res.agent_id: _build_stats(res, graded[res.agent_id]) for res in results
        }
        record = RoundRecord(
            round=round_no,
            participants=tuple(participants),
            per_agent=per_agent,
            library_version=library.version,
            wall_time=time.monotonic() - round_start,
        )
        _persist_round(round_dir, record, library, profile, indexed)
        records.append(record)

        if check_stop(records, config):
            break

    result = FederationResult(
        records=tuple(records), library=library, run_dir=str(run_dir)
    )
    _write_json(
        run_dir / "result.json",
        {
            "rounds_completed": result.rounds_completed,
            "final_library_version": library.version,
            "evaluation_note": EVALUATION_NOTE,
            "per_round": [
                {
                    "round": r.round,
                    "participants": list(r.participants),
                    "library_version": r.library_version,
                    "mean_accuracy": r.mean_accuracy,
                }
                for r in records
            ],
        },
    )
    return result
