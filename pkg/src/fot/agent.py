"""Client-side pipeline: solve with the broadcast library, reflect, and
extract reasoning traces for upload.

Per task the stages run strictly in order solve -> reflect -> extract; a
failed stage stops that task's pipeline without touching the agent's other
tasks. Only traces leave the agent; solutions and reflections stay local.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

from . import prompts
from .domain import (
    InsightLibrary,
    Problem,
    ReasoningTrace,
    Reflection,
    Solution,
    TraceSet,
    extract_json_object,
    parse_flat_entries,
    render_library,
    TRACE_PREFIX,
)
from .errors import EmptyResponse, FotError, NoJsonFound, TransportError
from .transport import BackendSpec, ChatBackend, ChatExchange, Stage, create_backend

logger = logging.getLogger(__name__)


class ReasoningStrategy(str, Enum):
    """Local reasoning strategy. Extension point: only the native pipeline
    ships; alternative self-improvement strategies would plug in here."""

    NATIVE = "native"


@dataclass(frozen=True)
class AgentConfig:
    agent_id: str
    backend: BackendSpec
    task_ids: tuple[str, ...]
    reasoning_strategy: ReasoningStrategy = ReasoningStrategy.NATIVE

    def __post_init__(self) -> None:
        if not self.agent_id:
            raise ValueError("agent_id must be non-empty")
        if not self.task_ids:
            raise ValueError(f"agent {self.agent_id!r}: task_ids must be non-empty")


@dataclass(frozen=True)
class TaskOutcome:
    """Everything one task produced locally, plus its chat exchanges."""

    problem_id: str
    solution: Solution | None = None
    reflection: Reflection | None = None
    traces: TraceSet = field(default_factory=TraceSet)
    failure: str | None = None
    exchanges: tuple[ChatExchange, ...] = ()


@dataclass(frozen=True)
class AgentRoundResult:
    """One agent's complete output for one round."""

    agent_id: str
    round_no: int
    participated: bool
    outcomes: tuple[TaskOutcome, ...]
    traces: TraceSet

    @property
    def solutions(self) -> tuple[Solution, ...]:
        return tuple(o.solution for o in self.outcomes if o.solution is not None)

    @property
    def exchanges(self) -> tuple[ChatExchange, ...]:
        return tuple(ex for o in self.outcomes for ex in o.exchanges)

    @property
    def prompt_tokens(self) -> int:
        return sum(ex.usage.prompt_tokens for ex in self.exchanges)

    @property
    def completion_tokens(self) -> int:
        return sum(ex.usage.completion_tokens for ex in self.exchanges)


def render_solution_prompt(problem: Problem, library: InsightLibrary) -> str:
    """Build the solve prompt for one problem under the current library.

    With an empty library the prompt is exactly ``Problem: {statement}``,
    which makes round 1 the isolated-agents baseline by construction.
    """

    if not library:
        return prompts.fill(prompts.BARE_PROBLEM_PROMPT, problem=problem.statement)
    return prompts.fill(
        prompts.SOLUTION_PROMPT,
        library=render_library(library),
        problem=problem.statement,
    )


def _checked_response(exchange: ChatExchange) -> str:
    if not exchange.response.strip():
        raise EmptyResponse(f"stage {exchange.stage.value} returned only whitespace")
    return exchange.response


def solve(
    problem: Problem,
    library: InsightLibrary,
    backend: ChatBackend,
    log: list[ChatExchange] | None = None,
) -> Solution:
    """Generate a solution for one problem with the current library."""
    exchange = backend.complete(Stage.SOLVE, render_solution_prompt(problem, library))
    if log is not None:
        log.append(exchange)
    return Solution(problem_id=problem.id, text=_checked_response(exchange), usage=exchange.usage)


def reflect(
    problem: Problem,
    solution: Solution,
    backend: ChatBackend,
    log: list[ChatExchange] | None = None,
) -> Reflection:
    """Reflect on a solution to surface its reusable procedural knowledge."""
    if not solution.text.strip():
        raise ValueError("cannot reflect on an empty solution")
    prompt = prompts.fill(
        prompts.REFLECTION_PROMPT, problem=problem.statement, solution=solution.text
    )
    exchange = backend.complete(Stage.REFLECT, prompt)
    if log is not None:
        log.append(exchange)
    return Reflection(problem_id=problem.id, text=_checked_response(exchange))


def extract_traces(
    problem: Problem,
    solution: Solution,
    reflection: Reflection,
    backend: ChatBackend,
    *,
    agent_id: str,
    round_no: int,
    log: list[ChatExchange] | None = None,
) -> TraceSet:
    """Extract uploadable reasoning traces from a solution and reflection.

    The model's JSON is parsed leniently: keys are repaired to the
    ``trace_`` prefix and nested values flattened, with every repair or
    drop logged. One retry with a JSON-only nudge is made before the stage
    raises NoJsonFound.
    """

    if not reflection.text.strip():
        raise ValueError("cannot extract traces from an empty reflection")
    prompt = prompts.fill(
        prompts.TRACE_EXTRACTION_PROMPT,
        problem=problem.statement,
        solution=solution.text,
        reflection=reflection.text,
    )
    obj = _json_with_retry(backend, Stage.EXTRACT, prompt, log)
    entries, _notes = parse_flat_entries(obj, TRACE_PREFIX)
    traces = tuple(
        ReasoningTrace(
            name=name,
            description=description,
            agent_id=agent_id,
            round=round_no,
            problem_id=problem.id,
        )
        for name, description in entries.items()
    )
    return TraceSet(traces)


def _json_with_retry(
    backend: ChatBackend,
    stage: Stage,
    prompt: str,
    log: list[ChatExchange] | None = None,
) -> dict:
    """One JSON-parse retry with an appended nudge, then give up."""
    exchange = backend.complete(stage, prompt)
    if log is not None:
        log.append(exchange)
    try:
        return extract_json_object(exchange.response)
    except NoJsonFound:
        logger.warning("stage %s: response had no JSON object; retrying once", stage.value)
    retry = backend.complete(stage, prompt + prompts.JSON_RETRY_NUDGE)
    if log is not None:
        log.append(retry)
    return extract_json_object(retry.response)


def run_local_round(
    agent: AgentConfig,
    tasks: list[Problem],
    library: InsightLibrary,
    *,
    round_no: int | None = None,
    backend: ChatBackend | None = None,
) -> AgentRoundResult:
    """Run the full per-round pipeline over an agent's tasks.

    The library must be the broadcast for this round (version r-1 for round
    r). Task failures are isolated: a task that fails any stage contributes
    no traces but never aborts the agent's round. Solutions and reflections
    stay in the result for local persistence; only ``result.traces`` is
    meant for upload.
    """

    if round_no is None:
        round_no = library.version + 1
    elif library.version != round_no - 1:
        raise ValueError(
            f"library version {library.version} does not match broadcast for round {round_no}"
        )
    if backend is None:
        backend = create_backend(agent.backend)

    outcomes: list[TaskOutcome] = []
    for problem in tasks:
        exchanges: list[ChatExchange] = []
        solution: Solution | None = None
        reflection: Reflection | None = None
        traces = TraceSet()
        failure: str | None = None
        try:
            solution = solve(problem, library, backend, log=exchanges)
            reflection = reflect(problem, solution, backend, log=exchanges)
            traces = extract_traces(
                problem,
                solution,
                reflection,
                backend,
                agent_id=agent.agent_id,
                round_no=round_no,
                log=exchanges,
            )
        except (TransportError, EmptyResponse, NoJsonFound, FotError) as err:
            failure = f"{type(err).__name__}: {err}"
            logger.warning(
                "agent %s task %s round %d failed: %s",
                agent.agent_id, problem.id, round_no, failure,
            )
        outcomes.append(
            TaskOutcome(
                problem_id=problem.id,
                solution=solution,
                reflection=reflection,
                traces=traces,
                failure=failure,
                exchanges=tuple(exchanges),
            )
        )

    merged = TraceSet(tuple(t for o in outcomes for t in o.traces))
    return AgentRoundResult(
        agent_id=agent.agent_id,
        round_no=round_no,
        participated=True,
        outcomes=tuple(outcomes),
        traces=merged,
    )


def evaluate_round(
    agent: AgentConfig,
    tasks: list[Problem],
    library: InsightLibrary,
    *,
    round_no: int | None = None,
    backend: ChatBackend | None = None,
) -> AgentRoundResult:
    """Solve-only pass for non-participating agents.

    They still receive the broadcast library and are evaluated with it,
    but produce no reflections and upload no traces.
    """

    if round_no is None:
        round_no = library.version + 1
    elif library.version != round_no - 1:
        raise ValueError(
            f"library version {library.version} does not match broadcast for round {round_no}"
        )
    if backend is None:
        backend = create_backend(agent.backend)

    outcomes: list[TaskOutcome] = []
    for problem in tasks:
        exchanges: list[ChatExchange] = []
        solution: Solution | None = None
        failure: str | None = None
        try:
            solution = solve(problem, library, backend, log=exchanges)
        except (TransportError, EmptyResponse, FotError) as err:
            failure = f"{type(err).__name__}: {err}"
            logger.warning(
                "agent %s task %s round %d evaluation failed: %s",
                agent.agent_id, problem.id, round_no, failure,
            )
        outcomes.append(
            TaskOutcome(
                problem_id=problem.id,
                solution=solution,
                failure=failure,
                exchanges=tuple(exchanges),
            )
        )
    return AgentRoundResult(
        agent_id=agent.agent_id,
        round_no=round_no,
        participated=False,
        outcomes=tuple(outcomes),
        traces=TraceSet(),
    )
