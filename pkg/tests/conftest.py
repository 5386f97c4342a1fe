"""Shared test helpers: deterministic backends and tiny federations."""

from __future__ import annotations

import json
import re
from typing import Callable

import pytest

from fot.domain import DomainKind, Problem
from fot.agent import AgentConfig
from fot.federation import FederationConfig, ParticipationPolicy
from fot.transport import (
    BackendKind,
    BackendSpec,
    ChatBackend,
    GenerationParams,
    ScriptedMockBackend,
    ScriptEntry,
    Stage,
)


def make_problem(
    pid: str = "p1",
    kind: DomainKind = DomainKind.MATH,
    statement: str = "What is 2+2?",
    gold: str | None = "4",
) -> Problem:
    return Problem(id=pid, domain_kind=kind, statement=statement, gold_answer=gold)


def mock_spec(model_name: str = "mock") -> BackendSpec:
    return BackendSpec(kind=BackendKind.SCRIPTED_MOCK, model_name=model_name)


def make_mock(entries: list[ScriptEntry], model_name: str = "mock") -> ScriptedMockBackend:
    return ScriptedMockBackend(mock_spec(model_name), entries)


def any_entry(stage: Stage, response: str, completion_tokens: int | None = None) -> ScriptEntry:
    return ScriptEntry(stage=stage, match="any", response=response,
                       completion_tokens=completion_tokens)


def json_reply(obj: dict) -> str:
    return json.dumps(obj)


class RuleBackend(ChatBackend):
    """Backend driven by a (stage, prompt) -> response function.

    Keeps a call log so tests can inspect exactly what each stage saw.
    """

    def __init__(
        self,
        rule: Callable[[Stage, str], str],
        model_name: str = "rule-mock",
    ) -> None:
        super().__init__(BackendSpec(kind=BackendKind.SCRIPTED_MOCK, model_name=model_name))
        self.rule = rule
        self.calls: list[tuple[Stage, str]] = []

    def _respond(self, stage: Stage, prompt: str, params: GenerationParams):
        self.calls.append((stage, prompt))
        out = self.rule(stage, prompt)
        if isinstance(out, tuple):
            return out
        return out, None

    def prompts_for(self, stage: Stage) -> list[str]:
        return [p for s, p in self.calls if s is stage]


_TASK_MARK_RE = re.compile(r"TASK<(\w+)>")


def marked_problem(pid: str, gold: str | None = None) -> Problem:
    """Problem whose statement carries a machine-findable task marker."""
    return Problem(
        id=pid,
        domain_kind=DomainKind.MATH,
        statement=f"TASK<{pid}> compute the magic number.",
        gold_answer=gold if gold is not None else f"ans_{pid}",
    )


def magic_phrase(pid: str) -> str:
    return f"apply the recorded shortcut for TASK<{pid}> directly"


def standard_agent_rule(golds: dict[str, str]) -> Callable[[Stage, str], str]:
    """Deterministic agent behavior keyed off the task marker in the prompt.

    Prompts put the problem after any library text, so the task at hand is
    the last marker. An agent solves correctly only when the broadcast
    library already contains its task's magic phrase, making accuracy
    respond to what the server aggregated.
    """

    def rule(stage: Stage, prompt: str) -> str:
        markers = _TASK_MARK_RE.findall(prompt)
        pid = markers[-1] if markers else "unknown"
        if stage is Stage.SOLVE:
            if magic_phrase(pid) in prompt:
                return f"Using the shortcut from the insights.\n\\boxed{{{golds[pid]}}}"
            return "I will try a direct approach without shortcuts.\n\\boxed{0}"
        if stage is Stage.REFLECT:
            return f"The key reusable step was isolating the shortcut for TASK<{pid}>."
        if stage is Stage.EXTRACT:
            return json.dumps({f"trace_magic_{pid}": magic_phrase(pid)})
        raise AssertionError(f"agent backend saw unexpected stage {stage}")

    return rule


def standard_server_rule() -> Callable[[Stage, str], str]:
    """Deterministic server behavior: one insight per magic phrase seen.

    Scanning the whole prompt covers both the uploaded traces and the
    previous-library slot, so insights accumulate monotonically over rounds
    regardless of which agents participated.
    """

    def rule(stage: Stage, prompt: str) -> str:
        if stage is Stage.PROFILE:
            return json.dumps({"clusters": [], "relationships": []})
        if stage is Stage.BUILD_LIBRARY:
            pids = sorted(set(_TASK_MARK_RE.findall(prompt)))
            entries = {f"insight_magic_{pid}": magic_phrase(pid) for pid in pids}
            return json.dumps(entries)
        raise AssertionError(f"server backend saw unexpected stage {stage}")

    return rule


def build_marked_federation(
    run_dir: str,
    agent_ids: list[str],
    *,
    tasks_per_agent: int = 1,
    rounds: int = 2,
    participation: ParticipationPolicy | None = None,
    seed: int = 0,
) -> tuple[FederationConfig, dict[str, ChatBackend]]:
    """A federation of marker-driven agents plus matching rule backends."""

    tasks: dict[str, Problem] = {}
    agents = []
    golds: dict[str, str] = {}
    for aid in agent_ids:
        task_ids = []
        for t in range(tasks_per_agent):
            pid = f"{aid}_t{t}"
            tasks[pid] = marked_problem(pid)
            golds[pid] = tasks[pid].gold_answer
            task_ids.append(pid)
        agents.append(AgentConfig(agent_id=aid, backend=mock_spec(), task_ids=tuple(task_ids)))
    config = FederationConfig(
        agents=tuple(agents),
        server_backend=mock_spec("mock-server"),
        rounds=rounds,
        participation=participation or ParticipationPolicy.all(),
        seed=seed,
        run_dir=run_dir,
        tasks=tasks,
    )
    backends: dict[str, ChatBackend] = {
        aid: RuleBackend(standard_agent_rule(golds)) for aid in agent_ids
    }
    backends["server"] = RuleBackend(standard_server_rule(), model_name="rule-server")
    return config, backends


@pytest.fixture
def simple_problem() -> Problem:
    return make_problem()
