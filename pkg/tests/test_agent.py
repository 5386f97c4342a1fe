"""Agent pipeline: prompt rendering, solve/reflect/extract, local rounds."""

from __future__ import annotations

import dataclasses
import json

import pytest

from fot.agent import (
    AgentConfig,
    extract_traces,
    reflect,
    render_solution_prompt,
    run_local_round,
    solve,
)
from fot.domain import DomainKind, InsightLibrary, Problem, ReasoningTrace
from fot.errors import EmptyResponse, NoJsonFound
from fot.harness import assemble_statement
from fot.transport import Stage

from conftest import any_entry, json_reply, make_mock, make_problem, mock_spec


class TestRenderSolutionPrompt:
    def test_empty_library_is_bare_problem(self):
        problem = make_problem(statement="S")
        assert render_solution_prompt(problem, InsightLibrary.empty()) == "Problem: S"

    def test_nonempty_library_has_header_and_insight_line(self):
        problem = make_problem()
        library = InsightLibrary(version=1, entries={"insight_a": "use symmetry"})
        prompt = render_solution_prompt(problem, library)
        assert "Available Insights to Guide Your Solution:" in prompt
        assert "[Insight] insight_a: use symmetry" in prompt
        assert prompt.endswith(f"Problem: {problem.statement}")

    def test_math_statement_ends_with_boxed_instruction(self):
        statement = assemble_statement(DomainKind.MATH, "What is 2+2?")
        problem = make_problem(statement=statement)
        library = InsightLibrary(version=1, entries={"insight_a": "x"})
        for lib in (InsightLibrary.empty(), library):
            prompt = render_solution_prompt(problem, lib)
            assert prompt.endswith('Wrap your final answer in "\\boxed{}".')


class TestSolve:
    def test_scripted_passthrough(self):
        backend = make_mock([any_entry(Stage.SOLVE, "Sum it up.\n\\boxed{4}")])
        solution = solve(make_problem(), InsightLibrary.empty(), backend)
        assert "\\boxed{4}" in solution.text

    def test_cap_enforced(self):
        backend = make_mock([any_entry(Stage.SOLVE, "words " * 50000)])
        solution = solve(make_problem(), InsightLibrary.empty(), backend)
        assert solution.usage.completion_tokens <= 32768

    def test_whitespace_only_is_empty_response(self):
        backend = make_mock([any_entry(Stage.SOLVE, "  \n\t ")])
        with pytest.raises(EmptyResponse):
            solve(make_problem(), InsightLibrary.empty(), backend)


class TestReflect:
    def test_scripted_passthrough(self):
        backend = make_mock([
            any_entry(Stage.SOLVE, "\\boxed{4}"),
            any_entry(Stage.REFLECT, "R"),
        ])
        problem = make_problem()
        solution = solve(problem, InsightLibrary.empty(), backend)
        reflection = reflect(problem, solution, backend)
        assert reflection.text == "R"

    def test_prompt_contains_problem_and_solution(self):
        backend = make_mock([any_entry(Stage.REFLECT, "R")])
        problem = make_problem(statement="a very specific statement")
        from fot.domain import Solution, UsageStats

        solution = Solution(problem_id="p1", text="a very specific solution", usage=UsageStats(1, 1))
        reflect(problem, solution, backend)
        _stage, prompt = backend.calls[0]
        assert "a very specific statement" in prompt
        assert "a very specific solution" in prompt

    def test_cap_enforced(self):
        backend = make_mock([any_entry(Stage.REFLECT, "R", completion_tokens=16384)])
        from fot.domain import Solution, UsageStats

        solution = Solution(problem_id="p1", text="t", usage=UsageStats(1, 1))
        reflection_exchanges = []
        reflect(make_problem(), solution, backend, log=reflection_exchanges)
        assert reflection_exchanges[0].usage.completion_tokens <= 16384


def _pipeline_mock(extract_response: str, extra_extract: str | None = None):
    entries = [
        any_entry(Stage.SOLVE, "\\boxed{4}"),
        any_entry(Stage.REFLECT, "use addition"),
        any_entry(Stage.EXTRACT, extract_response),
    ]
    if extra_extract is not None:
        entries.append(any_entry(Stage.EXTRACT, extra_extract))
    return make_mock(entries)


def _run_extract(backend, problem=None):
    problem = problem or make_problem()
    solution = solve(problem, InsightLibrary.empty(), backend)
    reflection = reflect(problem, solution, backend)
    return extract_traces(
        problem, solution, reflection, backend, agent_id="a1", round_no=1
    )


class TestExtractTraces:
    def test_direct_parse(self):
        backend = _pipeline_mock(json_reply({"trace_sum": "use telescoping"}))
        traces = _run_extract(backend)
        assert len(traces) == 1
        assert traces.traces[0].name == "trace_sum"
        assert traces.traces[0].agent_id == "a1"
        assert traces.traces[0].round == 1
        assert traces.traces[0].problem_id == "p1"

    def test_prefix_repaired(self):
        backend = _pipeline_mock(json_reply({"polynomialFactoring": "factor it"}))
        traces = _run_extract(backend)
        assert traces.traces[0].name == "trace_polynomialFactoring"

    def test_non_json_twice_raises(self):
        backend = _pipeline_mock("not json", extra_extract="still not json")
        with pytest.raises(NoJsonFound):
            _run_extract(backend)

    def test_retry_appends_nudge_and_recovers(self):
        backend = _pipeline_mock("garbage", extra_extract=json_reply({"trace_a": "d"}))
        traces = _run_extract(backend)
        assert len(traces) == 1
        extract_prompts = [p for s, p in backend.calls if s is Stage.EXTRACT]
        assert len(extract_prompts) == 2
        assert extract_prompts[1].endswith("Output valid JSON only.")


def _agent(task_ids=("p1", "p2")) -> AgentConfig:
    return AgentConfig(agent_id="a1", backend=mock_spec(), task_ids=tuple(task_ids))


def _two_task_mock():
    return make_mock([
        any_entry(Stage.SOLVE, "\\boxed{4}"),
        any_entry(Stage.REFLECT, "reuse addition"),
        any_entry(Stage.EXTRACT, json_reply({"trace_add": "add carefully"})),
        any_entry(Stage.SOLVE, "\\boxed{9}"),
        any_entry(Stage.REFLECT, "reuse multiplication"),
        any_entry(Stage.EXTRACT, json_reply({"trace_mul": "multiply carefully"})),
    ])


class TestRunLocalRound:
    def test_two_tasks_end_to_end(self):
        tasks = [make_problem("p1"), make_problem("p2", statement="What is 3*3?", gold="9")]
        backend = _two_task_mock()
        result = run_local_round(_agent(), tasks, InsightLibrary.empty(), backend=backend)
        assert len(result.outcomes) == 2
        assert all(o.solution is not None for o in result.outcomes)
        assert {t.name for t in result.traces} == {"trace_add", "trace_mul"}
        # Usage totals equal the sum over the round's chat exchanges.
        assert result.completion_tokens == sum(
            ex.usage.completion_tokens for ex in result.exchanges
        )
        assert result.prompt_tokens == sum(
            ex.usage.prompt_tokens for ex in result.exchanges
        )

    def test_round_one_prompts_are_bare(self):
        tasks = [make_problem("p1", statement="S1"), make_problem("p2", statement="S2")]
        backend = _two_task_mock()
        run_local_round(_agent(), tasks, InsightLibrary.empty(), backend=backend)
        solve_prompts = [p for s, p in backend.calls if s is Stage.SOLVE]
        assert solve_prompts == ["Problem: S1", "Problem: S2"]

    def test_stage_order_fixed_per_task(self):
        tasks = [make_problem("p1")]
        backend = make_mock([
            any_entry(Stage.SOLVE, "\\boxed{4}"),
            any_entry(Stage.REFLECT, "r"),
            any_entry(Stage.EXTRACT, json_reply({"trace_a": "d"})),
        ])
        run_local_round(_agent(("p1",)), tasks, InsightLibrary.empty(), backend=backend)
        assert [s for s, _ in backend.calls] == [Stage.SOLVE, Stage.REFLECT, Stage.EXTRACT]

    def test_task_failure_is_isolated_and_later_stages_skipped(self):
        tasks = [make_problem("p1"), make_problem("p2")]
        backend = make_mock([
            any_entry(Stage.SOLVE, "   "),  # first task dies at solve
            any_entry(Stage.SOLVE, "\\boxed{4}"),
            any_entry(Stage.REFLECT, "r"),
            any_entry(Stage.EXTRACT, json_reply({"trace_b": "d"})),
        ])
        result = run_local_round(_agent(), tasks, InsightLibrary.empty(), backend=backend)
        first, second = result.outcomes
        assert first.failure is not None and "EmptyResponse" in first.failure
        assert len(first.traces) == 0
        assert second.failure is None
        # No reflect/extract call ever happened for the failed task.
        stages = [s for s, _ in backend.calls]
        assert stages == [Stage.SOLVE, Stage.SOLVE, Stage.REFLECT, Stage.EXTRACT]

    def test_extraction_failure_contributes_zero_traces(self):
        tasks = [make_problem("p1")]
        backend = make_mock([
            any_entry(Stage.SOLVE, "\\boxed{4}"),
            any_entry(Stage.REFLECT, "r"),
            any_entry(Stage.EXTRACT, "nope"),
            any_entry(Stage.EXTRACT, "still nope"),
        ])
        result = run_local_round(_agent(("p1",)), tasks, InsightLibrary.empty(), backend=backend)
        assert len(result.traces) == 0
        assert result.outcomes[0].failure is not None

    def test_library_version_must_match_round(self):
        tasks = [make_problem("p1")]
        backend = _two_task_mock()
        with pytest.raises(ValueError):
            run_local_round(
                _agent(("p1",)), tasks, InsightLibrary.empty(), round_no=2, backend=backend
            )

    def test_upload_payload_has_no_raw_content_fields(self):
        # Structural data minimization: the uploaded trace type carries only
        # the trace itself and provenance metadata.
        field_names = {f.name for f in dataclasses.fields(ReasoningTrace)}
        assert field_names == {"name", "description", "agent_id", "round", "problem_id"}
        for forbidden in ("statement", "solution", "reflection", "text"):
            assert forbidden not in field_names

    def test_uploaded_payload_serialization_excludes_statements(self):
        tasks = [make_problem("p1", statement="SECRET STATEMENT")]
        backend = make_mock([
            any_entry(Stage.SOLVE, "\\boxed{4}"),
            any_entry(Stage.REFLECT, "r"),
            any_entry(Stage.EXTRACT, json_reply({"trace_a": "a generic technique"})),
        ])
        result = run_local_round(_agent(("p1",)), tasks, InsightLibrary.empty(), backend=backend)
        payload = json.dumps(result.traces.to_dicts())
        assert "SECRET STATEMENT" not in payload
